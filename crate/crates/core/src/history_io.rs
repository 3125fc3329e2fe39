//! Plain-text history logs: one record per line, `source_index,Var=value,...`.
//! Blank lines and lines starting with `#` are skipped.

use std::io::{Read, Write};

use crate::error::{OmsError, Result};
use crate::model::{DataSourceSet, History, Observation, SourceIndex};

pub fn read_history<R: Read>(reader: R, sources: &DataSourceSet) -> Result<History> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut history = History::new(sources.len());
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = rec.position().map_or(i + 1, |p| p.line() as usize);
        let ingest = |message: String| OmsError::Ingest { row, message };
        let mut fields = rec.iter();
        let src: usize = match fields.next() {
            Some(f) if !f.is_empty() => f
                .parse()
                .map_err(|_| ingest(format!("source index `{f}` is not a nonnegative integer")))?,
            _ => continue,
        };
        let mut pairs = Vec::new();
        for f in fields {
            let (name, value) = f
                .split_once('=')
                .ok_or_else(|| ingest(format!("field `{f}` is not `Var=value`")))?;
            let value: f64 = value
                .trim()
                .parse()
                .map_err(|_| ingest(format!("value `{value}` for `{name}` is not a number")))?;
            pairs.push((name.trim(), value));
        }
        let obs = Observation::from_pairs(sources, SourceIndex(src), &pairs)
            .map_err(|e| ingest(e.to_string()))?;
        history.push(obs);
    }
    Ok(history)
}

pub fn write_history<W: Write>(mut writer: W, history: &History, sources: &DataSourceSet) -> Result<()> {
    let names = sources.variable_names();
    for obs in history.records() {
        write!(writer, "{}", obs.source().0)?;
        for (id, v) in obs.observed() {
            write!(writer, ",{}={v:?}", names[id])?;
        }
        writeln!(writer)?;
    }
    Ok(())
}
