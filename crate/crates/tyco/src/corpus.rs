//! Corpus files: one utterance per line, four tab-separated fields
//! `id  lang  source  target`, tokens joined by single spaces.

use std::fs;
use std::io::Write;
use std::path::Path;

use tyco_core::synthdata::ParallelUtterance;

use crate::error::{Error, Result};

pub fn to_line(u: &ParallelUtterance) -> String {
    format!("{}\t{}\t{}\t{}", u.id, u.lang, u.source.join(" "), u.target.join(" "))
}

/// Writes `items` to a string in corpus format.
pub fn render(items: &[ParallelUtterance]) -> String {
    let mut out = String::new();
    for u in items {
        out.push_str(&to_line(u));
        out.push('\n');
    }
    out
}

pub fn parse(text: &str, origin: &str) -> Result<Vec<ParallelUtterance>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Format { file: origin.to_string(), line: i + 1, msg };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(err(format!("expected 4 tab-separated fields, found {}", fields.len())));
        }
        if fields[0].is_empty() || fields[1].is_empty() {
            return Err(err("empty id or language".into()));
        }
        let toks = |s: &str| s.split(' ').filter(|t| !t.is_empty()).map(str::to_string).collect::<Vec<_>>();
        out.push(ParallelUtterance { id: fields[0].to_string(), lang: fields[1].to_string(), source: toks(fields[2]), target: toks(fields[3]) });
    }
    Ok(out)
}

pub fn write(path: &Path, items: &[ParallelUtterance]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(Error::io(path))?;
    f.write_all(render(items).as_bytes()).map_err(Error::io(path))
}

pub fn read(path: &Path) -> Result<Vec<ParallelUtterance>> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    parse(&text, &path.display().to_string())
}
