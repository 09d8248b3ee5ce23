//! Dataset files.
//!
//! `*.jsonl`: a header record `{"format":"moece-dataset","version":1}` then one
//! example per line. Edits are `[start, end, replacement, type]` tuples.
//!
//! `*.m2`: a `# moece-m2 <version>` header, then per sentence an `S` line with
//! the source, one `A start end|||TYPE|||replacement|||REQUIRED|||-NONE-|||0`
//! line per edit (`A -1 -1|||noop|||...` when there are none) and a blank line.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{detokenize, tokenize, Edit, ErrorType, Example};
use crate::error::{Error, Result};

pub const DATASET_VERSION: u32 = 1;
const FORMAT: &str = "moece-dataset";
const M2_HEADER: &str = "# moece-m2";

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    source: String,
    target: String,
    edits: Vec<Edit>,
    labels: Vec<ErrorType>,
    end_label: ErrorType,
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Path of the companion gold-edit file.
pub fn m2_path(path: &Path) -> PathBuf {
    path.with_extension("m2")
}

/// Writes `path` (JSON lines) and its `.m2` companion.
pub fn write_dataset(path: &Path, examples: &[Example]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer(
        &mut w,
        &Header {
            format: FORMAT.into(),
            version: DATASET_VERSION,
        },
    )?;
    writeln!(w)?;
    for ex in examples {
        let rec = Record {
            source: detokenize(&ex.source),
            target: detokenize(&ex.target),
            edits: ex.edits.clone(),
            labels: ex.labels.clone(),
            end_label: ex.end_label,
        };
        serde_json::to_writer(&mut w, &rec)?;
        writeln!(w)?;
    }
    w.flush()?;
    let pairs: Vec<(&[String], &[Edit])> = examples.iter().map(|e| (e.source.as_slice(), e.edits.as_slice())).collect();
    write_m2(&m2_path(path), &pairs)
}

pub fn read_dataset(path: &Path) -> Result<Vec<Example>> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if i == 0 {
            let h: Header = serde_json::from_str(&line).map_err(|e| parse_err(path, lineno, format!("bad header: {e}")))?;
            if h.format != FORMAT || h.version != DATASET_VERSION {
                return Err(parse_err(
                    path,
                    lineno,
                    format!("expected {FORMAT} version {DATASET_VERSION}, found {} version {}", h.format, h.version),
                ));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| parse_err(path, lineno, e.to_string()))?;
        let ex = Example {
            source: tokenize(&rec.source),
            target: tokenize(&rec.target),
            edits: rec.edits,
            labels: rec.labels,
            end_label: rec.end_label,
        };
        if ex.labels.len() != ex.target.len() {
            return Err(parse_err(
                path,
                lineno,
                format!("{} labels for {} target tokens", ex.labels.len(), ex.target.len()),
            ));
        }
        out.push(ex);
    }
    Ok(out)
}

pub fn write_m2(path: &Path, sentences: &[(&[String], &[Edit])]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "{M2_HEADER} {DATASET_VERSION}")?;
    for (source, edits) in sentences {
        writeln!(w, "S {}", detokenize(source))?;
        if edits.is_empty() {
            writeln!(w, "A -1 -1|||noop|||-NONE-|||REQUIRED|||-NONE-|||0")?;
        }
        for e in *edits {
            writeln!(w, "A {} {}|||{}|||{}|||REQUIRED|||-NONE-|||0", e.start, e.end, e.error_type, e.replacement)?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_m2(path: &Path) -> Result<Vec<(Vec<String>, Vec<Edit>)>> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut out: Vec<(Vec<String>, Vec<Edit>)> = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if i == 0 {
            let version = line
                .strip_prefix(M2_HEADER)
                .and_then(|v| v.trim().parse::<u32>().ok())
                .ok_or_else(|| parse_err(path, lineno, "missing m2 header"))?;
            if version != DATASET_VERSION {
                return Err(parse_err(path, lineno, format!("unsupported m2 version {version}")));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        if let Some(s) = line.strip_prefix("S ").or(if line == "S" { Some("") } else { None }) {
            out.push((tokenize(s), Vec::new()));
        } else if let Some(a) = line.strip_prefix("A ") {
            let cur = out.last_mut().ok_or_else(|| parse_err(path, lineno, "annotation before any sentence"))?;
            let fields: Vec<&str> = a.split("|||").collect();
            if fields.len() != 6 {
                return Err(parse_err(path, lineno, format!("expected 6 fields, found {}", fields.len())));
            }
            if fields[1] == "noop" {
                continue;
            }
            let span: Vec<&str> = fields[0].split(' ').collect();
            let num = |s: &str| s.parse::<usize>().map_err(|_| parse_err(path, lineno, format!("bad index `{s}`")));
            let [s, e] = span.as_slice() else {
                return Err(parse_err(path, lineno, "span must be two indices"));
            };
            let ty: ErrorType = fields[1].parse().map_err(|e: Error| parse_err(path, lineno, e.to_string()))?;
            cur.1.push(Edit::new(num(s)?, num(e)?, fields[2], ty));
        } else {
            return Err(parse_err(path, lineno, "expected an S or A line"));
        }
    }
    Ok(out)
}
