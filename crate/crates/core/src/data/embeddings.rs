//! CSV exchange format for precomputed features:
//! header `session,split,label,f0,…,f{d-1}`, `split` ∈ {`train`, `test`}.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::set::LabeledSet;
use super::stream::{Session, SessionStream};
use crate::error::{CilError, Result};
use crate::numerics::Tensor;

const FIXED: [&str; 3] = ["session", "split", "label"];

fn parse_err(line: u64, field: impl Into<String>, message: impl Into<String>) -> CilError {
    CilError::Parse {
        line,
        field: field.into(),
        message: message.into(),
    }
}

/// Writes every session's train rows then test rows, in stream order.
/// Values use the shortest representation that parses back to the same bits.
pub fn write_embeddings<W: Write>(stream: &SessionStream, out: W) -> Result<()> {
    let d = stream.dim();
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = FIXED.iter().map(|s| s.to_string()).collect();
    header.extend((0..d).map(|i| format!("f{i}")));
    let csv_err = |e: csv::Error| CilError::Contract(format!("csv write failed: {e}"));
    w.write_record(&header).map_err(csv_err)?;
    for (t, s) in stream.sessions.iter().enumerate() {
        for (split, set) in [("train", &s.train), ("test", &s.test)] {
            for i in 0..set.len() {
                let mut rec = vec![t.to_string(), split.to_string(), set.labels[i].to_string()];
                rec.extend(set.inputs.row(i).iter().map(|v| v.to_string()));
                w.write_record(&rec).map_err(csv_err)?;
            }
        }
    }
    w.flush().map_err(|e| CilError::Contract(format!("csv write failed: {e}")))?;
    Ok(())
}

pub fn export_embeddings(stream: &SessionStream, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| CilError::io(path, e))?;
    write_embeddings(stream, std::io::BufWriter::new(file))
}

#[derive(Default)]
struct Builder {
    classes: Vec<usize>,
    train: (Vec<f64>, Vec<usize>),
    test: (Vec<f64>, Vec<usize>),
}

/// Parses an embedding file into a stream. Sessions are ordered by their
/// `session` value; within a session classes keep first-appearance order
/// and rows keep file order.
pub fn read_embeddings<R: Read>(mut input: R) -> Result<SessionStream> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| parse_err(1, "header", format!("read failed: {e}")))?;
    // The reader's own line counter skips blank lines; count from the byte offset instead.
    let line_of = |p: Option<&csv::Position>| {
        p.map_or(0, |p| {
            let mut at = (p.byte() as usize).min(bytes.len());
            while at < bytes.len() && matches!(bytes[at], b'\n' | b'\r') {
                at += 1;
            }
            1 + bytes[..at].iter().filter(|&&b| b == b'\n').count() as u64
        })
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(bytes.as_slice());
    let mut records = rdr.records();
    let header = match records.next() {
        Some(r) => r.map_err(|e| parse_err(1, "header", e.to_string()))?,
        None => return Err(parse_err(1, "header", "file is empty")),
    };
    for (i, want) in FIXED.iter().enumerate() {
        if header.get(i) != Some(*want) {
            return Err(parse_err(1, *want, format!("expected column {i} to be `{want}`")));
        }
    }
    let d = header.len() - FIXED.len();
    if d == 0 {
        return Err(parse_err(1, "f0", "no feature columns"));
    }
    for i in 0..d {
        let got = header.get(FIXED.len() + i).unwrap_or_default();
        if got != format!("f{i}") {
            return Err(parse_err(1, got, format!("expected feature column `f{i}`")));
        }
    }

    let mut sessions: BTreeMap<usize, Builder> = BTreeMap::new();
    let mut owner: BTreeMap<usize, usize> = BTreeMap::new();
    for rec in records {
        let rec = rec.map_err(|e| {
            let line = line_of(e.position());
            parse_err(line, "record", e.to_string())
        })?;
        let line = line_of(rec.position());
        if rec.len() != header.len() {
            return Err(parse_err(line, "record", format!("expected {} fields, found {}", header.len(), rec.len())));
        }
        let int = |i: usize| -> Result<usize> {
            rec[i]
                .trim()
                .parse::<usize>()
                .map_err(|_| parse_err(line, FIXED[i], format!("`{}` is not a non-negative integer", &rec[i])))
        };
        let session = int(0)?;
        let label = int(2)?;
        let is_train = match rec[1].trim() {
            "train" => true,
            "test" => false,
            other => return Err(parse_err(line, "split", format!("`{other}` is neither train nor test"))),
        };
        if let Some(&prev) = owner.get(&label) {
            if prev != session {
                return Err(CilError::contract(format!(
                    "label {label} appears in sessions {prev} and {session} (line {line})"
                )));
            }
        }
        owner.insert(label, session);
        let b = sessions.entry(session).or_default();
        if !b.classes.contains(&label) {
            b.classes.push(label);
        }
        let target = if is_train { &mut b.train } else { &mut b.test };
        for i in 0..d {
            let raw = rec[FIXED.len() + i].trim();
            let v: f64 = raw
                .parse()
                .map_err(|_| parse_err(line, format!("f{i}"), format!("`{raw}` is not a number")))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("f{i}"), "value is not finite"));
            }
            target.0.push(v);
        }
        target.1.push(label);
    }
    if sessions.is_empty() {
        return Err(parse_err(2, "record", "no data rows"));
    }
    let set = |(x, y): (Vec<f64>, Vec<usize>)| -> Result<LabeledSet> { LabeledSet::new(Tensor::matrix(y.len(), d, x)?, y) };
    let out = sessions
        .into_values()
        .map(|b| {
            Ok(Session {
                classes: b.classes,
                train: set(b.train)?,
                test: set(b.test)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    SessionStream::new(out)
}

pub fn ingest_embeddings(path: &Path) -> Result<SessionStream> {
    let file = std::fs::File::open(path).map_err(|e| CilError::io(path, e))?;
    read_embeddings(std::io::BufReader::new(file))
}
