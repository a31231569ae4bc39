//! `client_id,label,f0..f{d-1}` CSV files, one client per file.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array2;

use crate::data::ClientData;
use crate::error::{FlError, Result};

fn header(dim: usize) -> String {
    let mut h = String::from("client_id,label");
    for j in 0..dim {
        h.push_str(&format!(",f{j}"));
    }
    h
}

/// Writes a dataset. Floats use the shortest representation that parses
/// back to the identical value.
pub fn write_csv<W: Write>(data: &ClientData, out: W) -> Result<()> {
    let mut out = BufWriter::new(out);
    writeln!(out, "{}", header(data.input_dim()))?;
    for (row, label) in data.x.rows().into_iter().zip(&data.y) {
        write!(out, "{},{}", data.client_id, label)?;
        for v in row {
            write!(out, ",{v:?}")?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

pub fn save_csv(data: &ClientData, path: impl AsRef<Path>) -> Result<()> {
    write_csv(data, File::create(path)?)
}

/// Loads a single-client CSV. The returned dataset has weight 1; callers
/// combining several files renormalize with [`super::normalize_weights`].
pub fn load_csv(path: impl AsRef<Path>) -> Result<ClientData> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path.as_ref())
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => FlError::Io(io),
            other => FlError::Parse { line: 0, msg: format!("{other:?}") },
        })?;

    let mut records = reader.records();
    let head = match records.next() {
        None => return Err(FlError::Parse { line: 1, msg: "missing header row".into() }),
        Some(r) => r.map_err(|e| FlError::Parse { line: 1, msg: e.to_string() })?,
    };
    if head.len() < 3 || &head[0] != "client_id" || &head[1] != "label" {
        return Err(FlError::Schema {
            line: 1,
            msg: "header must start with client_id,label followed by feature columns".into(),
        });
    }
    let dim = head.len() - 2;
    for j in 0..dim {
        if head[j + 2] != *format!("f{j}") {
            return Err(FlError::Schema { line: 1, msg: format!("feature column {j} must be named f{j}") });
        }
    }

    let mut client_id = None;
    let mut labels = Vec::new();
    let mut values = Vec::new();
    for record in records {
        let record = record.map_err(|e| FlError::Parse {
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        if record.len() != head.len() {
            return Err(FlError::Schema {
                line,
                msg: format!("expected {dim} features, found {}", record.len().saturating_sub(2)),
            });
        }
        let id: usize = record[0]
            .parse()
            .map_err(|_| FlError::Parse { line, msg: format!("bad client_id {:?}", &record[0]) })?;
        match client_id {
            None => client_id = Some(id),
            Some(prev) if prev != id => {
                return Err(FlError::Schema { line, msg: format!("file mixes client ids {prev} and {id}") })
            }
            _ => {}
        }
        labels.push(
            record[1]
                .parse::<usize>()
                .map_err(|_| FlError::Parse { line, msg: format!("bad label {:?}", &record[1]) })?,
        );
        for field in record.iter().skip(2) {
            let v: f64 = field
                .parse()
                .map_err(|_| FlError::Parse { line, msg: format!("bad feature value {field:?}") })?;
            if !v.is_finite() {
                return Err(FlError::Parse { line, msg: format!("non-finite feature value {field:?}") });
            }
            values.push(v);
        }
    }
    let Some(client_id) = client_id else {
        return Err(FlError::Parse { line: 1, msg: "no data rows".into() });
    };
    let x = Array2::from_shape_vec((labels.len(), dim), values).expect("row lengths checked");
    ClientData::new(client_id, x, labels, 1.0)
}
