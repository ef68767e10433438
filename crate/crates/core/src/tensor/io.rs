//! CSV text I/O for rank-2 Float32 tensors: comma-separated, one row per
//! line, no header.

use std::io::{Read, Write};

use thiserror::Error;

use super::{DType, Tensor};

#[derive(Debug, Error)]
pub enum CsvError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Reads a CSV matrix. `cols` fixes the expected width; it is also the width
/// given to an empty file.
pub fn read_csv<R: Read>(reader: R, cols: Option<usize>) -> Result<Tensor, CsvError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).trim(csv::Trim::All).from_reader(reader);
    let mut width = cols;
    let mut values = Vec::new();
    let mut rows = 0;
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 1;
        let rec = rec.map_err(|e| CsvError::Parse { line, msg: e.to_string() })?;
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        match width {
            Some(w) if w != rec.len() => {
                return Err(CsvError::Parse { line, msg: format!("expected {w} columns, found {}", rec.len()) })
            }
            None => width = Some(rec.len()),
            _ => {}
        }
        for field in rec.iter() {
            let v: f32 =
                field.parse().map_err(|_| CsvError::Parse { line, msg: format!("not a number: `{field}`") })?;
            values.push(v);
        }
        rows += 1;
    }
    let cols = width.unwrap_or(0);
    Tensor::from_f32(&[rows, cols], values).map_err(|e| CsvError::Parse { line: 0, msg: e.to_string() })
}

/// Writes a rank-2 tensor as CSV. Values are widened to f32 and printed in
/// shortest round-trip form.
pub fn write_csv<W: Write>(mut w: W, t: &Tensor) -> Result<(), CsvError> {
    let (rows, cols) = match t.shape() {
        [r, c] => (*r, *c),
        [r] => (*r, 1),
        s => return Err(CsvError::Parse { line: 0, msg: format!("cannot write shape {s:?} as CSV") }),
    };
    let v =
        if t.dtype() == DType::Float32 { t.to_f32_vec() } else { t.to_f64_vec().iter().map(|&x| x as f32).collect() };
    let mut line = String::new();
    for r in 0..rows {
        line.clear();
        for c in 0..cols {
            if c > 0 {
                line.push(',');
            }
            line.push_str(&v[r * cols + c].to_string());
        }
        line.push('\n');
        w.write_all(line.as_bytes())?;
    }
    Ok(())
}
