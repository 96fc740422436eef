//! One-record-per-line JSON streams.
//!
//! Floats are written in shortest round-trip form, so a value read back is
//! bit-identical to the value written.

use std::io::{BufRead, Write};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

/// Reads every non-blank line as one record. Errors carry the 1-based line number.
pub fn read_records<T: DeserializeOwned, R: BufRead>(reader: R) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (index, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record =
            serde_json::from_str(&line).map_err(|e| Error::Parse { line: index + 1, message: e.to_string() })?;
        out.push(record);
    }
    Ok(out)
}

pub fn write_records<'a, T, W, I>(mut writer: W, records: I) -> Result<()>
where
    T: Serialize + 'a,
    W: Write,
    I: IntoIterator<Item = &'a T>,
{
    for r in records {
        serde_json::to_writer(&mut writer, r).map_err(std::io::Error::other)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}
