//! `SFFN1` checkpoint container.
//!
//! ```text
//! SFFN1
//! entries <N>
//! <name> f64 <rows> <cols>      (N lines)
//! end
//! <little-endian f64 data of every entry, row-major, in header order>
//! ```

use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const MAGIC: &str = "SFFN1";

/// Serializes every tensor of `store`, buffers included.
pub fn encode_checkpoint(store: &ParamStore) -> Vec<u8> {
    let mut out = format!("{MAGIC}\nentries {}\n", store.len());
    for (name, m) in store.named() {
        out.push_str(&format!("{name} f64 {} {}\n", m.rows(), m.cols()));
    }
    out.push_str("end\n");
    let mut bytes = out.into_bytes();
    for (_, m) in store.named() {
        for v in m.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    bytes
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Parses a checkpoint into `(name, matrix)` pairs in file order.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Matrix)>> {
    let mut pos = 0;
    let mut next_line = || -> Result<&str> {
        let rest = &bytes[pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("truncated header"))?;
        pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| bad("header is not UTF-8"))
    };
    if next_line()? != MAGIC {
        return Err(bad(format!("missing {MAGIC} magic")));
    }
    let count: usize = next_line()?
        .strip_prefix("entries ")
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| bad("malformed entry count"))?;
    let mut header = Vec::with_capacity(count);
    for _ in 0..count {
        let line = next_line()?;
        let parts: Vec<&str> = line.split(' ').collect();
        match parts.as_slice() {
            [name, "f64", r, c] => {
                let r: usize = r.parse().map_err(|_| bad(format!("bad rows in '{line}'")))?;
                let c: usize = c.parse().map_err(|_| bad(format!("bad cols in '{line}'")))?;
                header.push((name.to_string(), r, c));
            }
            _ => return Err(bad(format!("malformed entry '{line}'"))),
        }
    }
    if next_line()? != "end" {
        return Err(bad("missing end of header"));
    }
    let mut data = &bytes[pos..];
    let mut out = Vec::with_capacity(count);
    for (name, r, c) in header {
        let n = r * c;
        if data.len() < 8 * n {
            return Err(bad(format!("data for {name} truncated")));
        }
        let values = data[..8 * n]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        data = &data[8 * n..];
        out.push((name, Matrix::new(r, c, values)?));
    }
    if !data.is_empty() {
        return Err(bad(format!("{} trailing bytes", data.len())));
    }
    Ok(out)
}
