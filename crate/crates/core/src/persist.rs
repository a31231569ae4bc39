//! Binary parameter files. Layout, all little-endian:
//!
//! ```text
//! magic        4 bytes  "FSPV"
//! fingerprint  u64      ModelSpec::fingerprint of the owning spec
//! client_id    u64
//! round        u64
//! len          u64      number of parameters
//! values       len * f64
//! ```

use std::fs;
use std::path::Path;

use crate::error::{FlError, Result};
use crate::model::{ModelSpec, ParamVector};

const MAGIC: &[u8; 4] = b"FSPV";
const HEADER_LEN: usize = 4 + 4 * 8;

#[derive(Clone, Debug, PartialEq)]
pub struct StoredParams {
    pub fingerprint: u64,
    pub client_id: usize,
    pub round: usize,
    pub params: ParamVector,
}

pub fn encode_params(spec: &ModelSpec, client_id: usize, round: usize, params: &ParamVector) -> Result<Vec<u8>> {
    params.check_spec(spec)?;
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&spec.fingerprint().to_le_bytes());
    out.extend_from_slice(&(client_id as u64).to_le_bytes());
    out.extend_from_slice(&(round as u64).to_le_bytes());
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for v in params.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn read_u64(bytes: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8-byte slice"))
}

pub fn decode_params(bytes: &[u8]) -> Result<StoredParams> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(FlError::Parse { line: 0, msg: "not a parameter file".into() });
    }
    let len = read_u64(bytes, 28) as usize;
    if bytes.len() != HEADER_LEN + 8 * len {
        return Err(FlError::Parse { line: 0, msg: format!("expected {len} parameters, file is truncated or padded") });
    }
    let values = bytes[HEADER_LEN..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Ok(StoredParams {
        fingerprint: read_u64(bytes, 4),
        client_id: read_u64(bytes, 12) as usize,
        round: read_u64(bytes, 20) as usize,
        params: ParamVector::new(values)?,
    })
}

pub fn save_params(
    path: impl AsRef<Path>,
    spec: &ModelSpec,
    client_id: usize,
    round: usize,
    params: &ParamVector,
) -> Result<()> {
    fs::write(path, encode_params(spec, client_id, round, params)?)?;
    Ok(())
}

/// Loads a parameter file and checks it belongs to `spec`.
pub fn load_params(path: impl AsRef<Path>, spec: &ModelSpec) -> Result<StoredParams> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => FlError::MissingArtifact(path.display().to_string()),
        _ => FlError::Io(e),
    })?;
    let stored = decode_params(&bytes)?;
    if stored.fingerprint != spec.fingerprint() {
        return Err(FlError::shape(format!("{} was written for a different model", path.display())));
    }
    stored.params.check_spec(spec)?;
    Ok(stored)
}
