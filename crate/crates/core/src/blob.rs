//! Self-describing binary blobs: a JSON header followed by a raw payload.
//!
//! ```text
//! magic "TKRB" | u32 LE header length | header JSON | payload bytes
//! ```
//!
//! The header envelope records the blob kind, payload length and a SHA-256
//! of the payload, which is verified on read.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"TKRB";

#[derive(Serialize, Deserialize)]
struct Envelope<H> {
    kind: String,
    payload_len: u64,
    sha256: String,
    header: H,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn encode<H: Serialize>(kind: &str, header: &H, payload: &[u8]) -> Result<Vec<u8>> {
    let env = Envelope {
        kind: kind.to_string(),
        payload_len: payload.len() as u64,
        sha256: sha256_hex(payload),
        header,
    };
    let json = serde_json::to_vec(&env)?;
    let mut out = Vec::with_capacity(8 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(payload);
    Ok(out)
}

pub fn decode<H: DeserializeOwned>(kind: &str, bytes: &[u8]) -> Result<(H, Vec<u8>)> {
    if bytes.len() < 8 || &bytes[0..4] != MAGIC {
        return Err(Error::UnsupportedFormat(format!("not a {kind} file")));
    }
    let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let json = bytes
        .get(8..8 + hlen)
        .ok_or_else(|| Error::Corruption(format!("{kind}: truncated header")))?;
    let env: Envelope<H> = serde_json::from_slice(json)
        .map_err(|e| Error::Corruption(format!("{kind}: bad header: {e}")))?;
    if env.kind != kind {
        return Err(Error::UnsupportedFormat(format!(
            "expected a {kind} file, found {}",
            env.kind
        )));
    }
    let payload = &bytes[8 + hlen..];
    if payload.len() as u64 != env.payload_len {
        return Err(Error::Corruption(format!(
            "{kind}: payload is {} bytes, header says {}",
            payload.len(),
            env.payload_len
        )));
    }
    if sha256_hex(payload) != env.sha256 {
        return Err(Error::Corruption(format!("{kind}: checksum mismatch")));
    }
    Ok((env.header, payload.to_vec()))
}

pub fn write<H: Serialize>(path: impl AsRef<Path>, kind: &str, header: &H, payload: &[u8]) -> Result<u64> {
    let bytes = encode(kind, header, payload)?;
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(bytes.len() as u64)
}

pub fn read<H: DeserializeOwned>(path: impl AsRef<Path>, kind: &str) -> Result<(H, Vec<u8>)> {
    let mut bytes = Vec::new();
    File::open(path.as_ref())?.read_to_end(&mut bytes)?;
    decode(kind, &bytes)
}

pub fn f32_bytes(xs: &[f32]) -> Vec<u8> {
    xs.iter().flat_map(|x| x.to_le_bytes()).collect()
}

pub fn bytes_f32(bytes: &[u8]) -> Result<Vec<f32>> {
    if bytes.len() % 4 != 0 {
        return Err(Error::Corruption("f32 payload length not a multiple of 4".into()));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}
