//! Binary checkpoint format (all integers little-endian):
//!
//! ```text
//! "BREG"            4 bytes magic
//! version           u32
//! config_len        u32, then config_len bytes of UTF-8 JSON (NetworkConfig)
//! repeated until EOF:
//!   name_len        u32, then name_len bytes of UTF-8
//!   rank            u32
//!   extents         rank × u64
//!   values          product(extents) × f64
//! ```
//!
//! Records cover every stored tensor, batch-norm running statistics
//! included, so a round trip is bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use super::{Network, NetworkConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"BREG";

pub fn write_checkpoint<W: Write>(net: &Network, mut out: W) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let config = serde_json::to_string(net.config())
        .map_err(|e| Error::Checkpoint(format!("cannot encode config: {e}")))?;
    write_bytes(&mut out, config.as_bytes())?;
    for entry in net.params().entries() {
        write_bytes(&mut out, entry.name.as_bytes())?;
        let shape = entry.value.shape();
        out.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &extent in shape {
            out.write_all(&(extent as u64).to_le_bytes())?;
        }
        for v in entry.value.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn write_bytes<W: Write>(out: &mut W, bytes: &[u8]) -> Result<()> {
    let len = u32::try_from(bytes.len())
        .map_err(|_| Error::Checkpoint("string longer than u32::MAX bytes".into()))?;
    out.write_all(&len.to_le_bytes())?;
    out.write_all(bytes)?;
    Ok(())
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    input.read_exact(&mut buf).map_err(truncated)?;
    Ok(u32::from_le_bytes(buf))
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == ErrorKind::UnexpectedEof {
        Error::Checkpoint("unexpected end of file".into())
    } else {
        Error::Io(e)
    }
}

fn read_string<R: Read>(input: &mut R, len: u32) -> Result<String> {
    let mut buf = vec![0u8; len as usize];
    input.read_exact(&mut buf).map_err(truncated)?;
    String::from_utf8(buf).map_err(|_| Error::Checkpoint("string is not valid UTF-8".into()))
}

/// Reads a checkpoint, rebuilds the network from its config echo and
/// overwrites every stored tensor.
pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Network> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut input)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let len = read_u32(&mut input)?;
    let config: NetworkConfig = serde_json::from_str(&read_string(&mut input, len)?)
        .map_err(|e| Error::Checkpoint(format!("bad config echo: {e}")))?;
    let mut net = Network::build(&config)?;
    let expected = net.params().len();
    let mut seen = std::collections::HashSet::new();

    loop {
        let mut len_buf = [0u8; 4];
        match input.read(&mut len_buf[..1])? {
            0 => break,
            _ => input.read_exact(&mut len_buf[1..]).map_err(truncated)?,
        }
        let name = read_string(&mut input, u32::from_le_bytes(len_buf))?;
        let rank = read_u32(&mut input)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut buf = [0u8; 8];
            input.read_exact(&mut buf).map_err(truncated)?;
            shape.push(u64::from_le_bytes(buf) as usize);
        }
        let count: usize = shape.iter().product();
        let mut raw = vec![0u8; count * 8];
        input.read_exact(&mut raw).map_err(truncated)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        net.params_mut()
            .set(&name, Tensor::new(&shape, values)?)
            .map_err(|e| Error::Checkpoint(format!("record {name}: {e}")))?;
        if !seen.insert(name.clone()) {
            return Err(Error::Checkpoint(format!("duplicate record {name}")));
        }
    }
    if seen.len() != expected {
        return Err(Error::Checkpoint(format!(
            "expected {expected} tensors, found {}",
            seen.len()
        )));
    }
    Ok(net)
}

pub fn save_checkpoint(net: &Network, path: &Path) -> Result<()> {
    write_checkpoint(net, BufWriter::new(File::create(path)?))
}

pub fn load_checkpoint(path: &Path) -> Result<Network> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
