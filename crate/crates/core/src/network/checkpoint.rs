//! Self-describing checkpoint archive:
//!
//! ```text
//! b"MDBACKPT" | u32 version | u64 header length | header JSON | f32 LE payload
//! ```
//!
//! The header carries the network configuration, training step and the
//! name/shape of every parameter tensor in payload order.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::{Network, NetworkConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"MDBACKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    config: NetworkConfig,
    step: usize,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub network: Network,
    pub step: usize,
}

pub fn save_checkpoint(net: &Network, step: usize, path: &Path) -> Result<()> {
    let header = Header {
        config: net.config().clone(),
        step,
        tensors: net
            .params
            .names
            .iter()
            .zip(&net.params.tensors)
            .map(|(n, t)| TensorEntry {
                name: n.clone(),
                shape: t.shape.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(20 + json.len() + 4 * net.parameter_count());
    buf.extend_from_slice(MAGIC);
    buf.write_u32::<LittleEndian>(VERSION).expect("vec write");
    buf.write_u64::<LittleEndian>(json.len() as u64).expect("vec write");
    buf.extend_from_slice(&json);
    for t in &net.params.tensors {
        for &v in &t.data {
            buf.write_f32::<LittleEndian>(v).expect("vec write");
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint; when `expected` is given, a different stored
/// configuration is an error.
pub fn load_checkpoint(path: &Path, expected: Option<&NetworkConfig>) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
    let mut r = Cursor::new(bytes.as_slice());
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| corrupt("truncated"))?;
    if &magic != MAGIC {
        return Err(corrupt("not a checkpoint file"));
    }
    let version = r.read_u32::<LittleEndian>().map_err(|_| corrupt("truncated"))?;
    if version != VERSION {
        return Err(corrupt(&format!("unsupported version {version}")));
    }
    let len = r.read_u64::<LittleEndian>().map_err(|_| corrupt("truncated"))? as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(|_| corrupt("truncated header"))?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| corrupt(&format!("bad header: {e}")))?;
    if let Some(exp) = expected {
        if *exp != header.config {
            return Err(Error::Checkpoint(format!(
                "{}: stored network config {:?} does not match requested {:?}",
                path.display(),
                header.config,
                exp
            )));
        }
    }
    let mut network = Network::new(header.config.clone(), 0)?;
    if network.params.len() != header.tensors.len() {
        return Err(corrupt("tensor count does not match the configuration"));
    }
    for (i, entry) in header.tensors.iter().enumerate() {
        let slot = &mut network.params.tensors[i];
        if network.params.names[i] != entry.name || slot.shape != entry.shape {
            return Err(corrupt(&format!("tensor {} ({:?}) does not fit the configuration", entry.name, entry.shape)));
        }
        let mut data = vec![0f32; slot.numel()];
        r.read_f32_into::<LittleEndian>(&mut data).map_err(|_| corrupt("truncated payload"))?;
        *slot = Tensor::from_vec(&entry.shape, data);
    }
    if (r.position() as usize) != bytes.len() {
        return Err(corrupt("trailing bytes after payload"));
    }
    Ok(Checkpoint {
        network,
        step: header.step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::FusionMode;

    #[test]
    fn round_trip_and_config_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("net.ckpt");
        let net = Network::new(NetworkConfig::desk(), 5).unwrap();
        save_checkpoint(&net, 17, &p).unwrap();
        let back = load_checkpoint(&p, Some(&NetworkConfig::desk())).unwrap();
        assert_eq!(back.step, 17);
        assert_eq!(back.network.params, net.params);
        let other = NetworkConfig::desk().with_fusion(FusionMode::Multiply);
        assert!(matches!(load_checkpoint(&p, Some(&other)), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn truncated_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("net.ckpt");
        let net = Network::new(NetworkConfig::desk().mdnet(), 1).unwrap();
        save_checkpoint(&net, 0, &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(load_checkpoint(&p, None).is_err());
        fs::write(&p, b"garbage").unwrap();
        assert!(load_checkpoint(&p, None).is_err());
    }
}
