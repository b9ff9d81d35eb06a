//! Binary checkpoint container.
//!
//! Layout: 8-byte magic `SSTKCKPT`, u32 LE header length, UTF-8 JSON header,
//! then every tensor's values as little-endian f64 in header order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelSnapshot, Params};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SSTKCKPT";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Model,
    History,
    Reference,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub byte_order: String,
    pub float_bits: u32,
    pub role: Role,
    pub version: u64,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

pub fn write_checkpoint<W: Write>(w: &mut W, model: &ModelSnapshot, role: Role) -> std::io::Result<()> {
    let tensors = model.params().tensors();
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        byte_order: "little".into(),
        float_bits: 64,
        role,
        version: model.version(),
        config: model.config().clone(),
        tensors: tensors
            .iter()
            .map(|(name, shape, _)| TensorEntry {
                name: name.clone(),
                shape: shape.clone(),
            })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header).map_err(std::io::Error::other)?;
    w.write_all(MAGIC)?;
    w.write_all(&(header_json.len() as u32).to_le_bytes())?;
    w.write_all(&header_json)?;
    let mut buf = Vec::new();
    for (_, _, data) in &tensors {
        buf.clear();
        buf.reserve(data.len() * 8);
        for v in data.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<(CheckpointHeader, ModelSnapshot)> {
    let fmt = |m: &str| Error::Format(format!("checkpoint: {m}"));
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| fmt("truncated magic"))?;
    if &magic != MAGIC {
        return Err(fmt("bad magic"));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len).map_err(|_| fmt("truncated header length"))?;
    let mut header_json = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut header_json).map_err(|_| fmt("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(&header_json).map_err(|e| fmt(&e.to_string()))?;
    if header.format_version != FORMAT_VERSION {
        return Err(fmt(&format!("unsupported format version {}", header.format_version)));
    }
    if header.byte_order != "little" || header.float_bits != 64 {
        return Err(fmt(&format!(
            "unsupported encoding {} / {} bits",
            header.byte_order, header.float_bits
        )));
    }
    header.config.validate()?;
    let expected = Params::layout(&header.config);
    let declared: Vec<(String, Vec<usize>)> = header
        .tensors
        .iter()
        .map(|t| (t.name.clone(), t.shape.clone()))
        .collect();
    if declared != expected {
        return Err(Error::Shape("checkpoint tensor list does not match its config".into()));
    }

    let mut params = Params::zeros(&header.config);
    let mut bytes = Vec::new();
    for dst in params.slices_mut() {
        bytes.resize(dst.len() * 8, 0);
        r.read_exact(&mut bytes).map_err(|_| fmt("truncated tensor data"))?;
        for (v, chunk) in dst.iter_mut().zip(bytes.chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| fmt(&e.to_string()))? != 0 {
        return Err(fmt("trailing bytes after tensor data"));
    }
    let snapshot = ModelSnapshot::new(header.config.clone(), params, header.version)?;
    Ok((header, snapshot))
}

pub fn save_checkpoint(path: &Path, model: &ModelSnapshot, role: Role) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, model, role).map_err(|e| Error::io(path, e))?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, ModelSnapshot)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&mut bytes.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 16,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let m = ModelSnapshot::init(cfg(), 11).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &m, Role::History).unwrap();
        let (header, back) = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(header.role, Role::History);
        assert_eq!(header.byte_order, "little");
        assert!(back.same_params(&m));
        assert_eq!(back.config(), m.config());
    }

    #[test]
    fn rejects_corruption() {
        let m = ModelSnapshot::init(cfg(), 11).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &m, Role::Model).unwrap();

        let truncated = &buf[..buf.len() - 8];
        assert!(read_checkpoint(&mut &truncated[..]).is_err());

        let mut bad_magic = buf.clone();
        bad_magic[0] = b'X';
        assert!(read_checkpoint(&mut bad_magic.as_slice()).is_err());

        let mut trailing = buf.clone();
        trailing.push(0);
        assert!(read_checkpoint(&mut trailing.as_slice()).is_err());

        // Claim a different d_ff in the header: shapes no longer match.
        let hlen = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&buf[12..12 + hlen]).unwrap().replace("\"d_ff\":16", "\"d_ff\":17");
        let mut tampered = buf[..8].to_vec();
        tampered.extend((header.len() as u32).to_le_bytes());
        tampered.extend(header.as_bytes());
        tampered.extend(&buf[12 + hlen..]);
        assert!(matches!(read_checkpoint(&mut tampered.as_slice()), Err(Error::Shape(_))));
    }

    #[test]
    fn rejects_non_finite_values() {
        let m = ModelSnapshot::init(cfg(), 2).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &m, Role::Model).unwrap();
        let n = buf.len();
        buf[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(matches!(read_checkpoint(&mut buf.as_slice()), Err(Error::Shape(_))));
    }
}
