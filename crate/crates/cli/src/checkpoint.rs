//! Checkpoint file: `D3TCKPT\0`, u32 LE header length, JSON header, then
//! every parameter as little-endian f32, generator first, in the canonical
//! order the network config defines.

use std::fs;
use std::io::Write;
use std::path::Path;

use d3t_core::backbone::{discriminator_params, generator_params, GanSnapshot, NetworkConfig, Role};
use d3t_core::params::ParamSet;
use d3t_core::tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const MAGIC: &[u8; 8] = b"D3TCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub version: u32,
    pub network: NetworkConfig,
    pub role: Role,
    pub step: u64,
    pub content_hash: String,
    /// Number of f32 values in the body.
    pub numel: usize,
}

fn bad(path: &Path, message: impl Into<String>) -> CliError {
    CliError::Checkpoint {
        path: path.display().to_string(),
        message: message.into(),
    }
}

pub fn encode(s: &GanSnapshot) -> Result<Vec<u8>, CliError> {
    s.validate()?;
    let header = CheckpointHeader {
        version: FORMAT_VERSION,
        network: s.config.clone(),
        role: s.role,
        step: s.step,
        content_hash: s.content_hash(),
        numel: s.generator.numel() + s.discriminator.numel(),
    };
    let h = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(12 + h.len() + 4 * header.numel);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(h.len() as u32).to_le_bytes());
    out.extend_from_slice(&h);
    // Template order is canonical; validate() above guarantees the layouts agree.
    let tg = generator_params::<f32>(&s.config, 0)?;
    let td = discriminator_params::<f32>(&s.config, 0)?;
    for (set, template) in [(&s.generator, &tg), (&s.discriminator, &td)] {
        for name in template.names() {
            out.extend_from_slice(&set.get(name)?.f32_le_bytes());
        }
    }
    Ok(out)
}

pub fn header_of(bytes: &[u8], path: &Path) -> Result<(CheckpointHeader, usize), CliError> {
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(bad(path, "not a checkpoint file (bad magic)"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = 12usize
        .checked_add(hlen)
        .filter(|&b| b <= bytes.len())
        .ok_or_else(|| bad(path, "truncated header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[12..body]).map_err(|e| bad(path, format!("unreadable header: {e}")))?;
    if header.version != FORMAT_VERSION {
        return Err(bad(path, format!("format version {} is not supported", header.version)));
    }
    Ok((header, body))
}

fn fill(template: ParamSet<f32>, values: &mut impl Iterator<Item = f32>) -> Result<ParamSet<f32>, CliError> {
    let mut out = ParamSet::new();
    for (name, t) in template.iter() {
        let data: Vec<f32> = values.by_ref().take(t.numel()).collect();
        out.insert(name, Tensor::new(t.shape().to_vec(), data)?);
    }
    Ok(out)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<GanSnapshot, CliError> {
    let (header, body) = header_of(bytes, path)?;
    header.network.validate()?;
    let tg = generator_params::<f32>(&header.network, 0)?;
    let td = discriminator_params::<f32>(&header.network, 0)?;
    let numel = tg.numel() + td.numel();
    if header.numel != numel || bytes.len() - body != 4 * numel {
        return Err(bad(
            path,
            format!(
                "body holds {} bytes; network config needs {} parameters",
                bytes.len() - body,
                numel
            ),
        ));
    }
    let mut values = bytes[body..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
    let snapshot = GanSnapshot {
        generator: fill(tg, &mut values)?,
        discriminator: fill(td, &mut values)?,
        config: header.network,
        step: header.step,
        role: header.role,
    };
    let actual = snapshot.content_hash();
    if actual != header.content_hash {
        return Err(bad(
            path,
            format!(
                "content hash mismatch: header {} but parameters hash to {}",
                header.content_hash, actual
            ),
        ));
    }
    Ok(snapshot)
}

/// Written through a temporary file so a crash never leaves a partial checkpoint.
pub fn save(s: &GanSnapshot, path: &Path) -> Result<String, CliError> {
    let bytes = encode(s)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(s.content_hash())
}

pub fn load(path: &Path) -> Result<GanSnapshot, CliError> {
    let bytes = fs::read(path).map_err(|e| bad(path, format!("cannot read: {e}")))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn net() -> NetworkConfig {
        NetworkConfig {
            resolution: 8,
            style_dim: 8,
            mapping_depth: 2,
            channel_base: 4,
            ..NetworkConfig::default()
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut s = GanSnapshot::<f32>::random(net(), 3).unwrap();
        s.step = 17;
        s.role = Role::Target;
        let bytes = encode(&s).unwrap();
        let back = decode(&bytes, Path::new("x")).unwrap();
        assert_eq!(back, s);
        for ((_, a), (_, b)) in s.generator.iter().zip(back.generator.iter()) {
            let ab: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
        assert_eq!(encode(&back).unwrap(), bytes);
    }

    #[test]
    fn corrupted_body_reports_both_hashes() {
        let s = GanSnapshot::<f32>::random(net(), 3).unwrap();
        let mut bytes = encode(&s).unwrap();
        let n = bytes.len();
        bytes[n - 2] ^= 0x40;
        let err = decode(&bytes, Path::new("x")).unwrap_err().to_string();
        assert!(err.contains("content hash mismatch"), "{err}");
        assert!(err.contains(&s.content_hash()), "{err}");
    }

    #[test]
    fn truncation_and_bad_magic_are_rejected() {
        let s = GanSnapshot::<f32>::random(net(), 3).unwrap();
        let bytes = encode(&s).unwrap();
        assert!(decode(&bytes[..bytes.len() - 4], Path::new("x")).is_err());
        assert!(decode(&bytes[..20], Path::new("x")).is_err());
        assert!(decode(b"PNG.....", Path::new("x")).is_err());
    }
}
