//! Checkpoint serialization.
//!
//! Layout: an 8-byte magic `VBCLSCK1`, a little-endian `u32` header length,
//! a JSON header, then the raw payload of little-endian `f64` parameter
//! values. The header records the model dimensions, the training
//! configuration, the pooled source prior when one was supplied, and one
//! `(name, shape, byte offset)` entry per parameter, so the payload can be
//! read back regardless of entry order. Round trips are bit-exact.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labelshift::LabelDistribution;

use super::{ModelDims, ModelParams, TrainConfig};

pub(crate) const MAGIC: &[u8; 8] = b"VBCLSCK1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: [usize; 2],
    /// Byte offset of this parameter's values inside the payload.
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    dims: ModelDims,
    config: TrainConfig,
    source_prior: Option<LabelDistribution>,
    params: Vec<ParamEntry>,
}

fn corrupt(message: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(message.into())
}

/// Writes a checkpoint. `source_prior` is the pooled training prior, kept so
/// evaluation can reweight predictions without the training data at hand.
pub fn save_checkpoint(
    params: &ModelParams,
    config: &TrainConfig,
    source_prior: Option<&LabelDistribution>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let mut entries = Vec::with_capacity(params.set.len());
    let mut payload = Vec::new();
    for id in 0..params.set.len() {
        let p = params.set.get(id);
        entries.push(ParamEntry {
            name: p.name.clone(),
            shape: [p.rows, p.cols],
            offset: payload.len(),
        });
        for &v in &p.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        dims: params.dims,
        config: *config,
        source_prior: source_prior.cloned(),
        params: entries,
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Config(format!("could not serialize checkpoint header: {e}")))?;
    let header_len = u32::try_from(header_json.len())
        .map_err(|_| Error::Config("checkpoint header too large".into()))?;

    let mut bytes = Vec::with_capacity(12 + header_json.len() + payload.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&header_len.to_le_bytes());
    bytes.extend_from_slice(&header_json);
    bytes.extend_from_slice(&payload);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint back. Every parameter of the recorded layout must be
/// covered exactly once, with matching shape and in-bounds offset.
pub fn load_checkpoint(
    path: impl AsRef<Path>,
) -> Result<(ModelParams, TrainConfig, Option<LabelDistribution>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 {
        return Err(corrupt(format!(
            "file is {} bytes, shorter than the fixed preamble",
            bytes.len()
        )));
    }
    if &bytes[..8] != MAGIC {
        let got: Vec<String> = bytes[..8].iter().map(|b| format!("{b:02x}")).collect();
        return Err(corrupt(format!("bad magic [{}]", got.join(" "))));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let Some(header_end) = header_len.checked_add(12).filter(|&e| e <= bytes.len()) else {
        return Err(corrupt(format!(
            "header length {header_len} exceeds file size {}",
            bytes.len()
        )));
    };
    let header: Header = serde_json::from_slice(&bytes[12..header_end])
        .map_err(|e| corrupt(format!("unreadable header: {e}")))?;
    let payload = &bytes[header_end..];

    header
        .dims
        .validate()
        .map_err(|e| corrupt(format!("invalid dimensions: {e}")))?;
    header
        .config
        .validate()
        .map_err(|e| corrupt(format!("invalid configuration: {e}")))?;
    if header.config.latent_dim != header.dims.latent_dim
        || header.config.hidden_dim != header.dims.hidden_dim
    {
        return Err(corrupt(
            "configuration and dimensions disagree on layer sizes",
        ));
    }
    let source_prior = match header.source_prior {
        None => None,
        Some(ld) => {
            if ld.n_classes() != header.dims.n_classes {
                return Err(corrupt(format!(
                    "source prior covers {} classes, model has {}",
                    ld.n_classes(),
                    header.dims.n_classes
                )));
            }
            Some(
                LabelDistribution::new(ld.probs().to_vec())
                    .map_err(|e| corrupt(format!("invalid source prior: {e}")))?,
            )
        }
    };

    let mut params = ModelParams::zeros(header.dims)?;
    let by_name: HashMap<String, usize> = (0..params.set.len())
        .map(|id| (params.set.get(id).name.clone(), id))
        .collect();
    let mut seen = vec![false; params.set.len()];
    let mut covered_bytes = 0usize;
    for entry in &header.params {
        let Some(&id) = by_name.get(&entry.name) else {
            return Err(corrupt(format!("unknown parameter {}", entry.name)));
        };
        if seen[id] {
            return Err(corrupt(format!("duplicate parameter {}", entry.name)));
        }
        seen[id] = true;
        let p = params.set.get_mut(id);
        if entry.shape != [p.rows, p.cols] {
            return Err(corrupt(format!(
                "parameter {} has shape {:?}, layout expects [{}, {}]",
                entry.name, entry.shape, p.rows, p.cols
            )));
        }
        let nbytes = p.data.len() * 8;
        let Some(end) = entry.offset.checked_add(nbytes).filter(|&e| e <= payload.len()) else {
            return Err(corrupt(format!(
                "parameter {} at offset {} runs past the {}-byte payload",
                entry.name,
                entry.offset,
                payload.len()
            )));
        };
        for (slot, chunk) in p
            .data
            .iter_mut()
            .zip(payload[entry.offset..end].chunks_exact(8))
        {
            *slot = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        covered_bytes += nbytes;
    }
    if let Some(id) = seen.iter().position(|&s| !s) {
        return Err(corrupt(format!(
            "parameter {} missing from header",
            params.set.get(id).name
        )));
    }
    if covered_bytes != payload.len() {
        return Err(corrupt(format!(
            "payload is {} bytes, parameters account for {covered_bytes}",
            payload.len()
        )));
    }
    Ok((params, header.config, source_prior))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> ModelDims {
        ModelDims {
            feature_dim: 4,
            n_classes: 3,
            n_domains: 2,
            latent_dim: 3,
            hidden_dim: 6,
        }
    }

    fn config() -> TrainConfig {
        TrainConfig {
            epochs: 7,
            latent_dim: 3,
            hidden_dim: 6,
            seed: 42,
            ..TrainConfig::default()
        }
    }

    fn sample() -> (ModelParams, TrainConfig, LabelDistribution) {
        (
            ModelParams::init(dims(), 123).unwrap(),
            config(),
            LabelDistribution::new(vec![0.5, 0.25, 0.25]).unwrap(),
        )
    }

    /// Parses a checkpoint's header, applies `f`, and reassembles the file.
    fn reseal(bytes: &[u8], f: impl FnOnce(&mut Header)) -> Vec<u8> {
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let mut header: Header = serde_json::from_slice(&bytes[12..12 + header_len]).unwrap();
        f(&mut header);
        let json = serde_json::to_vec(&header).unwrap();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&bytes[12 + header_len..]);
        out
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (params, config, prior) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&params, &config, Some(&prior), &path).unwrap();
        let (loaded, loaded_config, loaded_prior) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.dims, params.dims);
        assert_eq!(loaded_config, config);
        assert_eq!(loaded_prior.as_ref().unwrap(), &prior);
        for id in 0..params.set.len() {
            let (a, b) = (params.set.get(id), loaded.set.get(id));
            assert_eq!(a.name, b.name);
            assert_eq!(a.group, b.group);
            let bits_a: Vec<u64> = a.data.iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = b.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b, "{}", a.name);
        }

        // Saving the loaded model reproduces the file byte for byte.
        let path2 = dir.path().join("model2.ckpt");
        save_checkpoint(&loaded, &loaded_config, loaded_prior.as_ref(), &path2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn no_prior_round_trips_as_none() {
        let (params, config, _) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&params, &config, None, &path).unwrap();
        let (_, _, prior) = load_checkpoint(&path).unwrap();
        assert!(prior.is_none());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let (params, config, _) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&params, &config, None, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] ^= 0xff;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::CorruptCheckpoint(_))
        ));
    }

    #[test]
    fn truncation_is_rejected() {
        let (params, config, _) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&params, &config, None, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::CorruptCheckpoint(_))
        ));
    }

    #[test]
    fn header_entry_order_does_not_matter() {
        let (params, config, prior) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&params, &config, Some(&prior), &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, reseal(&bytes, |h| h.params.reverse())).unwrap();
        let (loaded, _, _) = load_checkpoint(&path).unwrap();
        for id in 0..params.set.len() {
            assert_eq!(params.set.get(id).data, loaded.set.get(id).data);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let (params, config, _) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&params, &config, None, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, reseal(&bytes, |h| h.params[0].shape = [1, 1])).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::CorruptCheckpoint(_))
        ));
    }

    #[test]
    fn missing_parameter_is_rejected() {
        let (params, config, _) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&params, &config, None, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(
            &path,
            reseal(&bytes, |h| {
                h.params.pop();
            }),
        )
        .unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::CorruptCheckpoint(_))
        ));
    }

    #[test]
    fn garbage_header_is_rejected() {
        let (params, config, _) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&params, &config, None, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[13] = b'!';
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::CorruptCheckpoint(_))
        ));
    }
}
