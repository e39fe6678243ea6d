//! Checkpoint directories: `model_1.bin`, `model_2.bin` and `checkpoint.json`.
//!
//! A weight blob is a little-endian stream of arrays, each prefixed by its
//! length as `u64`: every parameter value, every momentum buffer, then every
//! batch-norm running statistic, in the network's fixed order.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use abd_core::data::Loader;
use abd_core::metrics::EvalResult;
use abd_nn::UNet;
use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, json_err, Result, TrainError};

pub const MODEL_FILES: [&str; 2] = ["model_1.bin", "model_2.bin"];
pub const META_FILE: &str = "checkpoint.json";
const MAGIC: &[u8; 8] = b"ABDWGT01";

/// One validation pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    /// Completed training steps when the evaluation ran.
    pub iteration: u64,
    pub mean_fg_dsc: f64,
    pub result: EvalResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Completed training steps.
    pub iteration: u64,
    pub config_hash: String,
    /// Full configuration in its canonical text form.
    pub config: String,
    pub metric_history: Vec<EvalRecord>,
    pub best: Option<EvalRecord>,
    pub loader: Loader,
}

fn arrays(net: &UNet<f32>) -> Vec<&Array1<f32>> {
    let params = net.params();
    let mut out: Vec<&Array1<f32>> = params.iter().map(|p| &p.value).collect();
    out.extend(params.iter().map(|p| &p.velocity));
    out.extend(net.buffers());
    out
}

pub fn write_weights(path: &Path, net: &UNet<f32>) -> Result<()> {
    let mut buf = Vec::with_capacity(MAGIC.len() + 4 * 2 * net.num_parameters());
    buf.extend_from_slice(MAGIC);
    for a in arrays(net) {
        buf.extend_from_slice(&(a.len() as u64).to_le_bytes());
        for v in a {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&buf).map_err(io_err(path))
}

/// Loads a blob into a network built from the same configuration.
pub fn read_weights(path: &Path, net: &mut UNet<f32>) -> Result<()> {
    let bad = |reason: String| TrainError::Checkpoint { path: path.to_path_buf(), reason };
    let mut bytes = Vec::new();
    fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(io_err(path))?;
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(bad("not a weight file".into()));
    }
    let mut pos = MAGIC.len();
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated".into()))?;
        pos += n;
        Ok(s)
    };
    let mut loaded: Vec<Vec<f32>> = Vec::new();
    for expected in arrays(net).iter().map(|a| a.len()) {
        let len = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
        if len != expected {
            return Err(bad(format!("array {} has {len} values, model expects {expected}", loaded.len())));
        }
        let raw = take(4 * len)?;
        loaded.push(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect());
    }
    if pos != bytes.len() {
        return Err(bad("trailing data".into()));
    }
    let mut it = loaded.into_iter();
    let mut params = net.params_mut();
    for p in params.iter_mut() {
        p.value = Array1::from(it.next().expect("counted"));
    }
    for p in params.iter_mut() {
        p.velocity = Array1::from(it.next().expect("counted"));
    }
    for b in net.buffers_mut() {
        *b = Array1::from(it.next().expect("counted"));
    }
    Ok(())
}

pub fn save(dir: &Path, nets: [&UNet<f32>; 2], meta: &CheckpointMeta) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (net, name) in nets.into_iter().zip(MODEL_FILES) {
        write_weights(&dir.join(name), net)?;
    }
    // metadata last: its presence marks a complete checkpoint
    let path = dir.join(META_FILE);
    let text = serde_json::to_string_pretty(meta).map_err(json_err(&path))?;
    fs::write(&path, text).map_err(io_err(&path))
}

pub fn read_meta(dir: &Path) -> Result<CheckpointMeta> {
    let path: PathBuf = dir.join(META_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(json_err(&path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use abd_nn::{ModelConfig, Variant};

    fn net(seed: u64) -> UNet<f32> {
        UNet::new(ModelConfig { in_channels: 1, num_classes: 3, base_width: 2, depth: 1, init_seed: seed, variant: Variant::A })
            .unwrap()
    }

    #[test]
    fn weights_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = net(1);
        a.params_mut()[0].velocity.fill(0.25);
        a.buffers_mut()[0].fill(3.0);
        let p = dir.path().join("w.bin");
        write_weights(&p, &a).unwrap();
        let mut b = net(2);
        read_weights(&p, &mut b).unwrap();
        assert_eq!(a.flat_parameters(), b.flat_parameters());
        assert_eq!(b.params()[0].velocity, a.params()[0].velocity);
        assert_eq!(b.buffers(), a.buffers());
    }

    #[test]
    fn rejects_mismatched_model() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.bin");
        write_weights(&p, &net(1)).unwrap();
        let mut wider = UNet::new(ModelConfig {
            in_channels: 1,
            num_classes: 3,
            base_width: 3,
            depth: 1,
            init_seed: 0,
            variant: Variant::A,
        })
        .unwrap();
        assert!(read_weights(&p, &mut wider).is_err());
        fs::write(&p, b"junk").unwrap();
        assert!(read_weights(&p, &mut net(1)).is_err());
    }
}
