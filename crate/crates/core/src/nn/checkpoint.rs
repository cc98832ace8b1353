//! Model checkpoints: a JSON manifest naming every tensor and its shape, and
//! a flat little-endian f64 blob holding the values in manifest order.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{read_file, write_file, Error, Result};
use crate::nn::network::{Architecture, Network, Params, TENSOR_NAMES};
use crate::nn::optim::RmsProp;
use crate::nn::train::TrainConfig;

const LAYERS: [&str; 6] = [
    "conv1d",
    "batchnorm",
    "relu",
    "maxpool",
    "bilstm",
    "dense_sigmoid",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the blob, in f64 values.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub layers: Vec<String>,
    pub arch: Architecture,
    pub train: Option<TrainConfig>,
    pub seed: u64,
    pub tag: String,
    pub tensors: Vec<TensorEntry>,
    pub has_optimizer: bool,
    pub blob: String,
    pub blob_sha256: String,
}

/// A network plus optional optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    pub optimizer: Option<RmsProp>,
    pub train: Option<TrainConfig>,
    pub seed: u64,
    pub tag: String,
}

fn shapes(arch: &Architecture) -> Vec<Vec<usize>> {
    let (f, k, h, o) = (arch.filters, arch.kernel_len, arch.hidden, arch.outputs);
    let gate_w = vec![h, h + f];
    let mut v = vec![vec![f, k], vec![f], vec![f], vec![f]];
    for _ in 0..2 {
        v.extend(std::iter::repeat_n(gate_w.clone(), 4));
        v.extend(std::iter::repeat_n(vec![h], 4));
    }
    v.push(vec![o, 2 * h]);
    v.push(vec![o]);
    v
}

impl Checkpoint {
    pub fn blob_path(manifest: &Path) -> PathBuf {
        manifest.with_extension("bin")
    }

    fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out: Vec<(String, Vec<usize>)> = TENSOR_NAMES
            .iter()
            .map(|n| n.to_string())
            .zip(shapes(&self.network.arch))
            .collect();
        let f = self.network.arch.filters;
        out.push(("bn.running_mean".into(), vec![f]));
        out.push(("bn.running_var".into(), vec![f]));
        if self.optimizer.is_some() {
            let trainable: Vec<_> = out[..TENSOR_NAMES.len()].to_vec();
            out.extend(
                trainable
                    .into_iter()
                    .map(|(n, s)| (format!("rmsprop.acc.{n}"), s)),
            );
            out.push(("rmsprop.lr".into(), vec![1]));
        }
        out
    }

    fn values(&self) -> Vec<f64> {
        let p = &self.network.params;
        let mut v: Vec<f64> = p.tensors().concat();
        v.extend_from_slice(&p.bn.running_mean);
        v.extend_from_slice(&p.bn.running_var);
        if let Some(opt) = &self.optimizer {
            for a in &opt.acc {
                v.extend_from_slice(a);
            }
            v.push(opt.lr);
        }
        v
    }

    /// Writes the manifest to `path` and the blob next to it (`.bin`).
    pub fn save(&self, path: &Path) -> Result<()> {
        let values = self.values();
        let mut blob = Vec::with_capacity(values.len() * 8);
        for v in &values {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        let mut offset = 0;
        let tensors = self
            .layout()
            .into_iter()
            .map(|(name, shape)| {
                let e = TensorEntry {
                    name,
                    offset,
                    shape: shape.clone(),
                };
                offset += shape.iter().product::<usize>();
                e
            })
            .collect();
        let blob_path = Self::blob_path(path);
        let manifest = CheckpointManifest {
            format: "rydberg-fdm-checkpoint/1".into(),
            layers: LAYERS.iter().map(|s| s.to_string()).collect(),
            arch: self.network.arch.clone(),
            train: self.train.clone(),
            seed: self.seed,
            tag: self.tag.clone(),
            tensors,
            has_optimizer: self.optimizer.is_some(),
            blob: blob_path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
            blob_sha256: hex_digest(&blob),
        };
        write_file(&blob_path, &blob)?;
        write_file(path, serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let manifest: CheckpointManifest = serde_json::from_slice(&read_file(path)?)
            .map_err(|e| Error::MalformedFile(format!("{}: {e}", path.display())))?;
        let blob_path = path.with_file_name(&manifest.blob);
        let blob = read_file(&blob_path)?;
        if hex_digest(&blob) != manifest.blob_sha256 {
            return Err(Error::MalformedFile(format!(
                "{} does not match its manifest digest",
                blob_path.display()
            )));
        }
        if blob.len() % 8 != 0 {
            return Err(Error::MalformedFile(
                "blob length is not a multiple of 8".into(),
            ));
        }
        let values: Vec<f64> = blob
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();

        manifest.arch.validate()?;
        let mut params = Params::zeros(&manifest.arch);
        let mut ck = Checkpoint {
            network: Network::new(manifest.arch.clone(), params.clone())?,
            optimizer: manifest.has_optimizer.then(|| RmsProp::new(&params, 0.0)),
            train: manifest.train.clone(),
            seed: manifest.seed,
            tag: manifest.tag.clone(),
        };
        let layout = ck.layout();
        if layout.len() != manifest.tensors.len() {
            return Err(Error::MalformedFile(
                "tensor list does not match architecture".into(),
            ));
        }
        let mut slots: Vec<&mut [f64]> = params.tensors_mut();
        let mut running = [
            vec![0.0; manifest.arch.filters],
            vec![0.0; manifest.arch.filters],
        ];
        let [rm, rv] = &mut running;
        slots.push(rm);
        slots.push(rv);
        let mut acc: Vec<Vec<f64>> = Vec::new();
        let mut lr = [0.0];
        if let Some(opt) = &ck.optimizer {
            acc = opt.acc.clone();
        }
        slots.extend(acc.iter_mut().map(Vec::as_mut_slice));
        if manifest.has_optimizer {
            slots.push(&mut lr);
        }
        for ((entry, (name, shape)), slot) in manifest.tensors.iter().zip(&layout).zip(slots) {
            let n: usize = shape.iter().product();
            if &entry.name != name || &entry.shape != shape {
                return Err(Error::MalformedFile(format!(
                    "expected tensor {name} {shape:?}, manifest has {} {:?}",
                    entry.name, entry.shape
                )));
            }
            let src = values
                .get(entry.offset..entry.offset + n)
                .ok_or_else(|| Error::MalformedFile(format!("{name} runs past the blob")))?;
            slot.copy_from_slice(src);
        }
        params.bn.running_mean = running[0].clone();
        params.bn.running_var = running[1].clone();
        if let Some(opt) = ck.optimizer.as_mut() {
            opt.acc = acc;
            opt.lr = lr[0];
            if let Some(t) = &ck.train {
                opt.rho = t.rmsprop_decay;
                opt.eps = t.rmsprop_eps;
            }
        }
        ck.network = Network::new(manifest.arch, params)?;
        Ok(ck)
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};
    use std::fs;

    #[test]
    fn round_trip_is_bit_exact() {
        let arch = Architecture {
            input_len: 40,
            filters: 3,
            kernel_len: 5,
            pool: 3,
            hidden: 4,
            outputs: 4,
            ..Architecture::default()
        };
        let mut net = Network::init(arch, &mut stream(5, Purpose::Init, 0)).unwrap();
        net.params.bn.running_mean = vec![0.1, -0.2, 0.3];
        let mut opt = RmsProp::new(&net.params, 1e-4);
        opt.acc[0][0] = 0.5;
        let ck = Checkpoint {
            network: net,
            optimizer: Some(opt),
            train: Some(TrainConfig::default()),
            seed: 5,
            tag: "abc".into(),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        ck.save(&path).unwrap();
        assert!(Checkpoint::blob_path(&path).exists());
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);

        let blob = Checkpoint::blob_path(&path);
        let mut bytes = fs::read(&blob).unwrap();
        bytes[3] ^= 1;
        fs::write(&blob, bytes).unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(Error::MalformedFile(_))
        ));
    }
}
