//! Binary checkpoints of a training run.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic  b"OBJINTCK"
//! u32    format version
//! u64    header length H
//! [H]    JSON header: configs, config hash, step, rng state, optimizer counters, tensor shapes
//! u64    payload length P (bytes)
//! [P]    f64 values of every tensor, in header order
//! ```

use std::fs;
use std::path::Path;

use objint_autodiff::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AdamConfig, AdamState, TrainConfig, Trainer};
use crate::adversarial::discriminator::Discriminator;
use crate::error::{Error, Result};
use crate::model::Generator;
use crate::scene::SceneConfig;

pub const MAGIC: &[u8; 8] = b"OBJINTCK";
pub const FORMAT_VERSION: u32 = 1;
const PREFIX: usize = 8 + 4 + 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerMeta {
    config: AdamConfig,
    step: u64,
    skipped: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    config_hash: String,
    config: TrainConfig,
    scene: SceneConfig,
    step: u64,
    rng: ChaCha8Rng,
    optimizers: [OptimizerMeta; 3],
    /// `(name, shape)` of every payload tensor.
    tensors: Vec<(String, Vec<usize>)>,
}

/// A decoded checkpoint; [`Checkpoint::into_trainer`] restores the run.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    header: Header,
    tensors: Vec<Tensor>,
}

fn named<'a>(prefix: &str, ts: impl IntoIterator<Item = &'a Tensor>) -> Vec<(String, &'a Tensor)> {
    ts.into_iter().enumerate().map(|(i, t)| (format!("{prefix}.{i}"), t)).collect()
}

fn optimizer_tensors<'a>(name: &str, opt: &'a AdamState) -> Vec<(String, &'a Tensor)> {
    let mut out = named(&format!("{name}.m"), &opt.first);
    out.extend(named(&format!("{name}.v"), &opt.second));
    out
}

fn meta(opt: &AdamState) -> OptimizerMeta {
    OptimizerMeta { config: opt.config, step: opt.step, skipped: opt.skipped }
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer) -> Self {
        let mut list = named("generator", t.generator.params());
        list.extend(named("image_d", t.image_d.params()));
        list.extend(named("mask_d", t.mask_d.params()));
        list.extend(optimizer_tensors("opt_g", &t.opt_g));
        list.extend(optimizer_tensors("opt_d", &t.opt_d));
        list.extend(optimizer_tensors("opt_m", &t.opt_m));
        let header = Header {
            version: FORMAT_VERSION,
            config_hash: t.config_hash(),
            config: t.config.clone(),
            scene: t.scene.clone(),
            step: t.step,
            rng: t.rng.clone(),
            optimizers: [meta(&t.opt_g), meta(&t.opt_d), meta(&t.opt_m)],
            tensors: list.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect(),
        };
        Self { header, tensors: list.into_iter().map(|(_, t)| t.clone()).collect() }
    }

    pub fn step(&self) -> u64 {
        self.header.step
    }

    pub fn config(&self) -> &TrainConfig {
        &self.header.config
    }

    pub fn scene(&self) -> &SceneConfig {
        &self.header.scene
    }

    pub fn config_hash(&self) -> &str {
        &self.header.config_hash
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let payload: usize = self.tensors.iter().map(|t| 8 * t.numel()).sum();
        let mut out = Vec::with_capacity(PREFIX + header.len() + 8 + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(payload as u64).to_le_bytes());
        for t in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let truncated = |expected: usize| {
            Error::Checkpoint(format!("truncated file: expected {expected} bytes, found {}", bytes.len()))
        };
        if bytes.len() < PREFIX {
            return Err(truncated(PREFIX));
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("format version {version}, this build reads {FORMAT_VERSION}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let payload_at = PREFIX + hlen + 8;
        if bytes.len() < payload_at {
            return Err(truncated(payload_at));
        }
        let header: Header = serde_json::from_slice(&bytes[PREFIX..PREFIX + hlen])
            .map_err(|e| Error::Checkpoint(format!("corrupt header: {e}")))?;
        if header.version != version {
            return Err(Error::Checkpoint("header version disagrees with the file prefix".into()));
        }
        let plen = u64::from_le_bytes(bytes[PREFIX + hlen..payload_at].try_into().expect("8 bytes")) as usize;
        let expected_payload: usize = header.tensors.iter().map(|(_, s)| 8 * s.iter().product::<usize>()).sum();
        if plen != expected_payload {
            return Err(Error::Checkpoint(format!(
                "payload holds {plen} bytes but the header describes {expected_payload}"
            )));
        }
        if bytes.len() != payload_at + plen {
            if bytes.len() < payload_at + plen {
                return Err(truncated(payload_at + plen));
            }
            return Err(Error::Checkpoint(format!(
                "trailing data: expected {} bytes, found {}",
                payload_at + plen,
                bytes.len()
            )));
        }
        let mut at = payload_at;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for (_, shape) in &header.tensors {
            let n: usize = shape.iter().product();
            let data = bytes[at..at + 8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            at += 8 * n;
            tensors.push(Tensor::new(shape.clone(), data)?);
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Rebuilds the trainer. When `expected` is given, its hash must match the
    /// stored one unless `force` is set.
    pub fn into_trainer(self, expected: Option<(&TrainConfig, &SceneConfig)>, force: bool) -> Result<Trainer> {
        let h = self.header;
        if h.config.hash(&h.scene) != h.config_hash {
            return Err(Error::Checkpoint("stored configuration does not match its hash".into()));
        }
        if let Some((cfg, scene)) = expected {
            let hash = cfg.hash(scene);
            if hash != h.config_hash && !force {
                return Err(Error::Checkpoint(format!(
                    "configuration hash mismatch: checkpoint {}, current {hash}",
                    h.config_hash
                )));
            }
        }
        // Shapes come from the configuration; values from the payload.
        let mut scratch = ChaCha8Rng::seed_from_u64(0);
        let mut generator = Generator::new(&mut scratch, &h.config.field)?;
        let r = h.config.resolution;
        let mut image_d = Discriminator::new(&mut scratch, &h.config.discriminator, 3, r, true)?;
        let mut mask_d = Discriminator::new(&mut scratch, &h.config.discriminator, 1, r, false)?;
        let mut values = h.tensors.iter().zip(self.tensors);
        let mut fill = |dst: &mut Tensor| -> Result<()> {
            let ((name, _), t) = values.next().ok_or_else(|| Error::Checkpoint("missing tensors".into()))?;
            if dst.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, configuration expects {:?}",
                    t.shape(),
                    dst.shape()
                )));
            }
            *dst = t;
            Ok(())
        };
        for p in generator.params_mut() {
            fill(p)?;
        }
        for p in image_d.params_mut() {
            fill(p)?;
        }
        for p in mask_d.params_mut() {
            fill(p)?;
        }
        let mut restore = |params: Vec<&Tensor>, m: &OptimizerMeta| -> Result<AdamState> {
            let mut opt = AdamState::new(params, m.config);
            for t in opt.first.iter_mut() {
                fill(t)?;
            }
            for t in opt.second.iter_mut() {
                fill(t)?;
            }
            opt.step = m.step;
            opt.skipped = m.skipped;
            Ok(opt)
        };
        let opt_g = restore(generator.params(), &h.optimizers[0])?;
        let opt_d = restore(image_d.params().iter().collect(), &h.optimizers[1])?;
        let opt_m = restore(mask_d.params().iter().collect(), &h.optimizers[2])?;
        if values.next().is_some() {
            return Err(Error::Checkpoint("checkpoint holds more tensors than the configuration".into()));
        }
        Ok(Trainer {
            config: h.config,
            scene: h.scene,
            generator,
            image_d,
            mask_d,
            opt_g,
            opt_d,
            opt_m,
            rng: h.rng,
            step: h.step,
            last_grads: None,
        })
    }
}
