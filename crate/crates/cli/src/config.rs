//! Run configuration: defaults, TOML files and `--set key=value` overrides.

use std::fs;
use std::path::Path;

use objint_core::inference::InversionConfig;
use objint_core::scene::{SceneConfig, SynthConfig};
use objint_core::shading::LightConfig;
use objint_core::training::TrainConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::Failure;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmentOptions {
    /// RGB distance from the median border color that counts as foreground.
    pub threshold: f64,
    /// Smallest kept component in pixels; 0 means 0.1% of the image.
    pub min_area: usize,
}

impl Default for SegmentOptions {
    fn default() -> Self {
        Self { threshold: 0.1, min_area: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    /// Crop resolution used when inverting instances.
    pub resolution: usize,
    /// Evaluate only the first `limit` instances (0 = all).
    pub limit: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { resolution: 32, limit: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViewOptions {
    /// Output resolution of render, relight and interpolate.
    pub resolution: usize,
    /// Frames of the azimuth sweep written by `render`.
    pub frames: usize,
    /// Images written by `interpolate`.
    pub interpolation_steps: usize,
    /// Camera-frame lights used by `relight`.
    pub lights: Vec<LightConfig>,
}

impl Default for ViewOptions {
    fn default() -> Self {
        let light = |d| LightConfig::new(d).expect("nonzero");
        Self {
            resolution: 64,
            frames: 8,
            interpolation_steps: 5,
            lights: vec![
                light([-1.0, 0.0, -1.0]),
                light([1.0, 0.0, -1.0]),
                light([0.0, -1.0, -1.0]),
                light([0.0, 1.0, -1.0]),
            ],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds training, synthesis, latent sampling and inversion.
    pub seed: u64,
    /// Write a checkpoint every this many training steps (0 = only at the end).
    pub checkpoint_every: u64,
    pub scene: SceneConfig,
    pub train: TrainConfig,
    pub segment: SegmentOptions,
    pub synth: SynthConfig,
    pub inversion: InversionConfig,
    pub eval: EvalOptions,
    pub views: ViewOptions,
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::usage(msg)
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Table(b), Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn parse_value(raw: &str) -> Value {
    match toml::from_str::<Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => Value::String(raw.to_string()),
    }
}

fn apply_set(root: &mut Value, assignment: &str) -> Result<(), Failure> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| usage(format!("--set expects key=value, got {assignment:?}")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(usage(format!("malformed key {key:?}")));
    }
    let mut node = root;
    for part in &path[..path.len() - 1] {
        let table = node.as_table_mut().ok_or_else(|| usage(format!("{key}: {part} is not a section")))?;
        node = table.entry(part.to_string()).or_insert_with(|| Value::Table(Table::new()));
    }
    let table = node.as_table_mut().ok_or_else(|| usage(format!("{key}: parent is not a section")))?;
    table.insert(path[path.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

fn read_table(path: &Path) -> Result<Value, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::io(format!("{}: {e}", path.display())))?;
    let t: Table = toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    Ok(Value::Table(t))
}

/// Defaults, then `scene_toml` as the `scene` section, then the config file,
/// then each `--set`; later sources win.
pub fn resolve(
    scene_toml: Option<&Path>,
    file: Option<&Path>,
    sets: &[String],
    seed: Option<u64>,
) -> Result<RunConfig, Failure> {
    let mut root = Value::try_from(RunConfig::default()).expect("defaults serialize");
    if let Some(p) = scene_toml {
        let mut wrapper = Table::new();
        wrapper.insert("scene".into(), read_table(p)?);
        merge(&mut root, Value::Table(wrapper));
    }
    if let Some(p) = file {
        merge(&mut root, read_table(p)?);
    }
    for s in sets {
        apply_set(&mut root, s)?;
    }
    let mut cfg: RunConfig = root.try_into().map_err(|e: toml::de::Error| usage(format!("configuration: {e}")))?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    cfg.train.seed = cfg.seed;
    cfg.inversion.seed = cfg.seed;
    cfg.scene.validate().map_err(Failure::from)?;
    cfg.train.validate().map_err(Failure::from)?;
    cfg.inversion.validate().map_err(Failure::from)?;
    if cfg.views.frames < 2 || cfg.views.interpolation_steps < 2 || cfg.views.lights.is_empty() {
        return Err(usage("views.frames and views.interpolation_steps must be >= 2 and views.lights nonempty"));
    }
    Ok(cfg)
}

/// Writes the fully resolved configuration next to the run's outputs.
pub fn echo(cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    let text = toml::to_string(cfg).map_err(|e| usage(format!("serializing configuration: {e}")))?;
    let p = out.join("config.toml");
    fs::write(&p, text).map_err(|e| Failure::io(format!("{}: {e}", p.display())))
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<String>) {
    match v {
        Value::Table(t) => {
            for (k, child) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        other => out.push(format!("  {prefix} = {other}")),
    }
}

/// Every configuration key with its default value, one per line.
pub fn key_listing() -> String {
    let root = Value::try_from(RunConfig::default()).expect("defaults serialize");
    let mut lines = Vec::new();
    flatten("", &root, &mut lines);
    lines.join("\n")
}
