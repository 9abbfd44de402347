//! Plain-text run configuration.
//!
//! A config file is TOML whose leaves are addressed by dotted keys such as
//! `grid.size` or `train.steps`. Every key in [`KEYS`] must be present and
//! no other key may appear, so a typo fails loudly instead of silently
//! running the default.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use toml::Value;

use crate::distill::PretrainConfig;
use crate::encoder::StageConfig;
use crate::error::{Error, Result};
use crate::synthbench::{DataConfig, ProbeConfig};

/// Every accepted key, in file order.
pub const KEYS: &[&str] = &[
    "grid.strategy",
    "grid.size",
    "grid.jitter",
    "aug.object_rotation",
    "aug.scene_roll_pitch",
    "aug.scene_scale_jitter",
    "aug.object_scale_jitter",
    "aug.max_shift_cells",
    "modality.color_drop",
    "modality.normal_drop",
    "modality.point_drop",
    "modality.stage",
    "rope.enabled",
    "rope.base",
    "rope.jitter_degree",
    "rope.scaling_degree",
    "rope.perturb",
    "model.channels",
    "model.heads",
    "model.blocks",
    "model.windows",
    "model.out_channels",
    "distill.prototypes",
    "distill.tau_student",
    "distill.tau_teacher",
    "distill.momentum",
    "distill.center_momentum",
    "distill.mask_ratio",
    "distill.patch_size",
    "distill.n_local",
    "distill.local_fraction",
    "distill.min_crop_points",
    "distill.crop_attempts",
    "train.steps",
    "train.batch_size",
    "train.lr",
    "train.weight_decay",
    "train.beta1",
    "train.beta2",
    "train.clip_norm",
    "data.seed",
    "data.repeats",
    "data.train_per_domain",
    "data.eval_per_domain",
    "data.max_points",
    "probe.epochs",
    "probe.lr",
    "probe.momentum",
    "probe.train_fraction",
    "probe.max_points",
];

/// A complete run configuration.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    pub pretrain: PretrainConfig,
    pub data: DataConfig,
    pub probe: ProbeConfig,
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.pretrain.validate()?;
        self.data.validate()?;
        self.probe.validate()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        text.parse()
    }

    /// The file form, grouped into one table per key family.
    pub fn to_toml(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for (key, value) in self.entries() {
            let (head, leaf) = key.split_once('.').expect("dotted key");
            if head != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                out.push_str(&format!("[{head}]\n"));
                section = head;
            }
            out.push_str(&format!("{leaf} = {value}\n"));
        }
        out
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let p = &self.pretrain;
        let e = &p.encoder;
        let list = |f: fn(&StageConfig) -> usize| {
            let items: Vec<String> = e.stages.iter().map(|s| f(s).to_string()).collect();
            format!("[{}]", items.join(", "))
        };
        let s = |v: &str| format!("\"{v}\"");
        let f = |v: f64| format!("{v:?}");
        let values = vec![
            s(p.grid.strategy.as_str()),
            f(p.grid.size),
            f(p.grid.jitter),
            s(p.aug.object_rotation.as_str()),
            f(p.aug.scene_roll_pitch),
            f(p.aug.scene_scale_jitter),
            f(p.aug.object_scale_jitter),
            f(p.aug.max_shift_cells),
            f(p.modality.color_drop),
            f(p.modality.normal_drop),
            f(p.modality.point_drop),
            s(p.modality.stage.as_str()),
            e.rope.enabled.to_string(),
            f(e.rope.base),
            f(e.rope.jitter_degree),
            f(e.rope.scaling_degree),
            e.rope.perturb.to_string(),
            list(|s| s.channels),
            list(|s| s.heads),
            list(|s| s.blocks),
            list(|s| s.window),
            e.out_channels.to_string(),
            p.distill.prototypes.to_string(),
            f(p.distill.tau_student),
            f(p.distill.tau_teacher),
            f(p.distill.momentum),
            f(p.distill.center_momentum),
            f(p.distill.mask_ratio),
            p.distill.patch_size.to_string(),
            p.distill.n_local.to_string(),
            f(p.distill.local_fraction),
            p.distill.min_crop_points.to_string(),
            p.distill.crop_attempts.to_string(),
            p.train.steps.to_string(),
            p.train.batch_size.to_string(),
            f(p.train.lr),
            f(p.train.weight_decay),
            f(p.train.beta1),
            f(p.train.beta2),
            f(p.train.clip_norm),
            self.data.seed.to_string(),
            self.data.repeats.to_string(),
            self.data.train_per_domain.to_string(),
            self.data.eval_per_domain.to_string(),
            p.max_points.to_string(),
            self.probe.epochs.to_string(),
            f(self.probe.lr),
            f(self.probe.momentum),
            f(self.probe.train_fraction),
            self.probe.max_points.to_string(),
        ];
        KEYS.iter().copied().zip(values).collect()
    }
}

impl FromStr for Config {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::config(e.message().to_string()))?;
        let mut flat = BTreeMap::new();
        flatten("", &Value::Table(table), &mut flat);
        if let Some(k) = flat.keys().find(|k| !KEYS.contains(&k.as_str())) {
            return Err(Error::config(format!("unknown key `{k}`")));
        }
        let r = Fields(&flat);
        let channels = r.usizes("model.channels")?;
        let heads = r.usizes("model.heads")?;
        let blocks = r.usizes("model.blocks")?;
        let windows = r.usizes("model.windows")?;
        if [heads.len(), blocks.len(), windows.len()] != [channels.len(); 3] {
            return Err(Error::config("model.channels, heads, blocks and windows must have equal lengths"));
        }
        let mut c = Config::default();
        let p = &mut c.pretrain;
        p.grid.strategy = r.parsed("grid.strategy")?;
        p.grid.size = r.f64("grid.size")?;
        p.grid.jitter = r.f64("grid.jitter")?;
        p.aug.object_rotation = r.parsed("aug.object_rotation")?;
        p.aug.scene_roll_pitch = r.f64("aug.scene_roll_pitch")?;
        p.aug.scene_scale_jitter = r.f64("aug.scene_scale_jitter")?;
        p.aug.object_scale_jitter = r.f64("aug.object_scale_jitter")?;
        p.aug.max_shift_cells = r.f64("aug.max_shift_cells")?;
        p.modality.color_drop = r.f64("modality.color_drop")?;
        p.modality.normal_drop = r.f64("modality.normal_drop")?;
        p.modality.point_drop = r.f64("modality.point_drop")?;
        p.modality.stage = r.parsed("modality.stage")?;
        let e = &mut p.encoder;
        e.rope.enabled = r.bool("rope.enabled")?;
        e.rope.base = r.f64("rope.base")?;
        e.rope.jitter_degree = r.f64("rope.jitter_degree")?;
        e.rope.scaling_degree = r.f64("rope.scaling_degree")?;
        e.rope.perturb = r.bool("rope.perturb")?;
        e.stages = (0..channels.len())
            .map(|i| StageConfig {
                channels: channels[i],
                heads: heads[i],
                blocks: blocks[i],
                window: windows[i],
            })
            .collect();
        e.out_channels = r.usize("model.out_channels")?;
        e.canonical_grid = p.grid.size;
        let d = &mut p.distill;
        d.prototypes = r.usize("distill.prototypes")?;
        d.tau_student = r.f64("distill.tau_student")?;
        d.tau_teacher = r.f64("distill.tau_teacher")?;
        d.momentum = r.f64("distill.momentum")?;
        d.center_momentum = r.f64("distill.center_momentum")?;
        d.mask_ratio = r.f64("distill.mask_ratio")?;
        d.patch_size = r.usize("distill.patch_size")?;
        d.n_local = r.usize("distill.n_local")?;
        d.local_fraction = r.f64("distill.local_fraction")?;
        d.min_crop_points = r.usize("distill.min_crop_points")?;
        d.crop_attempts = r.usize("distill.crop_attempts")?;
        let t = &mut p.train;
        t.steps = r.usize("train.steps")?;
        t.batch_size = r.usize("train.batch_size")?;
        t.lr = r.f64("train.lr")?;
        t.weight_decay = r.f64("train.weight_decay")?;
        t.beta1 = r.f64("train.beta1")?;
        t.beta2 = r.f64("train.beta2")?;
        t.clip_norm = r.f64("train.clip_norm")?;
        p.max_points = r.usize("data.max_points")?;
        c.data.seed = r.u64("data.seed")?;
        c.data.repeats = r.usize("data.repeats")?;
        c.data.train_per_domain = r.usize("data.train_per_domain")?;
        c.data.eval_per_domain = r.usize("data.eval_per_domain")?;
        c.probe.epochs = r.usize("probe.epochs")?;
        c.probe.lr = r.f64("probe.lr")?;
        c.probe.momentum = r.f64("probe.momentum")?;
        c.probe.train_fraction = r.f64("probe.train_fraction")?;
        c.probe.max_points = r.usize("probe.max_points")?;
        c.validate()?;
        Ok(c)
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        _ => {
            out.insert(prefix.to_string(), v.clone());
        }
    }
}

struct Fields<'a>(&'a BTreeMap<String, Value>);

impl Fields<'_> {
    fn get(&self, key: &str) -> Result<&Value> {
        self.0.get(key).ok_or_else(|| Error::MissingKey(key.to_string()))
    }

    fn wrong(key: &str, want: &str) -> Error {
        Error::config(format!("`{key}` must be {want}"))
    }

    fn f64(&self, key: &str) -> Result<f64> {
        match self.get(key)? {
            Value::Float(x) => Ok(*x),
            Value::Integer(i) => Ok(*i as f64),
            _ => Err(Self::wrong(key, "a number")),
        }
    }

    fn u64(&self, key: &str) -> Result<u64> {
        match self.get(key)? {
            Value::Integer(i) if *i >= 0 => Ok(*i as u64),
            _ => Err(Self::wrong(key, "a non-negative integer")),
        }
    }

    fn usize(&self, key: &str) -> Result<usize> {
        Ok(self.u64(key)? as usize)
    }

    fn bool(&self, key: &str) -> Result<bool> {
        self.get(key)?.as_bool().ok_or_else(|| Self::wrong(key, "true or false"))
    }

    fn parsed<T: FromStr<Err = Error>>(&self, key: &str) -> Result<T> {
        let s = self.get(key)?.as_str().ok_or_else(|| Self::wrong(key, "a string"))?;
        s.parse().map_err(|e: Error| Error::config(format!("`{key}`: {e}")))
    }

    fn usizes(&self, key: &str) -> Result<Vec<usize>> {
        let items = self.get(key)?.as_array().ok_or_else(|| Self::wrong(key, "an array of integers"))?;
        items
            .iter()
            .map(|v| match v {
                Value::Integer(i) if *i >= 0 => Ok(*i as usize),
                _ => Err(Self::wrong(key, "an array of integers")),
            })
            .collect()
    }
}
