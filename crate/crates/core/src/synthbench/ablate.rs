//! Toggled pretrain-and-probe runs with CSV reports.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use super::{eval_set, evaluate, train_set, Condition, Evaluation};
use crate::config::Config;
use crate::distill::{train, ObjectRotation};
use crate::error::{Error, Result};
use crate::harmonize::GridStrategy;
use crate::modality::BlindingStage;
use crate::pcdata::Domain;
use crate::rng::derive_seed;

/// Ablation families.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    Grid,
    Rope,
    Blinding,
    ObjectAug,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Grid, Ablation::Rope, Ablation::Blinding, Ablation::ObjectAug];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Grid => "grid",
            Ablation::Rope => "rope",
            Ablation::Blinding => "blinding",
            Ablation::ObjectAug => "object-aug",
        }
    }

    /// Variant names paired with the configuration each one trains with.
    pub fn variants(self, base: &Config) -> Vec<(String, Config)> {
        let with = |name: &str, edit: &dyn Fn(&mut Config)| {
            let mut c = base.clone();
            edit(&mut c);
            (name.to_string(), c)
        };
        match self {
            Ablation::Grid => GridStrategy::ALL
                .iter()
                .map(|&s| with(s.as_str(), &|c| c.pretrain.grid.strategy = s))
                .collect(),
            Ablation::Rope => vec![
                with("rope_on", &|c| c.pretrain.encoder.rope.enabled = true),
                with("rope_off", &|c| c.pretrain.encoder.rope.enabled = false),
            ],
            Ablation::Blinding => vec![
                with("at_loading", &|c| c.pretrain.modality.stage = BlindingStage::AtLoading),
                with("off", &|c| c.pretrain.modality.stage = BlindingStage::Off),
            ],
            Ablation::ObjectAug => vec![
                with("so3", &|c| c.pretrain.aug.object_rotation = ObjectRotation::So3),
                with("scene", &|c| c.pretrain.aug.object_rotation = ObjectRotation::Scene),
            ],
        }
    }

    fn conditions(self) -> &'static [Condition] {
        const DROP: Condition = Condition {
            drop_color: true,
            drop_normal: false,
        };
        match self {
            Ablation::Blinding => &[Condition::FULL, DROP],
            _ => &[Condition::FULL],
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown ablation `{s}` (expected grid|rope|blinding|object-aug)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub variant: String,
    pub domain: Domain,
    pub condition: &'static str,
    pub miou: f64,
    pub macc: f64,
    pub all_acc: f64,
    /// Object rows only.
    pub gravity: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub ablation: Ablation,
    pub rows: Vec<ReportRow>,
}

impl AblationReport {
    /// Mean mIoU over domains of one variant under one condition.
    pub fn mean_miou(&self, variant: &str, condition: &str) -> Option<f64> {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.variant == variant && r.condition == condition)
            .map(|r| r.miou)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn gravity(&self, variant: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.variant == variant && r.gravity.is_some()).and_then(|r| r.gravity)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        if self.ablation == Ablation::Grid {
            out.push_str("strategy,domain,mIoU,mAcc,allAcc\n");
            for r in &self.rows {
                out.push_str(&format!("{},{},{:.6},{:.6},{:.6}\n", r.variant, r.domain, r.miou, r.macc, r.all_acc));
            }
        } else {
            out.push_str("variant,domain,condition,mIoU,mAcc,allAcc,gravity\n");
            for r in &self.rows {
                let g = r.gravity.map(|g| format!("{g:.6}")).unwrap_or_default();
                out.push_str(&format!(
                    "{},{},{},{:.6},{:.6},{:.6},{}\n",
                    r.variant, r.domain, r.condition, r.miou, r.macc, r.all_acc, g
                ));
            }
        }
        out
    }
}

/// Trains every variant of `ablation` on shared data with shared seeds,
/// probes each on a shared held-out set, and averages every metric over
/// `data.repeats` consecutive seeds.
pub fn ablate(ablation: Ablation, cfg: &Config, log: &mut dyn Write) -> Result<AblationReport> {
    cfg.validate()?;
    let variants = ablation.variants(cfg);
    let mut rows: Vec<ReportRow> = Vec::new();
    let repeats = cfg.data.repeats;
    for r in 0..repeats {
        let seed = cfg.data.seed.wrapping_add(r as u64);
        let data = train_set(cfg.data.train_per_domain, seed);
        let held = eval_set(cfg.data.eval_per_domain, seed);
        let mut k = 0;
        for (name, c) in &variants {
            writeln!(log, "# {ablation} {name} seed {seed}")?;
            let out = train(&data, &c.pretrain, derive_seed(&[seed, 1]), log)?;
            let enc = out.state.encoder()?;
            for &cond in ablation.conditions() {
                let Evaluation { domains, gravity } =
                    evaluate(&enc, &out.state.teacher, &held, &c.pretrain.grid, &c.probe, derive_seed(&[seed, 2]), cond)?;
                for (d, rep) in domains {
                    let gravity = if d == Domain::Object { gravity } else { None };
                    if r == 0 {
                        rows.push(ReportRow {
                            variant: name.clone(),
                            domain: d,
                            condition: cond.name(),
                            miou: 0.0,
                            macc: 0.0,
                            all_acc: 0.0,
                            gravity: gravity.map(|_| 0.0),
                        });
                    }
                    let row = &mut rows[k];
                    let w = 1.0 / repeats as f64;
                    row.miou += w * rep.miou;
                    row.macc += w * rep.macc;
                    row.all_acc += w * rep.all_acc;
                    if let (Some(acc), Some(g)) = (row.gravity.as_mut(), gravity) {
                        *acc += w * g;
                    }
                    k += 1;
                }
            }
        }
    }
    Ok(AblationReport { ablation, rows })
}
