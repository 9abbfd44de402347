//! Teacher-student self-distillation with asymmetric cross-domain views.
//!
//! The teacher sees a global, unmasked view of the whole (frame-aggregated)
//! sample. The student sees an independently augmented global view with
//! Morton-contiguous patches masked out, plus small ball crops. Student
//! points are matched to teacher points that originate from the same source
//! point, and the student is trained to predict the teacher's sharpened,
//! centered prototype distribution at every match. The teacher follows the
//! student as an exponential moving average.

mod checkpoint;
mod loss;
mod optim;
mod train;
mod views;

pub use checkpoint::{read_checkpoint, read_checkpoint_from, write_checkpoint, write_checkpoint_to, Checkpoint};
pub use loss::{cross_entropy_pairs, distill_loss, ema_update, log_softmax_rows, softmax_rows, teacher_probs, ProjectionHead};
pub use optim::{clip_grad_norm, cosine_lr, AdamW};
pub use checkpoint::DistillParts;
pub use train::{evaluate_pairs, train, DistillState, StepMetrics, TrainOutput, METRICS_HEADER};
pub use views::{eval_view, make_views, Frames, Sample, View, ViewPair};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::harmonize::GridConfig;
use crate::modality::ModalityConfig;
use crate::pcdata::{Domain, DomainProfile};

/// `distill.*` configuration keys.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillConfig {
    /// Number of prototypes K of the projection head.
    pub prototypes: usize,
    pub tau_student: f64,
    pub tau_teacher: f64,
    /// EMA momentum of the teacher.
    pub momentum: f64,
    pub center_momentum: f64,
    /// Fraction ρ of patches masked in the student's global view.
    pub mask_ratio: f64,
    pub patch_size: usize,
    pub n_local: usize,
    /// Crop radius as a fraction of the view's radius about its centroid.
    pub local_fraction: f64,
    pub min_crop_points: usize,
    pub crop_attempts: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            prototypes: 256,
            tau_student: 0.1,
            tau_teacher: 0.04,
            momentum: 0.996,
            center_momentum: 0.9,
            mask_ratio: 0.4,
            patch_size: 16,
            n_local: 2,
            local_fraction: 0.4,
            min_crop_points: 8,
            crop_attempts: 10,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.prototypes < 2 {
            return Err(Error::config("distill.prototypes must be at least 2"));
        }
        if !(self.tau_student > 0.0 && self.tau_teacher > 0.0) {
            return Err(Error::config("temperatures must be positive"));
        }
        if self.tau_teacher >= self.tau_student {
            return Err(Error::config("distill.tau_teacher must be below distill.tau_student"));
        }
        for (name, v) in [
            ("distill.momentum", self.momentum),
            ("distill.center_momentum", self.center_momentum),
            ("distill.mask_ratio", self.mask_ratio),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("{name} must lie in [0, 1]")));
            }
        }
        if self.patch_size == 0 || self.crop_attempts == 0 {
            return Err(Error::config("distill.patch_size and distill.crop_attempts must be positive"));
        }
        if !(self.local_fraction > 0.0) {
            return Err(Error::config("distill.local_fraction must be positive"));
        }
        Ok(())
    }
}

/// `train.*` configuration keys.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 200,
            batch_size: 2,
            lr: 1e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            clip_norm: 3.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size must be positive"));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::config("train.lr and train.clip_norm must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("train betas must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// How object clouds are rotated during pretraining.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ObjectRotation {
    /// Independent full rotations about all three axes.
    #[default]
    So3,
    /// The scene policy: full yaw, mild roll and pitch.
    Scene,
}

impl ObjectRotation {
    pub fn as_str(self) -> &'static str {
        match self {
            ObjectRotation::So3 => "so3",
            ObjectRotation::Scene => "scene",
        }
    }
}

impl std::str::FromStr for ObjectRotation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "so3" => Ok(ObjectRotation::So3),
            "scene" => Ok(ObjectRotation::Scene),
            other => Err(Error::config(format!("unknown object rotation `{other}`"))),
        }
    }
}

/// `aug.*` configuration keys.
#[derive(Clone, Debug, PartialEq)]
pub struct AugConfig {
    pub object_rotation: ObjectRotation,
    /// Half-width of scene roll and pitch, radians.
    pub scene_roll_pitch: f64,
    pub scene_scale_jitter: f64,
    pub object_scale_jitter: f64,
    /// Bound on each shift component, in sampling-grid cells.
    pub max_shift_cells: f64,
}

impl Default for AugConfig {
    fn default() -> Self {
        let scene = DomainProfile::default_for(Domain::Indoor);
        let object = DomainProfile::default_for(Domain::Object);
        AugConfig {
            object_rotation: ObjectRotation::So3,
            scene_roll_pitch: scene.roll_pitch_range,
            scene_scale_jitter: scene.scale_jitter,
            object_scale_jitter: object.scale_jitter,
            max_shift_cells: 2.0,
        }
    }
}

impl AugConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("aug.scene_roll_pitch", self.scene_roll_pitch),
            ("aug.max_shift_cells", self.max_shift_cells),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be nonnegative")));
            }
        }
        for (name, v) in [
            ("aug.scene_scale_jitter", self.scene_scale_jitter),
            ("aug.object_scale_jitter", self.object_scale_jitter),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(format!("{name} must lie in [0, 1)")));
            }
        }
        Ok(())
    }

    /// Augmentation profile of one domain.
    pub fn profile(&self, domain: Domain, modality: &ModalityConfig) -> DomainProfile {
        let mut p = DomainProfile::default_for(domain);
        if domain.is_scene() {
            p.roll_pitch_range = self.scene_roll_pitch;
            p.scale_jitter = self.scene_scale_jitter;
        } else {
            p.scale_jitter = self.object_scale_jitter;
            if self.object_rotation == ObjectRotation::Scene {
                p.roll_pitch_range = self.scene_roll_pitch;
            }
        }
        p.color_drop_prob = modality.color_drop;
        p.normal_drop_prob = modality.normal_drop;
        p.per_point_drop_prob = modality.point_drop;
        p
    }
}

/// Everything the pretraining loop reads.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub encoder: EncoderConfig,
    pub grid: GridConfig,
    pub aug: AugConfig,
    pub modality: ModalityConfig,
    pub distill: DistillConfig,
    pub train: TrainConfig,
    /// Views larger than this are randomly subsampled.
    pub max_points: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        let grid = GridConfig::default();
        PretrainConfig {
            encoder: EncoderConfig {
                canonical_grid: grid.size,
                ..EncoderConfig::default()
            },
            grid,
            aug: AugConfig::default(),
            modality: ModalityConfig::default(),
            distill: DistillConfig::default(),
            train: TrainConfig::default(),
            max_points: 768,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.grid.validate()?;
        self.aug.validate()?;
        self.modality.validate().map_err(|e| Error::config(e.to_string()))?;
        self.distill.validate()?;
        self.train.validate()?;
        if self.max_points < self.distill.min_crop_points.max(1) {
            return Err(Error::config("data.max_points is below the minimum crop size"));
        }
        Ok(())
    }

    pub fn profile(&self, domain: Domain) -> DomainProfile {
        self.aug.profile(domain, &self.modality)
    }
}
