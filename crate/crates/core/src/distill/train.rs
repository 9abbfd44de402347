use std::io::Write;

use ndarray::Array1;
use rayon::prelude::*;

use super::loss::{cross_entropy_pairs, ema_update, mean_entropy, teacher_probs, update_center, ProjectionHead};
use super::optim::{clip_grad_norm, cosine_lr, AdamW};
use super::views::{make_views, Sample, ViewPair};
use super::PretrainConfig;
use crate::encoder::{Encoder, Params};
use crate::error::{Error, Result};
use crate::rng::{rng_for, PfRng};
use rand::Rng;

pub const METRICS_HEADER: &str = "step,loss,pairs,teacher_entropy,lr";

const INIT_STREAM: u64 = 0x1417;
const BATCH_STREAM: u64 = 0xba7c;
const VIEW_STREAM: u64 = 0x71e5;

/// Student, EMA teacher and the teacher-logit center.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillState {
    pub config: PretrainConfig,
    pub student: Params,
    pub student_head: Params,
    pub teacher: Params,
    pub teacher_head: Params,
    pub center: Array1<f64>,
}

impl DistillState {
    /// Fresh student and head; the teacher starts as an exact copy.
    pub fn init(config: &PretrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let enc = Encoder::new(config.encoder.clone())?;
        let mut rng = rng_for(&[seed, INIT_STREAM]);
        let student = enc.init_params(&mut rng);
        let student_head = ProjectionHead::init(config.encoder.out_channels, config.distill.prototypes, &mut rng);
        Ok(DistillState {
            config: config.clone(),
            teacher: student.clone(),
            teacher_head: student_head.clone(),
            student,
            student_head,
            center: Array1::zeros(config.distill.prototypes),
        })
    }

    pub fn encoder(&self) -> Result<Encoder> {
        Encoder::new(self.config.encoder.clone())
    }
}

/// One row of the metrics log, plus the matched-pair cosine similarity.
#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub pairs: usize,
    pub teacher_entropy: f64,
    pub lr: f64,
    /// Mean cosine similarity of matched student and teacher features.
    pub cosine: f64,
}

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.9},{},{:.9},{:.9e}",
            self.step, self.loss, self.pairs, self.teacher_entropy, self.lr
        )
    }
}

pub struct TrainOutput {
    pub state: DistillState,
    pub metrics: Vec<StepMetrics>,
}

struct SampleOut {
    loss: f64,
    pairs: usize,
    grads: Params,
    head_grads: Params,
    logit_sum: Array1<f64>,
    teacher_rows: usize,
    entropy_sum: f64,
    cosine_sum: f64,
}

fn cosine(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    let d = a.dot(&a).sqrt() * b.dot(&b).sqrt();
    if d > 0.0 {
        a.dot(&b) / d
    } else {
        0.0
    }
}

fn sample_pass(enc: &Encoder, state: &DistillState, vp: &ViewPair, rng: &mut PfRng) -> Result<SampleOut> {
    let dc = &state.config.distill;
    let t = &vp.teacher;
    let t_geom = enc.geometry(&t.cloud.coords, t.grid, None::<&mut PfRng>)?;
    let t_feat = enc.features(&state.teacher, t.features().view(), &t_geom)?;
    let t_logits = ProjectionHead::forward(&state.teacher_head, t_feat.view());
    let pt = teacher_probs(t_logits.view(), state.center.view(), dc.tau_teacher);

    let mut grads = state.student.zeros_like();
    let mut head_grads = state.student_head.zeros_like();
    let mut loss = 0.0;
    let mut pairs = 0;
    let mut cosine_sum = 0.0;
    for (v, view) in vp.students().enumerate() {
        let matched = vp.loss_pairs(v);
        if matched.is_empty() {
            continue;
        }
        let geom = enc.geometry(&view.cloud.coords, view.grid, Some(&mut *rng))?;
        let masked = (v == 0).then_some(view.masked.as_slice());
        let (s_feat, cache) = enc.forward(&state.student, view.features().view(), &geom, masked)?;
        let s_logits = ProjectionHead::forward(&state.student_head, s_feat.view());
        let (l, d_logits) = cross_entropy_pairs(pt.view(), s_logits.view(), &matched, dc.tau_student);
        let (hg, d_feat) = ProjectionHead::backward(&state.student_head, s_feat.view(), d_logits.view());
        let g = enc.backward(&state.student, &cache, &geom, d_feat.view())?;
        grads.add_scaled(1.0, &g);
        head_grads.add_scaled(1.0, &hg);
        loss += l;
        pairs += matched.len();
        cosine_sum += matched
            .iter()
            .map(|&(s, t)| cosine(s_feat.row(s), t_feat.row(t)))
            .sum::<f64>();
    }
    Ok(SampleOut {
        loss,
        pairs,
        grads,
        head_grads,
        logit_sum: t_logits.sum_axis(ndarray::Axis(0)),
        teacher_rows: t_logits.nrows(),
        entropy_sum: mean_entropy(pt.view()) * pt.nrows() as f64,
        cosine_sum,
    })
}

/// Runs `config.train.steps` distillation steps. Metrics rows are written
/// to `log` after [`METRICS_HEADER`]. Identical inputs and seed give
/// identical logs and parameters.
pub fn train(dataset: &[Sample], config: &PretrainConfig, seed: u64, log: &mut dyn Write) -> Result<TrainOutput> {
    if dataset.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    let mut state = DistillState::init(config, seed)?;
    let enc = state.encoder()?;
    let tc = &config.train;
    let mut opt = AdamW::new(&state.student, tc.beta1, tc.beta2, tc.weight_decay);
    let mut head_opt = AdamW::new(&state.student_head, tc.beta1, tc.beta2, tc.weight_decay);
    writeln!(log, "{METRICS_HEADER}")?;
    let mut metrics = Vec::with_capacity(tc.steps);

    for step in 0..tc.steps {
        let lr = cosine_lr(tc.lr, step, tc.steps);
        let mut batch_rng = rng_for(&[seed, BATCH_STREAM, step as u64]);
        let picks: Vec<usize> = (0..tc.batch_size)
            .map(|_| batch_rng.random_range(0..dataset.len()))
            .collect();
        let outs: Vec<Result<Option<SampleOut>>> = picks
            .par_iter()
            .enumerate()
            .map(|(slot, &i)| {
                let mut rng = rng_for(&[seed, VIEW_STREAM, step as u64, slot as u64]);
                let vp = match make_views(&dataset[i], config, &mut rng) {
                    Ok(vp) => vp,
                    Err(Error::DegenerateCrop { .. }) => return Ok(None),
                    Err(e) => return Err(e),
                };
                sample_pass(&enc, &state, &vp, &mut rng).map(Some)
            })
            .collect();

        let mut grads = state.student.zeros_like();
        let mut head_grads = state.student_head.zeros_like();
        let mut loss = 0.0;
        let mut pairs = 0;
        let mut logit_sum = Array1::zeros(config.distill.prototypes);
        let mut rows = 0;
        let mut entropy = 0.0;
        let mut cos = 0.0;
        for out in outs {
            let Some(o) = out? else { continue };
            grads.add_scaled(1.0, &o.grads);
            head_grads.add_scaled(1.0, &o.head_grads);
            loss += o.loss;
            pairs += o.pairs;
            logit_sum += &o.logit_sum;
            rows += o.teacher_rows;
            entropy += o.entropy_sum;
            cos += o.cosine_sum;
        }
        if pairs == 0 {
            return Err(Error::NoCorrespondences);
        }
        let loss = loss / pairs as f64;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        let inv = 1.0 / pairs as f64;
        grads.scale(inv);
        head_grads.scale(inv);
        clip_grad_norm(&mut [&mut grads, &mut head_grads], tc.clip_norm);
        opt.step(&mut state.student, &grads, lr);
        head_opt.step(&mut state.student_head, &head_grads, lr);
        ema_update(&mut state.teacher, &state.student, config.distill.momentum)?;
        ema_update(&mut state.teacher_head, &state.student_head, config.distill.momentum)?;
        update_center(&mut state.center, &logit_sum, rows, config.distill.center_momentum);

        let m = StepMetrics {
            step,
            loss,
            pairs,
            teacher_entropy: entropy / rows.max(1) as f64,
            lr,
            cosine: cos * inv,
        };
        writeln!(log, "{}", m.csv_row())?;
        metrics.push(m);
    }
    Ok(TrainOutput { state, metrics })
}

/// Matched-pair cosine similarity and loss of the current state on fixed
/// view pairs, without updating anything.
pub fn evaluate_pairs(state: &DistillState, pairs: &[ViewPair], seed: u64) -> Result<(f64, f64)> {
    let enc = state.encoder()?;
    let mut loss = 0.0;
    let mut cos = 0.0;
    let mut n = 0;
    for (k, vp) in pairs.iter().enumerate() {
        let mut rng = rng_for(&[seed, k as u64]);
        let o = sample_pass(&enc, state, vp, &mut rng)?;
        loss += o.loss;
        cos += o.cosine_sum;
        n += o.pairs;
    }
    if n == 0 {
        return Err(Error::NoCorrespondences);
    }
    Ok((loss / n as f64, cos / n as f64))
}
