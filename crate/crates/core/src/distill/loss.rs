use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use super::views::ViewPair;
use crate::encoder::{Params, Tensor};
use crate::error::{Error, Result};

/// Affine map from encoder features to prototype logits.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHead;

impl ProjectionHead {
    pub const WEIGHT: &'static str = "proj.weight";
    pub const BIAS: &'static str = "proj.bias";

    pub fn init<R: Rng + ?Sized>(channels: usize, prototypes: usize, rng: &mut R) -> Params {
        let limit = (6.0 / (channels + prototypes) as f64).sqrt();
        let mut w = Tensor::zeros(Self::WEIGHT, vec![channels, prototypes]);
        w.data.iter_mut().for_each(|v| *v = rng.random_range(-limit..limit));
        Params {
            tensors: vec![w, Tensor::zeros(Self::BIAS, vec![prototypes])],
        }
    }

    pub fn forward(head: &Params, features: ArrayView2<f64>) -> Array2<f64> {
        crate::encoder::linear(features, head.tensors[0].matrix(), head.tensors[1].vector())
    }

    /// Gradients of the head and of its input given `d_logits`.
    pub fn backward(head: &Params, features: ArrayView2<f64>, d_logits: ArrayView2<f64>) -> (Params, Array2<f64>) {
        let dw = features.t().dot(&d_logits);
        let db = d_logits.sum_axis(Axis(0));
        let dx = d_logits.dot(&head.tensors[0].matrix().t());
        let mut g = head.zeros_like();
        g.tensors[0].data = dw.iter().copied().collect();
        g.tensors[1].data = db.to_vec();
        (g, dx)
    }
}

/// Row-wise `softmax(z / τ)`.
pub fn softmax_rows(z: ArrayView2<f64>, tau: f64) -> Array2<f64> {
    let mut out = z.mapv(|v| v / tau);
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row /= s;
    }
    out
}

/// Row-wise `log softmax(z / τ)`.
pub fn log_softmax_rows(z: ArrayView2<f64>, tau: f64) -> Array2<f64> {
    let mut out = z.mapv(|v| v / tau);
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// `softmax((z − center) / τ_t)`.
pub fn teacher_probs(logits: ArrayView2<f64>, center: ArrayView1<f64>, tau_teacher: f64) -> Array2<f64> {
    let centered = &logits - &center;
    softmax_rows(centered.view(), tau_teacher)
}

/// Summed cross-entropy `−Σ p_t · log p_s` over `(student, teacher)` pairs
/// and its gradient with respect to the student logits.
pub fn cross_entropy_pairs(
    teacher_p: ArrayView2<f64>,
    student_logits: ArrayView2<f64>,
    pairs: &[(usize, usize)],
    tau_student: f64,
) -> (f64, Array2<f64>) {
    let log_ps = log_softmax_rows(student_logits, tau_student);
    let mut grad = Array2::zeros(student_logits.raw_dim());
    let mut total = 0.0;
    for &(s, t) in pairs {
        let pt = teacher_p.row(t);
        let lp = log_ps.row(s);
        total -= pt.dot(&lp);
        // ∂/∂z_s of −Σ p_t log softmax(z_s/τ): (softmax(z_s/τ) − p_t)/τ,
        // using Σ p_t = 1.
        let mut g = grad.row_mut(s);
        for k in 0..pt.len() {
            g[k] += (lp[k].exp() - pt[k]) / tau_student;
        }
    }
    (total, grad)
}

/// Mean cross-entropy over every matched pair of a view pair, given the
/// teacher's and each student view's logits.
pub fn distill_loss(
    vp: &ViewPair,
    teacher_logits: ArrayView2<f64>,
    student_logits: &[Array2<f64>],
    center: ArrayView1<f64>,
    tau_student: f64,
    tau_teacher: f64,
) -> Result<f64> {
    let pt = teacher_probs(teacher_logits, center, tau_teacher);
    let mut total = 0.0;
    let mut count = 0;
    for (v, logits) in student_logits.iter().enumerate() {
        let pairs = vp.loss_pairs(v);
        total += cross_entropy_pairs(pt.view(), logits.view(), &pairs, tau_student).0;
        count += pairs.len();
    }
    if count == 0 {
        return Err(Error::NoCorrespondences);
    }
    Ok(total / count as f64)
}

/// `teacher ← m·teacher + (1 − m)·student`, elementwise.
pub fn ema_update(teacher: &mut Params, student: &Params, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::invalid(format!("momentum {m} outside [0, 1]")));
    }
    if !teacher.same_shapes(student) {
        return Err(Error::Shape("teacher and student shapes differ".into()));
    }
    for (t, s) in teacher.scalars_mut().zip(student.scalars()) {
        *t = m * *t + (1.0 - m) * s;
    }
    Ok(())
}

/// `center ← c_m·center + (1 − c_m)·mean(rows)`.
pub(crate) fn update_center(center: &mut Array1<f64>, row_sum: &Array1<f64>, rows: usize, c_m: f64) {
    if rows == 0 {
        return;
    }
    let mean = row_sum / rows as f64;
    center.zip_mut_with(&mean, |c, m| *c = c_m * *c + (1.0 - c_m) * m);
}

/// Mean row entropy of a probability matrix.
pub(crate) fn mean_entropy(p: ArrayView2<f64>) -> f64 {
    let n = p.nrows().max(1) as f64;
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>() / n
}
