//! Training objectives with analytic gradients.
//!
//! Every loss returns its batch-mean value and the gradient with respect to
//! each differentiable input, in argument order.

use crate::error::{bail, Result};
use crate::linalg::{dot, matmul, matmul_nt, matmul_tn, Matrix};

/// Norm floor for L2 normalization (vectors shorter than this are divided by
/// the floor instead of their norm).
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub value: f64,
    pub grads: Vec<Matrix>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AmsParams {
    pub scale: f64,
    pub margin: f64,
}

impl Default for AmsParams {
    fn default() -> Self {
        AmsParams { scale: 30.0, margin: 0.2 }
    }
}

impl AmsParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) {
            bail!(Config, "AM-softmax scale must be positive, got {}", self.scale);
        }
        if !(self.margin >= 0.0) {
            bail!(Config, "AM-softmax margin must be non-negative, got {}", self.margin);
        }
        Ok(())
    }
}

/// Row-normalized copy plus the original row norms.
fn normalize_rows(x: &Matrix) -> (Matrix, Vec<f64>) {
    let mut out = x.clone();
    let mut norms = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let n = dot(x.row(r), x.row(r)).sqrt();
        let d = n.max(NORM_EPS);
        out.row_mut(r).iter_mut().for_each(|v| *v /= d);
        norms.push(n);
    }
    (out, norms)
}

/// Chain rule through `x ↦ x / max(‖x‖, eps)` applied row-wise.
fn normalize_rows_backward(unit: &Matrix, norms: &[f64], d_unit: &Matrix) -> Matrix {
    let mut out = d_unit.clone();
    for r in 0..unit.rows() {
        let n = norms[r];
        let row = out.row_mut(r);
        if n > NORM_EPS {
            let proj = dot(d_unit.row(r), unit.row(r));
            for (g, u) in row.iter_mut().zip(unit.row(r)) {
                *g = (*g - proj * u) / n;
            }
        } else {
            row.iter_mut().for_each(|g| *g /= NORM_EPS);
        }
    }
    out
}

/// Cosine similarities between each embedding row and each class column,
/// with the normalized operands kept for the backward pass.
pub struct CosineHead {
    unit_emb: Matrix,
    emb_norms: Vec<f64>,
    /// classes as rows (N×d), normalized
    unit_cls: Matrix,
    cls_norms: Vec<f64>,
    /// B×N
    pub cosines: Matrix,
}

impl CosineHead {
    pub fn new(embeddings: &Matrix, class_weights: &Matrix) -> Result<Self> {
        if embeddings.cols() != class_weights.rows() {
            bail!(
                Shape,
                "embedding dim {} does not match class weight rows {}",
                embeddings.cols(),
                class_weights.rows()
            );
        }
        let (unit_emb, emb_norms) = normalize_rows(embeddings);
        let (unit_cls, cls_norms) = normalize_rows(&class_weights.transpose());
        let cosines = matmul_nt(&unit_emb, &unit_cls)?;
        Ok(CosineHead { unit_emb, emb_norms, unit_cls, cls_norms, cosines })
    }

    /// Gradients w.r.t. embeddings (B×d) and class weights (d×N) given
    /// `∂L/∂cos` (B×N).
    pub fn backward(&self, d_cos: &Matrix) -> (Matrix, Matrix) {
        let d_unit_emb = matmul(d_cos, &self.unit_cls).expect("head shapes");
        let d_unit_cls = matmul_tn(d_cos, &self.unit_emb).expect("head shapes");
        let d_emb = normalize_rows_backward(&self.unit_emb, &self.emb_norms, &d_unit_emb);
        let d_cls = normalize_rows_backward(&self.unit_cls, &self.cls_norms, &d_unit_cls).transpose();
        (d_emb, d_cls)
    }

    /// Scaled cosine logits `s·cos`, the output-layer scores.
    pub fn logits(&self, scale: f64) -> Matrix {
        let mut z = self.cosines.clone();
        z.scale(scale);
        z
    }
}

/// `−log softmax(z)[y]` and the softmax, computed relative to `z[y]` so a
/// near-zero loss keeps its relative precision.
fn nll_row(z: &[f64], y: usize) -> (f64, Vec<f64>) {
    let top = z.iter().enumerate().filter(|&(j, _)| j != y).map(|(_, v)| v - z[y]).fold(0.0f64, f64::max);
    let others: f64 = z.iter().enumerate().filter(|&(j, _)| j != y).map(|(_, v)| (v - z[y] - top).exp()).sum();
    let nll = if top == 0.0 { others.ln_1p() } else { top + ((-top).exp() + others).ln() };
    let probs = z.iter().map(|v| (v - z[y] - nll).exp()).collect();
    (nll, probs)
}

fn log_softmax_row(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

fn check_labels(labels: &[usize], batch: usize, classes: usize) -> Result<()> {
    if labels.len() != batch {
        bail!(Shape, "{} labels for a batch of {batch}", labels.len());
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
        bail!(Config, "label {l} out of range for {classes} classes");
    }
    Ok(())
}

/// Additive-margin softmax: cross-entropy over `s·(cos θ_j − m·[j = y])`.
/// Returns grads `[∂/∂embeddings, ∂/∂class_weights]`.
pub fn ams_loss(embeddings: &Matrix, class_weights: &Matrix, labels: &[usize], p: AmsParams) -> Result<LossOutput> {
    let head = CosineHead::new(embeddings, class_weights)?;
    ams_from_head(&head, labels, p)
}

pub fn ams_from_head(head: &CosineHead, labels: &[usize], p: AmsParams) -> Result<LossOutput> {
    p.validate()?;
    let (b, n) = head.cosines.shape();
    check_labels(labels, b, n)?;
    let mut d_cos = Matrix::zeros(b, n);
    let mut total = 0.0;
    for i in 0..b {
        let y = labels[i];
        let z: Vec<f64> = head
            .cosines
            .row(i)
            .iter()
            .enumerate()
            .map(|(j, c)| p.scale * (c - if j == y { p.margin } else { 0.0 }))
            .collect();
        let (nll, probs) = nll_row(&z, y);
        total += nll;
        let rest: f64 = probs.iter().enumerate().filter(|&(j, _)| j != y).map(|(_, q)| q).sum();
        for (j, (g, q)) in d_cos.row_mut(i).iter_mut().zip(&probs).enumerate() {
            let d = if j == y { -rest } else { *q };
            *g = p.scale * d / b as f64;
        }
    }
    let (de, dc) = head.backward(&d_cos);
    Ok(LossOutput { value: total / b as f64, grads: vec![de, dc] })
}

fn same_shape(a: &Matrix, b: &Matrix, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        bail!(Shape, "{what}: student {:?} vs teacher {:?}", a.shape(), b.shape());
    }
    if a.rows() == 0 || a.cols() == 0 {
        bail!(Shape, "{what}: empty batch");
    }
    Ok(())
}

/// Batch mean of `KL(softmax(teacher/T) ‖ softmax(student/T))`; the teacher
/// is constant. Grad is w.r.t. the student logits.
pub fn kd_kld(student_logits: &Matrix, teacher_logits: &Matrix, temperature: f64) -> Result<LossOutput> {
    same_shape(student_logits, teacher_logits, "kd_kld")?;
    if !(temperature > 0.0) {
        bail!(Config, "temperature must be positive");
    }
    let (b, n) = student_logits.shape();
    let mut grad = Matrix::zeros(b, n);
    let mut total = 0.0;
    for i in 0..b {
        let s: Vec<f64> = student_logits.row(i).iter().map(|v| v / temperature).collect();
        let t: Vec<f64> = teacher_logits.row(i).iter().map(|v| v / temperature).collect();
        let (ls, lt) = (log_softmax_row(&s), log_softmax_row(&t));
        for j in 0..n {
            let pt = lt[j].exp();
            total += pt * (lt[j] - ls[j]);
            grad.set(i, j, (ls[j].exp() - pt) / (temperature * b as f64));
        }
    }
    Ok(LossOutput { value: (total / b as f64).max(0.0), grads: vec![grad] })
}

/// Mean over batch and dimensions of the squared difference.
pub fn kd_mse(student: &Matrix, teacher: &Matrix) -> Result<LossOutput> {
    same_shape(student, teacher, "kd_mse")?;
    let count = (student.rows() * student.cols()) as f64;
    let diff = student.sub(teacher)?;
    let value = diff.as_slice().iter().map(|d| d * d).sum::<f64>() / count;
    let mut grad = diff;
    grad.scale(2.0 / count);
    Ok(LossOutput { value, grads: vec![grad] })
}

/// Batch mean of `1 − cos(student_i, teacher_i)`.
pub fn kd_cos(student: &Matrix, teacher: &Matrix) -> Result<LossOutput> {
    same_shape(student, teacher, "kd_cos")?;
    let b = student.rows();
    let mut grad = Matrix::zeros(b, student.cols());
    let mut total = 0.0;
    for i in 0..b {
        let (s, t) = (student.row(i), teacher.row(i));
        let (ns, nt) = (dot(s, s).sqrt(), dot(t, t).sqrt());
        if ns == 0.0 || nt == 0.0 {
            bail!(Numerical, "kd_cos: zero-norm vector in batch row {i}");
        }
        let cos = dot(s, t) / (ns * nt);
        total += 1.0 - cos;
        for (g, (sv, tv)) in grad.row_mut(i).iter_mut().zip(s.iter().zip(t)) {
            *g = -(tv / (ns * nt) - cos * sv / (ns * ns)) / b as f64;
        }
    }
    Ok(LossOutput { value: total / b as f64, grads: vec![grad] })
}

/// `α·L_KD + (1−α)·L_AMS`, gradients combined the same way.
pub fn combined_loss(kd: &LossOutput, ams: &LossOutput, alpha: f64) -> Result<LossOutput> {
    if !(0.0..=1.0).contains(&alpha) {
        bail!(Config, "alpha {alpha} outside [0, 1]");
    }
    if kd.grads.len() != ams.grads.len() || kd.grads.iter().zip(&ams.grads).any(|(a, b)| a.shape() != b.shape()) {
        bail!(Shape, "combined_loss: incompatible gradient shapes");
    }
    let grads = kd
        .grads
        .iter()
        .zip(&ams.grads)
        .map(|(gk, ga)| {
            let data = gk.as_slice().iter().zip(ga.as_slice()).map(|(k, a)| alpha * k + (1.0 - alpha) * a).collect();
            Matrix::from_vec(gk.rows(), gk.cols(), data)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LossOutput { value: alpha * kd.value + (1.0 - alpha) * ams.value, grads })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateDecision {
    pub open: bool,
    pub cosine: f64,
    pub grad: Vec<f64>,
}

/// Gradient-cosine-similarity gate: the distillation gradient joins the task
/// gradient (combined with weight `alpha`) only when their cosine is strictly
/// positive; otherwise the task gradient is used alone. A zero-norm gradient
/// closes the gate.
pub fn gcs_gate(grad_kd: &[f64], grad_ams: &[f64], alpha: f64) -> GateDecision {
    assert_eq!(grad_kd.len(), grad_ams.len(), "gcs_gate: gradient lengths differ");
    let cosine = gradient_cosine(grad_kd, grad_ams);
    if cosine > 0.0 {
        let grad = grad_kd.iter().zip(grad_ams).map(|(k, a)| alpha * k + (1.0 - alpha) * a).collect();
        GateDecision { open: true, cosine, grad }
    } else {
        GateDecision { open: false, cosine, grad: grad_ams.to_vec() }
    }
}

/// Cosine between two flattened gradients; 0 when either is zero.
pub fn gradient_cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use proptest::prelude::*;
    use rand::Rng as _;

    const EPS: f64 = 1e-5;

    /// Central differences of `f` w.r.t. every entry of `x`.
    fn fd(x: &Matrix, f: impl Fn(&Matrix) -> f64) -> Matrix {
        let mut g = Matrix::zeros(x.rows(), x.cols());
        for i in 0..x.as_slice().len() {
            let mut p = x.clone();
            p.as_mut_slice()[i] += EPS;
            let mut m = x.clone();
            m.as_mut_slice()[i] -= EPS;
            g.as_mut_slice()[i] = (f(&p) - f(&m)) / (2.0 * EPS);
        }
        g
    }

    fn close(a: &Matrix, b: &Matrix) -> bool {
        a.as_slice().iter().zip(b.as_slice()).all(|(x, y)| (x - y).abs() <= 1e-4 * x.abs().max(y.abs()).max(1e-3))
    }

    /// Direct per-sample formula, no shared code with the implementation.
    fn ams_scalar(e: &Matrix, w: &Matrix, labels: &[usize], s: f64, m: f64) -> f64 {
        let mut total = 0.0;
        for i in 0..e.rows() {
            let ei: Vec<f64> = e.row(i).to_vec();
            let en = ei.iter().map(|v| v * v).sum::<f64>().sqrt();
            let cos: Vec<f64> = (0..w.cols())
                .map(|j| {
                    let col: Vec<f64> = (0..w.rows()).map(|r| w.get(r, j)).collect();
                    let cn = col.iter().map(|v| v * v).sum::<f64>().sqrt();
                    ei.iter().zip(&col).map(|(a, b)| a * b).sum::<f64>() / (en * cn)
                })
                .collect();
            let y = labels[i];
            let num = (s * (cos[y] - m)).exp();
            let den = num + (0..cos.len()).filter(|&j| j != y).map(|j| (s * cos[j]).exp()).sum::<f64>();
            total += -(num / den).ln();
        }
        total / e.rows() as f64
    }

    #[test]
    fn ams_matches_scalar_oracle() {
        let mut rng = substream(21, "t", &[]);
        let e = Matrix::uniform(2, 4, 1.0, &mut rng);
        let w = Matrix::uniform(4, 3, 1.0, &mut rng);
        let labels = [2, 0];
        let p = AmsParams { scale: 5.0, margin: 0.3 };
        let got = ams_loss(&e, &w, &labels, p).unwrap().value;
        assert!((got - ams_scalar(&e, &w, &labels, 5.0, 0.3)).abs() <= 1e-12);
    }

    #[test]
    fn ams_without_margin_is_softmax_cross_entropy() {
        let mut rng = substream(22, "t", &[]);
        let e = Matrix::uniform(3, 4, 1.0, &mut rng);
        let w = Matrix::uniform(4, 5, 1.0, &mut rng);
        let labels = [0, 4, 2];
        let head = CosineHead::new(&e, &w).unwrap();
        let mut ce = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let z = head.cosines.row(i);
            let lse = z.iter().map(|v| v.exp()).sum::<f64>().ln();
            ce += lse - z[y];
        }
        let got = ams_loss(&e, &w, &labels, AmsParams { scale: 1.0, margin: 0.0 }).unwrap().value;
        assert!((got - ce / 3.0).abs() <= 1e-12);
    }

    #[test]
    fn ams_single_class_is_zero() {
        let mut rng = substream(23, "t", &[]);
        let e = Matrix::uniform(3, 4, 1.0, &mut rng);
        let w = Matrix::uniform(4, 1, 1.0, &mut rng);
        assert_eq!(ams_loss(&e, &w, &[0, 0, 0], AmsParams::default()).unwrap().value, 0.0);
    }

    #[test]
    fn ams_rejects_bad_labels() {
        let e = Matrix::from_vec(1, 2, vec![1.0, 0.0]).unwrap();
        let w = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(ams_loss(&e, &w, &[2], AmsParams::default()).unwrap_err().category(), "config");
    }

    #[test]
    fn ams_is_scale_invariant_per_embedding() {
        let mut rng = substream(24, "t", &[]);
        let e = Matrix::uniform(3, 5, 1.0, &mut rng);
        let w = Matrix::uniform(5, 4, 1.0, &mut rng);
        let mut e2 = e.clone();
        e2.row_mut(1).iter_mut().for_each(|v| *v *= 7.3);
        let a = ams_loss(&e, &w, &[0, 1, 3], AmsParams::default()).unwrap().value;
        let b = ams_loss(&e2, &w, &[0, 1, 3], AmsParams::default()).unwrap().value;
        assert!((a - b).abs() <= 1e-10);
    }

    #[test]
    fn kld_cases() {
        let z = Matrix::from_vec(1, 3, vec![0.3, -1.0, 2.0]).unwrap();
        assert!(kd_kld(&z, &z, 1.0).unwrap().value.abs() <= 1e-12);
        let t = Matrix::from_vec(1, 3, vec![10.0, 0.0, 0.0]).unwrap();
        let s = Matrix::zeros(1, 3);
        let den = 10f64.exp() + 2.0;
        let p = [10f64.exp() / den, 1.0 / den, 1.0 / den];
        let want: f64 = p.iter().map(|pi| pi * (pi.ln() - (1.0f64 / 3.0).ln())).sum();
        let got = kd_kld(&s, &t, 1.0).unwrap().value;
        assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
        assert!((got - 3f64.ln()).abs() < 0.01);
        assert_eq!(kd_kld(&s, &Matrix::zeros(2, 3), 1.0).unwrap_err().category(), "shape");
    }

    #[test]
    fn mse_and_cos_cases() {
        let a = Matrix::from_vec(1, 2, vec![1.0, 0.0]).unwrap();
        let b = Matrix::from_vec(1, 2, vec![0.0, 1.0]).unwrap();
        assert_eq!(kd_mse(&a, &a).unwrap().value, 0.0);
        assert_eq!(kd_mse(&a, &b).unwrap().value, 1.0);
        assert!(kd_cos(&a, &a).unwrap().value.abs() <= 1e-15);
        let mut neg = a.clone();
        neg.scale(-1.0);
        assert!((kd_cos(&a, &neg).unwrap().value - 2.0).abs() <= 1e-15);
        assert_eq!(kd_cos(&a, &Matrix::zeros(1, 2)).unwrap_err().category(), "numerical");

        let mut rng = substream(25, "t", &[]);
        let s = Matrix::uniform(3, 4, 1.0, &mut rng);
        let t = Matrix::uniform(3, 4, 1.0, &mut rng);
        let want = (0..12).map(|i| (s.as_slice()[i] - t.as_slice()[i]).powi(2)).sum::<f64>() / 12.0;
        assert!((kd_mse(&s, &t).unwrap().value - want).abs() <= 1e-12);
    }

    #[test]
    fn combined_endpoints() {
        let mut rng = substream(26, "t", &[]);
        let e = Matrix::uniform(2, 3, 1.0, &mut rng);
        let w = Matrix::uniform(3, 3, 1.0, &mut rng);
        let ams = ams_loss(&e, &w, &[0, 1], AmsParams::default()).unwrap();
        let t = Matrix::uniform(2, 3, 1.0, &mut rng);
        let mut kd = kd_mse(&e, &t).unwrap();
        kd.grads.push(Matrix::zeros(3, 3));
        let c0 = combined_loss(&kd, &ams, 0.0).unwrap();
        assert_eq!(c0.value, ams.value);
        assert_eq!(c0.grads, ams.grads);
        let c1 = combined_loss(&kd, &ams, 1.0).unwrap();
        assert_eq!(c1.value, kd.value);
        assert_eq!(c1.grads, kd.grads);
        let half = combined_loss(&kd, &ams, 0.5).unwrap();
        assert!((half.value - (kd.value + ams.value) / 2.0).abs() <= 1e-15);
        assert!(combined_loss(&kd, &ams, 1.5).is_err());
    }

    #[test]
    fn gate_cases() {
        let g = vec![1.0, -2.0, 0.5];
        let neg: Vec<f64> = g.iter().map(|v| -v).collect();
        let open = gcs_gate(&g, &g, 0.5);
        assert!(open.open && (open.cosine - 1.0).abs() < 1e-15);
        let closed = gcs_gate(&neg, &g, 0.5);
        assert!(!closed.open);
        assert_eq!(closed.grad, g);
        let ortho = gcs_gate(&[1.0, 0.0], &[0.0, 1.0], 0.5);
        assert!(!ortho.open && ortho.cosine == 0.0);
        let zero = gcs_gate(&[0.0, 0.0], &[0.0, 1.0], 0.5);
        assert!(!zero.open);
        assert_eq!(zero.grad, vec![0.0, 1.0]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn loss_gradients_match_finite_differences(seed in 0u64..100_000, b in 1usize..5, d in 2usize..9, n in 2usize..6) {
            let mut rng = substream(seed, "fd", &[]);
            let e = Matrix::uniform(b, d, 1.0, &mut rng);
            let w = Matrix::uniform(d, n, 1.0, &mut rng);
            let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..n)).collect();
            let p = AmsParams { scale: 4.0, margin: 0.2 };
            let out = ams_loss(&e, &w, &labels, p).unwrap();
            prop_assert!(close(&out.grads[0], &fd(&e, |x| ams_loss(x, &w, &labels, p).unwrap().value)));
            prop_assert!(close(&out.grads[1], &fd(&w, |x| ams_loss(&e, x, &labels, p).unwrap().value)));

            let s = Matrix::uniform(b, n, 2.0, &mut rng);
            let t = Matrix::uniform(b, n, 2.0, &mut rng);
            let kl = kd_kld(&s, &t, 1.0).unwrap();
            prop_assert!(kl.value >= 0.0);
            prop_assert!(close(&kl.grads[0], &fd(&s, |x| kd_kld(x, &t, 1.0).unwrap().value)));
            let kl2 = kd_kld(&s, &t, 2.0).unwrap();
            prop_assert!(close(&kl2.grads[0], &fd(&s, |x| kd_kld(x, &t, 2.0).unwrap().value)));

            let te = Matrix::uniform(b, d, 1.0, &mut rng);
            prop_assert!(close(&kd_mse(&e, &te).unwrap().grads[0], &fd(&e, |x| kd_mse(x, &te).unwrap().value)));
            prop_assert!(close(&kd_cos(&e, &te).unwrap().grads[0], &fd(&e, |x| kd_cos(x, &te).unwrap().value)));
        }

        #[test]
        fn gate_agrees_with_brute_force_dot(seed in 0u64..100_000, len in 1usize..20) {
            let mut rng = substream(seed, "gate", &[]);
            let a: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut d = 0.0;
            for i in 0..len {
                d += a[i] * b[i];
            }
            let g = gcs_gate(&a, &b, 0.5);
            prop_assert_eq!(g.open, d > 0.0);
            if g.open {
                for i in 0..len {
                    prop_assert_eq!(g.grad[i], 0.5 * a[i] + 0.5 * b[i]);
                }
            } else {
                prop_assert_eq!(&g.grad, &b);
            }
        }
    }
}
