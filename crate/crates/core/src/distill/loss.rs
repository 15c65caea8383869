use super::DistillError;
use crate::autodiff::{Array, Tape, Var};
use crate::scalar::Scalar;

/// Probability vector over classes.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbDist {
    probs: Vec<f64>,
}

impl ProbDist {
    pub fn new(probs: Vec<f64>) -> Result<Self, DistillError> {
        let sum: f64 = probs.iter().sum();
        if probs.is_empty() || probs.iter().any(|p| p.is_nan() || *p < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(DistillError::NotADistribution { sum });
        }
        Ok(ProbDist { probs })
    }

    /// `softmax(logits / tau)`.
    pub fn softened(logits: &[f64], tau: f64) -> Result<Self, DistillError> {
        check_tau(tau)?;
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(DistillError::NonFiniteLogits { which: "input" });
        }
        let lp = log_softmax(logits, tau);
        ProbDist::new(lp.into_iter().map(f64::exp).collect())
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// `KL(self ‖ other)`; terms with zero mass in `self` contribute nothing.
    pub fn kl_divergence(&self, other: &ProbDist) -> f64 {
        self.probs.iter().zip(&other.probs).filter(|(p, _)| **p > 0.0).map(|(p, q)| p * (p.ln() - q.ln())).sum()
    }
}

fn check_tau(tau: f64) -> Result<(), DistillError> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(DistillError::BadTemperature(tau))
    }
}

/// Same arithmetic as the tape's log-softmax so identical logits cancel exactly.
fn log_softmax(row: &[f64], tau: f64) -> Vec<f64> {
    let scaled: Vec<f64> = row.iter().map(|v| v * (1.0 / tau)).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = scaled.iter().map(|v| (v - max).exp()).sum();
    let shift = max + total.ln();
    scaled.into_iter().map(|v| v - shift).collect()
}

/// `τ² · KL(softmax(q_t/τ) ‖ softmax(q_s/τ))` for one pair of logit vectors.
pub fn kd_loss_value(q_t: &[f64], q_s: &[f64], tau: f64) -> Result<f64, DistillError> {
    check_tau(tau)?;
    if q_t.len() != q_s.len() || q_t.is_empty() {
        return Err(DistillError::LengthMismatch { teacher: vec![q_t.len()], student: vec![q_s.len()] });
    }
    if q_t.iter().any(|v| !v.is_finite()) {
        return Err(DistillError::NonFiniteLogits { which: "teacher" });
    }
    if q_s.iter().any(|v| !v.is_finite()) {
        return Err(DistillError::NonFiniteLogits { which: "student" });
    }
    let (lt, ls) = (log_softmax(q_t, tau), log_softmax(q_s, tau));
    let kl: f64 = lt.iter().zip(&ls).map(|(a, b)| a.exp() * (a - b)).sum();
    Ok((tau * tau * kl).max(0.0))
}

/// Cross-entropy of `softmax(q_s)` against a one-hot label.
pub fn hard_label_loss_value(q_s: &[f64], label: usize) -> Result<f64, DistillError> {
    if label >= q_s.len() {
        return Err(DistillError::LabelOutOfRange { label, num_classes: q_s.len() });
    }
    if q_s.iter().any(|v| !v.is_finite()) {
        return Err(DistillError::NonFiniteLogits { which: "student" });
    }
    Ok(-log_softmax(q_s, 1.0)[label])
}

fn rows_of(shape: &[usize]) -> usize {
    if shape.len() > 1 {
        shape[..shape.len() - 1].iter().product()
    } else {
        1
    }
}

/// Batch-mean distillation loss recorded on `tape`. The teacher logits enter
/// as a constant, so gradients reach the student only.
pub fn kd_loss<T: Scalar>(tape: &mut Tape<T>, teacher: &Array<T>, student: Var, tau: f64) -> Result<Var, DistillError> {
    check_tau(tau)?;
    let shape = tape.value(student).shape().to_vec();
    if teacher.shape() != shape.as_slice() || shape.is_empty() {
        return Err(DistillError::LengthMismatch { teacher: teacher.shape().to_vec(), student: shape });
    }
    if !teacher.all_finite() {
        return Err(DistillError::NonFiniteLogits { which: "teacher" });
    }
    if !tape.value(student).all_finite() {
        return Err(DistillError::NonFiniteLogits { which: "student" });
    }
    let k = shape[shape.len() - 1];
    let rows = rows_of(&shape) as f64;
    let mut probs = Vec::with_capacity(teacher.len());
    let mut entropy_term = Vec::with_capacity(teacher.len());
    for row in teacher.to_f64_vec().chunks(k) {
        for lp in log_softmax(row, tau) {
            let p = lp.exp();
            probs.push(T::of(p));
            entropy_term.push(T::of(p * lp));
        }
    }
    // Σ p·log p, summed exactly as the tape sums Σ p·log q.
    let self_term = crate::scalar::sum_f64(&entropy_term);
    let p = tape.constant(Array::new(shape, probs)?);
    let scaled = tape.scale(student, T::of(1.0 / tau))?;
    let log_q = tape.log_softmax(scaled)?;
    let cross = tape.mul(p, log_q)?;
    let cross = tape.sum(cross)?;
    let c = tau * tau / rows;
    let neg = tape.scale(cross, T::of(-c))?;
    let offset = tape.constant(Array::scalar(T::of(c * self_term)));
    let kl = tape.add(neg, offset)?;
    Ok(tape.relu(kl)?)
}

/// Batch-mean cross-entropy against hard labels, recorded on `tape`.
pub fn hard_label_loss<T: Scalar>(tape: &mut Tape<T>, student: Var, labels: &[usize]) -> Result<Var, DistillError> {
    let shape = tape.value(student).shape().to_vec();
    let k =
        *shape.last().ok_or(DistillError::LengthMismatch { teacher: vec![labels.len()], student: shape.clone() })?;
    if rows_of(&shape) != labels.len() {
        return Err(DistillError::LengthMismatch { teacher: vec![labels.len()], student: shape });
    }
    let mut one_hot = vec![T::zero(); labels.len() * k];
    for (i, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(DistillError::LabelOutOfRange { label: l, num_classes: k });
        }
        one_hot[i * k + l] = T::one();
    }
    let target = tape.constant(Array::new(shape, one_hot)?);
    let log_q = tape.log_softmax(student)?;
    let picked = tape.mul(target, log_q)?;
    let total = tape.sum(picked)?;
    Ok(tape.scale(total, T::of(-1.0 / labels.len() as f64))?)
}
