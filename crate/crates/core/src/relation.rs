//! Similarity logits, temperature-scaled relation distributions and the
//! MoCo / ReSSL / MSV / MQ / MSVQ objectives.
//!
//! Student-side logits live on a [`Tape`]; teacher-side logits are plain
//! tensors, so no gradient can reach a teacher. Every distillation term is
//! reported in cross-entropy form; `CE − H(teacher)` recovers the KL value.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Scalar, Tape, Tensor, Var};

/// Student and teacher softmax temperatures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Temperatures<T> {
    pub student: T,
    pub teacher: T,
}

impl<T: Scalar> Temperatures<T> {
    /// Requires `0 < teacher < student` so teacher targets are sharper.
    pub fn new(student: T, teacher: T) -> Result<Self> {
        let t = Self::relaxed(student, teacher)?;
        if !(teacher < student) {
            return Err(Error::param(
                "tau_t",
                format!("teacher temperature {teacher} must be below student temperature {student}"),
            ));
        }
        Ok(t)
    }

    /// Only positivity is enforced; used by analyses that compare equal temperatures.
    pub fn relaxed(student: T, teacher: T) -> Result<Self> {
        if !(student > T::zero()) {
            return Err(Error::param("tau_s", format!("must be positive, got {student}")));
        }
        if !(teacher > T::zero()) {
            return Err(Error::param("tau_t", format!("must be positive, got {teacher}")));
        }
        Ok(Temperatures { student, teacher })
    }
}

/// Which embedding/queue pair a distribution relates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RelationSource {
    /// Student view 1 against queue 1.
    P11,
    /// Teacher-1 view 2 against queue 1.
    P21,
    /// Teacher-1 view 3 against queue 1.
    P31,
    /// Student view 1 against queue 2.
    P12,
    /// Teacher-2 view 4 against queue 2.
    P42,
}

/// Row-stochastic N×Q matrix over queue entries.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationDistribution<T> {
    pub probs: Tensor<T>,
    pub source: RelationSource,
}

impl<T: Scalar> RelationDistribution<T> {
    pub fn mean_entropy(&self) -> T {
        self.probs.mean_row_entropy().expect("distribution is a matrix")
    }
}

/// Cosine similarities of unit-norm rows `z` (N×D) with unit-norm queue
/// columns (D×Q).
pub fn similarity_logits<T: Scalar>(z: &Tensor<T>, queue: &Tensor<T>) -> Result<Tensor<T>> {
    z.matmul(queue)
}

/// `softmax(logits / τ)` row-wise.
pub fn relation_distribution<T: Scalar>(
    logits: &Tensor<T>,
    temperature: T,
    source: RelationSource,
) -> Result<RelationDistribution<T>> {
    Ok(RelationDistribution {
        probs: logits.softmax_rows(temperature)?,
        source,
    })
}

/// Mean row entropy of `softmax(logits / τ)`.
pub fn teacher_entropy<T: Scalar>(logits: &Tensor<T>, temperature: T) -> Result<T> {
    logits.softmax_rows(temperature)?.mean_row_entropy()
}

fn check_pair<T: Scalar>(tape: &Tape<T>, student: Var, teacher: &Tensor<T>, op: &'static str) -> Result<()> {
    let s = tape.value(student);
    if s.shape() != teacher.shape() {
        return Err(Error::shape(op, s.shape(), teacher.shape()));
    }
    Ok(())
}

/// One distillation term: CE(softmax(teacher/τ_t) ‖ softmax(student/τ_s)).
fn distill<T: Scalar>(
    tape: &mut Tape<T>,
    student_logits: Var,
    teacher_logits: &Tensor<T>,
    temps: &Temperatures<T>,
    op: &'static str,
) -> Result<Var> {
    check_pair(tape, student_logits, teacher_logits, op)?;
    let target = teacher_logits.softmax_rows(temps.teacher)?;
    tape.soft_cross_entropy(student_logits, &target, temps.student)
}

fn average<T: Scalar>(tape: &mut Tape<T>, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(tape.scale(acc, T::one() / T::from_usize(terms.len()).expect("term count")))
}

/// InfoNCE with the positive appended as column Q+1.
///
/// `z1`: student embeddings on the tape (N×D, unit rows); `z2`: detached
/// teacher embeddings (N×D); `queue`: D×Q negatives.
pub fn loss_moco<T: Scalar>(tape: &mut Tape<T>, z1: Var, z2: &Tensor<T>, queue: &Tensor<T>, temperature: T) -> Result<Var> {
    if tape.value(z1).shape() != z2.shape() {
        return Err(Error::shape("loss_moco", tape.value(z1).shape(), z2.shape()));
    }
    let (n, _) = z2.dims2()?;
    let q = tape.constant(queue.clone());
    let negatives = tape.matmul(z1, q)?;
    let key = tape.constant(z2.clone());
    let positive = tape.row_dot(z1, key)?;
    let logits = tape.concat_cols(negatives, positive)?;
    let cols = tape.value(logits).shape()[1];
    let mut onehot = Tensor::zeros(&[n, cols]);
    for i in 0..n {
        onehot.data_mut()[i * cols + cols - 1] = T::one();
    }
    tape.soft_cross_entropy(logits, &onehot, temperature)
}

/// CE(P²¹ ‖ P¹¹).
pub fn loss_ressl<T: Scalar>(tape: &mut Tape<T>, logits11: Var, logits21: &Tensor<T>, temps: &Temperatures<T>) -> Result<Var> {
    distill(tape, logits11, logits21, temps, "loss_ressl")
}

/// ½·[CE(P²¹ ‖ P¹¹) + CE(P³¹ ‖ P¹¹)].
pub fn loss_msv<T: Scalar>(
    tape: &mut Tape<T>,
    logits11: Var,
    logits21: &Tensor<T>,
    logits31: &Tensor<T>,
    temps: &Temperatures<T>,
) -> Result<Var> {
    let a = distill(tape, logits11, logits21, temps, "loss_msv")?;
    let b = distill(tape, logits11, logits31, temps, "loss_msv")?;
    average(tape, &[a, b])
}

/// ½·[CE(P²¹ ‖ P¹¹) + CE(P⁴² ‖ P¹²)].
pub fn loss_mq<T: Scalar>(
    tape: &mut Tape<T>,
    logits11: Var,
    logits21: &Tensor<T>,
    logits12: Var,
    logits42: &Tensor<T>,
    temps: &Temperatures<T>,
) -> Result<Var> {
    let a = distill(tape, logits11, logits21, temps, "loss_mq")?;
    let b = distill(tape, logits12, logits42, temps, "loss_mq")?;
    average(tape, &[a, b])
}

/// ⅓·[CE(P²¹ ‖ P¹¹) + CE(P³¹ ‖ P¹¹) + CE(P⁴² ‖ P¹²)].
pub fn loss_msvq<T: Scalar>(
    tape: &mut Tape<T>,
    logits11: Var,
    logits12: Var,
    logits21: &Tensor<T>,
    logits31: &Tensor<T>,
    logits42: &Tensor<T>,
    temps: &Temperatures<T>,
) -> Result<Var> {
    let a = distill(tape, logits11, logits21, temps, "loss_msvq")?;
    let b = distill(tape, logits11, logits31, temps, "loss_msvq")?;
    let c = distill(tape, logits12, logits42, temps, "loss_msvq")?;
    average(tape, &[a, b, c])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn cosine_cases() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let z = t(&[1, 2], &[s, s]);
        let q = t(&[2, 3], &[1., 0., s, 0., 1., s]);
        let l = similarity_logits(&z, &q).unwrap();
        assert!((l.at(0, 0) - 0.70711).abs() < 1e-5);
        assert!((l.at(0, 2) - 1.0).abs() < 1e-15);
        let e1 = t(&[1, 2], &[1., 0.]);
        assert_eq!(similarity_logits(&e1, &t(&[2, 1], &[0., 1.])).unwrap().item(), 0.0);
    }

    #[test]
    fn relation_distribution_sharp_case() {
        let l = t(&[1, 2], &[1., 0.]);
        let p = relation_distribution(&l, 0.04, RelationSource::P21).unwrap();
        let e = (-25f64).exp();
        assert!((p.probs.at(0, 0) - 1. / (1. + e)).abs() < 1e-15);
        assert!((p.probs.at(0, 1) - e / (1. + e)).abs() < 1e-20);
        assert!(relation_distribution(&l, 0.0, RelationSource::P21).is_err());
    }

    #[test]
    fn moco_hand_case() {
        let mut tape = Tape::new();
        let z1 = tape.leaf(t(&[1, 3], &[1., 0., 0.]), true);
        let z2 = t(&[1, 3], &[1., 0., 0.]);
        let queue = t(&[3, 2], &[0., 0., 1., 0., 0., 1.]);
        let loss = loss_moco(&mut tape, z1, &z2, &queue, 0.1).unwrap();
        let expected = -((10f64).exp() / ((10f64).exp() + 2.0)).ln();
        assert!((tape.value(loss).item() - expected).abs() < 1e-15);
        assert!((expected - 9.079e-5).abs() < 1e-8);
    }

    #[test]
    fn temperatures_enforce_sharpening() {
        assert!(Temperatures::new(0.1, 0.04).is_ok());
        assert!(Temperatures::new(0.1, 0.2).is_err());
        assert!(Temperatures::new(0.1, 0.1).is_err());
        assert!(Temperatures::relaxed(0.1, 0.1).is_ok());
        assert!(Temperatures::relaxed(0.0, 0.1).is_err());
    }

    #[test]
    fn ressl_shape_mismatch() {
        let mut tape = Tape::new();
        let l11 = tape.leaf(Tensor::<f64>::zeros(&[2, 3]), true);
        let temps = Temperatures::new(0.1, 0.04).unwrap();
        assert!(loss_ressl(&mut tape, l11, &Tensor::zeros(&[2, 4]), &temps).is_err());
    }
}
