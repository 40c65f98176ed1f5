use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Coordinates checked per parameter tensor; larger tensors are subsampled.
pub const DEFAULT_MAX_COORDS: usize = 64;

/// Compares reverse-mode gradients of `f` against central differences.
///
/// Returns the maximum over checked coordinates of
/// `|analytic − numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    grad_check_sampled(f, params, h, DEFAULT_MAX_COORDS, 0)
}

pub fn grad_check_sampled<F>(
    f: F,
    params: &[Tensor<f64>],
    h: f64,
    max_coords: usize,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&h) {
        return Err(Error::param("h", format!("step {h} outside [1e-6, 1e-3]")));
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.get_or_zeros(v, p.shape()))
        .collect();

    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|p| tape.leaf(p.clone(), false)).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        let n = param.numel();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            sample(&mut rng, n, max_coords).into_vec()
        };
        for c in coords {
            let orig = param.data()[c];
            work[pi].data_mut()[c] = orig + h;
            let plus = eval(&work)?;
            work[pi].data_mut()[c] = orig - h;
            let minus = eval(&work)?;
            work[pi].data_mut()[c] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[pi].data()[c];
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let w = Tensor::from_f64(&[3, 1], &[0.5, -1.0, 2.0]).unwrap();
        let x = Tensor::from_f64(&[2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap();
        let err = grad_check(
            |tape, v| {
                let y = tape.matmul(v[1], v[0])?;
                Ok(tape.sum(y))
            },
            &[w, x],
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn softmax_ce_toy_graph() {
        let logits = Tensor::from_f64(&[2, 3], &[0.2, -0.4, 0.9, 1.1, 0.0, -0.3]).unwrap();
        let target = Tensor::from_f64(&[2, 3], &[0.2, 0.3, 0.5, 0.6, 0.3, 0.1]).unwrap();
        let err = grad_check(
            |tape, v| tape.soft_cross_entropy(v[0], &target, 0.5),
            &[logits],
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn rejects_out_of_range_step() {
        let x = Tensor::from_f64(&[1, 1], &[1.0]).unwrap();
        let f = |tape: &mut Tape<f64>, v: &[Var]| Ok(tape.sum(v[0]));
        assert!(grad_check(f, std::slice::from_ref(&x), 1e-2).is_err());
        assert!(grad_check(f, &[x], 1e-8).is_err());
    }
}
