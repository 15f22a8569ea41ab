//! Dense numeric kernels shared by every layer.
//!
//! Everything here is pure given its inputs plus an explicitly passed RNG,
//! and runs at 64-bit precision so that finite-difference gradient checks
//! have meaningful tolerances.

use ndarray::{Array1, Array2};
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// Dense vector of 64-bit reals.
pub type Tensor1 = Array1<f64>;
/// Dense row-major matrix of 64-bit reals.
pub type Tensor2 = Array2<f64>;

/// The deterministic generator used everywhere. Same seed, same stream.
pub type Rng = ChaCha8Rng;

/// Build the crate's RNG from a 64-bit seed.
pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from a base seed and a tag path (step, slot, index...).
///
/// Used so that per-sentence randomness (dropout masks, random switch draws)
/// is independent of evaluation order and worker scheduling.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut s = splitmix64(base);
    for &t in tags {
        s = splitmix64(s ^ splitmix64(t));
    }
    s
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax (max-shift). Output sums to 1, entries in (0,1].
pub fn softmax(v: &[f64]) -> Result<Tensor1> {
    if v.is_empty() {
        return Err(Error::invalid("softmax of an empty vector"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("softmax input contains a non-finite element"));
    }
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = Tensor1::zeros(v.len());
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(v) {
        let e = (x - max).exp();
        *o = e;
        sum += e;
    }
    out.mapv_inplace(|e| e / sum);
    Ok(out)
}

/// ln Σ exp(v_i), computed with max-shift.
pub fn logsumexp(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::invalid("logsumexp of an empty vector"));
    }
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    let sum: f64 = v.iter().map(|&x| (x - max).exp()).sum();
    Ok(max + sum.ln())
}

/// Matrix of i.i.d. draws uniform on [-b, b] with b = sqrt(6 / (fan_in + fan_out)).
///
/// Shape is (fan_out, fan_in): one row per output unit, so the result is
/// directly usable as a weight applied to a column vector.
pub fn xavier_uniform(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Result<Tensor2> {
    if fan_in == 0 || fan_out == 0 {
        return Err(Error::invalid("xavier_uniform requires fan_in, fan_out >= 1"));
    }
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Ok(Tensor2::from_shape_simple_fn((fan_out, fan_in), || {
        rng.gen::<f64>() * 2.0 * bound - bound
    }))
}

/// Inverted-dropout mask: each element is 0 with probability p, else 1/(1-p).
///
/// Masks are applied only in training mode; evaluation never rescales.
pub fn dropout_mask(p: f64, len: usize, rng: &mut Rng) -> Result<Tensor1> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::invalid(format!("dropout probability {p} outside [0, 1)")));
    }
    if p == 0.0 {
        return Ok(Tensor1::ones(len));
    }
    let keep = 1.0 / (1.0 - p);
    Ok(Tensor1::from_shape_simple_fn(len, || {
        if rng.gen::<f64>() < p {
            0.0
        } else {
            keep
        }
    }))
}

/// Central-difference gradient estimate of a scalar function.
///
/// This is the independent oracle every analytic backward pass in the crate
/// is checked against; it never shares code with those passes.
pub fn finite_diff_grad(
    f: &mut dyn FnMut(&[f64]) -> Result<f64>,
    x: &[f64],
    eps: f64,
) -> Result<Vec<f64>> {
    if eps <= 0.0 {
        return Err(Error::invalid("finite_diff_grad requires eps > 0"));
    }
    let mut buf = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = buf[i];
        buf[i] = orig + eps;
        let fp = f(&buf)?;
        buf[i] = orig - eps;
        let fm = f(&buf)?;
        buf[i] = orig;
        let g = (fp - fm) / (2.0 * eps);
        if !g.is_finite() {
            return Err(Error::Numerical(format!(
                "finite difference at coordinate {i} is not finite"
            )));
        }
        grad.push(g);
    }
    Ok(grad)
}

/// Relative L2 distance between two gradient vectors, used by the
/// gradient-check tests: ||a - b|| / max(||b||, floor).
pub fn relative_l2(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm.max(1e-8)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_symmetry() {
        let p = softmax(&[0.0, 0.0, 0.0]).unwrap();
        for &x in p.iter() {
            assert!((x - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_no_overflow_on_large_inputs() {
        let p = softmax(&[1000.0, 0.0]).unwrap();
        assert!(p[0] > 1.0 - 1e-12);
        assert!(p[1] < 1e-12);
        assert!(p.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn softmax_direct_evaluation() {
        // e^{ln 3} = 3, so logits (ln 3, 0) give (3/4, 1/4).
        let p = softmax(&[3.0f64.ln(), 0.0]).unwrap();
        assert!((p[0] - 0.75).abs() < 1e-12);
        assert!((p[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_bad_input() {
        assert!(softmax(&[]).is_err());
        assert!(softmax(&[1.0, f64::NAN]).is_err());
        assert!(softmax(&[1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn logsumexp_uniform_and_singleton() {
        let v = logsumexp(&[0.0, 0.0, 0.0, 0.0]).unwrap();
        assert!((v - 4.0f64.ln()).abs() < 1e-12);
        let s = logsumexp(&[2.5]).unwrap();
        assert!((s - 2.5).abs() < 1e-15);
        assert!(logsumexp(&[]).is_err());
    }

    #[test]
    fn logsumexp_matches_direct_summation() {
        // Oracle: direct summation at 64 bits, no shift.
        let direct = (1.0f64.exp() + 2.0f64.exp() + 3.0f64.exp()).ln();
        let v = logsumexp(&[1.0, 2.0, 3.0]).unwrap();
        assert!((v - direct).abs() < 1e-12);
        assert!((v - 3.40760596).abs() < 1e-7);
    }

    #[test]
    fn xavier_respects_bound_and_seed() {
        let mut rng = rng_from_seed(7);
        let m = xavier_uniform(1, 5, &mut rng).unwrap();
        assert_eq!(m.shape(), &[5, 1]);
        assert!(m.iter().all(|x| x.abs() <= 1.0));

        let mut rng = rng_from_seed(7);
        let big = xavier_uniform(100, 100, &mut rng).unwrap();
        let bound = (6.0 / 200.0f64).sqrt();
        assert!(big.iter().all(|x| x.abs() <= bound));

        let mut r1 = rng_from_seed(42);
        let mut r2 = rng_from_seed(42);
        let a = xavier_uniform(3, 4, &mut r1).unwrap();
        let b = xavier_uniform(3, 4, &mut r2).unwrap();
        assert_eq!(a, b);

        assert!(xavier_uniform(0, 5, &mut r1).is_err());
    }

    #[test]
    fn dropout_zero_probability_is_identity() {
        let mut rng = rng_from_seed(1);
        let m = dropout_mask(0.0, 16, &mut rng).unwrap();
        assert!(m.iter().all(|&x| x == 1.0));
    }

    #[test]
    fn dropout_zero_fraction_near_p() {
        let mut rng = rng_from_seed(11);
        let n = 100_000;
        let m = dropout_mask(0.2, n, &mut rng).unwrap();
        let zeros = m.iter().filter(|&&x| x == 0.0).count() as f64 / n as f64;
        assert!((0.19..=0.21).contains(&zeros), "zero fraction {zeros}");
        let keep = 1.0 / 0.8;
        assert!(m.iter().all(|&x| x == 0.0 || (x - keep).abs() < 1e-15));
    }

    #[test]
    fn dropout_rejects_bad_probability() {
        let mut rng = rng_from_seed(1);
        assert!(dropout_mask(1.0, 4, &mut rng).is_err());
        assert!(dropout_mask(-0.1, 4, &mut rng).is_err());
    }

    #[test]
    fn finite_diff_quadratic_and_constant() {
        let mut f = |x: &[f64]| Ok(x[0] * x[0]);
        let g = finite_diff_grad(&mut f, &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-8);

        let mut c = |_: &[f64]| Ok(4.25);
        let g = finite_diff_grad(&mut c, &[1.0, 2.0], 1e-5).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn derive_seed_is_order_sensitive_and_stable() {
        let a = derive_seed(9, &[1, 2]);
        let b = derive_seed(9, &[2, 1]);
        assert_ne!(a, b);
        assert_eq!(a, derive_seed(9, &[1, 2]));
    }

    proptest! {
        #[test]
        fn softmax_lies_on_simplex(v in proptest::collection::vec(-50.0f64..50.0, 1..12)) {
            let p = softmax(&v).unwrap();
            let sum: f64 = p.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
            prop_assert!(p.iter().all(|&x| x > 0.0 && x <= 1.0));
        }

        #[test]
        fn softmax_shift_invariance(
            v in proptest::collection::vec(-20.0f64..20.0, 1..8),
            c in -100.0f64..100.0,
        ) {
            let a = softmax(&v).unwrap();
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let b = softmax(&shifted).unwrap();
            for (x, y) in a.iter().zip(b.iter()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn logsumexp_bounds(v in proptest::collection::vec(-30.0f64..30.0, 1..10)) {
            let l = logsumexp(&v).unwrap();
            let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(l >= max - 1e-12);
            prop_assert!(l <= max + (v.len() as f64).ln() + 1e-12);
        }
    }
}
