//! A single LSTM cell with analytic forward and backward passes.
//!
//! Gates are packed in (input, forget, cell, output) order along the first
//! axis of the weight matrices; the checkpoint format documents the same
//! layout. No peepholes. Forget-gate bias starts at 1.0, all others at 0.

use ndarray::linalg::general_mat_vec_mul;
use ndarray::s;

use crate::numerics::{sigmoid, xavier_uniform, Rng, Tensor1, Tensor2};
use crate::{Error, Result};

/// Parameters of one cell: input weights (4*d_h, d_in), recurrent weights
/// (4*d_h, d_h), biases (4*d_h).
#[derive(Clone, Debug)]
pub struct LstmCellParams {
    pub w_input: Tensor2,
    pub w_recur: Tensor2,
    pub bias: Tensor1,
}

impl LstmCellParams {
    pub fn new(d_input: usize, d_hidden: usize, rng: &mut Rng) -> Result<LstmCellParams> {
        let w_input = xavier_uniform(d_input, 4 * d_hidden, rng)?;
        let w_recur = xavier_uniform(d_hidden, 4 * d_hidden, rng)?;
        let mut bias = Tensor1::zeros(4 * d_hidden);
        bias.slice_mut(s![d_hidden..2 * d_hidden]).fill(1.0);
        Ok(LstmCellParams { w_input, w_recur, bias })
    }

    pub fn d_hidden(&self) -> usize {
        self.w_recur.ncols()
    }

    pub fn d_input(&self) -> usize {
        self.w_input.ncols()
    }
}

/// Recurrent state (h, c).
#[derive(Clone, Debug)]
pub struct CellState {
    pub h: Tensor1,
    pub c: Tensor1,
}

impl CellState {
    pub fn zeros(d_hidden: usize) -> CellState {
        CellState { h: Tensor1::zeros(d_hidden), c: Tensor1::zeros(d_hidden) }
    }
}

/// Forward-pass intermediates needed by the backward pass. The output
/// hidden state is recoverable as o * tanh_c.
#[derive(Clone, Debug)]
pub struct LstmStepCache {
    pub i: Tensor1,
    pub f: Tensor1,
    pub g: Tensor1,
    pub o: Tensor1,
    pub c: Tensor1,
    pub tanh_c: Tensor1,
}

impl LstmStepCache {
    pub fn hidden(&self) -> Tensor1 {
        &self.o * &self.tanh_c
    }
}

/// One step of the standard gate equations:
/// i,f,o = sigmoid(affine), g = tanh(affine), c = f*c_prev + i*g, h = o*tanh(c).
pub fn lstm_step(
    x: &Tensor1,
    prev: &CellState,
    params: &LstmCellParams,
) -> Result<(CellState, LstmStepCache)> {
    let d = params.d_hidden();
    if x.len() != params.d_input() {
        return Err(Error::invalid(format!(
            "lstm input length {} does not match d_input {}",
            x.len(),
            params.d_input()
        )));
    }
    if prev.h.len() != d || prev.c.len() != d {
        return Err(Error::invalid("lstm previous state does not match d_hidden"));
    }

    let mut pre = params.bias.clone();
    general_mat_vec_mul(1.0, &params.w_input, x, 1.0, &mut pre);
    general_mat_vec_mul(1.0, &params.w_recur, &prev.h, 1.0, &mut pre);

    let i = pre.slice(s![0..d]).mapv(sigmoid);
    let f = pre.slice(s![d..2 * d]).mapv(sigmoid);
    let g = pre.slice(s![2 * d..3 * d]).mapv(f64::tanh);
    let o = pre.slice(s![3 * d..4 * d]).mapv(sigmoid);

    let c = &f * &prev.c + &i * &g;
    let tanh_c = c.mapv(f64::tanh);
    let h = &o * &tanh_c;

    let cache = LstmStepCache { i, f, g, o, c: c.clone(), tanh_c };
    Ok((CellState { h, c }, cache))
}

/// Gradient accumulators matching [`LstmCellParams`].
#[derive(Clone, Debug)]
pub struct LstmCellGrads {
    pub w_input: Tensor2,
    pub w_recur: Tensor2,
    pub bias: Tensor1,
}

impl LstmCellGrads {
    pub fn zeros_like(params: &LstmCellParams) -> LstmCellGrads {
        LstmCellGrads {
            w_input: Tensor2::zeros(params.w_input.raw_dim()),
            w_recur: Tensor2::zeros(params.w_recur.raw_dim()),
            bias: Tensor1::zeros(params.bias.raw_dim()),
        }
    }

    pub fn add_assign(&mut self, other: &LstmCellGrads) {
        self.w_input += &other.w_input;
        self.w_recur += &other.w_recur;
        self.bias += &other.bias;
    }
}

/// Exact gradients of one step. Takes the forward cache plus the upstream
/// gradients (dh, dc) of the step outputs; accumulates parameter gradients
/// and returns (dx, dh_prev, dc_prev).
#[allow(clippy::too_many_arguments)]
pub fn lstm_step_backward(
    x: &Tensor1,
    h_prev: &Tensor1,
    c_prev: &Tensor1,
    cache: &LstmStepCache,
    params: &LstmCellParams,
    dh: &Tensor1,
    dc_upstream: &Tensor1,
    grads: &mut LstmCellGrads,
) -> (Tensor1, Tensor1, Tensor1) {
    let d = params.d_hidden();

    let d_o = dh * &cache.tanh_c;
    let dc = dc_upstream + &(dh * &cache.o * cache.tanh_c.mapv(|t| 1.0 - t * t));

    let d_i = &dc * &cache.g;
    let d_f = &dc * c_prev;
    let d_g = &dc * &cache.i;
    let dc_prev = &dc * &cache.f;

    let mut dpre = Tensor1::zeros(4 * d);
    {
        let mut s_i = dpre.slice_mut(s![0..d]);
        s_i.assign(&(&d_i * &cache.i * cache.i.mapv(|v| 1.0 - v)));
    }
    {
        let mut s_f = dpre.slice_mut(s![d..2 * d]);
        s_f.assign(&(&d_f * &cache.f * cache.f.mapv(|v| 1.0 - v)));
    }
    {
        let mut s_g = dpre.slice_mut(s![2 * d..3 * d]);
        s_g.assign(&(&d_g * cache.g.mapv(|v| 1.0 - v * v)));
    }
    {
        let mut s_o = dpre.slice_mut(s![3 * d..4 * d]);
        s_o.assign(&(&d_o * &cache.o * cache.o.mapv(|v| 1.0 - v)));
    }

    // Parameter gradients: rank-1 updates, then transposed matvecs for the
    // input-side gradients.
    for (r, mut row) in grads.w_input.outer_iter_mut().enumerate() {
        row.scaled_add(dpre[r], x);
    }
    for (r, mut row) in grads.w_recur.outer_iter_mut().enumerate() {
        row.scaled_add(dpre[r], h_prev);
    }
    grads.bias += &dpre;

    let mut dx = Tensor1::zeros(x.len());
    for (r, row) in params.w_input.outer_iter().enumerate() {
        dx.scaled_add(dpre[r], &row);
    }
    let mut dh_prev = Tensor1::zeros(d);
    for (r, row) in params.w_recur.outer_iter().enumerate() {
        dh_prev.scaled_add(dpre[r], &row);
    }

    (dx, dh_prev, dc_prev)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, relative_l2, rng_from_seed};

    fn zero_params(d_in: usize, d_h: usize) -> LstmCellParams {
        LstmCellParams {
            w_input: Tensor2::zeros((4 * d_h, d_in)),
            w_recur: Tensor2::zeros((4 * d_h, d_h)),
            bias: Tensor1::zeros(4 * d_h),
        }
    }

    #[test]
    fn zero_everything_gives_zero_state() {
        let params = zero_params(3, 2);
        let (state, cache) = lstm_step(&Tensor1::zeros(3), &CellState::zeros(2), &params).unwrap();
        assert!(state.h.iter().all(|&v| v == 0.0));
        assert!(state.c.iter().all(|&v| v == 0.0));
        assert!(cache.i.iter().all(|&v| (v - 0.5).abs() < 1e-15));
        assert!(cache.g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_gates_pass_memory_through() {
        let mut params = zero_params(2, 2);
        params.bias.slice_mut(s![2..4]).fill(20.0); // forget gate -> 1
        params.bias.slice_mut(s![0..2]).fill(-20.0); // input gate -> 0
        let prev = CellState { h: Tensor1::zeros(2), c: Tensor1::from_vec(vec![0.7, -0.3]) };
        let (state, _) = lstm_step(&Tensor1::zeros(2), &prev, &params).unwrap();
        for (a, b) in state.c.iter().zip(prev.c.iter()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn gates_stay_in_range_and_h_bounded() {
        let mut rng = rng_from_seed(17);
        let params = LstmCellParams::new(4, 3, &mut rng).unwrap();
        let x = Tensor1::from_shape_simple_fn(4, || 10.0);
        let prev = CellState { h: Tensor1::from_shape_simple_fn(3, || -5.0), c: Tensor1::ones(3) };
        let (state, cache) = lstm_step(&x, &prev, &params).unwrap();
        assert!(state.h.iter().all(|v| v.abs() < 1.0));
        for gate in [&cache.i, &cache.f, &cache.o] {
            assert!(gate.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let params = zero_params(3, 2);
        assert!(lstm_step(&Tensor1::zeros(4), &CellState::zeros(2), &params).is_err());
        assert!(lstm_step(&Tensor1::zeros(3), &CellState::zeros(1), &params).is_err());
    }

    #[test]
    fn determinism() {
        let mut rng = rng_from_seed(23);
        let params = LstmCellParams::new(3, 2, &mut rng).unwrap();
        let x = Tensor1::from_vec(vec![0.3, -0.1, 0.9]);
        let prev = CellState { h: Tensor1::from_vec(vec![0.2, 0.1]), c: Tensor1::from_vec(vec![-0.4, 0.5]) };
        let (a, _) = lstm_step(&x, &prev, &params).unwrap();
        let (b, _) = lstm_step(&x, &prev, &params).unwrap();
        assert_eq!(a.h, b.h);
        assert_eq!(a.c, b.c);
    }

    #[test]
    fn zero_upstream_grads_give_zero_grads() {
        let mut rng = rng_from_seed(29);
        let params = LstmCellParams::new(3, 2, &mut rng).unwrap();
        let x = Tensor1::from_vec(vec![0.1, 0.2, -0.3]);
        let prev = CellState { h: Tensor1::from_vec(vec![0.5, -0.5]), c: Tensor1::from_vec(vec![0.2, 0.4]) };
        let (_, cache) = lstm_step(&x, &prev, &params).unwrap();
        let mut grads = LstmCellGrads::zeros_like(&params);
        let (dx, dh, dc) = lstm_step_backward(
            &x,
            &prev.h,
            &prev.c,
            &cache,
            &params,
            &Tensor1::zeros(2),
            &Tensor1::zeros(2),
            &mut grads,
        );
        assert!(dx.iter().all(|&v| v == 0.0));
        assert!(dh.iter().all(|&v| v == 0.0));
        assert!(dc.iter().all(|&v| v == 0.0));
        assert!(grads.w_input.iter().all(|&v| v == 0.0));
    }

    /// Flatten cell params into a vector and back, for the oracle closure.
    fn to_flat(p: &LstmCellParams) -> Vec<f64> {
        p.w_input
            .iter()
            .chain(p.w_recur.iter())
            .chain(p.bias.iter())
            .copied()
            .collect()
    }

    fn from_flat(template: &LstmCellParams, flat: &[f64]) -> LstmCellParams {
        let ni = template.w_input.len();
        let nr = template.w_recur.len();
        let mut p = template.clone();
        p.w_input = Tensor2::from_shape_vec(template.w_input.raw_dim(), flat[..ni].to_vec()).unwrap();
        p.w_recur =
            Tensor2::from_shape_vec(template.w_recur.raw_dim(), flat[ni..ni + nr].to_vec()).unwrap();
        p.bias = Tensor1::from_vec(flat[ni + nr..].to_vec());
        p
    }

    /// Scalar loss over an unrolled sequence: sum of squares of every h_t.
    fn sequence_loss(params: &LstmCellParams, xs: &[Tensor1]) -> f64 {
        let mut state = CellState::zeros(params.d_hidden());
        let mut loss = 0.0;
        for x in xs {
            let (next, _) = lstm_step(x, &state, params).unwrap();
            loss += next.h.iter().map(|v| v * v).sum::<f64>();
            state = next;
        }
        loss
    }

    #[test]
    fn backward_matches_finite_differences_over_unrolled_sequence() {
        let mut rng = rng_from_seed(31);
        let (d_in, d_h, steps) = (3, 2, 5);
        let params = LstmCellParams::new(d_in, d_h, &mut rng).unwrap();
        let xs: Vec<Tensor1> = (0..steps)
            .map(|_| {
                xavier_uniform(1, d_in, &mut rng)
                    .unwrap()
                    .into_shape_with_order(d_in)
                    .unwrap()
            })
            .collect();

        // Analytic gradients via backprop through the unrolled sequence.
        let mut states = vec![CellState::zeros(d_h)];
        let mut caches = Vec::new();
        for x in &xs {
            let (next, cache) = lstm_step(x, states.last().unwrap(), &params).unwrap();
            states.push(next);
            caches.push(cache);
        }
        let mut grads = LstmCellGrads::zeros_like(&params);
        let mut dh_carry = Tensor1::zeros(d_h);
        let mut dc_carry = Tensor1::zeros(d_h);
        for t in (0..steps).rev() {
            // dL/dh_t from the loss term plus the carry from step t+1.
            let dh = &dh_carry + &(states[t + 1].h.mapv(|v| 2.0 * v));
            let (_, dh_prev, dc_prev) = lstm_step_backward(
                &xs[t],
                &states[t].h,
                &states[t].c,
                &caches[t],
                &params,
                &dh,
                &dc_carry,
                &mut grads,
            );
            dh_carry = dh_prev;
            dc_carry = dc_prev;
        }
        let analytic: Vec<f64> = grads
            .w_input
            .iter()
            .chain(grads.w_recur.iter())
            .chain(grads.bias.iter())
            .copied()
            .collect();

        let flat = to_flat(&params);
        let mut f = |v: &[f64]| {
            let p = from_flat(&params, v);
            Ok(sequence_loss(&p, &xs))
        };
        let numeric = finite_diff_grad(&mut f, &flat, 1e-5).unwrap();
        let err = relative_l2(&analytic, &numeric);
        assert!(err <= 1e-4, "relative error {err}");
    }

    #[test]
    fn input_jacobian_column_matches_finite_differences() {
        let mut rng = rng_from_seed(37);
        let params = LstmCellParams::new(2, 2, &mut rng).unwrap();
        let x = Tensor1::from_vec(vec![0.4, -0.2]);
        let prev = CellState { h: Tensor1::from_vec(vec![0.1, 0.3]), c: Tensor1::from_vec(vec![-0.2, 0.6]) };
        let (_, cache) = lstm_step(&x, &prev, &params).unwrap();

        // Upstream: a single active coordinate on h.
        let mut dh = Tensor1::zeros(2);
        dh[0] = 1.0;
        let mut grads = LstmCellGrads::zeros_like(&params);
        let (dx, _, _) = lstm_step_backward(
            &x, &prev.h, &prev.c, &cache, &params, &dh, &Tensor1::zeros(2), &mut grads,
        );

        let mut f = |v: &[f64]| {
            let xv = Tensor1::from_vec(v.to_vec());
            let (s, _) = lstm_step(&xv, &prev, &params)?;
            Ok(s.h[0])
        };
        let numeric = finite_diff_grad(&mut f, x.as_slice().unwrap(), 1e-6).unwrap();
        for (a, n) in dx.iter().zip(numeric.iter()) {
            assert!((a - n).abs() < 1e-8, "{a} vs {n}");
        }
    }
}
