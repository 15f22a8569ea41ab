//! First-order linear-chain CRF over the four segmentation labels: exact
//! log-likelihood via the forward recursion, exact decoding via Viterbi,
//! analytic gradients via forward-backward, and a brute-force enumeration
//! oracle for testing.
//!
//! A sequence scores sum_t delta[t, y_t] + sum_{t>=2} b[y_{t-1}, y_t]; the
//! unary term at t=1 is included. Optional start/stop transition vectors
//! exist behind a config switch and default to off. No structural BMES
//! constraints are imposed on transitions or decoding.

use ndarray::Array2;

use crate::corpus::{Label, NUM_LABELS};
use crate::numerics::{logsumexp, Tensor1, Tensor2};
use crate::{Error, Result};

/// Transition matrix b[y_prev, y_next] plus optional boundary vectors.
#[derive(Clone, Debug)]
pub struct CrfParams {
    pub transitions: Tensor2,
    pub boundary: Option<(Tensor1, Tensor1)>,
}

impl CrfParams {
    pub fn zeros(with_boundary: bool) -> CrfParams {
        CrfParams {
            transitions: Tensor2::zeros((NUM_LABELS, NUM_LABELS)),
            boundary: with_boundary
                .then(|| (Tensor1::zeros(NUM_LABELS), Tensor1::zeros(NUM_LABELS))),
        }
    }
}

/// Gradient accumulators matching [`CrfParams`].
#[derive(Clone, Debug)]
pub struct CrfGrads {
    pub transitions: Tensor2,
    pub boundary: Option<(Tensor1, Tensor1)>,
}

impl CrfGrads {
    pub fn zeros_like(params: &CrfParams) -> CrfGrads {
        CrfGrads {
            transitions: Tensor2::zeros((NUM_LABELS, NUM_LABELS)),
            boundary: params
                .boundary
                .as_ref()
                .map(|_| (Tensor1::zeros(NUM_LABELS), Tensor1::zeros(NUM_LABELS))),
        }
    }

    pub fn add_assign(&mut self, other: &CrfGrads) {
        self.transitions += &other.transitions;
        if let (Some((s, e)), Some((os, oe))) = (self.boundary.as_mut(), other.boundary.as_ref()) {
            *s += os;
            *e += oe;
        }
    }
}

fn check_emissions(emissions: &Tensor2) -> Result<usize> {
    let n = emissions.nrows();
    if n == 0 {
        return Err(Error::invalid("empty emission matrix"));
    }
    if emissions.ncols() != NUM_LABELS {
        return Err(Error::invalid(format!(
            "emission matrix has {} columns, expected {NUM_LABELS}",
            emissions.ncols()
        )));
    }
    Ok(n)
}

/// Total score of one label sequence under the model.
pub fn score_sequence(emissions: &Tensor2, params: &CrfParams, labels: &[Label]) -> Result<f64> {
    let n = check_emissions(emissions)?;
    if labels.len() != n {
        return Err(Error::invalid("label sequence length does not match emissions"));
    }
    let mut score = 0.0;
    for (t, &y) in labels.iter().enumerate() {
        score += emissions[[t, y.index()]];
        if t > 0 {
            score += params.transitions[[labels[t - 1].index(), y.index()]];
        }
    }
    if let Some((start, stop)) = &params.boundary {
        score += start[labels[0].index()] + stop[labels[n - 1].index()];
    }
    Ok(score)
}

/// ln of the partition function, by the forward recursion with logsumexp.
pub fn log_partition(emissions: &Tensor2, params: &CrfParams) -> Result<f64> {
    let n = check_emissions(emissions)?;
    let alpha = forward_scores(emissions, params, n);
    let mut last = alpha.row(n - 1).to_vec();
    if let Some((_, stop)) = &params.boundary {
        for (v, s) in last.iter_mut().zip(stop.iter()) {
            *v += s;
        }
    }
    logsumexp(&last)
}

fn forward_scores(emissions: &Tensor2, params: &CrfParams, n: usize) -> Tensor2 {
    let mut alpha = Tensor2::zeros((n, NUM_LABELS));
    for y in 0..NUM_LABELS {
        alpha[[0, y]] = emissions[[0, y]]
            + params.boundary.as_ref().map_or(0.0, |(start, _)| start[y]);
    }
    let mut scratch = [0.0f64; NUM_LABELS];
    for t in 1..n {
        for y in 0..NUM_LABELS {
            for (yp, s) in scratch.iter_mut().enumerate() {
                *s = alpha[[t - 1, yp]] + params.transitions[[yp, y]];
            }
            alpha[[t, y]] = emissions[[t, y]] + logsumexp(&scratch).unwrap();
        }
    }
    alpha
}

fn backward_scores(emissions: &Tensor2, params: &CrfParams, n: usize) -> Tensor2 {
    let mut beta = Tensor2::zeros((n, NUM_LABELS));
    if let Some((_, stop)) = &params.boundary {
        for y in 0..NUM_LABELS {
            beta[[n - 1, y]] = stop[y];
        }
    }
    let mut scratch = [0.0f64; NUM_LABELS];
    for t in (0..n - 1).rev() {
        for y in 0..NUM_LABELS {
            for (yn, s) in scratch.iter_mut().enumerate() {
                *s = params.transitions[[y, yn]] + emissions[[t + 1, yn]] + beta[[t + 1, yn]];
            }
            beta[[t, y]] = logsumexp(&scratch).unwrap();
        }
    }
    beta
}

/// Negative log-likelihood of the gold sequence plus its exact gradients.
///
/// d nll / d emission[t, y] = P(y_t = y) - 1{gold}, and the transition
/// gradient is the summed pairwise marginal minus the gold indicator;
/// marginals come from forward-backward.
pub fn log_likelihood(
    emissions: &Tensor2,
    params: &CrfParams,
    gold: &[Label],
) -> Result<(f64, Tensor2, CrfGrads)> {
    let n = check_emissions(emissions)?;
    if gold.len() != n {
        return Err(Error::invalid("gold label sequence length does not match emissions"));
    }
    let alpha = forward_scores(emissions, params, n);
    let beta = backward_scores(emissions, params, n);
    let mut last = alpha.row(n - 1).to_vec();
    if let Some((_, stop)) = &params.boundary {
        for (v, s) in last.iter_mut().zip(stop.iter()) {
            *v += s;
        }
    }
    let log_z = logsumexp(&last)?;
    let gold_score = score_sequence(emissions, params, gold)?;
    let nll = log_z - gold_score;

    let mut d_emissions = Tensor2::zeros((n, NUM_LABELS));
    for t in 0..n {
        for y in 0..NUM_LABELS {
            d_emissions[[t, y]] = (alpha[[t, y]] + beta[[t, y]] - log_z).exp();
        }
        d_emissions[[t, gold[t].index()]] -= 1.0;
    }

    let mut grads = CrfGrads::zeros_like(params);
    for t in 1..n {
        for yp in 0..NUM_LABELS {
            for y in 0..NUM_LABELS {
                let log_pair = alpha[[t - 1, yp]]
                    + params.transitions[[yp, y]]
                    + emissions[[t, y]]
                    + beta[[t, y]]
                    - log_z;
                grads.transitions[[yp, y]] += log_pair.exp();
            }
        }
        grads.transitions[[gold[t - 1].index(), gold[t].index()]] -= 1.0;
    }
    if let Some((d_start, d_stop)) = grads.boundary.as_mut() {
        for y in 0..NUM_LABELS {
            d_start[y] = (alpha[[0, y]] + beta[[0, y]] - log_z).exp();
            d_stop[y] = (alpha[[n - 1, y]] + beta[[n - 1, y]] - log_z).exp();
        }
        d_start[gold[0].index()] -= 1.0;
        d_stop[gold[n - 1].index()] -= 1.0;
    }

    Ok((nll, d_emissions, grads))
}

/// Position marginals P(y_t = y); rows sum to 1.
pub fn marginals(emissions: &Tensor2, params: &CrfParams) -> Result<Tensor2> {
    let n = check_emissions(emissions)?;
    let alpha = forward_scores(emissions, params, n);
    let beta = backward_scores(emissions, params, n);
    let mut last = alpha.row(n - 1).to_vec();
    if let Some((_, stop)) = &params.boundary {
        for (v, s) in last.iter_mut().zip(stop.iter()) {
            *v += s;
        }
    }
    let log_z = logsumexp(&last)?;
    let mut m = Tensor2::zeros((n, NUM_LABELS));
    for t in 0..n {
        for y in 0..NUM_LABELS {
            m[[t, y]] = (alpha[[t, y]] + beta[[t, y]] - log_z).exp();
        }
    }
    Ok(m)
}

/// Exact argmax decoding. Among equally scoring sequences the
/// lexicographically smallest one under the label order B < M < E < S is
/// returned, which makes the result comparable to the brute-force oracle.
pub fn viterbi(emissions: &Tensor2, params: &CrfParams) -> Result<Vec<Label>> {
    let n = check_emissions(emissions)?;

    // best[y] = (score, prefix) of the best path ending in y; the prefix is
    // kept explicitly so ties can be broken on the whole sequence.
    let mut best: Vec<(f64, Vec<Label>)> = (0..NUM_LABELS)
        .map(|y| {
            let score = emissions[[0, y]]
                + params.boundary.as_ref().map_or(0.0, |(start, _)| start[y]);
            (score, vec![Label::from_index(y).unwrap()])
        })
        .collect();

    for t in 1..n {
        let mut next: Vec<(f64, Vec<Label>)> = Vec::with_capacity(NUM_LABELS);
        for y in 0..NUM_LABELS {
            let mut chosen: Option<(f64, Vec<Label>)> = None;
            for (yp, (prev_score, prefix)) in best.iter().enumerate() {
                let score = prev_score + params.transitions[[yp, y]] + emissions[[t, y]];
                let better = match &chosen {
                    None => true,
                    Some((s, p)) => score > *s || (score == *s && prefix < p),
                };
                if better {
                    chosen = Some((score, prefix.clone()));
                }
            }
            let (score, mut prefix) = chosen.unwrap();
            prefix.push(Label::from_index(y).unwrap());
            next.push((score, prefix));
        }
        best = next;
    }

    if let Some((_, stop)) = &params.boundary {
        for (y, entry) in best.iter_mut().enumerate() {
            entry.0 += stop[y];
        }
    }

    let mut winner: Option<&(f64, Vec<Label>)> = None;
    for entry in &best {
        let better = match winner {
            None => true,
            Some((s, p)) => entry.0 > *s || (entry.0 == *s && entry.1 < *p),
        };
        if better {
            winner = Some(entry);
        }
    }
    Ok(winner.unwrap().1.clone())
}

/// Exhaustive enumeration over all 4^n sequences: the exact log partition
/// and the exact argmax (first in lexicographic order among ties). Refuses
/// to run beyond n = 10.
pub fn brute_force(emissions: &Tensor2, params: &CrfParams) -> Result<(f64, Vec<Label>)> {
    let n = check_emissions(emissions)?;
    if n > 10 {
        return Err(Error::invalid(format!(
            "brute force enumeration refused for n = {n} > 10"
        )));
    }
    let total = NUM_LABELS.pow(n as u32);
    let mut scores = Vec::with_capacity(total);
    let mut best_score = f64::NEG_INFINITY;
    let mut best_seq: Vec<Label> = Vec::new();
    let mut seq = vec![Label::B; n];
    for idx in 0..total {
        // Decode idx in base 4, most significant digit first, so sequences
        // are visited in lexicographic order.
        let mut rem = idx;
        for t in (0..n).rev() {
            seq[t] = Label::from_index(rem % NUM_LABELS).unwrap();
            rem /= NUM_LABELS;
        }
        let s = score_sequence(emissions, params, &seq)?;
        scores.push(s);
        if s > best_score {
            best_score = s;
            best_seq = seq.clone();
        }
    }
    Ok((logsumexp(&scores)?, best_seq))
}

/// Convenience: random emission/transition instances for oracle tests.
pub fn random_instance(
    n: usize,
    range: f64,
    rng: &mut crate::numerics::Rng,
    with_boundary: bool,
) -> (Tensor2, CrfParams) {
    use rand::Rng as _;
    let emissions =
        Array2::from_shape_simple_fn((n, NUM_LABELS), || rng.gen::<f64>() * 2.0 * range - range);
    let mut params = CrfParams::zeros(with_boundary);
    params.transitions =
        Array2::from_shape_simple_fn((NUM_LABELS, NUM_LABELS), || rng.gen::<f64>() * 2.0 * range - range);
    if let Some((start, stop)) = params.boundary.as_mut() {
        start.mapv_inplace(|_| rng.gen::<f64>() * 2.0 * range - range);
        stop.mapv_inplace(|_| rng.gen::<f64>() * 2.0 * range - range);
    }
    (emissions, params)
}
