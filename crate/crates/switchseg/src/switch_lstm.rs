//! Switched recurrence: K candidate LSTM cells per direction, a softmax
//! switcher over them, bidirectional wrapping, and the switch-weighted
//! emission projection.
//!
//! At every step all K cells advance from the same mixed previous state
//! (h, c). The switcher scores each candidate k from the concatenation
//! [input, candidate state, task embedding] using its own weight row, and
//! the new state is the switch-weighted convex combination of candidates.
//! The memory cell is mixed exactly like the hidden state, so the mixture
//! is the single recurrent state of the layer.

use ndarray::linalg::general_mat_vec_mul;
use rand::Rng as _;
use std::io::Write;

use crate::corpus::NUM_LABELS;
use crate::lstm::{
    lstm_step, lstm_step_backward, CellState, LstmCellGrads, LstmCellParams, LstmStepCache,
};
use crate::numerics::{softmax, xavier_uniform, Rng, Tensor1, Tensor2};
use crate::{Error, Result};

/// Which switcher inputs are zeroed inside the score concatenation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AblationSet {
    pub input: bool,
    pub state: bool,
    pub task: bool,
}

/// Switch behaviour. Random modes replace the learned distribution with a
/// uniform one-hot draw per step, in the named phase only.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SwitchMode {
    Normal,
    RandomTrain,
    RandomTest,
    Ablate(AblationSet),
}

impl SwitchMode {
    pub fn parse(s: &str) -> Result<SwitchMode> {
        match s {
            "normal" => Ok(SwitchMode::Normal),
            "random-train" => Ok(SwitchMode::RandomTrain),
            "random-test" => Ok(SwitchMode::RandomTest),
            other => {
                if let Some(rest) = other.strip_prefix("ablate=") {
                    let mut set = AblationSet::default();
                    for part in rest.split(',').filter(|p| !p.is_empty()) {
                        match part {
                            "x" | "input" => set.input = true,
                            "s" | "state" => set.state = true,
                            "em" | "task" => set.task = true,
                            bad => {
                                return Err(Error::Config(format!(
                                    "unknown ablation component '{bad}' (use x, s, em)"
                                )))
                            }
                        }
                    }
                    Ok(SwitchMode::Ablate(set))
                } else {
                    Err(Error::Config(format!(
                        "unknown switch mode '{other}' (normal, random-train, random-test, ablate=...)"
                    )))
                }
            }
        }
    }

    pub fn ablation(&self) -> AblationSet {
        match self {
            SwitchMode::Ablate(set) => *set,
            _ => AblationSet::default(),
        }
    }

    fn random_active(&self, train: bool) -> bool {
        matches!(
            (self, train),
            (SwitchMode::RandomTrain, true) | (SwitchMode::RandomTest, false)
        )
    }
}

impl std::fmt::Display for SwitchMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SwitchMode::Normal => write!(f, "normal"),
            SwitchMode::RandomTrain => write!(f, "random-train"),
            SwitchMode::RandomTest => write!(f, "random-test"),
            SwitchMode::Ablate(set) => {
                let mut parts = Vec::new();
                if set.input {
                    parts.push("x");
                }
                if set.state {
                    parts.push("s");
                }
                if set.task {
                    parts.push("em");
                }
                write!(f, "ablate={}", parts.join(","))
            }
        }
    }
}

/// One direction of the layer: K cells, the switcher weight (one row per
/// cell over [input, state, task] columns), and K emission projections of
/// shape (labels, d_h).
#[derive(Clone, Debug)]
pub struct DirectionParams {
    pub cells: Vec<LstmCellParams>,
    pub switch: Tensor2,
    pub proj: Vec<Tensor2>,
}

impl DirectionParams {
    pub fn new(
        k: usize,
        d_input: usize,
        d_hidden: usize,
        d_task: usize,
        rng: &mut Rng,
    ) -> Result<DirectionParams> {
        if k == 0 {
            return Err(Error::invalid("need at least one cell (K >= 1)"));
        }
        let cells = (0..k)
            .map(|_| LstmCellParams::new(d_input, d_hidden, rng))
            .collect::<Result<Vec<_>>>()?;
        let switch = xavier_uniform(d_input + d_hidden + d_task, k, rng)?;
        let proj = (0..k)
            .map(|_| xavier_uniform(d_hidden, NUM_LABELS, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(DirectionParams { cells, switch, proj })
    }

    pub fn k(&self) -> usize {
        self.cells.len()
    }

    pub fn d_hidden(&self) -> usize {
        self.cells[0].d_hidden()
    }

    pub fn d_input(&self) -> usize {
        self.cells[0].d_input()
    }

    /// Width of the task segment in the switcher columns (0 in
    /// single-criterion configurations).
    pub fn d_task(&self) -> usize {
        self.switch.ncols() - self.d_input() - self.d_hidden()
    }
}

/// Gradient accumulators matching [`DirectionParams`].
#[derive(Clone, Debug)]
pub struct DirectionGrads {
    pub cells: Vec<LstmCellGrads>,
    pub switch: Tensor2,
    pub proj: Vec<Tensor2>,
}

impl DirectionGrads {
    pub fn zeros_like(params: &DirectionParams) -> DirectionGrads {
        DirectionGrads {
            cells: params.cells.iter().map(LstmCellGrads::zeros_like).collect(),
            switch: Tensor2::zeros(params.switch.raw_dim()),
            proj: params.proj.iter().map(|p| Tensor2::zeros(p.raw_dim())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &DirectionGrads) {
        for (a, b) in self.cells.iter_mut().zip(&other.cells) {
            a.add_assign(b);
        }
        self.switch += &other.switch;
        for (a, b) in self.proj.iter_mut().zip(&other.proj) {
            *a += b;
        }
    }
}

/// Per-step switch distributions of one sentence, per direction, indexed by
/// position.
#[derive(Clone, Debug)]
pub struct SwitchTrace {
    pub forward: Vec<Tensor1>,
    pub backward: Vec<Tensor1>,
}

/// Switch distribution over the K candidates for one position.
///
/// Candidate k is scored by its own switcher row against
/// [input, candidate_k, task embedding]; ablated components are zeroed.
pub fn switch_scores(
    x: &Tensor1,
    candidates: &[Tensor1],
    task_emb: Option<&Tensor1>,
    switch: &Tensor2,
    ablate: AblationSet,
) -> Result<Tensor1> {
    let k = candidates.len();
    if k == 0 {
        return Err(Error::invalid("switch_scores needs at least one candidate"));
    }
    if switch.nrows() != k {
        return Err(Error::invalid(format!(
            "switcher has {} rows but there are {k} candidates",
            switch.nrows()
        )));
    }
    let d_h = candidates[0].len();
    if candidates.iter().any(|c| c.len() != d_h) {
        return Err(Error::invalid("candidates must share one dimension"));
    }
    let d_in = x.len();
    let d_task = task_emb.map(|e| e.len()).unwrap_or(0);
    if switch.ncols() != d_in + d_h + d_task {
        return Err(Error::invalid(format!(
            "switcher width {} does not match input {} + state {} + task {}",
            switch.ncols(),
            d_in,
            d_h,
            d_task
        )));
    }
    let logits = switch_logits(x, candidates, task_emb, switch, ablate);
    softmax(logits.as_slice().unwrap())
}

fn switch_logits(
    x: &Tensor1,
    candidates: &[Tensor1],
    task_emb: Option<&Tensor1>,
    switch: &Tensor2,
    ablate: AblationSet,
) -> Tensor1 {
    let d_in = x.len();
    let d_h = candidates[0].len();
    let mut logits = Tensor1::zeros(candidates.len());
    for (k, cand) in candidates.iter().enumerate() {
        let row = switch.row(k);
        let mut score = 0.0;
        if !ablate.input {
            score += row.slice(ndarray::s![..d_in]).dot(x);
        }
        if !ablate.state {
            score += row.slice(ndarray::s![d_in..d_in + d_h]).dot(cand);
        }
        if let Some(em) = task_emb {
            if !ablate.task {
                score += row.slice(ndarray::s![d_in + d_h..]).dot(em);
            }
        }
        logits[k] = score;
    }
    logits
}

/// Everything the backward pass needs about one step.
#[derive(Clone, Debug)]
pub struct StepCache {
    pub h_prev: Tensor1,
    pub c_prev: Tensor1,
    pub cells: Vec<LstmStepCache>,
    pub a: Tensor1,
    /// Whether `a` came from the softmax (false for forced one-hot draws).
    pub soft: bool,
}

/// One switched step: all K cells advance from the same mixed previous
/// state, the switcher weighs them, and the outputs are the convex mixture.
pub fn switch_lstm_step(
    x: &Tensor1,
    prev: &CellState,
    params: &DirectionParams,
    task_emb: Option<&Tensor1>,
    mode: SwitchMode,
    train: bool,
    rng: Option<&mut Rng>,
) -> Result<(CellState, StepCache)> {
    let k = params.k();
    let d_h = params.d_hidden();

    let mut cell_caches = Vec::with_capacity(k);
    let mut cand_h = Vec::with_capacity(k);
    let mut cand_c = Vec::with_capacity(k);
    for cell in &params.cells {
        let (state, cache) = lstm_step(x, prev, cell)?;
        cand_h.push(state.h);
        cand_c.push(state.c);
        cell_caches.push(cache);
    }

    let (a, soft) = if mode.random_active(train) {
        let rng = rng.ok_or_else(|| {
            Error::invalid("random switch mode requires a random number generator")
        })?;
        let mut one_hot = Tensor1::zeros(k);
        one_hot[rng.gen_range(0..k)] = 1.0;
        (one_hot, false)
    } else {
        (
            switch_scores(x, &cand_h, task_emb, &params.switch, mode.ablation())?,
            true,
        )
    };

    let mut h = Tensor1::zeros(d_h);
    let mut c = Tensor1::zeros(d_h);
    for i in 0..k {
        h.scaled_add(a[i], &cand_h[i]);
        c.scaled_add(a[i], &cand_c[i]);
    }

    let cache = StepCache {
        h_prev: prev.h.clone(),
        c_prev: prev.c.clone(),
        cells: cell_caches,
        a,
        soft,
    };
    Ok((CellState { h, c }, cache))
}

/// One direction's pass over a sentence. `hs`, `trace` and `caches` are
/// indexed by position regardless of processing order.
#[derive(Clone, Debug)]
pub struct DirectionRun {
    pub hs: Vec<Tensor1>,
    pub trace: Vec<Tensor1>,
    pub caches: Vec<StepCache>,
    pub reverse: bool,
}

pub fn run_direction(
    xs: &[Tensor1],
    params: &DirectionParams,
    task_emb: Option<&Tensor1>,
    mode: SwitchMode,
    train: bool,
    mut rng: Option<&mut Rng>,
    reverse: bool,
) -> Result<DirectionRun> {
    if xs.is_empty() {
        return Err(Error::invalid("cannot run over an empty sequence"));
    }
    let n = xs.len();
    let d_h = params.d_hidden();
    let mut hs = vec![Tensor1::zeros(0); n];
    let mut trace = vec![Tensor1::zeros(0); n];
    let mut caches: Vec<Option<StepCache>> = vec![None; n];

    let mut state = CellState::zeros(d_h);
    let order: Box<dyn Iterator<Item = usize>> =
        if reverse { Box::new((0..n).rev()) } else { Box::new(0..n) };
    for t in order {
        let (next, cache) = switch_lstm_step(
            &xs[t],
            &state,
            params,
            task_emb,
            mode,
            train,
            rng.as_deref_mut(),
        )?;
        hs[t] = next.h.clone();
        trace[t] = cache.a.clone();
        caches[t] = Some(cache);
        state = next;
    }

    Ok(DirectionRun {
        hs,
        trace,
        caches: caches.into_iter().map(Option::unwrap).collect(),
        reverse,
    })
}

/// Left-to-right and right-to-left passes with independent parameters and
/// zero initial states at both ends.
#[allow(clippy::too_many_arguments)]
pub fn run_bidirectional(
    xs: &[Tensor1],
    fwd: &DirectionParams,
    bwd: &DirectionParams,
    task_emb: Option<&Tensor1>,
    mode: SwitchMode,
    train: bool,
    mut rng: Option<&mut Rng>,
) -> Result<(DirectionRun, DirectionRun)> {
    let f = run_direction(xs, fwd, task_emb, mode, train, rng.as_deref_mut(), false)?;
    let b = run_direction(xs, bwd, task_emb, mode, train, rng, true)?;
    Ok((f, b))
}

pub fn trace_of(fwd: &DirectionRun, bwd: &DirectionRun) -> SwitchTrace {
    SwitchTrace { forward: fwd.trace.clone(), backward: bwd.trace.clone() }
}

/// Per-position label scores:
/// delta_t = sum_i a_fwd[i] * (P_fwd_i h_fwd) + sum_i a_bwd[i] * (P_bwd_i h_bwd).
/// No bias term; the CRF transitions absorb label priors.
pub fn emission_scores(
    h_fwd: &Tensor1,
    h_bwd: &Tensor1,
    a_fwd: &Tensor1,
    a_bwd: &Tensor1,
    proj_fwd: &[Tensor2],
    proj_bwd: &[Tensor2],
) -> Result<Tensor1> {
    if a_fwd.len() != proj_fwd.len() || a_bwd.len() != proj_bwd.len() {
        return Err(Error::invalid(
            "switch distribution and emission projection disagree on K",
        ));
    }
    let mut delta = Tensor1::zeros(NUM_LABELS);
    for (i, p) in proj_fwd.iter().enumerate() {
        let mut u = Tensor1::zeros(NUM_LABELS);
        general_mat_vec_mul(1.0, p, h_fwd, 0.0, &mut u);
        delta.scaled_add(a_fwd[i], &u);
    }
    for (i, p) in proj_bwd.iter().enumerate() {
        let mut u = Tensor1::zeros(NUM_LABELS);
        general_mat_vec_mul(1.0, p, h_bwd, 0.0, &mut u);
        delta.scaled_add(a_bwd[i], &u);
    }
    Ok(delta)
}

/// Cached per-candidate projections u[t][i] = P_i h_t for each direction.
pub struct EmissionCache {
    u_fwd: Vec<Vec<Tensor1>>,
    u_bwd: Vec<Vec<Tensor1>>,
}

/// Emission matrix (n, labels) for a full bidirectional run.
pub fn emissions_forward(
    run_f: &DirectionRun,
    run_b: &DirectionRun,
    proj_fwd: &[Tensor2],
    proj_bwd: &[Tensor2],
) -> Result<(Tensor2, EmissionCache)> {
    let n = run_f.hs.len();
    if run_f.trace.iter().any(|a| a.len() != proj_fwd.len())
        || run_b.trace.iter().any(|a| a.len() != proj_bwd.len())
    {
        return Err(Error::invalid(
            "switch trace and emission projection disagree on K",
        ));
    }
    let mut emissions = Tensor2::zeros((n, NUM_LABELS));
    let mut u_fwd = Vec::with_capacity(n);
    let mut u_bwd = Vec::with_capacity(n);
    for t in 0..n {
        let mut row = emissions.row_mut(t);
        let mut us_f = Vec::with_capacity(proj_fwd.len());
        for (i, p) in proj_fwd.iter().enumerate() {
            let mut u = Tensor1::zeros(NUM_LABELS);
            general_mat_vec_mul(1.0, p, &run_f.hs[t], 0.0, &mut u);
            row.scaled_add(run_f.trace[t][i], &u);
            us_f.push(u);
        }
        let mut us_b = Vec::with_capacity(proj_bwd.len());
        for (i, p) in proj_bwd.iter().enumerate() {
            let mut u = Tensor1::zeros(NUM_LABELS);
            general_mat_vec_mul(1.0, p, &run_b.hs[t], 0.0, &mut u);
            row.scaled_add(run_b.trace[t][i], &u);
            us_b.push(u);
        }
        u_fwd.push(us_f);
        u_bwd.push(us_b);
    }
    Ok((emissions, EmissionCache { u_fwd, u_bwd }))
}

/// Backward through the emission projection: accumulates projection grads
/// and hands back per-position gradients on the hidden states and on the
/// switch distributions of both directions.
#[allow(clippy::too_many_arguments, clippy::type_complexity)]
pub fn emissions_backward(
    d_emissions: &Tensor2,
    run_f: &DirectionRun,
    run_b: &DirectionRun,
    proj_fwd: &[Tensor2],
    proj_bwd: &[Tensor2],
    cache: &EmissionCache,
    grads_f: &mut DirectionGrads,
    grads_b: &mut DirectionGrads,
) -> (Vec<Tensor1>, Vec<Tensor1>, Vec<Tensor1>, Vec<Tensor1>) {
    let n = run_f.hs.len();
    let d_h = proj_fwd[0].ncols();
    let mut d_h_f = vec![Tensor1::zeros(d_h); n];
    let mut d_h_b = vec![Tensor1::zeros(d_h); n];
    let mut d_a_f = vec![Tensor1::zeros(proj_fwd.len()); n];
    let mut d_a_b = vec![Tensor1::zeros(proj_bwd.len()); n];

    for t in 0..n {
        let d_delta = d_emissions.row(t);
        for (i, p) in proj_fwd.iter().enumerate() {
            let a_i = run_f.trace[t][i];
            d_a_f[t][i] = d_delta.dot(&cache.u_fwd[t][i]);
            for (r, mut row) in grads_f.proj[i].outer_iter_mut().enumerate() {
                row.scaled_add(a_i * d_delta[r], &run_f.hs[t]);
            }
            for (r, row) in p.outer_iter().enumerate() {
                d_h_f[t].scaled_add(a_i * d_delta[r], &row);
            }
        }
        for (i, p) in proj_bwd.iter().enumerate() {
            let a_i = run_b.trace[t][i];
            d_a_b[t][i] = d_delta.dot(&cache.u_bwd[t][i]);
            for (r, mut row) in grads_b.proj[i].outer_iter_mut().enumerate() {
                row.scaled_add(a_i * d_delta[r], &run_b.hs[t]);
            }
            for (r, row) in p.outer_iter().enumerate() {
                d_h_b[t].scaled_add(a_i * d_delta[r], &row);
            }
        }
    }
    (d_h_f, d_h_b, d_a_f, d_a_b)
}

/// Backprop through one direction's unrolled run.
///
/// `d_hs[t]` / `d_as[t]` are the upstream gradients on the mixed hidden
/// state and on the switch distribution at position t (from the emission
/// path); input gradients are accumulated into `d_xs`, task-embedding
/// gradients into `d_task` when present. `ablate` must match the forward
/// pass: ablated segments carry no gradient in either direction.
#[allow(clippy::too_many_arguments)]
pub fn direction_backward(
    xs: &[Tensor1],
    run: &DirectionRun,
    params: &DirectionParams,
    task_emb: Option<&Tensor1>,
    ablate: AblationSet,
    d_hs: &[Tensor1],
    d_as: &[Tensor1],
    grads: &mut DirectionGrads,
    d_xs: &mut [Tensor1],
    mut d_task: Option<&mut Tensor1>,
) -> Result<()> {
    let n = xs.len();
    let k = params.k();
    let d_h = params.d_hidden();
    let d_in = params.d_input();

    // Reversed processing order: the carry flows to the step processed
    // immediately before.
    let order: Vec<usize> = if run.reverse {
        (0..n).collect()
    } else {
        (0..n).rev().collect()
    };

    let mut dh_carry = Tensor1::zeros(d_h);
    let mut dc_carry = Tensor1::zeros(d_h);
    for &t in &order {
        let cache = &run.caches[t];
        let dh_total = &d_hs[t] + &dh_carry;
        let dc_total = dc_carry.clone();
        let mut da = d_as[t].clone();

        let cand_h: Vec<Tensor1> = cache.cells.iter().map(|c| c.hidden()).collect();

        let mut dh_k: Vec<Tensor1> = Vec::with_capacity(k);
        let mut dc_k: Vec<Tensor1> = Vec::with_capacity(k);
        for i in 0..k {
            da[i] += dh_total.dot(&cand_h[i]) + dc_total.dot(&cache.cells[i].c);
            dh_k.push(&dh_total * cache.a[i]);
            dc_k.push(&dc_total * cache.a[i]);
        }

        if cache.soft {
            // Softmax jacobian: dlogit = a * (da - <a, da>).
            let inner = cache.a.dot(&da);
            let dlogits = &cache.a * &(da.mapv(|v| v) - inner);
            let has_task = params.d_task() > 0 && !ablate.task;
            for i in 0..k {
                let dl = dlogits[i];
                if dl == 0.0 {
                    continue;
                }
                let row = params.switch.row(i);
                let mut grow = grads.switch.row_mut(i);
                if !ablate.input {
                    grow.slice_mut(ndarray::s![..d_in]).scaled_add(dl, &xs[t].view());
                    d_xs[t].scaled_add(dl, &row.slice(ndarray::s![..d_in]));
                }
                if !ablate.state {
                    grow.slice_mut(ndarray::s![d_in..d_in + d_h])
                        .scaled_add(dl, &cand_h[i].view());
                    dh_k[i].scaled_add(dl, &row.slice(ndarray::s![d_in..d_in + d_h]));
                }
                if has_task {
                    if let (Some(em), Some(dt)) = (task_emb, d_task.as_deref_mut()) {
                        grow.slice_mut(ndarray::s![d_in + d_h..]).scaled_add(dl, &em.view());
                        dt.scaled_add(dl, &row.slice(ndarray::s![d_in + d_h..]));
                    }
                }
            }
        }

        let mut dh_prev = Tensor1::zeros(d_h);
        let mut dc_prev = Tensor1::zeros(d_h);
        for i in 0..k {
            let (dx, dhp, dcp) = lstm_step_backward(
                &xs[t],
                &cache.h_prev,
                &cache.c_prev,
                &cache.cells[i],
                &params.cells[i],
                &dh_k[i],
                &dc_k[i],
                &mut grads.cells[i],
            );
            d_xs[t] += &dx;
            dh_prev += &dhp;
            dc_prev += &dcp;
        }
        dh_carry = dh_prev;
        dc_carry = dc_prev;
    }
    Ok(())
}

/// Raw trace export: one row per (direction, position, k) with columns
/// task, direction, position, k, weight.
pub fn write_trace_tsv(
    mut w: impl Write,
    task: &str,
    traces: &[SwitchTrace],
    with_header: bool,
) -> Result<()> {
    if with_header {
        writeln!(w, "task\tdirection\tposition\tk\tweight")?;
    }
    for trace in traces {
        for (dir, rows) in [("forward", &trace.forward), ("backward", &trace.backward)] {
            for (t, a) in rows.iter().enumerate() {
                for (k, weight) in a.iter().enumerate() {
                    writeln!(w, "{task}\t{dir}\t{t}\t{k}\t{weight:.6}")?;
                }
            }
        }
    }
    Ok(())
}
