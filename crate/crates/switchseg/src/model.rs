//! The assembled segmenter: embedding lookup with input dropout, the
//! bidirectional switched recurrence, the switch-weighted emission
//! projection, and the CRF on top, with an exact end-to-end backward pass.

use serde::{Deserialize, Serialize};

use crate::corpus::Label;
use crate::crf::{self, CrfGrads, CrfParams};
use crate::embeddings::{input_vector, EmbeddingTable, EncodedSentence, TaskTable};
use crate::numerics::{dropout_mask, finite_diff_grad, relative_l2, Rng, Tensor1, Tensor2};
use crate::switch_lstm::{
    direction_backward, emissions_backward, emissions_forward, run_bidirectional, trace_of,
    DirectionGrads, DirectionParams, SwitchMode, SwitchTrace,
};
use crate::{Error, Result};

/// Architecture hyperparameters; everything a checkpoint needs to rebuild
/// the parameter shapes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of candidate cells per direction.
    pub k: usize,
    /// Character embedding size.
    pub d_embed: usize,
    /// Bigram embedding size; 0 disables the bigram channel.
    pub d_bigram: usize,
    /// Hidden size of every cell.
    pub d_hidden: usize,
    /// Task embedding size (only used in multi-criteria mode).
    pub d_task: usize,
    /// Multi-criteria mode: switcher sees a task embedding.
    pub multi: bool,
    /// Enable start/stop transition vectors in the CRF.
    pub crf_boundary: bool,
}

impl ModelConfig {
    pub fn d_input(&self) -> usize {
        self.d_embed + self.d_bigram
    }

    fn switch_task_width(&self) -> usize {
        if self.multi {
            self.d_task
        } else {
            0
        }
    }
}

/// All trainable state.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub char_table: EmbeddingTable,
    pub bigram_table: Option<EmbeddingTable>,
    pub task_table: Option<TaskTable>,
    pub fwd: DirectionParams,
    pub bwd: DirectionParams,
    pub crf: CrfParams,
}

/// Gradient accumulators mirroring [`Model`]; embedding gradients are dense
/// tables of the same shape.
#[derive(Clone, Debug)]
pub struct ModelGrads {
    pub char_table: Tensor2,
    pub bigram_table: Option<Tensor2>,
    pub task_table: Option<Tensor2>,
    pub fwd: DirectionGrads,
    pub bwd: DirectionGrads,
    pub crf: CrfGrads,
}

/// Forward/backward behaviour toggles for one pass.
#[derive(Clone, Copy, Debug)]
pub struct PassOptions {
    pub train: bool,
    pub dropout: f64,
    pub mode: SwitchMode,
}

impl PassOptions {
    pub fn eval(mode: SwitchMode) -> PassOptions {
        PassOptions { train: false, dropout: 0.0, mode }
    }

    pub fn train(dropout: f64, mode: SwitchMode) -> PassOptions {
        PassOptions { train: true, dropout, mode }
    }
}

/// Result of a training pass over one sentence.
pub struct LossOutput {
    pub nll: f64,
    pub tokens: usize,
    pub trace: SwitchTrace,
}

impl Model {
    pub fn new(
        cfg: ModelConfig,
        char_vocab: usize,
        bigram_vocab: Option<usize>,
        task_capacity: usize,
        rng: &mut Rng,
    ) -> Result<Model> {
        if cfg.k == 0 {
            return Err(Error::Config("K must be at least 1".into()));
        }
        if cfg.d_bigram > 0 && bigram_vocab.is_none() {
            return Err(Error::Config("bigram channel enabled but no bigram vocabulary".into()));
        }
        let char_table = EmbeddingTable::new(char_vocab, cfg.d_embed, rng)?;
        let bigram_table = if cfg.d_bigram > 0 {
            Some(EmbeddingTable::new(bigram_vocab.unwrap(), cfg.d_bigram, rng)?)
        } else {
            None
        };
        let task_table = if cfg.multi {
            Some(TaskTable::new(task_capacity.max(1), cfg.d_task, rng)?)
        } else {
            None
        };
        let fwd = DirectionParams::new(cfg.k, cfg.d_input(), cfg.d_hidden, cfg.switch_task_width(), rng)?;
        let bwd = DirectionParams::new(cfg.k, cfg.d_input(), cfg.d_hidden, cfg.switch_task_width(), rng)?;
        let crf = CrfParams::zeros(cfg.crf_boundary);
        Ok(Model { cfg, char_table, bigram_table, task_table, fwd, bwd, crf })
    }

    fn task_embedding(&self, task: Option<u32>) -> Result<Option<Tensor1>> {
        match (self.cfg.multi, task, &self.task_table) {
            (true, Some(id), Some(table)) => Ok(Some(table.embedding(id)?.to_owned())),
            (true, None, _) => Err(Error::invalid("multi-criteria model needs a task id")),
            (true, _, None) => Err(Error::invalid("multi-criteria model is missing its task table")),
            (false, Some(_), _) => Err(Error::invalid(
                "single-criterion model cannot take a task id",
            )),
            (false, None, _) => Ok(None),
        }
    }

    /// Per-position input vectors, with inverted-dropout masks in training.
    fn build_inputs(
        &self,
        sent: &EncodedSentence,
        opts: &PassOptions,
        mut rng: Option<&mut Rng>,
    ) -> Result<(Vec<Tensor1>, Option<Vec<Tensor1>>)> {
        if sent.is_empty() {
            return Err(Error::invalid("cannot run on an empty sentence"));
        }
        let n = sent.len();
        let mut xs = Vec::with_capacity(n);
        let mut masks = if opts.train && opts.dropout > 0.0 {
            Some(Vec::with_capacity(n))
        } else {
            None
        };
        for t in 0..n {
            let mut x = input_vector(sent, t, &self.char_table, self.bigram_table.as_ref())?;
            if let Some(masks) = masks.as_mut() {
                let rng = rng
                    .as_deref_mut()
                    .ok_or_else(|| Error::invalid("training pass with dropout needs an RNG"))?;
                let mask = dropout_mask(opts.dropout, x.len(), rng)?;
                x = &x * &mask;
                masks.push(mask);
            }
            xs.push(x);
        }
        Ok((xs, masks))
    }

    /// Forward + backward over one sentence. Gradients (of `scale` * nll)
    /// are accumulated into `grads`; the returned nll is unscaled.
    #[allow(clippy::too_many_arguments)]
    pub fn loss_and_grads(
        &self,
        sent: &EncodedSentence,
        labels: &[Label],
        task: Option<u32>,
        opts: &PassOptions,
        mut rng: Option<&mut Rng>,
        scale: f64,
        grads: &mut ModelGrads,
    ) -> Result<LossOutput> {
        let task_emb = self.task_embedding(task)?;
        let (xs, masks) = self.build_inputs(sent, opts, rng.as_deref_mut())?;
        let (run_f, run_b) = run_bidirectional(
            &xs,
            &self.fwd,
            &self.bwd,
            task_emb.as_ref(),
            opts.mode,
            opts.train,
            rng,
        )?;
        let (emissions, emis_cache) =
            emissions_forward(&run_f, &run_b, &self.fwd.proj, &self.bwd.proj)?;
        let (nll, mut d_emissions, mut crf_grads) =
            crf::log_likelihood(&emissions, &self.crf, labels)?;
        if !nll.is_finite() {
            return Err(Error::Numerical("sentence loss is not finite".into()));
        }

        d_emissions.mapv_inplace(|v| v * scale);
        crf_grads.transitions.mapv_inplace(|v| v * scale);
        if let Some((s, e)) = crf_grads.boundary.as_mut() {
            s.mapv_inplace(|v| v * scale);
            e.mapv_inplace(|v| v * scale);
        }
        grads.crf.add_assign(&crf_grads);

        let (d_h_f, d_h_b, d_a_f, d_a_b) = emissions_backward(
            &d_emissions,
            &run_f,
            &run_b,
            &self.fwd.proj,
            &self.bwd.proj,
            &emis_cache,
            &mut grads.fwd,
            &mut grads.bwd,
        );

        let mut d_xs = vec![Tensor1::zeros(self.cfg.d_input()); xs.len()];
        let mut d_task = task_emb.as_ref().map(|e| Tensor1::zeros(e.len()));
        let ablate = opts.mode.ablation();
        direction_backward(
            &xs,
            &run_f,
            &self.fwd,
            task_emb.as_ref(),
            ablate,
            &d_h_f,
            &d_a_f,
            &mut grads.fwd,
            &mut d_xs,
            d_task.as_mut(),
        )?;
        direction_backward(
            &xs,
            &run_b,
            &self.bwd,
            task_emb.as_ref(),
            ablate,
            &d_h_b,
            &d_a_b,
            &mut grads.bwd,
            &mut d_xs,
            d_task.as_mut(),
        )?;

        if let (Some(d_task), Some(task_grads), Some(id)) =
            (d_task, grads.task_table.as_mut(), task)
        {
            let mut row = task_grads.row_mut(id as usize);
            row += &d_task;
        }

        let d_e = self.cfg.d_embed;
        for (t, mut dx) in d_xs.into_iter().enumerate() {
            if let Some(masks) = &masks {
                dx = &dx * &masks[t];
            }
            let mut char_row = grads.char_table.row_mut(sent.char_ids[t] as usize);
            char_row += &dx.slice(ndarray::s![..d_e]);
            if let (Some(bigram_grads), Some(ids)) =
                (grads.bigram_table.as_mut(), &sent.bigram_ids)
            {
                let mut row = bigram_grads.row_mut(ids[t] as usize);
                row += &dx.slice(ndarray::s![d_e..]);
            }
        }

        Ok(LossOutput { nll, tokens: labels.len(), trace: trace_of(&run_f, &run_b) })
    }

    /// Forward-only negative log-likelihood (used by the finite-difference
    /// oracle).
    pub fn sentence_nll(
        &self,
        sent: &EncodedSentence,
        labels: &[Label],
        task: Option<u32>,
        opts: &PassOptions,
        mut rng: Option<&mut Rng>,
    ) -> Result<f64> {
        let task_emb = self.task_embedding(task)?;
        let (xs, _) = self.build_inputs(sent, opts, rng.as_deref_mut())?;
        let (run_f, run_b) = run_bidirectional(
            &xs,
            &self.fwd,
            &self.bwd,
            task_emb.as_ref(),
            opts.mode,
            opts.train,
            rng,
        )?;
        let (emissions, _) = emissions_forward(&run_f, &run_b, &self.fwd.proj, &self.bwd.proj)?;
        let (nll, _, _) = crf::log_likelihood(&emissions, &self.crf, labels)?;
        Ok(nll)
    }

    /// Viterbi decoding of one sentence.
    pub fn decode(
        &self,
        sent: &EncodedSentence,
        task: Option<u32>,
        opts: &PassOptions,
        mut rng: Option<&mut Rng>,
    ) -> Result<(Vec<Label>, SwitchTrace)> {
        let task_emb = self.task_embedding(task)?;
        let (xs, _) = self.build_inputs(sent, opts, rng.as_deref_mut())?;
        let (run_f, run_b) = run_bidirectional(
            &xs,
            &self.fwd,
            &self.bwd,
            task_emb.as_ref(),
            opts.mode,
            opts.train,
            rng,
        )?;
        let (emissions, _) = emissions_forward(&run_f, &run_b, &self.fwd.proj, &self.bwd.proj)?;
        let labels = crf::viterbi(&emissions, &self.crf)?;
        Ok((labels, trace_of(&run_f, &run_b)))
    }

    /// Hidden trajectories of both directions (testing hook for the K=1
    /// reduction checks).
    pub fn hidden_trajectories(
        &self,
        sent: &EncodedSentence,
        task: Option<u32>,
    ) -> Result<(Vec<Tensor1>, Vec<Tensor1>)> {
        let task_emb = self.task_embedding(task)?;
        let (xs, _) = self.build_inputs(sent, &PassOptions::eval(SwitchMode::Normal), None)?;
        let (run_f, run_b) = run_bidirectional(
            &xs,
            &self.fwd,
            &self.bwd,
            task_emb.as_ref(),
            SwitchMode::Normal,
            false,
            None,
        )?;
        Ok((run_f.hs, run_b.hs))
    }
}

/// Borrowed view of one named parameter tensor.
pub enum TensorView<'a> {
    One(&'a Tensor1),
    Two(&'a Tensor2),
}

impl TensorView<'_> {
    pub fn len(&self) -> usize {
        match self {
            TensorView::One(t) => t.len(),
            TensorView::Two(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            TensorView::One(t) => (t.len(), 0),
            TensorView::Two(t) => (t.nrows(), t.ncols()),
        }
    }

    pub fn iter(&self) -> Box<dyn Iterator<Item = &f64> + '_> {
        match self {
            TensorView::One(t) => Box::new(t.iter()),
            TensorView::Two(t) => Box::new(t.iter()),
        }
    }
}

pub enum TensorViewMut<'a> {
    One(&'a mut Tensor1),
    Two(&'a mut Tensor2),
}

fn visit_direction<'a>(
    prefix: &str,
    dir: &'a DirectionParams,
    f: &mut dyn FnMut(String, TensorView<'a>),
) {
    for (i, cell) in dir.cells.iter().enumerate() {
        f(format!("{prefix}.cell{i}.input"), TensorView::Two(&cell.w_input));
        f(format!("{prefix}.cell{i}.recurrent"), TensorView::Two(&cell.w_recur));
        f(format!("{prefix}.cell{i}.bias"), TensorView::One(&cell.bias));
    }
    f(format!("{prefix}.switch"), TensorView::Two(&dir.switch));
    for (i, p) in dir.proj.iter().enumerate() {
        f(format!("{prefix}.proj{i}"), TensorView::Two(p));
    }
}

fn visit_direction_mut<'a>(
    prefix: &str,
    dir: &'a mut DirectionParams,
    f: &mut dyn FnMut(String, TensorViewMut<'a>),
) {
    for (i, cell) in dir.cells.iter_mut().enumerate() {
        f(format!("{prefix}.cell{i}.input"), TensorViewMut::Two(&mut cell.w_input));
        f(format!("{prefix}.cell{i}.recurrent"), TensorViewMut::Two(&mut cell.w_recur));
        f(format!("{prefix}.cell{i}.bias"), TensorViewMut::One(&mut cell.bias));
    }
    f(format!("{prefix}.switch"), TensorViewMut::Two(&mut dir.switch));
    for (i, p) in dir.proj.iter_mut().enumerate() {
        f(format!("{prefix}.proj{i}"), TensorViewMut::Two(p));
    }
}

fn visit_direction_grads<'a>(
    prefix: &str,
    dir: &'a DirectionGrads,
    f: &mut dyn FnMut(String, TensorView<'a>),
) {
    for (i, cell) in dir.cells.iter().enumerate() {
        f(format!("{prefix}.cell{i}.input"), TensorView::Two(&cell.w_input));
        f(format!("{prefix}.cell{i}.recurrent"), TensorView::Two(&cell.w_recur));
        f(format!("{prefix}.cell{i}.bias"), TensorView::One(&cell.bias));
    }
    f(format!("{prefix}.switch"), TensorView::Two(&dir.switch));
    for (i, p) in dir.proj.iter().enumerate() {
        f(format!("{prefix}.proj{i}"), TensorView::Two(p));
    }
}

impl Model {
    /// Visit every parameter tensor in a fixed, documented order. This
    /// order defines the flat layout used by the optimizer and checkpoints.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, TensorView<'a>)) {
        f("embeddings.char".to_string(), TensorView::Two(&self.char_table.weights));
        if let Some(b) = &self.bigram_table {
            f("embeddings.bigram".to_string(), TensorView::Two(&b.weights));
        }
        if let Some(t) = &self.task_table {
            f("embeddings.task".to_string(), TensorView::Two(&t.weights));
        }
        visit_direction("fwd", &self.fwd, f);
        visit_direction("bwd", &self.bwd, f);
        f("crf.transitions".to_string(), TensorView::Two(&self.crf.transitions));
        if let Some((s, e)) = &self.crf.boundary {
            f("crf.start".to_string(), TensorView::One(s));
            f("crf.stop".to_string(), TensorView::One(e));
        }
    }

    pub fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(String, TensorViewMut<'a>)) {
        f("embeddings.char".to_string(), TensorViewMut::Two(&mut self.char_table.weights));
        if let Some(b) = &mut self.bigram_table {
            f("embeddings.bigram".to_string(), TensorViewMut::Two(&mut b.weights));
        }
        if let Some(t) = &mut self.task_table {
            f("embeddings.task".to_string(), TensorViewMut::Two(&mut t.weights));
        }
        visit_direction_mut("fwd", &mut self.fwd, f);
        visit_direction_mut("bwd", &mut self.bwd, f);
        f("crf.transitions".to_string(), TensorViewMut::Two(&mut self.crf.transitions));
        if let Some((s, e)) = &mut self.crf.boundary {
            f("crf.start".to_string(), TensorViewMut::One(s));
            f("crf.stop".to_string(), TensorViewMut::One(e));
        }
    }

    /// Flat parameter vector plus named spans into it.
    pub fn flat_params(&self) -> (Vec<f64>, Vec<ParamSpan>) {
        let mut flat = Vec::new();
        let mut spans = Vec::new();
        self.visit(&mut |name, view| {
            let start = flat.len();
            flat.extend(view.iter());
            spans.push(ParamSpan { name, start, len: flat.len() - start });
        });
        (flat, spans)
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) {
        let mut pos = 0usize;
        self.visit_mut(&mut |_, view| match view {
            TensorViewMut::One(t) => {
                for v in t.iter_mut() {
                    *v = flat[pos];
                    pos += 1;
                }
            }
            TensorViewMut::Two(t) => {
                for v in t.iter_mut() {
                    *v = flat[pos];
                    pos += 1;
                }
            }
        });
        debug_assert_eq!(pos, flat.len());
    }

    /// Number of model parameters. Input embedding tables (char, bigram)
    /// are excluded from the reported count; the task table contributes its
    /// registered rows only.
    pub fn param_count(&self) -> usize {
        let mut count = 0usize;
        self.visit(&mut |name, view| {
            if name.starts_with("embeddings.char") || name.starts_with("embeddings.bigram") {
                return;
            }
            if name == "embeddings.task" {
                if let Some(t) = &self.task_table {
                    count += t.registered() * t.dim();
                }
                return;
            }
            count += view.len();
        });
        count
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpan {
    pub name: String,
    pub start: usize,
    pub len: usize,
}

impl ModelGrads {
    pub fn zeros_like(model: &Model) -> ModelGrads {
        ModelGrads {
            char_table: Tensor2::zeros(model.char_table.weights.raw_dim()),
            bigram_table: model
                .bigram_table
                .as_ref()
                .map(|b| Tensor2::zeros(b.weights.raw_dim())),
            task_table: model
                .task_table
                .as_ref()
                .map(|t| Tensor2::zeros(t.weights.raw_dim())),
            fwd: DirectionGrads::zeros_like(&model.fwd),
            bwd: DirectionGrads::zeros_like(&model.bwd),
            crf: CrfGrads::zeros_like(&model.crf),
        }
    }

    pub fn add_assign(&mut self, other: &ModelGrads) {
        self.char_table += &other.char_table;
        if let (Some(a), Some(b)) = (self.bigram_table.as_mut(), other.bigram_table.as_ref()) {
            *a += b;
        }
        if let (Some(a), Some(b)) = (self.task_table.as_mut(), other.task_table.as_ref()) {
            *a += b;
        }
        self.fwd.add_assign(&other.fwd);
        self.bwd.add_assign(&other.bwd);
        self.crf.add_assign(&other.crf);
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, TensorView<'a>)) {
        f("embeddings.char".to_string(), TensorView::Two(&self.char_table));
        if let Some(b) = &self.bigram_table {
            f("embeddings.bigram".to_string(), TensorView::Two(b));
        }
        if let Some(t) = &self.task_table {
            f("embeddings.task".to_string(), TensorView::Two(t));
        }
        visit_direction_grads("fwd", &self.fwd, f);
        visit_direction_grads("bwd", &self.bwd, f);
        f("crf.transitions".to_string(), TensorView::Two(&self.crf.transitions));
        if let Some((s, e)) = &self.crf.boundary {
            f("crf.start".to_string(), TensorView::One(s));
            f("crf.stop".to_string(), TensorView::One(e));
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut flat = Vec::new();
        self.visit(&mut |_, view| flat.extend(view.iter()));
        flat
    }
}

/// Compare analytic gradients of the summed batch nll against central
/// finite differences (the independent oracle), per parameter group.
/// Returns (group name, relative L2 error) pairs.
pub fn gradient_check_errors(
    model: &Model,
    batch: &[(EncodedSentence, Vec<Label>, Option<u32>)],
    eps: f64,
) -> Result<Vec<(String, f64)>> {
    let opts = PassOptions::eval(SwitchMode::Normal);
    let mut grads = ModelGrads::zeros_like(model);
    for (sent, labels, task) in batch {
        model.loss_and_grads(sent, labels, *task, &opts, None, 1.0, &mut grads)?;
    }
    let analytic = grads.flat();

    let (flat, spans) = model.flat_params();
    let mut f = |v: &[f64]| {
        let mut m = model.clone();
        m.set_flat_params(v);
        let mut total = 0.0;
        for (sent, labels, task) in batch {
            total += m.sentence_nll(sent, labels, *task, &opts, None)?;
        }
        Ok(total)
    };
    let numeric = finite_diff_grad(&mut f, &flat, eps)?;

    Ok(spans
        .into_iter()
        .map(|span| {
            let a = &analytic[span.start..span.start + span.len];
            let n = &numeric[span.start..span.start + span.len];
            (span.name, relative_l2(a, n))
        })
        .collect())
}
