//! Multi-corpus training: proportional task sampling, synchronous
//! multi-batch steps against a frozen parameter snapshot, Adam with global
//! gradient-norm clipping, early stopping on averaged dev F, and transfer
//! mode where only a newly registered task embedding trains.
//!
//! Determinism: every random draw comes from a seed derived from the run
//! seed and a tag path (step, slot, sentence position), so batch gradients
//! are independent of worker scheduling, and chunk gradients are reduced in
//! a fixed order. A fixed seed reproduces the loss trace bit for bit.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;

use crate::corpus::{split_long, split_train_dev, to_bmes, from_bmes, Label, SegmentedSentence};
use crate::embeddings::{bigram_tokens, encode_sentence, EncodedSentence, Vocab};
use crate::metrics::{prf_with_oov, EvalReport};
use crate::model::{Model, ModelConfig, ModelGrads, PassOptions};
use crate::numerics::{derive_seed, rng_from_seed, Rng};
use crate::switch_lstm::{SwitchMode, SwitchTrace};
use crate::{Error, Result};

/// Everything a training run needs to know.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub k: usize,
    pub d_embed: usize,
    pub d_bigram: usize,
    pub d_hidden: usize,
    pub d_task: usize,
    pub multi: bool,
    pub crf_boundary: bool,

    pub batch_size: usize,
    pub tasks_per_step: usize,
    pub dropout: f64,
    pub patience: usize,
    pub max_epochs: usize,
    /// Optional convergence gate: stop once every task's dev F reaches it.
    pub stop_at_min_dev_f: Option<f64>,

    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,

    pub seed: u64,
    pub switch_mode: SwitchMode,
    pub min_count: u64,
    pub sentence_cap: usize,
    pub dev_fraction: f64,
    /// Spare task-embedding slots pre-allocated for later hot-plugging.
    pub task_capacity_extra: usize,
    /// Keep per-step switch traces in the step outcome.
    pub collect_traces: bool,
    /// Sentences per parallel gradient chunk; part of the deterministic
    /// reduction layout, not a performance-only knob.
    pub grad_chunk: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k: 4,
            d_embed: 100,
            d_bigram: 100,
            d_hidden: 100,
            d_task: 20,
            multi: true,
            crf_boundary: false,
            batch_size: 128,
            tasks_per_step: 6,
            dropout: 0.2,
            patience: 7,
            max_epochs: 100,
            stop_at_min_dev_f: None,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 5.0,
            seed: 42,
            switch_mode: SwitchMode::Normal,
            min_count: 1,
            sentence_cap: 300,
            dev_fraction: 0.10,
            task_capacity_extra: 8,
            collect_traces: false,
            grad_chunk: 16,
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            k: self.k,
            d_embed: self.d_embed,
            d_bigram: self.d_bigram,
            d_hidden: self.d_hidden,
            d_task: self.d_task,
            multi: self.multi,
            crf_boundary: self.crf_boundary,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.k == 0 || self.batch_size == 0 || self.tasks_per_step == 0 {
            return Err(Error::Config("k, batch_size, tasks_per_step must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// A raw dataset handed to the trainer; dev is split off the training part
/// when absent.
#[derive(Clone, Debug)]
pub struct TaskSpec {
    pub name: String,
    pub train: Vec<SegmentedSentence>,
    pub dev: Option<Vec<SegmentedSentence>>,
}

/// One encoded training/eval example.
#[derive(Clone, Debug)]
pub struct Instance {
    pub enc: EncodedSentence,
    pub labels: Vec<Label>,
    pub gold: SegmentedSentence,
}

/// A prepared task: encoded splits plus OOV bookkeeping for reporting.
#[derive(Clone, Debug)]
pub struct TaskData {
    pub name: String,
    pub train: Vec<Instance>,
    pub dev: Vec<Instance>,
    pub oov: HashSet<String>,
}

/// The shared vocabularies of one run.
#[derive(Clone, Debug)]
pub struct Vocabs {
    pub chars: Vocab,
    pub bigrams: Option<Vocab>,
}

impl Vocabs {
    pub fn build(config: &TrainConfig, corpora: &[&[SegmentedSentence]]) -> Result<Vocabs> {
        let char_streams: Vec<Vec<String>> = corpora
            .iter()
            .map(|c| {
                c.iter()
                    .flat_map(|s| s.chars().into_iter().map(|ch| ch.to_string()))
                    .collect()
            })
            .collect();
        let chars = Vocab::build(&char_streams, config.min_count)?;
        let bigrams = if config.d_bigram > 0 {
            let bigram_streams: Vec<Vec<String>> = corpora
                .iter()
                .map(|c| c.iter().flat_map(|s| bigram_tokens(&s.chars())).collect())
                .collect();
            Some(Vocab::build(&bigram_streams, config.min_count)?)
        } else {
            None
        };
        Ok(Vocabs { chars, bigrams })
    }

    pub fn encode(&self, sentence: &SegmentedSentence) -> Instance {
        let chars = sentence.chars();
        Instance {
            enc: encode_sentence(&chars, &self.chars, self.bigrams.as_ref()),
            labels: to_bmes(sentence),
            gold: sentence.clone(),
        }
    }
}

/// Per-task sampling probabilities proportional to training-set size.
#[derive(Clone, Debug)]
pub struct TaskWeights {
    probs: Vec<f64>,
}

impl TaskWeights {
    pub fn proportional(sizes: &[usize]) -> Result<TaskWeights> {
        if sizes.is_empty() || sizes.iter().all(|&s| s == 0) {
            return Err(Error::invalid("task pool is empty"));
        }
        let total: f64 = sizes.iter().map(|&s| s as f64).sum();
        Ok(TaskWeights { probs: sizes.iter().map(|&s| s as f64 / total).collect() })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

/// `count` i.i.d. draws (with replacement) from the task weights.
pub fn sample_tasks(weights: &TaskWeights, count: usize, rng: &mut Rng) -> Vec<usize> {
    (0..count)
        .map(|_| {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut chosen = weights.probs.len() - 1;
            for (i, p) in weights.probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    chosen = i;
                    break;
                }
            }
            chosen
        })
        .collect()
}

/// Shuffled-epoch batch cursor over one task's training set.
#[derive(Clone, Debug)]
struct TaskCursor {
    order: Vec<usize>,
    pos: usize,
    rng: Rng,
}

impl TaskCursor {
    fn new(n: usize, seed: u64) -> TaskCursor {
        let mut cursor = TaskCursor { order: (0..n).collect(), pos: 0, rng: rng_from_seed(seed) };
        cursor.order.shuffle(&mut cursor.rng);
        cursor
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut batch = Vec::with_capacity(size);
        while batch.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            batch.push(self.order[self.pos]);
            self.pos += 1;
        }
        batch
    }
}

/// Adam moments over the flat parameter vector.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> AdamState {
        AdamState { m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// Rescale gradients so their global L2 norm is at most `max_norm`;
/// returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm: f64 = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            *g *= scale;
        }
    }
    norm
}

/// One Adam update with bias correction. Coordinates where `trainable` is
/// false are skipped entirely (parameters and moments untouched).
pub fn adam_update(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    hyper: &AdamHyper,
    trainable: Option<&[bool]>,
) {
    state.t += 1;
    let b1t = 1.0 - hyper.beta1.powi(state.t as i32);
    let b2t = 1.0 - hyper.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        if let Some(mask) = trainable {
            if !mask[i] {
                continue;
            }
        }
        let g = grads[i];
        state.m[i] = hyper.beta1 * state.m[i] + (1.0 - hyper.beta1) * g;
        state.v[i] = hyper.beta2 * state.v[i] + (1.0 - hyper.beta2) * g * g;
        let m_hat = state.m[i] / b1t;
        let v_hat = state.v[i] / b2t;
        params[i] -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
    }
}

/// Patience-based early stopping on a maximized metric.
#[derive(Clone, Debug)]
pub struct EarlyStopper {
    best: Option<f64>,
    since_improvement: usize,
    patience: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> EarlyStopper {
        EarlyStopper { best: None, since_improvement: 0, patience }
    }

    /// Record an epoch value; returns true when it improved on the best.
    pub fn update(&mut self, value: f64) -> bool {
        match self.best {
            Some(best) if value <= best => {
                self.since_improvement += 1;
                false
            }
            _ => {
                self.best = Some(value);
                self.since_improvement = 0;
                true
            }
        }
    }

    pub fn should_stop(&self) -> bool {
        self.since_improvement >= self.patience
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }
}

/// Per-task dev evaluation of one epoch.
#[derive(Clone, Debug)]
pub struct TaskEval {
    pub name: String,
    pub report: EvalReport,
}

#[derive(Clone, Debug)]
pub struct EpochRecord {
    pub epoch: usize,
    pub tasks: Vec<TaskEval>,
    pub avg_f: f64,
    pub mean_loss: f64,
}

pub const HISTORY_TSV_HEADER: &str = "epoch\ttask\tprecision\trecall\tf1\toov_recall\tavg_f";

pub fn history_tsv_rows(record: &EpochRecord) -> Vec<String> {
    record
        .tasks
        .iter()
        .map(|t| {
            let oov = match t.report.oov_recall {
                Some(v) => format!("{v:.4}"),
                None => "-".to_string(),
            };
            format!(
                "{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{}\t{:.4}",
                record.epoch, t.name, t.report.precision, t.report.recall, t.report.f1, oov,
                record.avg_f
            )
        })
        .collect()
}

/// Outcome of one optimizer step.
pub struct StepOutcome {
    /// Mean per-token negative log-likelihood over the step's batches.
    pub loss: f64,
    /// Switch traces of every sentence in the step (when collection is on).
    pub traces: Vec<SwitchTrace>,
}

/// A training run in progress.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub vocabs: Vocabs,
    pub tasks: Vec<TaskData>,
    weights: TaskWeights,
    cursors: Vec<TaskCursor>,
    sample_rng: Rng,
    adam: AdamState,
    trainable: Option<Vec<bool>>,
    /// Transfer mode: every prepared task addresses this embedding row
    /// instead of its own index.
    embedding_override: Option<u32>,
    step: u64,
}

fn prepare_tasks(config: &TrainConfig, specs: &[TaskSpec]) -> Result<(Vec<TaskData>, Vocabs)> {
    if specs.is_empty() {
        return Err(Error::invalid("need at least one dataset"));
    }
    if !config.multi && specs.len() > 1 {
        return Err(Error::Config(
            "single-criterion mode takes exactly one dataset; pool them or use multi mode".into(),
        ));
    }
    // Resolve dev splits first, then cap-split long training sentences.
    let mut resolved: Vec<(String, Vec<SegmentedSentence>, Vec<SegmentedSentence>)> = Vec::new();
    for (idx, spec) in specs.iter().enumerate() {
        if spec.train.is_empty() {
            return Err(Error::invalid(format!("dataset '{}' has no training sentences", spec.name)));
        }
        let (train_raw, dev) = match &spec.dev {
            Some(dev) => (spec.train.clone(), dev.clone()),
            None => split_train_dev(
                &spec.train,
                config.dev_fraction,
                derive_seed(config.seed, &[0x5714, idx as u64]),
            ),
        };
        let train = split_long(&train_raw, config.sentence_cap);
        resolved.push((spec.name.clone(), train, dev));
    }

    let train_refs: Vec<&[SegmentedSentence]> =
        resolved.iter().map(|(_, train, _)| train.as_slice()).collect();
    let vocabs = Vocabs::build(config, &train_refs)?;

    let tasks = resolved
        .into_iter()
        .map(|(name, train, dev)| {
            let (oov, _) = crate::corpus::oov_words(&train, &dev);
            TaskData {
                name,
                train: train.iter().map(|s| vocabs.encode(s)).collect(),
                dev: dev.iter().map(|s| vocabs.encode(s)).collect(),
                oov,
            }
        })
        .collect();
    Ok((tasks, vocabs))
}

struct ChunkJob {
    task: usize,
    slot: usize,
    /// Position of the first sentence of this chunk within its batch.
    base: usize,
    indices: Vec<usize>,
    scale: f64,
}

struct ChunkOutcome {
    grads: ModelGrads,
    nll: f64,
    tokens: usize,
    traces: Vec<SwitchTrace>,
}

impl Trainer {
    pub fn new(config: TrainConfig, specs: &[TaskSpec]) -> Result<Trainer> {
        config.validate()?;
        let (tasks, vocabs) = prepare_tasks(&config, specs)?;
        let mut init_rng = rng_from_seed(derive_seed(config.seed, &[0x1417]));
        let mut model = Model::new(
            config.model_config(),
            vocabs.chars.len(),
            vocabs.bigrams.as_ref().map(|v| v.len()),
            tasks.len() + config.task_capacity_extra,
            &mut init_rng,
        )?;
        if config.multi {
            let table = model.task_table.as_mut().unwrap();
            for _ in 0..tasks.len() {
                table.register(&mut init_rng)?;
            }
        }
        Self::resume(config, model, vocabs, tasks)
    }

    /// Build a trainer around an existing model (transfer, fine-tuning).
    pub fn resume(
        config: TrainConfig,
        model: Model,
        vocabs: Vocabs,
        tasks: Vec<TaskData>,
    ) -> Result<Trainer> {
        let sizes: Vec<usize> = tasks.iter().map(|t| t.train.len()).collect();
        let weights = TaskWeights::proportional(&sizes)?;
        let cursors = tasks
            .iter()
            .enumerate()
            .map(|(i, t)| TaskCursor::new(t.train.len(), derive_seed(config.seed, &[0xC0,
                i as u64])))
            .collect();
        let sample_rng = rng_from_seed(derive_seed(config.seed, &[0x5A]));
        let n_params = model.flat_params().0.len();
        Ok(Trainer {
            config,
            model,
            vocabs,
            tasks,
            weights,
            cursors,
            sample_rng,
            adam: AdamState::new(n_params),
            trainable: None,
            embedding_override: None,
            step: 0,
        })
    }

    /// Freeze every parameter except the given flat spans.
    pub fn freeze_all_except(&mut self, keep: &[(usize, usize)]) {
        let n = self.model.flat_params().0.len();
        let mut mask = vec![false; n];
        for &(start, len) in keep {
            for m in mask.iter_mut().skip(start).take(len) {
                *m = true;
            }
        }
        self.trainable = Some(mask);
    }

    pub fn trainable_count(&self) -> usize {
        match &self.trainable {
            Some(mask) => mask.iter().filter(|&&b| b).count(),
            None => self.model.flat_params().0.len(),
        }
    }

    pub fn steps_per_epoch(&self) -> usize {
        let total: usize = self.tasks.iter().map(|t| t.train.len()).sum();
        let per_step = self.config.tasks_per_step * self.config.batch_size;
        total.div_ceil(per_step)
    }

    fn task_id_for(&self, task_idx: usize) -> Option<u32> {
        if self.config.multi {
            Some(self.embedding_override.unwrap_or(task_idx as u32))
        } else {
            None
        }
    }

    /// One synchronous step: sample tasks, compute every batch gradient
    /// against the current (frozen) parameters, sum them in a fixed order,
    /// clip, and apply a single Adam update.
    pub fn train_step(&mut self) -> Result<StepOutcome> {
        self.step += 1;
        let step = self.step;
        let slots = sample_tasks(&self.weights, self.config.tasks_per_step, &mut self.sample_rng);

        let mut jobs = Vec::new();
        for (slot, &task) in slots.iter().enumerate() {
            let batch = self.cursors[task].next_batch(self.config.batch_size);
            let batch_tokens: usize =
                batch.iter().map(|&i| self.tasks[task].train[i].labels.len()).sum();
            let scale = 1.0 / batch_tokens.max(1) as f64;
            for (chunk_idx, chunk) in batch.chunks(self.config.grad_chunk.max(1)).enumerate() {
                jobs.push(ChunkJob {
                    task,
                    slot,
                    base: chunk_idx * self.config.grad_chunk.max(1),
                    indices: chunk.to_vec(),
                    scale,
                });
            }
        }

        let model = &self.model;
        let config = &self.config;
        let tasks = &self.tasks;
        let embedding_override = self.embedding_override;
        let opts = PassOptions::train(config.dropout, config.switch_mode);
        let results: Vec<Result<ChunkOutcome>> = jobs
            .par_iter()
            .map(|job| {
                let task_id = if config.multi {
                    Some(embedding_override.unwrap_or(job.task as u32))
                } else {
                    None
                };
                let mut grads = ModelGrads::zeros_like(model);
                let mut nll = 0.0;
                let mut tokens = 0usize;
                let mut traces = Vec::new();
                for (offset, &idx) in job.indices.iter().enumerate() {
                    let inst = &tasks[job.task].train[idx];
                    let mut rng = rng_from_seed(derive_seed(
                        config.seed,
                        &[0xBA7C, step, job.slot as u64, (job.base + offset) as u64],
                    ));
                    let out = model
                        .loss_and_grads(
                            &inst.enc,
                            &inst.labels,
                            task_id,
                            &opts,
                            Some(&mut rng),
                            job.scale,
                            &mut grads,
                        )
                        .map_err(|e| match e {
                            Error::Numerical(msg) => Error::Numerical(format!(
                                "step {step}, task {}, sentence {idx}: {msg}",
                                tasks[job.task].name
                            )),
                            other => other,
                        })?;
                    nll += out.nll;
                    tokens += out.tokens;
                    if config.collect_traces {
                        traces.push(out.trace);
                    }
                }
                Ok(ChunkOutcome { grads, nll, tokens, traces })
            })
            .collect();

        // Fixed-order reduction: chunk order is defined by the job list, not
        // by worker scheduling.
        let mut total = ModelGrads::zeros_like(&self.model);
        let mut nll_sum = 0.0;
        let mut token_sum = 0usize;
        let mut traces = Vec::new();
        for result in results {
            let chunk = result?;
            total.add_assign(&chunk.grads);
            nll_sum += chunk.nll;
            token_sum += chunk.tokens;
            traces.extend(chunk.traces);
        }

        let mut flat_grads = total.flat();
        clip_global_norm(&mut flat_grads, self.config.clip_norm);
        let (mut flat_params, _) = self.model.flat_params();
        adam_update(
            &mut flat_params,
            &flat_grads,
            &mut self.adam,
            &AdamHyper {
                lr: self.config.lr,
                beta1: self.config.beta1,
                beta2: self.config.beta2,
                eps: self.config.eps,
            },
            self.trainable.as_deref(),
        );
        self.model.set_flat_params(&flat_params);

        Ok(StepOutcome { loss: nll_sum / token_sum.max(1) as f64, traces })
    }

    /// Decode one task's dev set and score it.
    pub fn evaluate_task(&self, task_idx: usize) -> Result<TaskEval> {
        let task = &self.tasks[task_idx];
        let report = evaluate_model(
            &self.model,
            &task.dev,
            self.task_id_for(task_idx),
            Some(&task.oov),
            self.config.switch_mode,
            self.config.seed,
        )?;
        Ok(TaskEval { name: task.name.clone(), report })
    }

    pub fn evaluate_all(&self) -> Result<(Vec<TaskEval>, f64)> {
        let evals: Vec<TaskEval> = (0..self.tasks.len())
            .map(|i| self.evaluate_task(i))
            .collect::<Result<Vec<_>>>()?;
        let avg = evals.iter().map(|e| e.report.f1).sum::<f64>() / evals.len() as f64;
        Ok((evals, avg))
    }
}

/// Decode and score a corpus of instances with a given model.
pub fn evaluate_model(
    model: &Model,
    instances: &[Instance],
    task_id: Option<u32>,
    oov: Option<&HashSet<String>>,
    mode: SwitchMode,
    seed: u64,
) -> Result<EvalReport> {
    let opts = PassOptions::eval(mode);
    let decoded: Vec<Result<SegmentedSentence>> = instances
        .par_iter()
        .enumerate()
        .map(|(idx, inst)| {
            let mut rng = rng_from_seed(derive_seed(seed, &[0xE7A1, idx as u64]));
            let (labels, _) = model.decode(&inst.enc, task_id, &opts, Some(&mut rng))?;
            from_bmes(&inst.enc.chars, &labels)
        })
        .collect();
    let pred = decoded.into_iter().collect::<Result<Vec<_>>>()?;
    let gold: Vec<SegmentedSentence> = instances.iter().map(|i| i.gold.clone()).collect();
    prf_with_oov(&gold, &pred, oov)
}

/// Collect switch traces over a set of instances (forward only).
pub fn collect_traces(
    model: &Model,
    instances: &[Instance],
    task_id: Option<u32>,
    mode: SwitchMode,
    seed: u64,
) -> Result<Vec<SwitchTrace>> {
    let opts = PassOptions::eval(mode);
    instances
        .par_iter()
        .enumerate()
        .map(|(idx, inst)| {
            let mut rng = rng_from_seed(derive_seed(seed, &[0xE7A1, idx as u64]));
            let (_, trace) = model.decode(&inst.enc, task_id, &opts, Some(&mut rng))?;
            Ok(trace)
        })
        .collect()
}

/// A finished run: the best model by averaged dev F plus the epoch history.
pub struct TrainOutcome {
    pub trainer: Trainer,
    pub best_model: Model,
    pub best_epoch: usize,
    pub best_avg_f: f64,
    pub history: Vec<EpochRecord>,
    pub step_losses: Vec<f64>,
}

/// The full training protocol: epochs of proportional-sampling steps,
/// dev evaluation after each epoch, best-checkpoint tracking, and stopping
/// after `patience` epochs without improvement.
pub fn run_training(config: TrainConfig, specs: &[TaskSpec]) -> Result<TrainOutcome> {
    run_prepared(Trainer::new(config, specs)?)
}

/// Run the training protocol on an already prepared trainer (e.g. after
/// loading pretrained embedding vectors into its model).
pub fn run_prepared(mut trainer: Trainer) -> Result<TrainOutcome> {
    let steps_per_epoch = trainer.steps_per_epoch();
    let mut stopper = EarlyStopper::new(trainer.config.patience);
    let mut history = Vec::new();
    let mut step_losses = Vec::new();
    let mut best_model = trainer.model.clone();
    let mut best_epoch = 0usize;

    for epoch in 1..=trainer.config.max_epochs {
        let mut loss_sum = 0.0;
        for _ in 0..steps_per_epoch {
            let outcome = trainer.train_step()?;
            loss_sum += outcome.loss;
            step_losses.push(outcome.loss);
        }
        let (tasks, avg_f) = trainer.evaluate_all()?;
        let min_f = tasks.iter().map(|t| t.report.f1).fold(f64::INFINITY, f64::min);
        history.push(EpochRecord {
            epoch,
            tasks,
            avg_f,
            mean_loss: loss_sum / steps_per_epoch as f64,
        });
        if stopper.update(avg_f) {
            best_model = trainer.model.clone();
            best_epoch = epoch;
        }
        if let Some(target) = trainer.config.stop_at_min_dev_f {
            if min_f >= target {
                break;
            }
        }
        if stopper.should_stop() {
            break;
        }
    }

    let best_avg_f = stopper.best().unwrap_or(0.0);
    Ok(TrainOutcome { trainer, best_model, best_epoch, best_avg_f, history, step_losses })
}

/// Outcome of fitting one new task embedding on a frozen base model.
pub struct TransferOutcome {
    pub model: Model,
    pub task_id: u32,
    pub task_name: String,
    pub history: Vec<EpochRecord>,
    pub best_avg_f: f64,
    pub trainable_parameters: usize,
}

/// Hot-plug a new criterion: register a task embedding, freeze everything
/// else, and train on the new corpus alone. Every frozen tensor is
/// bit-identical afterwards.
pub fn transfer_fit(
    base: &Model,
    vocabs: &Vocabs,
    name: &str,
    train: &[SegmentedSentence],
    dev: Option<&[SegmentedSentence]>,
    config: &TrainConfig,
) -> Result<TransferOutcome> {
    if !base.cfg.multi {
        return Err(Error::Config(
            "transfer needs a multi-criteria base model with a task table".into(),
        ));
    }
    let mut model = base.clone();
    let mut reg_rng = rng_from_seed(derive_seed(config.seed, &[0x7A5F]));
    let task_id = model.task_table.as_mut().unwrap().register(&mut reg_rng)?;

    let (train_raw, dev) = match dev {
        Some(d) => (train.to_vec(), d.to_vec()),
        None => split_train_dev(train, config.dev_fraction, derive_seed(config.seed, &[0x7A60])),
    };
    let train = split_long(&train_raw, config.sentence_cap);
    let (oov, _) = crate::corpus::oov_words(&train, &dev);
    let task = TaskData {
        name: name.to_string(),
        train: train.iter().map(|s| vocabs.encode(s)).collect(),
        dev: dev.iter().map(|s| vocabs.encode(s)).collect(),
        oov,
    };

    let mut trainer = Trainer::resume(config.clone(), model, vocabs.clone(), vec![task])?;
    trainer.embedding_override = Some(task_id);

    // Freeze everything but the new embedding row.
    let (_, spans) = trainer.model.flat_params();
    let span = spans
        .iter()
        .find(|s| s.name == "embeddings.task")
        .ok_or_else(|| Error::Config("base model has no task table".into()))?;
    let d_task = trainer.model.cfg.d_task;
    let row_start = span.start + task_id as usize * d_task;
    trainer.freeze_all_except(&[(row_start, d_task)]);
    let trainable_parameters = trainer.trainable_count();

    let steps_per_epoch = trainer.steps_per_epoch();
    let mut stopper = EarlyStopper::new(trainer.config.patience);
    let mut history = Vec::new();
    for epoch in 1..=trainer.config.max_epochs {
        let mut loss_sum = 0.0;
        for _ in 0..steps_per_epoch {
            let outcome = trainer.train_step()?;
            loss_sum += outcome.loss;
        }
        let eval = trainer.evaluate_task(0)?;
        let avg_f = eval.report.f1;
        history.push(EpochRecord {
            epoch,
            tasks: vec![eval],
            avg_f,
            mean_loss: loss_sum / steps_per_epoch as f64,
        });
        stopper.update(avg_f);
        if let Some(target) = trainer.config.stop_at_min_dev_f {
            if avg_f >= target {
                break;
            }
        }
        if stopper.should_stop() {
            break;
        }
    }

    let best_avg_f = stopper.best().unwrap_or(0.0);
    Ok(TransferOutcome {
        model: trainer.model,
        task_id,
        task_name: name.to_string(),
        history,
        best_avg_f,
        trainable_parameters,
    })
}

/// One row of a K sweep.
#[derive(Clone, Debug)]
pub struct SweepRow {
    pub k: usize,
    pub param_count: usize,
    pub avg_dev_f: f64,
}

/// Train once per K with everything else held fixed.
pub fn sweep_k(config: &TrainConfig, specs: &[TaskSpec], ks: &[usize]) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(ks.len());
    for &k in ks {
        if k == 0 {
            return Err(Error::Config("K values must be >= 1".into()));
        }
        let mut cfg = config.clone();
        cfg.k = k;
        let outcome = run_training(cfg, specs)?;
        rows.push(SweepRow {
            k,
            param_count: outcome.best_model.param_count(),
            avg_dev_f: outcome.best_avg_f,
        });
    }
    Ok(rows)
}

/// SHA-256 over every parameter tensor except the given task-embedding row,
/// in visit order; used to prove frozen tensors stayed bit-identical.
pub fn checksum_excluding_task_row(model: &Model, task_id: Option<u32>) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    let d_task = model.cfg.d_task;
    model.visit(&mut |name, view| {
        let skip_row = if name == "embeddings.task" { task_id } else { None };
        for (i, v) in view.iter().enumerate() {
            if let Some(row) = skip_row {
                let r = i / d_task.max(1);
                if r == row as usize {
                    continue;
                }
            }
            hasher.update(v.to_le_bytes());
        }
    });
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{gen_corpora, make_spec, GenConfig, SpecOptions};

    fn tiny_specs(sentences: usize, seed: u64) -> Vec<TaskSpec> {
        let spec = make_spec(&SpecOptions {
            lexicon_size: 8,
            conflict_fraction: 0.5,
            seed,
            ..Default::default()
        })
        .unwrap();
        let gen = gen_corpora(
            &spec,
            &GenConfig {
                train_sentences: sentences,
                dev_sentences: 6,
                test_sentences: 6,
                min_units: 2,
                max_units: 4,
                seed: seed + 1,
            },
        )
        .unwrap();
        gen.criteria
            .iter()
            .map(|c| TaskSpec {
                name: c.name.clone(),
                train: c.train.clone(),
                dev: Some(c.dev.clone()),
            })
            .collect()
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            k: 2,
            d_embed: 6,
            d_bigram: 0,
            d_hidden: 6,
            d_task: 4,
            batch_size: 4,
            tasks_per_step: 2,
            dropout: 0.0,
            max_epochs: 2,
            seed: 11,
            grad_chunk: 3,
            ..Default::default()
        }
    }

    #[test]
    fn single_task_sampling_returns_copies() {
        let w = TaskWeights::proportional(&[10]).unwrap();
        let mut rng = rng_from_seed(1);
        assert_eq!(sample_tasks(&w, 6, &mut rng), vec![0; 6]);
    }

    #[test]
    fn proportional_sampling_frequencies() {
        let mut rng = rng_from_seed(2);
        let w = TaskWeights::proportional(&[1; 8]).unwrap();
        let draws = sample_tasks(&w, 100_000, &mut rng);
        let mut counts = [0usize; 8];
        for d in draws {
            counts[d] += 1;
        }
        for c in counts {
            let freq = c as f64 / 100_000.0;
            assert!((freq - 0.125).abs() <= 0.01, "freq {freq}");
        }

        let w = TaskWeights::proportional(&[9000, 1000]).unwrap();
        let draws = sample_tasks(&w, 100_000, &mut rng);
        let ones = draws.iter().filter(|&&d| d == 1).count() as f64 / 100_000.0;
        assert!((ones - 0.1).abs() <= 0.01, "freq {ones}");

        assert!(TaskWeights::proportional(&[]).is_err());
    }

    #[test]
    fn adam_zero_grads_leave_params_unchanged() {
        let mut params = vec![1.0, -2.0, 0.5];
        let grads = vec![0.0; 3];
        let mut state = AdamState::new(3);
        state.m = vec![0.4; 3];
        let m_before = state.m.clone();
        adam_update(
            &mut params,
            &grads,
            &mut state,
            &AdamHyper { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 },
            None,
        );
        // Moments decay; with zero moments params would be untouched too.
        for (a, b) in state.m.iter().zip(m_before.iter()) {
            assert!((a - b * 0.9).abs() < 1e-15);
        }
        let mut fresh_params = vec![1.0, -2.0, 0.5];
        let mut fresh = AdamState::new(3);
        adam_update(
            &mut fresh_params,
            &grads,
            &mut fresh,
            &AdamHyper { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 },
            None,
        );
        assert_eq!(fresh_params, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn adam_first_step_has_closed_form() {
        let g = 0.37f64;
        let mut params = vec![2.0];
        let mut state = AdamState::new(1);
        let hyper = AdamHyper { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
        adam_update(&mut params, &[g], &mut state, &hyper, None);
        let expect = 2.0 - hyper.lr * g / (g.abs() + hyper.eps);
        assert!((params[0] - expect).abs() < 1e-9, "{} vs {expect}", params[0]);
    }

    #[test]
    fn clip_rescales_by_norm_ratio() {
        let mut grads = vec![30.0, 40.0]; // norm 50
        let norm = clip_global_norm(&mut grads, 5.0);
        assert!((norm - 50.0).abs() < 1e-12);
        assert!((grads[0] - 3.0).abs() < 1e-12);
        assert!((grads[1] - 4.0).abs() < 1e-12);

        let mut small = vec![0.3, 0.4];
        clip_global_norm(&mut small, 5.0);
        assert_eq!(small, vec![0.3, 0.4]);
    }

    #[test]
    fn early_stopper_counts_exactly() {
        // Constant metric: first epoch improves (from nothing), then
        // patience epochs of no improvement; stop after 1 + patience.
        let mut stopper = EarlyStopper::new(7);
        let mut epochs = 0;
        for _ in 0..100 {
            epochs += 1;
            stopper.update(0.5);
            if stopper.should_stop() {
                break;
            }
        }
        assert_eq!(epochs, 8);

        // Strictly increasing: never stops.
        let mut stopper = EarlyStopper::new(7);
        for i in 0..50 {
            stopper.update(i as f64);
            assert!(!stopper.should_stop());
        }
    }

    #[test]
    fn zero_learning_rate_keeps_params_bit_identical() {
        let specs = tiny_specs(12, 3);
        let mut config = tiny_config();
        config.lr = 0.0;
        let mut trainer = Trainer::new(config, &specs).unwrap();
        let (before, _) = trainer.model.flat_params();
        for _ in 0..3 {
            trainer.train_step().unwrap();
        }
        let (after, _) = trainer.model.flat_params();
        assert_eq!(before, after);
    }

    #[test]
    fn duplicated_batch_gradient_is_linear() {
        let specs = tiny_specs(12, 5);
        let config = tiny_config();
        let trainer = Trainer::new(config, &specs).unwrap();
        let model = &trainer.model;
        let opts = PassOptions::eval(SwitchMode::Normal);
        let batch: Vec<&Instance> = trainer.tasks[0].train.iter().take(4).collect();

        let mut single = ModelGrads::zeros_like(model);
        for inst in &batch {
            model
                .loss_and_grads(&inst.enc, &inst.labels, Some(0), &opts, None, 1.0, &mut single)
                .unwrap();
        }
        let mut six = ModelGrads::zeros_like(model);
        for _ in 0..6 {
            for inst in &batch {
                model
                    .loss_and_grads(&inst.enc, &inst.labels, Some(0), &opts, None, 1.0, &mut six)
                    .unwrap();
            }
        }
        let a = single.flat();
        let b = six.flat();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((6.0 * x - y).abs() <= 1e-12 * y.abs().max(1.0), "{x} {y}");
        }
    }

    #[test]
    fn batch_gradients_are_order_independent() {
        let specs = tiny_specs(12, 7);
        let config = tiny_config();
        let trainer = Trainer::new(config, &specs).unwrap();
        let model = &trainer.model;
        let opts = PassOptions::eval(SwitchMode::Normal);

        let batches: Vec<Vec<&Instance>> = vec![
            trainer.tasks[0].train.iter().take(3).collect(),
            trainer.tasks[1].train.iter().take(3).collect(),
            trainer.tasks[0].train.iter().skip(3).take(3).collect(),
        ];
        let grad_of = |batch: &[&Instance], task: u32| {
            let mut g = ModelGrads::zeros_like(model);
            for inst in batch {
                model
                    .loss_and_grads(&inst.enc, &inst.labels, Some(task), &opts, None, 0.5, &mut g)
                    .unwrap();
            }
            g.flat()
        };

        // Evaluate in one order...
        let g0 = grad_of(&batches[0], 0);
        let g1 = grad_of(&batches[1], 1);
        let g2 = grad_of(&batches[2], 0);
        // ...and in another; then always sum canonically.
        let h2 = grad_of(&batches[2], 0);
        let h0 = grad_of(&batches[0], 0);
        let h1 = grad_of(&batches[1], 1);

        let sum_a: Vec<f64> = g0.iter().zip(&g1).zip(&g2).map(|((a, b), c)| a + b + c).collect();
        let sum_b: Vec<f64> = h0.iter().zip(&h1).zip(&h2).map(|((a, b), c)| a + b + c).collect();
        assert_eq!(sum_a, sum_b);
    }

    #[test]
    fn fixed_seed_reproduces_losses() {
        let specs = tiny_specs(16, 9);
        let config = tiny_config();
        let run = |config: TrainConfig, specs: &[TaskSpec]| {
            let mut trainer = Trainer::new(config, specs).unwrap();
            (0..5).map(|_| trainer.train_step().unwrap().loss).collect::<Vec<f64>>()
        };
        let a = run(config.clone(), &specs);
        let b = run(config, &specs);
        assert_eq!(a, b);
    }

    #[test]
    fn training_reduces_loss_on_tiny_data() {
        let specs = tiny_specs(24, 13);
        let mut config = tiny_config();
        config.lr = 5e-3;
        let mut trainer = Trainer::new(config, &specs).unwrap();
        let first = trainer.train_step().unwrap().loss;
        let mut last = first;
        for _ in 0..30 {
            last = trainer.train_step().unwrap().loss;
        }
        assert!(last < first, "loss did not go down: {first} -> {last}");
    }

    #[test]
    fn run_training_records_history_and_best() {
        let specs = tiny_specs(16, 15);
        let mut config = tiny_config();
        config.max_epochs = 3;
        let outcome = run_training(config, &specs).unwrap();
        assert_eq!(outcome.history.len(), 3);
        let best_from_history = outcome
            .history
            .iter()
            .map(|r| r.avg_f)
            .fold(f64::NEG_INFINITY, f64::max);
        assert!((outcome.best_avg_f - best_from_history).abs() < 1e-12);
        assert!(outcome.history.iter().any(|r| r.epoch == outcome.best_epoch));
    }

    #[test]
    fn single_mode_rejects_multiple_datasets() {
        let specs = tiny_specs(8, 17);
        let mut config = tiny_config();
        config.multi = false;
        assert!(Trainer::new(config, &specs).is_err());
    }

    #[test]
    fn transfer_freezes_everything_but_the_new_row() {
        let specs = tiny_specs(16, 19);
        let mut config = tiny_config();
        config.max_epochs = 2;
        let outcome = run_training(config.clone(), &specs).unwrap();
        let base = outcome.best_model;
        let vocabs = outcome.trainer.vocabs.clone();

        // New corpus: reuse criterion A's dev sentences as a stand-in.
        let new_corpus: Vec<SegmentedSentence> =
            specs[0].train.iter().take(10).cloned().collect();
        // Registration rewrites the first spare row, so exclude it on both
        // sides of the comparison.
        let next_id = base.task_table.as_ref().unwrap().registered() as u32;
        let before = checksum_excluding_task_row(&base, Some(next_id));
        let mut tc = config.clone();
        tc.max_epochs = 3;
        let transferred =
            transfer_fit(&base, &vocabs, "critC", &new_corpus, None, &tc).unwrap();
        assert_eq!(transferred.trainable_parameters, tc.d_task);
        let after = checksum_excluding_task_row(&transferred.model, Some(transferred.task_id));
        assert_eq!(before, after, "frozen tensors changed");

        // The new row itself must have moved.
        let base_rows = base.task_table.as_ref().unwrap().registered();
        assert_eq!(transferred.task_id as usize, base_rows);
        let row = transferred
            .model
            .task_table
            .as_ref()
            .unwrap()
            .embedding(transferred.task_id)
            .unwrap()
            .to_owned();
        // Compare against a fresh registration with the same seed: training
        // must have changed it away from its initialization.
        let mut check = base.clone();
        let mut reg_rng = rng_from_seed(derive_seed(tc.seed, &[0x7A5F]));
        let id = check.task_table.as_mut().unwrap().register(&mut reg_rng).unwrap();
        let init = check.task_table.as_ref().unwrap().embedding(id).unwrap().to_owned();
        assert_ne!(row, init);
    }

    #[test]
    fn transfer_rejects_single_criterion_base() {
        let mut config = tiny_config();
        config.multi = false;
        let specs = vec![tiny_specs(8, 21).remove(0)];
        let outcome = run_training(config.clone(), &specs).unwrap();
        let err = transfer_fit(
            &outcome.best_model,
            &outcome.trainer.vocabs,
            "x",
            &specs[0].train,
            None,
            &config,
        );
        assert!(err.is_err());
    }

    #[test]
    fn checksum_ignores_only_the_named_row() {
        let specs = tiny_specs(8, 23);
        let config = tiny_config();
        let trainer = Trainer::new(config, &specs).unwrap();
        let mut model = trainer.model.clone();
        let c0 = checksum_excluding_task_row(&model, Some(0));
        // Mutating row 0 leaves the checksum alone; mutating row 1 changes it.
        model.task_table.as_mut().unwrap().weights[[0, 0]] += 1.0;
        assert_eq!(c0, checksum_excluding_task_row(&model, Some(0)));
        model.task_table.as_mut().unwrap().weights[[1, 0]] += 1.0;
        assert_ne!(c0, checksum_excluding_task_row(&model, Some(0)));
    }
}
