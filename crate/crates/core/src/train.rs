//! The three training stages: question coding, module training and joint
//! training.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use autodiff::{Adam, AdamConfig, ParamId, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grammar::{is_valid, Program};
use crate::model::{ProbNmn, Stage};
use crate::nmn::answer_log_prob;
use crate::probe::{evaluate, Metrics};
use crate::seq::{greedy_decode_batch, lm_log_prob_batch, sample_seq2seq, seq2seq_log_prob_batch};
use crate::world::dataset::{DatasetSplit, QaItem};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    /// Scale of the supervised log q(z|x) term.
    pub alpha: f64,
    /// Scale of the prior/entropy terms inside the evidence bound.
    pub beta: f64,
    /// Scale of the answer likelihood during joint training.
    pub gamma: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub baseline_decay: f64,
    /// Programs sampled per question for Monte-Carlo expectations.
    pub samples: usize,
    /// Answer-term reward assigned to syntactically invalid programs.
    pub invalid_penalty: f64,
    pub length_normalize: bool,
    /// Sample programs during module training instead of greedy decoding.
    pub sample_module_programs: bool,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            alpha: 100.0,
            beta: 0.1,
            gamma: 10.0,
            lr: 1e-3,
            batch_size: 64,
            baseline_decay: 0.99,
            samples: 1,
            invalid_penalty: -10.0,
            length_normalize: false,
            sample_module_programs: false,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.alpha > 1.0) {
            return bad("alpha must exceed 1");
        }
        if !(self.gamma >= 1.0) {
            return bad("gamma must be at least 1");
        }
        if !(self.beta >= 0.0) {
            return bad("beta must be non-negative");
        }
        if !(self.lr > 0.0) {
            return bad("learning rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(0.0..=1.0).contains(&self.baseline_decay) {
            return bad("baseline decay must lie in [0, 1]");
        }
        if !(1..=5).contains(&self.samples) {
            return bad("samples per datum must be between 1 and 5");
        }
        if !self.invalid_penalty.is_finite() {
            return bad("invalid-program penalty must be finite");
        }
        Ok(())
    }
}

/// Moving-average reward baseline, `b <- b + D (R - b)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineState {
    pub value: f64,
    pub decay: f64,
}

impl BaselineState {
    pub fn new(decay: f64) -> Self {
        BaselineState { value: 0.0, decay }
    }
}

pub fn update_baseline(state: BaselineState, reward: f64) -> Result<BaselineState> {
    if !reward.is_finite() {
        return Err(Error::Config(format!("non-finite reward {reward}")));
    }
    Ok(BaselineState {
        value: state.value + state.decay * (reward - state.value),
        decay: state.decay,
    })
}

/// `sum_i w_i (R_i - b) log q_i`: its gradient is the score-function
/// estimate for the rewards held fixed.
pub fn reinforce_surrogate(
    tape: &mut Tape,
    log_q: Var,
    rewards: &[f64],
    baseline: f64,
    weight: f64,
) -> Result<Var> {
    if let Some(r) = rewards.iter().find(|r| !r.is_finite()) {
        return Err(Error::Config(format!("non-finite reward {r}")));
    }
    let coef = Tensor::vector(rewards.iter().map(|r| weight * (r - baseline)).collect());
    let coef = tape.constant(coef)?;
    let s = tape.mul(log_q, coef)?;
    Ok(tape.sum_all(s)?)
}

/// Per-batch objective terms, each a per-item mean.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BatchStats {
    /// `log p(x|z) - beta log q(z|x) + beta log p(z)` over unsupervised items.
    pub elbo: f64,
    /// Scaled answer log-likelihood (or the invalid-program penalty).
    pub answer: f64,
    /// `alpha log q(z|x) + log p(x|z)` over teaching items.
    pub supervised: f64,
    pub objective: f64,
    pub mean_reward: f64,
    /// Mean of `log q(z|x) - log p(z)` over sampled programs.
    pub kl_estimate: f64,
    pub samples: usize,
    pub invalid: usize,
    pub items: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub stage: Stage,
    pub epoch: usize,
    pub batches: usize,
    pub objective: f64,
    pub mean_reward: f64,
    pub kl_estimate: f64,
    /// Invalid sampled or decoded programs seen this epoch.
    pub invalid_programs: usize,
    pub val: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub epochs: Vec<EpochReport>,
    /// Epoch (1-based) whose parameters were kept; 0 means none improved on
    /// the starting point.
    pub best_epoch: usize,
    pub best_metric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub stage: String,
    pub step: usize,
    pub metric: String,
    pub value: f64,
}

/// Append-only metric records, mirrored to a line-delimited JSON file when
/// a path is set.
#[derive(Debug, Clone, Default)]
pub struct MetricsLog {
    pub records: Vec<MetricRecord>,
    path: Option<PathBuf>,
}

impl MetricsLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn to_file(path: impl Into<PathBuf>) -> Self {
        MetricsLog {
            records: Vec::new(),
            path: Some(path.into()),
        }
    }

    pub fn record(&mut self, stage: &str, step: usize, metric: &str, value: f64) -> Result<()> {
        let rec = MetricRecord {
            stage: stage.to_string(),
            step,
            metric: metric.to_string(),
            value,
        };
        if let Some(path) = &self.path {
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| Error::io(path, e))?;
            let line = serde_json::to_string(&rec).expect("plain record serializes");
            writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
        }
        self.records.push(rec);
        Ok(())
    }

    fn epoch(&mut self, r: &EpochReport) -> Result<()> {
        let s = r.stage.name();
        for (k, v) in [
            ("objective", r.objective),
            ("mean_reward", r.mean_reward),
            ("kl_estimate", r.kl_estimate),
            ("invalid_programs", r.invalid_programs as f64),
            ("val_program_accuracy", r.val.program_accuracy),
            ("val_reconstruction_accuracy", r.val.reconstruction_accuracy),
            ("val_vqa_accuracy", r.val.vqa_accuracy),
        ] {
            self.record(s, r.epoch, k, v)?;
        }
        Ok(())
    }
}

/// Independent RNG stream for one stage of a run.
pub fn stage_rng(seed: u64, stage: Stage) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(100 + stage as u64);
    rng
}

fn adam_for(model: &ProbNmn, ids: Vec<ParamId>, hp: &Hyperparams, opts: &StageOptions) -> Adam {
    Adam::new(
        &model.params,
        ids,
        AdamConfig {
            lr: opts.lr.unwrap_or(hp.lr),
            ..AdamConfig::default()
        },
    )
}

fn shuffled_batches<'a>(items: &'a [QaItem], batch: usize, rng: &mut dyn RngCore) -> Vec<Vec<&'a QaItem>> {
    let mut order: Vec<&QaItem> = items.iter().collect();
    order.shuffle(rng);
    order.chunks(batch).map(|c| c.to_vec()).collect()
}

fn tokens<'a>(items: &[&'a QaItem]) -> (Vec<&'a [usize]>, Vec<&'a [usize]>) {
    (
        items.iter().map(|i| i.question.as_slice()).collect(),
        items.iter().map(|i| i.program.tokens()).collect(),
    )
}

/// Builds one batch's objective on a fresh tape, backpropagates it and
/// updates the baseline. With `gamma = Some(_)` the answer likelihood joins
/// the reward (joint training). Gradients are accumulated into the
/// parameter store; the optimizer step is left to the caller.
pub fn elbo_batch(
    model: &mut ProbNmn,
    data: &DatasetSplit,
    batch: &[&QaItem],
    hp: &Hyperparams,
    baseline: &mut BaselineState,
    gamma: Option<f64>,
    rng: &mut dyn RngCore,
) -> Result<BatchStats> {
    let ln = hp.length_normalize;
    let unsup: Vec<&QaItem> = batch.iter().copied().filter(|i| !i.teaching).collect();
    let sup: Vec<&QaItem> = batch.iter().copied().filter(|i| i.teaching).collect();
    let n_items = batch.len() as f64;
    let mut tape = Tape::new();
    let mut terms: Vec<Var> = Vec::new();
    let mut stats = BatchStats {
        items: batch.len(),
        ..BatchStats::default()
    };

    if !unsup.is_empty() {
        let s = hp.samples;
        let w = 1.0 / s as f64;
        let reps: Vec<&QaItem> = unsup.iter().flat_map(|&i| std::iter::repeat_n(i, s)).collect();
        let xs: Vec<&[usize]> = reps.iter().map(|i| i.question.as_slice()).collect();
        let draws = sample_seq2seq(&model.params, &model.inference, &xs, rng)?;
        let zs: Vec<&[usize]> = draws.iter().map(|d| d.tokens.as_slice()).collect();

        let lq = seq2seq_log_prob_batch(&mut tape, &model.params, &model.inference, &xs, &zs, ln)?;
        let lx = seq2seq_log_prob_batch(&mut tape, &model.params, &model.reconstructor, &zs, &xs, ln)?;
        let lp = {
            let mut prior_tape = Tape::new();
            let v = lm_log_prob_batch(&mut prior_tape, &model.params, &model.prior, &zs, ln)?;
            prior_tape.value(v).data().to_vec()
        };
        let lq_v = tape.value(lq).data().to_vec();
        let lx_v = tape.value(lx).data().to_vec();

        let mut answer_r = vec![0.0; reps.len()];
        if let Some(g) = gamma {
            let mut answer_vars = Vec::new();
            for (k, item) in reps.iter().enumerate() {
                let z = Program::new(zs[k].to_vec());
                if is_valid(&z, &model.program_vocab) {
                    let v = answer_log_prob(
                        &mut tape,
                        &model.params,
                        &model.nmn,
                        &model.program_vocab,
                        &z,
                        &data.image(item),
                        item.answer,
                    )?;
                    answer_r[k] = g * tape.value(v).item();
                    answer_vars.push(v);
                } else {
                    answer_r[k] = hp.invalid_penalty;
                    stats.invalid += 1;
                }
            }
            if !answer_vars.is_empty() {
                let all = tape.concat(&answer_vars, 0)?;
                let sum = tape.sum_all(all)?;
                terms.push(tape.scale(sum, g * w)?);
            }
        } else {
            stats.invalid = zs
                .iter()
                .filter(|z| !is_valid(&Program::new(z.to_vec()), &model.program_vocab))
                .count();
        }

        let mut rewards = Vec::with_capacity(reps.len());
        let (mut elbo, mut ans, mut kl) = (0.0, 0.0, 0.0);
        for k in 0..reps.len() {
            let e = lx_v[k] - hp.beta * lq_v[k] + hp.beta * lp[k];
            rewards.push(answer_r[k] + e);
            elbo += w * e;
            ans += w * answer_r[k];
            kl += lq_v[k] - lp[k];
        }
        let b = baseline.value;
        // score-function term plus the direct -beta log q term
        let coef: Vec<f64> = rewards.iter().map(|r| r - b - hp.beta).collect();
        terms.push(reinforce_surrogate(&mut tape, lq, &coef, 0.0, w)?);
        let sx = tape.sum_all(lx)?;
        terms.push(tape.scale(sx, w)?);

        let mean_r = rewards.iter().sum::<f64>() / rewards.len() as f64;
        *baseline = update_baseline(*baseline, mean_r)?;
        stats.elbo = elbo / n_items;
        stats.answer = ans / n_items;
        stats.mean_reward = mean_r;
        stats.kl_estimate = kl / reps.len() as f64;
        stats.samples = reps.len();
    }

    if !sup.is_empty() {
        let (xs, zs) = tokens(&sup);
        let lq = seq2seq_log_prob_batch(&mut tape, &model.params, &model.inference, &xs, &zs, ln)?;
        let lx = seq2seq_log_prob_batch(&mut tape, &model.params, &model.reconstructor, &zs, &xs, ln)?;
        let sq = tape.sum_all(lq)?;
        let sq = tape.scale(sq, hp.alpha)?;
        let sx = tape.sum_all(lx)?;
        let t = tape.add(sq, sx)?;
        stats.supervised = tape.value(t).item() / n_items;
        terms.push(t);
    }

    stats.objective = stats.elbo + stats.answer + stats.supervised;
    let total = match terms.len() {
        1 => terms[0],
        _ => {
            let all = tape.concat(&terms, 0)?;
            tape.sum_all(all)?
        }
    };
    let loss = tape.scale(total, -1.0 / n_items)?;
    tape.backward(loss, &mut model.params)?;
    Ok(stats)
}

struct EpochAccum {
    batches: usize,
    objective: f64,
    reward: f64,
    reward_batches: usize,
    kl: f64,
    invalid: usize,
}

impl EpochAccum {
    fn new() -> Self {
        EpochAccum {
            batches: 0,
            objective: 0.0,
            reward: 0.0,
            reward_batches: 0,
            kl: 0.0,
            invalid: 0,
        }
    }

    fn add(&mut self, s: &BatchStats) {
        self.batches += 1;
        self.objective += s.objective;
        if s.samples > 0 {
            self.reward += s.mean_reward;
            self.kl += s.kl_estimate;
            self.reward_batches += 1;
        }
        self.invalid += s.invalid;
    }

    fn report(&self, stage: Stage, epoch: usize, val: Metrics) -> EpochReport {
        let rb = self.reward_batches.max(1) as f64;
        EpochReport {
            stage,
            epoch,
            batches: self.batches,
            objective: self.objective / self.batches.max(1) as f64,
            mean_reward: self.reward / rb,
            kl_estimate: self.kl / rb,
            invalid_programs: self.invalid,
            val,
        }
    }
}

fn wrap(batch: usize) -> impl FnOnce(Error) -> Error {
    move |e| Error::Batch {
        batch,
        source: Box::new(e),
    }
}

/// One pass of question coding over the training split.
pub fn question_coding_epoch(
    model: &mut ProbNmn,
    data: &DatasetSplit,
    hp: &Hyperparams,
    adam: &mut Adam,
    baseline: &mut BaselineState,
    rng: &mut dyn RngCore,
) -> Result<Vec<BatchStats>> {
    let mut out = Vec::new();
    for (bi, batch) in shuffled_batches(&data.train, hp.batch_size, rng).into_iter().enumerate() {
        model.params.zero_grads_of(adam.ids());
        let s = elbo_batch(model, data, &batch, hp, baseline, None, rng).map_err(wrap(bi))?;
        adam.step(&mut model.params).map_err(|e| wrap(bi)(e.into()))?;
        out.push(s);
    }
    Ok(out)
}

/// Programs used to train the modules: gold programs for teaching items,
/// greedy decodes of the inference network otherwise. `None` marks an
/// invalid decode.
pub fn module_training_programs(model: &ProbNmn, items: &[QaItem]) -> Result<Vec<Option<Program>>> {
    let mut out = vec![None; items.len()];
    let todo: Vec<usize> = (0..items.len()).filter(|&i| !items[i].teaching).collect();
    for chunk in todo.chunks(256) {
        let xs: Vec<&[usize]> = chunk.iter().map(|&i| items[i].question.as_slice()).collect();
        let decoded = greedy_decode_batch(&model.params, &model.inference, &xs)?;
        for (&i, d) in chunk.iter().zip(decoded) {
            let z = Program::new(d.tokens);
            if is_valid(&z, &model.program_vocab) {
                out[i] = Some(z);
            }
        }
    }
    for (i, item) in items.iter().enumerate() {
        if item.teaching {
            out[i] = Some(item.program.clone());
        }
    }
    Ok(out)
}

fn sampled_programs(
    model: &ProbNmn,
    items: &[QaItem],
    rng: &mut dyn RngCore,
) -> Result<Vec<Option<Program>>> {
    let mut out = vec![None; items.len()];
    for (c, chunk) in items.chunks(256).enumerate() {
        let xs: Vec<&[usize]> = chunk.iter().map(|i| i.question.as_slice()).collect();
        let draws = sample_seq2seq(&model.params, &model.inference, &xs, rng)?;
        for (k, d) in draws.into_iter().enumerate() {
            let i = c * 256 + k;
            let z = if items[i].teaching {
                items[i].program.clone()
            } else {
                Program::new(d.tokens)
            };
            if is_valid(&z, &model.program_vocab) {
                out[i] = Some(z);
            }
        }
    }
    Ok(out)
}

/// Answer log-likelihood step for one batch of `(item, program)` pairs.
pub fn module_batch(
    model: &mut ProbNmn,
    data: &DatasetSplit,
    batch: &[(&QaItem, &Program)],
) -> Result<f64> {
    let mut tape = Tape::new();
    let mut vars = Vec::with_capacity(batch.len());
    for (item, z) in batch {
        vars.push(answer_log_prob(
            &mut tape,
            &model.params,
            &model.nmn,
            &model.program_vocab,
            z,
            &data.image(item),
            item.answer,
        )?);
    }
    let all = tape.concat(&vars, 0)?;
    let s = tape.sum_all(all)?;
    let mean = tape.value(s).item() / batch.len() as f64;
    let loss = tape.scale(s, -1.0 / batch.len() as f64)?;
    tape.backward(loss, &mut model.params)?;
    Ok(mean)
}

/// One pass of module training. `programs` is aligned with `data.train`.
pub fn module_training_epoch(
    model: &mut ProbNmn,
    data: &DatasetSplit,
    hp: &Hyperparams,
    programs: &[Option<Program>],
    adam: &mut Adam,
    rng: &mut dyn RngCore,
) -> Result<Vec<BatchStats>> {
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    order.shuffle(rng);
    let mut out = Vec::new();
    for (bi, chunk) in order.chunks(hp.batch_size).enumerate() {
        let pairs: Vec<(&QaItem, &Program)> = chunk
            .iter()
            .filter_map(|&i| programs[i].as_ref().map(|z| (&data.train[i], z)))
            .collect();
        let invalid = chunk.len() - pairs.len();
        if pairs.is_empty() {
            log::warn!("module training batch {bi}: every program invalid, skipping step");
            out.push(BatchStats {
                invalid,
                items: chunk.len(),
                ..BatchStats::default()
            });
            continue;
        }
        model.params.zero_grads_of(adam.ids());
        let mean = module_batch(model, data, &pairs).map_err(wrap(bi))?;
        adam.step(&mut model.params).map_err(|e| wrap(bi)(e.into()))?;
        out.push(BatchStats {
            answer: mean,
            objective: mean,
            invalid,
            items: chunk.len(),
            ..BatchStats::default()
        });
    }
    Ok(out)
}

/// One pass of joint training with answer scale `gamma`.
pub fn joint_training_epoch(
    model: &mut ProbNmn,
    data: &DatasetSplit,
    hp: &Hyperparams,
    adam: &mut Adam,
    baseline: &mut BaselineState,
    rng: &mut dyn RngCore,
) -> Result<Vec<BatchStats>> {
    let mut out = Vec::new();
    for (bi, batch) in shuffled_batches(&data.train, hp.batch_size, rng).into_iter().enumerate() {
        model.params.zero_grads_of(adam.ids());
        let s = elbo_batch(model, data, &batch, hp, baseline, Some(hp.gamma), rng).map_err(wrap(bi))?;
        adam.step(&mut model.params).map_err(|e| wrap(bi)(e.into()))?;
        out.push(s);
    }
    Ok(out)
}

/// Supervised-only control: the inference network and reconstructor are
/// trained on teaching pairs alone with the same objective weights.
pub fn supervised_only_epoch(
    model: &mut ProbNmn,
    data: &DatasetSplit,
    hp: &Hyperparams,
    steps: usize,
    adam: &mut Adam,
    rng: &mut dyn RngCore,
) -> Result<Vec<BatchStats>> {
    let teaching: Vec<QaItem> = data.teaching().cloned().collect();
    if teaching.is_empty() {
        return Err(Error::Prerequisite("no teaching items".into()));
    }
    let mut out = Vec::with_capacity(steps);
    let mut pool: Vec<Vec<&QaItem>> = Vec::new();
    let mut dummy = BaselineState::new(0.0);
    for bi in 0..steps {
        if pool.is_empty() {
            pool = shuffled_batches(&teaching, hp.batch_size, rng);
            pool.reverse();
        }
        let batch = pool.pop().expect("refilled");
        model.params.zero_grads_of(adam.ids());
        let s = elbo_batch(model, data, &batch, hp, &mut dummy, None, rng).map_err(wrap(bi))?;
        adam.step(&mut model.params).map_err(|e| wrap(bi)(e.into()))?;
        out.push(s);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageOptions {
    pub epochs: usize,
    /// Stop after this many epochs without validation improvement.
    pub patience: usize,
    /// Overrides the shared learning rate for this stage.
    pub lr: Option<f64>,
}

impl Default for StageOptions {
    fn default() -> Self {
        StageOptions {
            epochs: 10,
            patience: 3,
            lr: None,
        }
    }
}

fn require(model: &ProbNmn, needed: Stage, what: &str) -> Result<()> {
    if model.stage < needed {
        return Err(Error::Prerequisite(format!(
            "{what} needs a model at stage `{}` or later, got `{}`",
            needed.name(),
            model.stage.name()
        )));
    }
    if model.prior_ids().iter().any(|&id| !model.params.is_frozen(id)) {
        return Err(Error::Prerequisite(format!("{what} needs a frozen prior")));
    }
    Ok(())
}

/// Shared epoch loop with early stopping on a validation metric and
/// restoration of the best parameters.
fn run_stage<F, M>(
    model: &mut ProbNmn,
    data: &DatasetSplit,
    stage: Stage,
    ids: &[ParamId],
    opts: &StageOptions,
    log: &mut MetricsLog,
    metric: M,
    mut epoch_fn: F,
) -> Result<StageReport>
where
    F: FnMut(&mut ProbNmn) -> Result<Vec<BatchStats>>,
    M: Fn(&Metrics) -> f64,
{
    let start = evaluate(model, data, &data.val)?;
    let mut best = metric(&start);
    let mut best_values = model.params.flatten_values(ids);
    let mut best_epoch = 0;
    let mut epochs = Vec::new();
    let mut since = 0;
    for epoch in 1..=opts.epochs {
        let mut acc = EpochAccum::new();
        for s in epoch_fn(model)? {
            acc.add(&s);
        }
        let val = evaluate(model, data, &data.val)?;
        let report = acc.report(stage, epoch, val);
        log.epoch(&report)?;
        log::info!(
            "{} epoch {epoch}: objective {:.4}, val program {:.3}, recon {:.3}, vqa {:.3}",
            stage.name(),
            report.objective,
            val.program_accuracy,
            val.reconstruction_accuracy,
            val.vqa_accuracy
        );
        epochs.push(report);
        let m = metric(&val);
        if m > best {
            best = m;
            best_epoch = epoch;
            best_values = model.params.flatten_values(ids);
            since = 0;
        } else {
            since += 1;
            if since >= opts.patience {
                break;
            }
        }
    }
    model.params.assign_flat(ids, &best_values);
    model.params.clear_grads();
    Ok(StageReport {
        stage,
        epochs,
        best_epoch,
        best_metric: best,
    })
}

pub fn run_question_coding(
    model: &mut ProbNmn,
    data: &DatasetSplit,
    hp: &Hyperparams,
    opts: &StageOptions,
    seed: u64,
    log: &mut MetricsLog,
) -> Result<StageReport> {
    hp.validate()?;
    require(model, Stage::PriorPretrained, "question coding")?;
    let mut rng = stage_rng(seed, Stage::QuestionCoding);
    let mut ids = model.phi_ids();
    ids.extend(model.sigma_ids());
    let mut adam = adam_for(model, ids.clone(), hp, opts);
    let mut baseline = BaselineState::new(hp.baseline_decay);
    let report = run_stage(
        model,
        data,
        Stage::QuestionCoding,
        &ids,
        opts,
        log,
        |m| m.program_accuracy,
        |model| question_coding_epoch(model, data, hp, &mut adam, &mut baseline, &mut rng),
    )?;
    model.stage = Stage::QuestionCoding;
    Ok(report)
}

/// Number of optimizer steps in one question-coding epoch.
pub fn batches_per_epoch(data: &DatasetSplit, hp: &Hyperparams) -> usize {
    data.train.len().div_ceil(hp.batch_size)
}

/// Trains on teaching pairs only with as many steps per epoch as question
/// coding takes; the comparison point for semi-supervision.
pub fn run_supervised_only(
    model: &mut ProbNmn,
    data: &DatasetSplit,
    hp: &Hyperparams,
    opts: &StageOptions,
    seed: u64,
    log: &mut MetricsLog,
) -> Result<StageReport> {
    hp.validate()?;
    require(model, Stage::PriorPretrained, "supervised-only training")?;
    let mut rng = stage_rng(seed, Stage::QuestionCoding);
    let mut ids = model.phi_ids();
    ids.extend(model.sigma_ids());
    let mut adam = adam_for(model, ids.clone(), hp, opts);
    let steps = batches_per_epoch(data, hp);
    let report = run_stage(
        model,
        data,
        Stage::QuestionCoding,
        &ids,
        opts,
        log,
        |m| m.program_accuracy,
        |model| supervised_only_epoch(model, data, hp, steps, &mut adam, &mut rng),
    )?;
    model.stage = Stage::QuestionCoding;
    Ok(report)
}

pub fn run_module_training(
    model: &mut ProbNmn,
    data: &DatasetSplit,
    hp: &Hyperparams,
    opts: &StageOptions,
    seed: u64,
    log: &mut MetricsLog,
) -> Result<StageReport> {
    hp.validate()?;
    require(model, Stage::QuestionCoding, "module training")?;
    let mut rng = stage_rng(seed, Stage::ModuleTraining);
    let ids = model.theta_ids();
    let mut adam = adam_for(model, ids.clone(), hp, opts);
    let greedy = module_training_programs(model, &data.train)?;
    let skipped = greedy.iter().filter(|p| p.is_none()).count();
    if skipped > 0 {
        log::info!("module training: {skipped} invalid decoded programs skipped");
    }
    let sample = hp.sample_module_programs;
    let report = run_stage(
        model,
        data,
        Stage::ModuleTraining,
        &ids,
        opts,
        log,
        |m| m.vqa_accuracy,
        |model| {
            let programs = if sample {
                sampled_programs(model, &data.train, &mut rng)?
            } else {
                greedy.clone()
            };
            module_training_epoch(model, data, hp, &programs, &mut adam, &mut rng)
        },
    )?;
    model.stage = Stage::ModuleTraining;
    Ok(report)
}

pub fn run_joint_training(
    model: &mut ProbNmn,
    data: &DatasetSplit,
    hp: &Hyperparams,
    opts: &StageOptions,
    seed: u64,
    allow_cold_start: bool,
    log: &mut MetricsLog,
) -> Result<StageReport> {
    hp.validate()?;
    if !allow_cold_start {
        require(model, Stage::ModuleTraining, "joint training")?;
    } else {
        require(model, Stage::PriorPretrained, "joint training")?;
    }
    let mut rng = stage_rng(seed, Stage::JointTraining);
    if model.stage < Stage::ModuleTraining {
        log::warn!(
            "joint training from stage `{}`: module network freshly initialized",
            model.stage.name()
        );
        model.reinit_nmn(&mut rng);
    }
    let mut ids = model.theta_ids();
    ids.extend(model.sigma_ids());
    ids.extend(model.phi_ids());
    let mut adam = adam_for(model, ids.clone(), hp, opts);
    let mut baseline = BaselineState::new(hp.baseline_decay);
    let report = run_stage(
        model,
        data,
        Stage::JointTraining,
        &ids,
        opts,
        log,
        |m| m.vqa_accuracy,
        |model| joint_training_epoch(model, data, hp, &mut adam, &mut baseline, &mut rng),
    )?;
    model.stage = Stage::JointTraining;
    Ok(report)
}

/// Path of the checkpoint written after `stage` inside `dir`.
pub fn stage_checkpoint_path(dir: &Path, stage: Stage) -> PathBuf {
    dir.join(format!("{}.ckpt", stage.name()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn baseline_recurrence() {
        let b = BaselineState::new(0.99);
        let b = update_baseline(b, 1.0).unwrap();
        assert!((b.value - 0.99).abs() < 1e-15);
        let b = update_baseline(b, 0.0).unwrap();
        assert!((b.value - 0.0099).abs() < 1e-15);
        let frozen = update_baseline(BaselineState { value: 3.0, decay: 0.0 }, 7.0).unwrap();
        assert_eq!(frozen.value, 3.0);
        assert!(update_baseline(b, f64::NAN).is_err());
    }

    #[test]
    fn hyperparams_contract() {
        assert!(Hyperparams::default().validate().is_ok());
        let bad = Hyperparams {
            alpha: 0.5,
            ..Hyperparams::default()
        };
        assert!(bad.validate().is_err());
        let bad = Hyperparams {
            samples: 6,
            ..Hyperparams::default()
        };
        assert!(bad.validate().is_err());
    }
}
