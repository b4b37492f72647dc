//! Maximum-likelihood pretraining of the program prior, which is frozen
//! afterwards.

use autodiff::{Adam, AdamConfig, ParamSet, Tape};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grammar::{is_valid, simulate_program, Program, ProgramVocab};
use crate::seq::{lm_log_prob_batch, LmParams};

#[derive(Debug, Clone, Copy)]
pub enum PriorSource<'a> {
    /// Programs drawn from the grammar simulator.
    Syntactic,
    /// A fixed corpus of valid programs, streamed in random order.
    Empirical(&'a [Program]),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 2000,
            batch: 64,
            lr: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub steps: usize,
    /// Mean negative log-likelihood on the evaluation programs.
    pub nll_before: f64,
    pub nll_after: f64,
}

fn draw<R: Rng + ?Sized>(
    source: PriorSource<'_>,
    vocab: &ProgramVocab,
    n: usize,
    rng: &mut R,
) -> Vec<Program> {
    match source {
        PriorSource::Syntactic => (0..n)
            .map(|_| simulate_program(vocab, rng, crate::grammar::MAX_PROGRAM_LEN).expect("fits"))
            .collect(),
        PriorSource::Empirical(corpus) => (0..n)
            .map(|_| corpus[rng.gen_range(0..corpus.len())].clone())
            .collect(),
    }
}

/// Mean `-log p(z)` over `programs`.
pub fn mean_nll(params: &ParamSet, prior: &LmParams, programs: &[Program]) -> Result<f64> {
    let mut total = 0.0;
    for chunk in programs.chunks(256) {
        let seqs: Vec<&[usize]> = chunk.iter().map(|p| p.tokens()).collect();
        let mut tape = Tape::new();
        let v = lm_log_prob_batch(&mut tape, params, prior, &seqs, false)?;
        total -= tape.value(v).data().iter().sum::<f64>();
    }
    Ok(total / programs.len() as f64)
}

/// Trains `prior` by maximum likelihood and freezes it.
pub fn pretrain_prior<R: Rng + ?Sized>(
    params: &mut ParamSet,
    prior: &LmParams,
    vocab: &ProgramVocab,
    source: PriorSource<'_>,
    config: &PretrainConfig,
    rng: &mut R,
) -> Result<PretrainReport> {
    if let PriorSource::Empirical(corpus) = source {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        if let Some(bad) = corpus.iter().find(|p| !is_valid(p, vocab)) {
            return Err(Error::Config(format!(
                "corpus contains invalid program `{}`",
                vocab.render(bad)
            )));
        }
    }
    if config.batch == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let eval = match source {
        PriorSource::Syntactic => draw(source, vocab, 512, rng),
        PriorSource::Empirical(corpus) => corpus.iter().take(512).cloned().collect(),
    };
    let nll_before = mean_nll(params, prior, &eval)?;
    let ids = prior.param_ids();
    let mut adam = Adam::new(
        params,
        ids.clone(),
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
    );
    for _ in 0..config.steps {
        let batch = draw(source, vocab, config.batch, rng);
        let seqs: Vec<&[usize]> = batch.iter().map(|p| p.tokens()).collect();
        params.zero_grads_of(&ids);
        let mut tape = Tape::new();
        let lp = lm_log_prob_batch(&mut tape, params, prior, &seqs, false)?;
        let s = tape.sum_all(lp)?;
        let loss = tape.scale(s, -1.0 / seqs.len() as f64)?;
        tape.backward(loss, params)?;
        adam.step(params)?;
    }
    let nll_after = mean_nll(params, prior, &eval)?;
    prior.set_frozen(params, true);
    Ok(PretrainReport {
        steps: config.steps,
        nll_before,
        nll_after,
    })
}
