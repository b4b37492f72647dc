//! Test-time answering, evaluation metrics and the posterior program probe.

use std::collections::{BTreeMap, HashMap};

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::grammar::{is_valid, Program};
use crate::model::ProbNmn;
use crate::nmn::execute_program;
use crate::seq::{argmax_lowest, greedy_decode_batch, sample_lm, sample_seq2seq};
use crate::world::dataset::{DatasetSplit, QaItem};
use crate::world::oracle::{symbolic_execute, Answer};
use crate::world::render::Image;
use crate::world::scene::Scene;

const UNIFORM: [f64; 2] = [0.5, 0.5];

/// Maps questions to programs (token sequences, possibly invalid).
pub trait ProgramParser {
    fn parse(&self, questions: &[&[usize]]) -> Result<Vec<Vec<usize>>>;
}

/// Maps programs back to questions.
pub trait QuestionReconstructor {
    fn reconstruct(&self, programs: &[&[usize]]) -> Result<Vec<Vec<usize>>>;
}

/// Answer distribution for a program on an image; `None` when the program
/// cannot be executed.
pub trait VisualAnswerer {
    fn answer_probs(&self, program: &Program, image: &Image) -> Result<Option<[f64; 2]>>;
}

impl ProgramParser for ProbNmn {
    fn parse(&self, questions: &[&[usize]]) -> Result<Vec<Vec<usize>>> {
        let mut out = Vec::with_capacity(questions.len());
        for chunk in questions.chunks(256) {
            let decoded = greedy_decode_batch(&self.params, &self.inference, chunk)?;
            out.extend(decoded.into_iter().map(|d| d.tokens));
        }
        Ok(out)
    }
}

impl QuestionReconstructor for ProbNmn {
    fn reconstruct(&self, programs: &[&[usize]]) -> Result<Vec<Vec<usize>>> {
        let mut out = Vec::with_capacity(programs.len());
        for chunk in programs.chunks(256) {
            let decoded = greedy_decode_batch(&self.params, &self.reconstructor, chunk)?;
            out.extend(decoded.into_iter().map(|d| d.tokens));
        }
        Ok(out)
    }
}

impl VisualAnswerer for ProbNmn {
    fn answer_probs(&self, program: &Program, image: &Image) -> Result<Option<[f64; 2]>> {
        if !is_valid(program, &self.program_vocab) {
            return Ok(None);
        }
        let tr = execute_program(&self.params, &self.nmn, &self.program_vocab, program, image)?;
        Ok(Some([tr.log_probs[0].exp(), tr.log_probs[1].exp()]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Exact match of the greedy program against the gold program.
    pub program_accuracy: f64,
    /// Exact match of the greedy reconstruction against the question.
    pub reconstruction_accuracy: f64,
    /// Answer accuracy executing the greedy program.
    pub vqa_accuracy: f64,
    /// Mean bag-of-tokens F1 between greedy and gold programs.
    pub program_token_f1: f64,
    pub invalid_programs: usize,
    pub items: usize,
}

fn token_f1(pred: &[usize], gold: &[usize]) -> f64 {
    if pred.is_empty() && gold.is_empty() {
        return 1.0;
    }
    let mut counts: HashMap<usize, isize> = HashMap::new();
    for &t in gold {
        *counts.entry(t).or_default() += 1;
    }
    let mut overlap = 0;
    for &t in pred {
        let c = counts.entry(t).or_default();
        if *c > 0 {
            *c -= 1;
            overlap += 1;
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / pred.len() as f64;
    let r = overlap as f64 / gold.len() as f64;
    2.0 * p * r / (p + r)
}

pub fn compute_metrics<P, R, A>(
    parser: &P,
    reconstructor: &R,
    answerer: &A,
    data: &DatasetSplit,
    items: &[QaItem],
) -> Result<Metrics>
where
    P: ProgramParser + ?Sized,
    R: QuestionReconstructor + ?Sized,
    A: VisualAnswerer + ?Sized,
{
    let n = items.len();
    if n == 0 {
        return Ok(Metrics {
            program_accuracy: 0.0,
            reconstruction_accuracy: 0.0,
            vqa_accuracy: 0.0,
            program_token_f1: 0.0,
            invalid_programs: 0,
            items: 0,
        });
    }
    let questions: Vec<&[usize]> = items.iter().map(|i| i.question.as_slice()).collect();
    let golds: Vec<&[usize]> = items.iter().map(|i| i.program.tokens()).collect();
    let parsed = parser.parse(&questions)?;
    let recon = reconstructor.reconstruct(&golds)?;
    let (mut prog_ok, mut rec_ok, mut vqa_ok, mut invalid) = (0, 0, 0, 0);
    let mut f1 = 0.0;
    for ((item, z), x) in items.iter().zip(parsed).zip(recon) {
        prog_ok += (z == item.program.tokens()) as usize;
        rec_ok += (x == item.question) as usize;
        f1 += token_f1(&z, item.program.tokens());
        let probs = match answerer.answer_probs(&Program::new(z), &data.image(item))? {
            Some(p) => p,
            None => {
                invalid += 1;
                UNIFORM
            }
        };
        vqa_ok += (Answer::from_index(argmax_lowest(&probs)) == item.answer) as usize;
    }
    let nf = n as f64;
    Ok(Metrics {
        program_accuracy: prog_ok as f64 / nf,
        reconstruction_accuracy: rec_ok as f64 / nf,
        vqa_accuracy: vqa_ok as f64 / nf,
        program_token_f1: f1 / nf,
        invalid_programs: invalid,
        items: n,
    })
}

/// Metrics of `model` on `items` with greedy decoding throughout.
pub fn evaluate(model: &ProbNmn, data: &DatasetSplit, items: &[QaItem]) -> Result<Metrics> {
    compute_metrics(model, model, model, data, items)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub probs: [f64; 2],
    pub answer: Answer,
    pub invalid_samples: usize,
}

/// Averages the answer distribution over `n_samples` programs drawn from
/// the inference network. Invalid draws contribute the uniform
/// distribution.
pub fn predict_answer(
    model: &ProbNmn,
    image: &Image,
    question: &[usize],
    n_samples: usize,
    rng: &mut dyn RngCore,
) -> Result<Prediction> {
    let n = n_samples.max(1);
    let srcs = vec![question; n];
    let draws = sample_seq2seq(&model.params, &model.inference, &srcs, rng)?;
    let mut probs = [0.0; 2];
    let mut invalid = 0;
    for d in draws {
        let p = match model.answer_probs(&Program::new(d.tokens), image)? {
            Some(p) => p,
            None => {
                invalid += 1;
                UNIFORM
            }
        };
        probs[0] += p[0] / n as f64;
        probs[1] += p[1] / n as f64;
    }
    Ok(Prediction {
        probs,
        answer: Answer::from_index(argmax_lowest(&probs)),
        invalid_samples: invalid,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeEntry {
    pub program: Program,
    pub log_prior: f64,
    pub nmn_log_probs: [f64; 2],
    pub nmn_answer: Answer,
    pub oracle_answer: Option<Answer>,
    /// Greedy reconstruction; filled for the top-ranked entries only.
    pub question: Option<Vec<usize>>,
    /// How many draws produced this program.
    pub hits: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub target: Answer,
    pub draws: usize,
    pub accepted_draws: usize,
    pub invalid_draws: usize,
    /// Unique accepted programs, sorted by prior log-probability
    /// (non-increasing).
    pub accepted: Vec<ProbeEntry>,
    /// Fraction of unique accepted programs whose oracle answer is the
    /// target; `None` without a scene or without acceptances.
    pub coherence: Option<f64>,
}

impl ProbeResult {
    pub fn acceptance_rate(&self) -> f64 {
        self.accepted_draws as f64 / self.draws.max(1) as f64
    }
}

/// Samples programs from the prior and keeps those the module network
/// answers with `target` on `image`.
pub fn posterior_probe(
    model: &ProbNmn,
    image: &Image,
    scene: Option<&Scene>,
    target: Answer,
    n_draws: usize,
    top_k: usize,
    rng: &mut dyn RngCore,
) -> Result<ProbeResult> {
    let mut unique: BTreeMap<Vec<usize>, ProbeEntry> = BTreeMap::new();
    let (mut accepted, mut invalid) = (0, 0);
    let mut remaining = n_draws;
    while remaining > 0 {
        let n = remaining.min(256);
        remaining -= n;
        for d in sample_lm(&model.params, &model.prior, n, rng)? {
            if let Some(e) = unique.get_mut(&d.tokens) {
                e.hits += 1;
                accepted += 1;
                continue;
            }
            let program = Program::new(d.tokens.clone());
            if !is_valid(&program, &model.program_vocab) {
                invalid += 1;
                continue;
            }
            let tr = execute_program(&model.params, &model.nmn, &model.program_vocab, &program, image)?;
            if tr.answer() != target {
                continue;
            }
            accepted += 1;
            let oracle_answer = match scene {
                Some(s) => Some(symbolic_execute(&program, s, &model.program_vocab)?.answer),
                None => None,
            };
            unique.insert(
                d.tokens,
                ProbeEntry {
                    program,
                    log_prior: d.log_prob,
                    nmn_log_probs: tr.log_probs,
                    nmn_answer: tr.answer(),
                    oracle_answer,
                    question: None,
                    hits: 1,
                },
            );
        }
    }
    let mut entries: Vec<ProbeEntry> = unique.into_values().collect();
    entries.sort_by(|a, b| {
        b.log_prior
            .total_cmp(&a.log_prior)
            .then_with(|| a.program.cmp(&b.program))
    });
    let k = top_k.min(entries.len());
    if k > 0 {
        let srcs: Vec<&[usize]> = entries[..k].iter().map(|e| e.program.tokens()).collect();
        let decoded = greedy_decode_batch(&model.params, &model.reconstructor, &srcs)?;
        for (e, d) in entries.iter_mut().zip(decoded) {
            e.question = Some(d.tokens);
        }
    }
    let coherence = match (scene, entries.is_empty()) {
        (Some(_), false) => Some(
            entries
                .iter()
                .filter(|e| e.oracle_answer == Some(target))
                .count() as f64
                / entries.len() as f64,
        ),
        _ => None,
    };
    Ok(ProbeResult {
        target,
        draws: n_draws,
        accepted_draws: accepted,
        invalid_draws: invalid,
        accepted: entries,
        coherence,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_f1_cases() {
        assert_eq!(token_f1(&[1, 2, 3], &[1, 2, 3]), 1.0);
        assert_eq!(token_f1(&[4], &[1, 2]), 0.0);
        assert!((token_f1(&[1, 2], &[1, 3]) - 0.5).abs() < 1e-12);
    }
}
