//! Autoregressive LSTM sequence models: the program prior, the question to
//! program inference network and the program to question reconstructor.
//!
//! Token layout for a decoder over `K` content tokens: ids `0..K` are
//! content, `K` is END and `K + 1` is START (input side only). A sequence's
//! probability always includes the END emission, except for sequences that
//! reach `max_len`, where END is forced and contributes `log 1 = 0`. The
//! per-step distributions therefore normalize over exactly the sequences
//! the sampler can produce.

use autodiff::{ParamId, ParamSet, Tape, Tensor, Var};
use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EMBED_DIM: usize = 32;
pub const HIDDEN_DIM: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Dims {
    pub embed: usize,
    pub hidden: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Dims {
            embed: EMBED_DIM,
            hidden: HIDDEN_DIM,
        }
    }
}

/// Parameter initialization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    /// Uniform in `[-s, s]` for weights; biases start at zero.
    Uniform(f64),
}

impl Init {
    fn weight<R: Rng + ?Sized>(self, shape: &[usize], rng: &mut R) -> Tensor {
        match self {
            Init::Zeros => Tensor::zeros(shape),
            Init::Uniform(s) => Tensor::from_fn(shape, |_| rng.gen_range(-s..=s)),
        }
    }
}

/// Recurrent state of a batch, `h` and `c` both `[B, H]`.
#[derive(Debug, Clone, Copy)]
pub struct State {
    pub h: Var,
    pub c: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmCell {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub hidden: usize,
}

struct BoundCell {
    w: Var,
    b: Var,
    hidden: usize,
}

impl LstmCell {
    fn create<R: Rng + ?Sized>(
        params: &mut ParamSet,
        prefix: &str,
        input: usize,
        hidden: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let w = params.add(
            format!("{prefix}lstm.w"),
            init.weight(&[input + hidden, 4 * hidden], rng),
        );
        let b = params.add(format!("{prefix}lstm.b"), Tensor::zeros(&[4 * hidden]));
        LstmCell { w, b, input, hidden }
    }

    fn attach(params: &ParamSet, prefix: &str, input: usize, hidden: usize) -> Result<Self> {
        Ok(LstmCell {
            w: lookup(params, &format!("{prefix}lstm.w"), &[input + hidden, 4 * hidden])?,
            b: lookup(params, &format!("{prefix}lstm.b"), &[4 * hidden])?,
            input,
            hidden,
        })
    }

    fn bind(&self, tape: &mut Tape, params: &ParamSet) -> Result<BoundCell> {
        Ok(BoundCell {
            w: tape.param(params, self.w)?,
            b: tape.param(params, self.b)?,
            hidden: self.hidden,
        })
    }
}

impl BoundCell {
    fn step(&self, tape: &mut Tape, x: Var, s: State) -> Result<State> {
        let h = self.hidden;
        let xh = tape.concat(&[x, s.h], 1)?;
        let gates = tape.affine(xh, self.w, self.b)?;
        let i = tape.slice_last(gates, 0, h)?;
        let i = tape.sigmoid(i)?;
        let f = tape.slice_last(gates, h, h)?;
        let f = tape.sigmoid(f)?;
        let g = tape.slice_last(gates, 2 * h, h)?;
        let g = tape.tanh(g)?;
        let o = tape.slice_last(gates, 3 * h, h)?;
        let o = tape.sigmoid(o)?;
        let fc = tape.mul(f, s.c)?;
        let ig = tape.mul(i, g)?;
        let c = tape.add(fc, ig)?;
        let tc = tape.tanh(c)?;
        let h = tape.mul(o, tc)?;
        Ok(State { h, c })
    }
}

fn lookup(params: &ParamSet, name: &str, shape: &[usize]) -> Result<ParamId> {
    let id = params
        .lookup(name)
        .ok_or_else(|| Error::Mismatch(format!("missing parameter `{name}`")))?;
    if params.value(id).shape() != shape {
        return Err(Error::Mismatch(format!(
            "parameter `{name}` has shape {:?}, expected {shape:?}",
            params.value(id).shape()
        )));
    }
    Ok(id)
}

fn zero_state(tape: &mut Tape, batch: usize, hidden: usize) -> Result<State> {
    let h = tape.constant(Tensor::zeros(&[batch, hidden]))?;
    let c = tape.constant(Tensor::zeros(&[batch, hidden]))?;
    Ok(State { h, c })
}

/// An LSTM language model over `vocab` content tokens. Also serves as the
/// decoder half of [`Seq2SeqParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct LmParams {
    pub prefix: String,
    pub vocab: usize,
    pub max_len: usize,
    pub dims: Dims,
    pub embed: ParamId,
    pub cell: LstmCell,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

struct BoundLm {
    embed: Var,
    cell: BoundCell,
    out_w: Var,
    out_b: Var,
}

impl LmParams {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        prefix: &str,
        vocab: usize,
        max_len: usize,
        dims: Dims,
        init: Init,
        rng: &mut R,
    ) -> Self {
        assert!(vocab > 0 && max_len > 0);
        let embed = params.add(
            format!("{prefix}embed"),
            init.weight(&[vocab + 2, dims.embed], rng),
        );
        let cell = LstmCell::create(params, prefix, dims.embed, dims.hidden, init, rng);
        let out_w = params.add(
            format!("{prefix}out.w"),
            init.weight(&[dims.hidden, vocab + 1], rng),
        );
        let out_b = params.add(format!("{prefix}out.b"), Tensor::zeros(&[vocab + 1]));
        LmParams {
            prefix: prefix.to_string(),
            vocab,
            max_len,
            dims,
            embed,
            cell,
            out_w,
            out_b,
        }
    }

    /// Re-binds to parameters already present in `params` (e.g. after
    /// loading a checkpoint).
    pub fn attach(
        params: &ParamSet,
        prefix: &str,
        vocab: usize,
        max_len: usize,
        dims: Dims,
    ) -> Result<Self> {
        Ok(LmParams {
            prefix: prefix.to_string(),
            vocab,
            max_len,
            dims,
            embed: lookup(params, &format!("{prefix}embed"), &[vocab + 2, dims.embed])?,
            cell: LstmCell::attach(params, prefix, dims.embed, dims.hidden)?,
            out_w: lookup(params, &format!("{prefix}out.w"), &[dims.hidden, vocab + 1])?,
            out_b: lookup(params, &format!("{prefix}out.b"), &[vocab + 1])?,
        })
    }

    pub fn end(&self) -> usize {
        self.vocab
    }

    pub fn start(&self) -> usize {
        self.vocab + 1
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.embed, self.cell.w, self.cell.b, self.out_w, self.out_b]
    }

    pub fn set_frozen(&self, params: &mut ParamSet, frozen: bool) {
        for id in self.param_ids() {
            params.set_frozen(id, frozen);
        }
    }

    fn bind(&self, tape: &mut Tape, params: &ParamSet) -> Result<BoundLm> {
        Ok(BoundLm {
            embed: tape.param(params, self.embed)?,
            cell: self.cell.bind(tape, params)?,
            out_w: tape.param(params, self.out_w)?,
            out_b: tape.param(params, self.out_b)?,
        })
    }

    fn check(&self, seq: &[usize]) -> Result<()> {
        if seq.len() > self.max_len {
            return Err(Error::TooLong {
                len: seq.len(),
                max: self.max_len,
            });
        }
        check_tokens(seq, self.vocab)
    }
}

fn check_tokens(seq: &[usize], vocab: usize) -> Result<()> {
    match seq.iter().find(|&&t| t >= vocab) {
        Some(&token) => Err(Error::UnknownToken { token, vocab }),
        None => Ok(()),
    }
}

impl BoundLm {
    /// One decoder step: feeds `inputs` (one per row) and returns the new
    /// state with the `[B, K + 1]` log-probabilities of the next token.
    fn step(&self, tape: &mut Tape, state: State, inputs: &[usize]) -> Result<(State, Var)> {
        let x = tape.embedding(self.embed, inputs)?;
        let state = self.cell.step(tape, x, state)?;
        let logits = tape.affine(state.h, self.out_w, self.out_b)?;
        let logp = tape.log_softmax(logits)?;
        Ok((state, logp))
    }
}

/// Encoder-decoder pair. The encoder's final `(h, c)` initializes the
/// decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Seq2SeqParams {
    pub prefix: String,
    pub src_vocab: usize,
    pub src_max_len: usize,
    pub src_embed: ParamId,
    pub encoder: LstmCell,
    pub decoder: LmParams,
}

impl Seq2SeqParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        prefix: &str,
        src_vocab: usize,
        src_max_len: usize,
        tgt_vocab: usize,
        tgt_max_len: usize,
        dims: Dims,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let src_embed = params.add(
            format!("{prefix}enc.embed"),
            init.weight(&[src_vocab, dims.embed], rng),
        );
        let encoder = LstmCell::create(
            params,
            &format!("{prefix}enc."),
            dims.embed,
            dims.hidden,
            init,
            rng,
        );
        let decoder = LmParams::new(
            params,
            &format!("{prefix}dec."),
            tgt_vocab,
            tgt_max_len,
            dims,
            init,
            rng,
        );
        Seq2SeqParams {
            prefix: prefix.to_string(),
            src_vocab,
            src_max_len,
            src_embed,
            encoder,
            decoder,
        }
    }

    pub fn attach(
        params: &ParamSet,
        prefix: &str,
        src_vocab: usize,
        src_max_len: usize,
        tgt_vocab: usize,
        tgt_max_len: usize,
        dims: Dims,
    ) -> Result<Self> {
        Ok(Seq2SeqParams {
            prefix: prefix.to_string(),
            src_vocab,
            src_max_len,
            src_embed: lookup(params, &format!("{prefix}enc.embed"), &[src_vocab, dims.embed])?,
            encoder: LstmCell::attach(params, &format!("{prefix}enc."), dims.embed, dims.hidden)?,
            decoder: LmParams::attach(
                params,
                &format!("{prefix}dec."),
                tgt_vocab,
                tgt_max_len,
                dims,
            )?,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.src_embed, self.encoder.w, self.encoder.b];
        ids.extend(self.decoder.param_ids());
        ids
    }

    /// Runs the encoder over a batch of source sequences. Rows shorter than
    /// the longest source keep their state unchanged on padded steps.
    pub fn encode(&self, tape: &mut Tape, params: &ParamSet, srcs: &[&[usize]]) -> Result<State> {
        for s in srcs {
            if s.len() > self.src_max_len {
                return Err(Error::TooLong {
                    len: s.len(),
                    max: self.src_max_len,
                });
            }
            check_tokens(s, self.src_vocab)?;
        }
        let b = srcs.len();
        let hdim = self.encoder.hidden;
        let embed = tape.param(params, self.src_embed)?;
        let cell = self.encoder.bind(tape, params)?;
        let mut state = zero_state(tape, b, hdim)?;
        let steps = srcs.iter().map(|s| s.len()).max().unwrap_or(0);
        for t in 0..steps {
            let tokens: Vec<usize> = srcs.iter().map(|s| s.get(t).copied().unwrap_or(0)).collect();
            let x = tape.embedding(embed, &tokens)?;
            let next = cell.step(tape, x, state)?;
            if srcs.iter().all(|s| t < s.len()) {
                state = next;
                continue;
            }
            let keep = Tensor::from_fn(&[b, hdim], |k| (t < srcs[k / hdim].len()) as u8 as f64);
            let hold = Tensor::from_fn(&[b, hdim], |k| (t >= srcs[k / hdim].len()) as u8 as f64);
            let keep = tape.constant(keep)?;
            let hold = tape.constant(hold)?;
            state = State {
                h: blend(tape, next.h, state.h, keep, hold)?,
                c: blend(tape, next.c, state.c, keep, hold)?,
            };
        }
        Ok(state)
    }
}

fn blend(tape: &mut Tape, new: Var, old: Var, keep: Var, hold: Var) -> Result<Var> {
    let a = tape.mul(new, keep)?;
    let b = tape.mul(old, hold)?;
    Ok(tape.add(a, b)?)
}

/// A realized sequence together with the categorical distribution at every
/// step that was actually computed.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceDistribution {
    pub tokens: Vec<usize>,
    /// `probs[t]` is the distribution over `K + 1` symbols at step `t`.
    pub probs: Vec<Vec<f64>>,
    /// Log-probability of the symbol chosen at each computed step.
    pub step_log_probs: Vec<f64>,
    pub log_prob: f64,
    /// False when the sequence hit `max_len` and END was forced.
    pub emitted_end: bool,
}

enum Chooser<'a> {
    Sample(&'a mut dyn RngCore),
    Greedy,
    Forced(&'a [&'a [usize]]),
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax_lowest(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn rollout(
    tape: &mut Tape,
    params: &ParamSet,
    dec: &LmParams,
    init: Option<State>,
    batch: usize,
    mut chooser: Chooser<'_>,
) -> Result<Vec<SequenceDistribution>> {
    let bound = dec.bind(tape, params)?;
    let mut state = match init {
        Some(s) => s,
        None => zero_state(tape, batch, dec.dims.hidden)?,
    };
    let end = dec.end();
    let k1 = dec.vocab + 1;
    let mut out: Vec<SequenceDistribution> = (0..batch)
        .map(|_| SequenceDistribution {
            tokens: Vec::new(),
            probs: Vec::new(),
            step_log_probs: Vec::new(),
            log_prob: 0.0,
            emitted_end: false,
        })
        .collect();
    let mut done = vec![false; batch];
    let mut inputs = vec![dec.start(); batch];
    for t in 0..dec.max_len {
        if done.iter().all(|&d| d) {
            break;
        }
        let (next, logp) = bound.step(tape, state, &inputs)?;
        state = next;
        let lp = tape.value(logp).data().to_vec();
        for r in 0..batch {
            if done[r] {
                continue;
            }
            let row = &lp[r * k1..(r + 1) * k1];
            let tok = match &mut chooser {
                Chooser::Greedy => argmax_lowest(row),
                Chooser::Sample(rng) => {
                    let probs: Vec<f64> = row.iter().map(|v| v.exp()).collect();
                    WeightedIndex::new(&probs)
                        .expect("softmax output is a valid distribution")
                        .sample(rng)
                }
                Chooser::Forced(seqs) => seqs[r].get(t).copied().unwrap_or(end),
            };
            let seq = &mut out[r];
            seq.probs.push(row.iter().map(|v| v.exp()).collect());
            seq.step_log_probs.push(row[tok]);
            seq.log_prob = if t == 0 { row[tok] } else { seq.log_prob + row[tok] };
            if tok == end {
                done[r] = true;
                seq.emitted_end = true;
            } else {
                seq.tokens.push(tok);
            }
            inputs[r] = tok;
        }
    }
    Ok(out)
}

/// Differentiable teacher-forced log-probabilities, one per row, shape `[B]`.
fn score(
    tape: &mut Tape,
    params: &ParamSet,
    dec: &LmParams,
    init: Option<State>,
    tgts: &[&[usize]],
    length_normalize: bool,
) -> Result<Var> {
    for s in tgts {
        dec.check(s)?;
    }
    let b = tgts.len();
    let bound = dec.bind(tape, params)?;
    let mut state = match init {
        Some(s) => s,
        None => zero_state(tape, b, dec.dims.hidden)?,
    };
    let end = dec.end();
    let longest = tgts.iter().map(|s| s.len()).max().unwrap_or(0);
    let steps = (longest + 1).min(dec.max_len);
    let mut total: Option<Var> = None;
    for t in 0..steps {
        let inputs: Vec<usize> = tgts
            .iter()
            .map(|s| {
                if t == 0 {
                    dec.start()
                } else {
                    s.get(t - 1).copied().unwrap_or(end)
                }
            })
            .collect();
        let targets: Vec<usize> = tgts.iter().map(|s| s.get(t).copied().unwrap_or(end)).collect();
        let (next, logp) = bound.step(tape, state, &inputs)?;
        state = next;
        let picked = tape.gather(logp, &targets)?;
        let contrib = if tgts.iter().all(|s| t <= s.len()) {
            picked
        } else {
            let mask = Tensor::vector(tgts.iter().map(|s| (t <= s.len()) as u8 as f64).collect());
            let mask = tape.constant(mask)?;
            tape.mul(picked, mask)?
        };
        total = Some(match total {
            None => contrib,
            Some(acc) => tape.add(acc, contrib)?,
        });
    }
    let total = total.expect("at least one decoder step");
    if !length_normalize {
        return Ok(total);
    }
    let inv = Tensor::vector(
        tgts.iter()
            .map(|s| 1.0 / emission_steps(s.len(), dec.max_len) as f64)
            .collect(),
    );
    let inv = tape.constant(inv)?;
    Ok(tape.mul(total, inv)?)
}

/// Number of computed decoder steps for a target of length `len`.
pub fn emission_steps(len: usize, max_len: usize) -> usize {
    (len + 1).min(max_len)
}

// Language-model entry points.

/// Batched `log p(seq)` on a tape, shape `[B]`.
pub fn lm_log_prob_batch(
    tape: &mut Tape,
    params: &ParamSet,
    lm: &LmParams,
    seqs: &[&[usize]],
    length_normalize: bool,
) -> Result<Var> {
    score(tape, params, lm, None, seqs, length_normalize)
}

/// `log p(seq)` including the END emission.
pub fn lm_log_prob(params: &ParamSet, lm: &LmParams, seq: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let v = lm_log_prob_batch(&mut tape, params, lm, &[seq], false)?;
    Ok(tape.value(v).item())
}

pub fn sample_lm(
    params: &ParamSet,
    lm: &LmParams,
    n: usize,
    rng: &mut dyn RngCore,
) -> Result<Vec<SequenceDistribution>> {
    let mut tape = Tape::new();
    rollout(&mut tape, params, lm, None, n, Chooser::Sample(rng))
}

pub fn greedy_lm(params: &ParamSet, lm: &LmParams) -> Result<SequenceDistribution> {
    let mut tape = Tape::new();
    Ok(rollout(&mut tape, params, lm, None, 1, Chooser::Greedy)?.remove(0))
}

/// Per-step conditionals `log p(z_t | z_<t)` computed one step at a time.
pub fn lm_stepwise(params: &ParamSet, lm: &LmParams, seq: &[usize]) -> Result<Vec<f64>> {
    lm.check(seq)?;
    let mut tape = Tape::new();
    let seqs = [seq];
    let out = rollout(&mut tape, params, lm, None, 1, Chooser::Forced(&seqs))?;
    Ok(out[0].step_log_probs.clone())
}

// Encoder-decoder entry points.

/// Batched `log p(tgt | src)` on a tape, shape `[B]`.
pub fn seq2seq_log_prob_batch(
    tape: &mut Tape,
    params: &ParamSet,
    model: &Seq2SeqParams,
    srcs: &[&[usize]],
    tgts: &[&[usize]],
    length_normalize: bool,
) -> Result<Var> {
    assert_eq!(srcs.len(), tgts.len(), "source/target batch sizes differ");
    let state = model.encode(tape, params, srcs)?;
    score(tape, params, &model.decoder, Some(state), tgts, length_normalize)
}

pub fn seq2seq_log_prob(
    params: &ParamSet,
    model: &Seq2SeqParams,
    src: &[usize],
    tgt: &[usize],
) -> Result<f64> {
    let mut tape = Tape::new();
    let v = seq2seq_log_prob_batch(&mut tape, params, model, &[src], &[tgt], false)?;
    Ok(tape.value(v).item())
}

/// One ancestral sample per source sequence.
pub fn sample_seq2seq(
    params: &ParamSet,
    model: &Seq2SeqParams,
    srcs: &[&[usize]],
    rng: &mut dyn RngCore,
) -> Result<Vec<SequenceDistribution>> {
    let mut tape = Tape::new();
    let state = model.encode(&mut tape, params, srcs)?;
    rollout(
        &mut tape,
        params,
        &model.decoder,
        Some(state),
        srcs.len(),
        Chooser::Sample(rng),
    )
}

/// Argmax decoding, ties to the lowest token index.
pub fn greedy_decode_batch(
    params: &ParamSet,
    model: &Seq2SeqParams,
    srcs: &[&[usize]],
) -> Result<Vec<SequenceDistribution>> {
    let mut tape = Tape::new();
    let state = model.encode(&mut tape, params, srcs)?;
    rollout(&mut tape, params, &model.decoder, Some(state), srcs.len(), Chooser::Greedy)
}

pub fn greedy_decode(params: &ParamSet, model: &Seq2SeqParams, src: &[usize]) -> Result<Vec<usize>> {
    Ok(greedy_decode_batch(params, model, &[src])?.remove(0).tokens)
}

pub fn seq2seq_stepwise(
    params: &ParamSet,
    model: &Seq2SeqParams,
    src: &[usize],
    tgt: &[usize],
) -> Result<Vec<f64>> {
    model.decoder.check(tgt)?;
    let mut tape = Tape::new();
    let state = model.encode(&mut tape, params, &[src])?;
    let tgts = [tgt];
    let out = rollout(
        &mut tape,
        params,
        &model.decoder,
        Some(state),
        1,
        Chooser::Forced(&tgts),
    )?;
    Ok(out[0].step_log_probs.clone())
}

/// Every sequence over `vocab` tokens of length `0..=max_len`, shortest
/// first, lexicographic within a length.
pub fn enumerate_sequences(vocab: usize, max_len: usize) -> Vec<Vec<usize>> {
    let mut all = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for t in 0..vocab {
                let mut s2: Vec<usize> = s.clone();
                s2.push(t);
                next.push(s2);
            }
        }
        all.extend(next.iter().cloned());
        frontier = next;
    }
    all
}
