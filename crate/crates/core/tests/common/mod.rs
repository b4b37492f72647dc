//! Enumerable toy model shared by the objective tests and the acceptance
//! suite: every program of length at most two over three tokens.
#![allow(dead_code)]

pub mod grammar;

use autodiff::{ParamId, ParamSet, Tape, Tensor};
use probnmn::seq::{
    enumerate_sequences, lm_log_prob_batch, sample_seq2seq, seq2seq_log_prob_batch, Dims, Init, LmParams,
    Seq2SeqParams,
};
use probnmn::train::{reinforce_surrogate, update_baseline, BaselineState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const VOCAB: usize = 3;
pub const MAX_LEN: usize = 2;
pub const X: [usize; 2] = [2, 0];

pub struct Toy {
    pub ps: ParamSet,
    pub prior: LmParams,
    pub q: Seq2SeqParams,
    pub r: Seq2SeqParams,
    pub zs: Vec<Vec<usize>>,
}

pub fn toy(seed: u64) -> Toy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = Dims { embed: 3, hidden: 4 };
    let init = Init::Uniform(1.0);
    let mut ps = ParamSet::new();
    let prior = LmParams::new(&mut ps, "p.", VOCAB, MAX_LEN, dims, init, &mut rng);
    let q = Seq2SeqParams::new(&mut ps, "q.", VOCAB, MAX_LEN, VOCAB, MAX_LEN, dims, init, &mut rng);
    let r = Seq2SeqParams::new(&mut ps, "r.", VOCAB, MAX_LEN, VOCAB, MAX_LEN, dims, init, &mut rng);
    // biases start at zero; randomize them too
    for id in ps.ids().collect::<Vec<_>>() {
        for v in ps.value_mut(id).data_mut() {
            if *v == 0.0 {
                *v = rng.gen_range(-1.0..1.0);
            }
        }
    }
    Toy {
        ps,
        prior,
        q,
        r,
        zs: enumerate_sequences(VOCAB, MAX_LEN),
    }
}

/// Exact `(log q(z|x), log p(x|z), log p(z))` for every program.
pub fn tables(t: &Toy) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let zs: Vec<&[usize]> = t.zs.iter().map(|z| z.as_slice()).collect();
    let xs: Vec<&[usize]> = vec![&X[..]; zs.len()];
    let mut tape = Tape::new();
    let lq = seq2seq_log_prob_batch(&mut tape, &t.ps, &t.q, &xs, &zs, false).unwrap();
    let lx = seq2seq_log_prob_batch(&mut tape, &t.ps, &t.r, &zs, &xs, false).unwrap();
    let lp = lm_log_prob_batch(&mut tape, &t.ps, &t.prior, &zs, false).unwrap();
    let v = |x| tape.value(x).data().to_vec();
    (v(lq), v(lx), v(lp))
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn phi_ids(t: &Toy) -> Vec<ParamId> {
    t.q.param_ids()
}

/// Gradient over q's parameters of the surrogate for one program.
pub fn score_grad(t: &mut Toy, z: &[usize], reward: f64, baseline: f64) -> Vec<f64> {
    let ids = phi_ids(t);
    t.ps.zero_grads_of(&ids);
    let mut tape = Tape::new();
    let lq = seq2seq_log_prob_batch(&mut tape, &t.ps, &t.q, &[&X[..]], &[z], false).unwrap();
    let s = reinforce_surrogate(&mut tape, lq, &[reward], baseline, 1.0).unwrap();
    tape.backward(s, &mut t.ps).unwrap();
    t.ps.flatten_grads(&ids)
}

/// Gradient of `sum_z q(z|x) f(z)` by direct differentiation, where `f`
/// may itself depend on `log q` through `beta`.
pub fn direct_grad(t: &mut Toy, f: &[f64], beta: f64) -> Vec<f64> {
    let ids = phi_ids(t);
    t.ps.zero_grads_of(&ids);
    let zs: Vec<&[usize]> = t.zs.iter().map(|z| z.as_slice()).collect();
    let xs: Vec<&[usize]> = vec![&X[..]; zs.len()];
    let mut tape = Tape::new();
    let lq = seq2seq_log_prob_batch(&mut tape, &t.ps, &t.q, &xs, &zs, false).unwrap();
    let q = tape.exp(lq).unwrap();
    let fc = tape.constant(Tensor::vector(f.to_vec())).unwrap();
    let scaled = tape.scale(lq, -beta).unwrap();
    let inner = tape.add(fc, scaled).unwrap();
    let prod = tape.mul(q, inner).unwrap();
    let total = tape.sum_all(prod).unwrap();
    tape.backward(total, &mut t.ps).unwrap();
    t.ps.flatten_grads(&ids)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn exact_expectation(t: &mut Toy, rewards: &[f64], baseline: f64) -> Vec<f64> {
    let (lq, _, _) = tables(t);
    let zs = t.zs.clone();
    let mut acc = vec![0.0; t.ps.numel(&phi_ids(t))];
    for (i, z) in zs.iter().enumerate() {
        let g = score_grad(t, z, rewards[i], baseline);
        for (a, gi) in acc.iter_mut().zip(g) {
            *a += lq[i].exp() * gi;
        }
    }
    acc
}


/// Worst-case measurements of the bound check.
#[derive(Debug, Clone, Copy)]
pub struct BoundCheck {
    /// Largest `U_beta - log p(x)`; non-positive when the bound holds.
    pub worst_excess: f64,
    /// Largest deviation of the beta = 1 gap from KL(q(z|x) || p(z|x)).
    pub worst_gap_error: f64,
    pub min_kl: f64,
}

pub fn bound_check(seeds: std::ops::Range<u64>, betas: &[f64]) -> BoundCheck {
    let mut out = BoundCheck {
        worst_excess: f64::NEG_INFINITY,
        worst_gap_error: 0.0,
        min_kl: f64::INFINITY,
    };
    for seed in seeds {
        let t = toy(seed);
        let (lq, lx, lp) = tables(&t);
        let joint: Vec<f64> = lx.iter().zip(&lp).map(|(a, b)| a + b).collect();
        let log_px = log_sum_exp(&joint);
        let bound = |beta: f64| -> f64 {
            (0..lq.len())
                .map(|i| lq[i].exp() * (lx[i] - beta * lq[i] + beta * lp[i]))
                .sum()
        };
        for &beta in betas {
            out.worst_excess = out.worst_excess.max(bound(beta) - log_px);
        }
        let kl: f64 = (0..lq.len())
            .map(|i| lq[i].exp() * (lq[i] - (joint[i] - log_px)))
            .sum();
        out.min_kl = out.min_kl.min(kl);
        out.worst_gap_error = out.worst_gap_error.max((log_px - bound(1.0) - kl).abs());
    }
    out
}

/// Largest gap between the exactly enumerated score-function gradient and
/// direct differentiation, over random rewards and two baselines.
pub fn score_function_check(seeds: std::ops::Range<u64>) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in seeds {
        let mut t = toy(100 + seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rewards: Vec<f64> = (0..t.zs.len()).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let direct = direct_grad(&mut t, &rewards, 0.0);
        assert!(direct.iter().any(|g| g.abs() > 1e-3), "degenerate toy gradient");
        for b in [0.0, 1.7] {
            let exact = exact_expectation(&mut t, &rewards, b);
            worst = worst.max(max_abs_diff(&exact, &direct));
        }
    }
    worst
}

/// Monte-Carlo mean of one projected gradient next to its exact value.
#[derive(Debug, Clone, Copy)]
pub struct Projection {
    pub mean: f64,
    pub exact: f64,
    pub standard_error: f64,
}

impl Projection {
    pub fn within(&self, k: f64) -> bool {
        (self.mean - self.exact).abs() <= k * self.standard_error
    }
}

/// Draws `n` programs from q and compares the sample mean of the
/// score-function gradient with the enumerated expectation. Per-sample
/// gradients are high-dimensional, so their projections onto fixed random
/// directions are compared.
pub fn monte_carlo_check(n: usize, directions: usize) -> Vec<Projection> {
    let mut t = toy(21);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let rewards: Vec<f64> = (0..t.zs.len()).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let exact = exact_expectation(&mut t, &rewards, 0.0);
    let zs = t.zs.clone();
    let per_z: Vec<Vec<f64>> = zs
        .iter()
        .enumerate()
        .map(|(i, z)| score_grad(&mut t, z, rewards[i], 0.0))
        .collect();

    let (lq, _, _) = tables(&t);
    let mut counts = vec![0usize; zs.len()];
    let chunk = 1000;
    let srcs = vec![&X[..]; chunk];
    let mut drawn = 0;
    while drawn < n {
        let k = chunk.min(n - drawn);
        for d in sample_seq2seq(&t.ps, &t.q, &srcs[..k], &mut rng).unwrap() {
            let i = zs.iter().position(|z| *z == d.tokens).unwrap();
            assert!((d.log_prob - lq[i]).abs() < 1e-12);
            counts[i] += 1;
        }
        drawn += k;
    }

    let dim = exact.len();
    (0..directions)
        .map(|_| {
            let dir: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let proj: Vec<f64> = per_z.iter().map(|g| g.iter().zip(&dir).map(|(a, b)| a * b).sum()).collect();
            let target: f64 = exact.iter().zip(&dir).map(|(a, b)| a * b).sum();
            let mean: f64 = (0..zs.len()).map(|i| counts[i] as f64 * proj[i]).sum::<f64>() / n as f64;
            let var: f64 = (0..zs.len())
                .map(|i| counts[i] as f64 * (proj[i] - mean).powi(2))
                .sum::<f64>()
                / (n - 1) as f64;
            Projection {
                mean,
                exact: target,
                standard_error: (var / n as f64).sqrt(),
            }
        })
        .collect()
}

/// Runs the baseline over `pairs` random `(D, reward stream)` pairs.
/// Returns whether every value equals the recurrence evaluated by hand
/// bit for bit, and the worst relative gap to the unrolled sum
/// `sum_k D (1 - D)^(t - k) R_k`.
pub fn baseline_check(pairs: usize, len: usize) -> (bool, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut exact = true;
    let mut worst: f64 = 0.0;
    for _ in 0..pairs {
        let d: f64 = rng.gen_range(0.0..=1.0);
        let rs: Vec<f64> = (0..len).map(|_| rng.gen_range(-20.0..5.0)).collect();
        let mut state = BaselineState::new(d);
        let mut by_hand = 0.0f64;
        for (t, &r) in rs.iter().enumerate() {
            state = update_baseline(state, r).unwrap();
            by_hand += d * (r - by_hand);
            exact &= state.value.to_bits() == by_hand.to_bits();
            let unrolled: f64 = (0..=t).map(|k| d * (1.0 - d).powi((t - k) as i32) * rs[k]).sum();
            worst = worst.max((state.value - unrolled).abs() / (1.0 + unrolled.abs()));
        }
    }
    (exact, worst)
}
