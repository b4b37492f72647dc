//! Finite-difference sweep over every primitive.
//!
//! Each case packs its inputs into one flat vector, slices them back out on
//! the tape, applies the primitive and reduces with fixed random weights so
//! no output entry cancels against another.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gradcheck::{gradient_check, CheckStatus, GradCheckReport};
use crate::tape::{Primitive, Tape, Var};
use crate::tensor::Tensor;

pub struct PrimitiveCase {
    pub kind: Primitive,
    pub inputs: Vec<Vec<usize>>,
    /// Entries of the input with this index are kept away from zero
    /// (relu kink) or made pairwise distinct (min ties).
    pub lo: f64,
    pub hi: f64,
}

impl PrimitiveCase {
    fn new(kind: Primitive, inputs: Vec<Vec<usize>>) -> Self {
        PrimitiveCase {
            kind,
            inputs,
            lo: -1.5,
            hi: 1.5,
        }
    }

    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    fn numel(&self) -> usize {
        self.inputs.iter().map(|s| s.iter().product::<usize>()).sum()
    }
}

pub fn primitive_cases() -> Vec<PrimitiveCase> {
    use Primitive::*;
    vec![
        PrimitiveCase::new(MatMul, vec![vec![3, 4], vec![4, 2]]),
        PrimitiveCase::new(Add, vec![vec![3, 4], vec![4]]),
        PrimitiveCase::new(Sub, vec![vec![2, 3], vec![2, 3]]),
        PrimitiveCase::new(Mul, vec![vec![2, 3], vec![3]]),
        PrimitiveCase::new(Min, vec![vec![2, 3], vec![2, 3]]),
        PrimitiveCase::new(Scale(-1.7), vec![vec![5]]),
        PrimitiveCase::new(Sigmoid, vec![vec![2, 3]]),
        PrimitiveCase::new(Tanh, vec![vec![2, 3]]),
        PrimitiveCase::new(Relu, vec![vec![2, 3]]),
        PrimitiveCase::new(Exp, vec![vec![4]]),
        PrimitiveCase::new(Softmax, vec![vec![2, 4]]),
        PrimitiveCase::new(LogSoftmax, vec![vec![2, 4]]),
        PrimitiveCase::new(Embedding(vec![2, 0, 2, 3]), vec![vec![4, 3]]),
        PrimitiveCase::new(Conv2d { stride: 2 }, vec![vec![5, 5, 2], vec![3, 3, 2, 3]]),
        PrimitiveCase::new(Conv2d { stride: 1 }, vec![vec![3, 3, 2], vec![1, 1, 2, 2]]),
        PrimitiveCase::new(SumAxis(1), vec![vec![2, 3, 2]]),
        PrimitiveCase::new(MeanAxis(0), vec![vec![3, 2]]),
        PrimitiveCase::new(SumAll, vec![vec![2, 2]]),
        PrimitiveCase::new(Concat(1), vec![vec![2, 2], vec![2, 3]]),
        PrimitiveCase::new(Gather(vec![1, 0, 2]), vec![vec![3, 3]]),
        PrimitiveCase::new(NllGather(vec![2, 1]), vec![vec![2, 4]]),
        PrimitiveCase::new(Reshape(vec![3, 2]), vec![vec![2, 3]]),
        PrimitiveCase::new(SliceLast { start: 1, len: 2 }, vec![vec![2, 4]]),
    ]
}

fn build(case: &PrimitiveCase, tape: &mut Tape, x: Var, weights: &[f64]) -> Result<Var> {
    let mut off = 0;
    let mut inputs = Vec::with_capacity(case.inputs.len());
    for shape in &case.inputs {
        let n: usize = shape.iter().product();
        let s = tape.slice_last(x, off, n)?;
        inputs.push(tape.reshape(s, shape)?);
        off += n;
    }
    let y = tape.apply(&case.kind, &inputs)?;
    let shape = tape.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let w = tape.constant(Tensor::new(shape, weights[..n].to_vec())?)?;
    let yw = tape.mul(y, w)?;
    tape.sum_all(yw)
}

fn sample_point(case: &PrimitiveCase, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let p: Vec<f64> = (0..case.numel())
            .map(|_| rng.gen_range(case.lo..case.hi))
            .collect();
        let smooth = match case.kind {
            Primitive::Relu => p.iter().all(|v| v.abs() > 1e-3),
            Primitive::Min => {
                let half = p.len() / 2;
                p[..half].iter().zip(&p[half..]).all(|(a, b)| (a - b).abs() > 1e-3)
            }
            _ => true,
        };
        if smooth {
            return p;
        }
    }
}

#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub points: usize,
    /// Worst report among comparable points (the first point if none are).
    pub worst: GradCheckReport,
    pub failures: usize,
    /// Points that landed on a kink and were not compared.
    pub non_comparable: usize,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Checks every primitive at `points` random smooth points.
pub fn run_primitive_suite(points: usize, seed: u64, h: f64, rtol: f64) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for case in primitive_cases() {
        let weights: Vec<f64> = (0..256).map(|_| rng.gen_range(0.5..1.5)).collect();
        let mut worst: Option<GradCheckReport> = None;
        let (mut failures, mut non_comparable) = (0, 0);
        for _ in 0..points {
            let p = Tensor::vector(sample_point(&case, &mut rng));
            let rep = gradient_check(|t, x| build(&case, t, x, &weights), &p, h, rtol)?;
            match rep.status {
                CheckStatus::Fail => failures += 1,
                CheckStatus::NonComparable => {
                    non_comparable += 1;
                    if worst.is_some() {
                        continue;
                    }
                }
                CheckStatus::Pass => {}
            }
            let replace = worst
                .as_ref()
                .is_none_or(|w| w.status == CheckStatus::NonComparable || rep.max_rel_err > w.max_rel_err);
            if replace {
                worst = Some(rep);
            }
        }
        out.push(SuiteEntry {
            name: case.name(),
            points,
            worst: worst.expect("at least one point"),
            failures,
            non_comparable,
        });
    }
    Ok(out)
}
