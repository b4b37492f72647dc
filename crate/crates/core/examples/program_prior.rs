//! Pretrains the program prior on simulated programs and samples from it.

use autodiff::ParamSet;
use probnmn::grammar::{is_valid, Program, ProgramVocab, MAX_PROGRAM_LEN};
use probnmn::prior::{pretrain_prior, PretrainConfig, PriorSource};
use probnmn::seq::{sample_lm, Dims, Init, LmParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let vocab = ProgramVocab::shapes();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut params = ParamSet::new();
    let prior = LmParams::new(
        &mut params,
        "prior",
        vocab.len(),
        MAX_PROGRAM_LEN,
        Dims { embed: 16, hidden: 48 },
        Init::Uniform(0.08),
        &mut rng,
    );
    let config = PretrainConfig {
        steps: 300,
        batch: 32,
        lr: 1e-2,
    };
    let report = pretrain_prior(&mut params, &prior, &vocab, PriorSource::Syntactic, &config, &mut rng).unwrap();
    println!("held-out nll {:.3} -> {:.3}", report.nll_before, report.nll_after);

    let draws = sample_lm(&params, &prior, 200, &mut rng).unwrap();
    let valid = draws.iter().filter(|d| is_valid(&Program::new(d.tokens.clone()), &vocab)).count();
    println!("{valid} of {} samples are valid programs", draws.len());
    for d in draws.iter().take(5) {
        println!("  {:>7.3}  {}", d.log_prob, vocab.render(&Program::new(d.tokens.clone())));
    }
}
