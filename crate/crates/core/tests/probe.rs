use std::collections::HashSet;

use probnmn::grammar::Program;
use probnmn::model::{ProbNmn, Stage};
use probnmn::nmn::{execute_program, rig_oracle_weights};
use probnmn::prior::{pretrain_prior, PretrainConfig, PriorSource};
use probnmn::probe::{
    compute_metrics, evaluate, posterior_probe, predict_answer, ProgramParser, QuestionReconstructor,
    VisualAnswerer,
};
use probnmn::seq::Dims;
use probnmn::world::{generate_dataset, symbolic_execute, Answer, DatasetConfig, DatasetSplit, Image};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn data() -> DatasetSplit {
    generate_dataset(&DatasetConfig {
        train: 40,
        val: 40,
        test: 10,
        supervision_fraction: 0.5,
        seed: 12,
        density: 0.5,
    })
    .unwrap()
}

fn rigged_model(data: &DatasetSplit) -> ProbNmn {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut m = ProbNmn::new(
        data.program_vocab.clone(),
        data.question_vocab.clone(),
        Dims { embed: 8, hidden: 16 },
        &mut rng,
    );
    let prior = m.prior.clone();
    let cfg = PretrainConfig {
        steps: 300,
        batch: 32,
        lr: 1e-2,
    };
    pretrain_prior(&mut m.params, &prior, &m.program_vocab, PriorSource::Syntactic, &cfg, &mut rng).unwrap();
    m.stage = Stage::PriorPretrained;
    let nmn = m.nmn.clone();
    rig_oracle_weights(&mut m.params, &nmn, &m.program_vocab).unwrap();
    m
}

#[test]
fn rigged_probe_is_fully_coherent_and_answers_split_cleanly() {
    let data = data();
    let model = rigged_model(&data);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for item in data.val.iter().take(3) {
        let image = data.image(item);
        let scene = data.scene(item);
        let yes = posterior_probe(&model, &image, Some(scene), Answer::Yes, 2000, 5, &mut rng).unwrap();
        let no = posterior_probe(&model, &image, Some(scene), Answer::No, 2000, 5, &mut rng).unwrap();
        for r in [&yes, &no] {
            assert!(r.acceptance_rate() > 0.0);
            assert_eq!(r.coherence, Some(1.0));
            assert!(r.accepted.windows(2).all(|w| w[0].log_prior >= w[1].log_prior));
            for e in &r.accepted {
                assert_eq!(e.nmn_answer, r.target);
                assert_eq!(e.oracle_answer, Some(r.target));
            }
            assert!(r.accepted.iter().take(5).all(|e| e.question.is_some()));
            assert!(r.accepted.iter().skip(5).all(|e| e.question.is_none()));
            let hits: usize = r.accepted.iter().map(|e| e.hits).sum();
            assert_eq!(hits, r.accepted_draws);
            assert!(r.accepted_draws + r.invalid_draws <= r.draws);
        }
        let a: HashSet<&Program> = yes.accepted.iter().map(|e| &e.program).collect();
        assert!(no.accepted.iter().all(|e| !a.contains(&e.program)));
    }
}

#[test]
fn probe_without_scene_has_no_coherence() {
    let data = data();
    let model = rigged_model(&data);
    let image = data.image(&data.val[0]);
    let r = posterior_probe(&model, &image, None, Answer::Yes, 200, 3, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(r.coherence.is_none());
    assert!(r.accepted.iter().all(|e| e.oracle_answer.is_none()));
}

struct Gold<'a>(&'a DatasetSplit);

impl ProgramParser for Gold<'_> {
    fn parse(&self, questions: &[&[usize]]) -> probnmn::Result<Vec<Vec<usize>>> {
        Ok(questions
            .iter()
            .map(|q| {
                let it = self.0.val.iter().find(|i| i.question == *q).unwrap();
                it.program.tokens().to_vec()
            })
            .collect())
    }
}

/// Returns an invalid program for every question.
struct Broken;

impl ProgramParser for Broken {
    fn parse(&self, questions: &[&[usize]]) -> probnmn::Result<Vec<Vec<usize>>> {
        Ok(questions.iter().map(|_| vec![0]).collect())
    }
}

struct Echo<'a>(&'a DatasetSplit);

impl QuestionReconstructor for Echo<'_> {
    fn reconstruct(&self, programs: &[&[usize]]) -> probnmn::Result<Vec<Vec<usize>>> {
        Ok(programs
            .iter()
            .map(|z| {
                let it = self.0.val.iter().find(|i| i.program.tokens() == *z).unwrap();
                it.question.clone()
            })
            .collect())
    }
}

/// Executes programs symbolically on the scene whose rendering matches.
struct Symbolic<'a>(&'a DatasetSplit);

impl VisualAnswerer for Symbolic<'_> {
    fn answer_probs(&self, program: &Program, image: &Image) -> probnmn::Result<Option<[f64; 2]>> {
        if !probnmn::grammar::is_valid(program, &self.0.program_vocab) {
            return Ok(None);
        }
        let item = self.0.val.iter().find(|i| self.0.image(i) == *image).unwrap();
        let a = symbolic_execute(program, self.0.scene(item), &self.0.program_vocab)?.answer;
        let mut p = [0.0; 2];
        p[a.index()] = 1.0;
        Ok(Some(p))
    }
}

#[test]
fn metrics_match_hand_counts() {
    let data = data();
    let m = compute_metrics(&Gold(&data), &Echo(&data), &Symbolic(&data), &data, &data.val).unwrap();
    assert_eq!(m.items, data.val.len());
    assert_eq!(m.invalid_programs, 0);
    assert_eq!(m.program_accuracy, 1.0);
    assert_eq!(m.vqa_accuracy, 1.0);
    assert_eq!(m.program_token_f1, 1.0);

    let b = compute_metrics(&Broken, &Echo(&data), &Symbolic(&data), &data, &data.val).unwrap();
    assert_eq!(b.invalid_programs, data.val.len());
    assert_eq!(b.program_accuracy, 0.0);
    // uniform answers break ties towards yes
    let yes = data.val.iter().filter(|i| i.answer == Answer::Yes).count();
    assert_eq!(b.vqa_accuracy, yes as f64 / data.val.len() as f64);
}

#[test]
fn evaluation_is_deterministic() {
    let data = data();
    let model = rigged_model(&data);
    let a = evaluate(&model, &data, &data.val).unwrap();
    let b = evaluate(&model.clone(), &data, &data.val).unwrap();
    assert_eq!(a, b);
}

#[test]
fn predicted_answer_mixes_sampled_programs() {
    let data = data();
    let model = rigged_model(&data);
    let item = &data.val[1];
    let image = data.image(item);
    let p = predict_answer(&model, &image, &item.question, 7, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert!((p.probs[0] + p.probs[1] - 1.0).abs() < 1e-12);
    assert!(p.invalid_samples <= 7);
    assert_eq!(p.answer.index(), if p.probs[1] > p.probs[0] { 1 } else { 0 });
    // the rigged network answers gold programs like the oracle
    let tr = execute_program(&model.params, &model.nmn, &model.program_vocab, &item.program, &image).unwrap();
    assert_eq!(tr.answer(), item.answer);
}
