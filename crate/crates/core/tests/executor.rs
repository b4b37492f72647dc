use autodiff::{check_params, ParamSet, Tape};
use probnmn::grammar::{parse_to_tree, serialize_tree, ProgramVocab};
use probnmn::nmn::{answer_log_prob, execute_program, rig_oracle_weights, Nmn};
use probnmn::world::{generate_dataset, render_scene, Answer, DatasetConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_data() -> probnmn::world::DatasetSplit {
    generate_dataset(&DatasetConfig {
        train: 1000,
        val: 10,
        test: 10,
        supervision_fraction: 0.1,
        seed: 9,
        density: 0.5,
    })
    .unwrap()
}

#[test]
fn rigged_network_matches_symbolic_oracle() {
    let data = small_data();
    let vocab = ProgramVocab::shapes();
    let mut ps = ParamSet::new();
    let nmn = Nmn::new(&mut ps, &vocab, &mut ChaCha8Rng::seed_from_u64(0));
    rig_oracle_weights(&mut ps, &nmn, &vocab).unwrap();
    for item in &data.train {
        let tr = execute_program(&ps, &nmn, &vocab, &item.program, &data.image(item)).unwrap();
        assert_eq!(tr.answer(), item.answer, "{}", vocab.render(&item.program));
        let exp_sum: f64 = tr.log_probs.iter().map(|v| v.exp()).sum();
        assert!((exp_sum - 1.0).abs() < 1e-10);
    }
}

#[test]
fn parse_serialize_round_trip_gives_identical_output() {
    let data = small_data();
    let vocab = ProgramVocab::shapes();
    let mut ps = ParamSet::new();
    let nmn = Nmn::new(&mut ps, &vocab, &mut ChaCha8Rng::seed_from_u64(2));
    for item in data.train.iter().take(50) {
        let again = serialize_tree(&parse_to_tree(&item.program, &vocab).unwrap(), &vocab).unwrap();
        let img = data.image(item);
        let a = execute_program(&ps, &nmn, &vocab, &item.program, &img).unwrap();
        let b = execute_program(&ps, &nmn, &vocab, &again, &img).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn subtree_results_compose() {
    // answer{and{A,B}}: the and node's inputs are exactly the outputs of A and B
    let vocab = ProgramVocab::shapes();
    let data = small_data();
    let mut ps = ParamSet::new();
    let nmn = Nmn::new(&mut ps, &vocab, &mut ChaCha8Rng::seed_from_u64(3));
    let p = vocab
        .parse_names(&["answer", "and", "transform[above]", "find[red]", "find[circle]"])
        .unwrap();
    let a = vocab.parse_names(&["answer", "transform[above]", "find[red]"]).unwrap();
    let b = vocab.parse_names(&["answer", "find[circle]"]).unwrap();
    let img = data.image(&data.train[0]);
    let full = execute_program(&ps, &nmn, &vocab, &p, &img).unwrap();
    let ta = execute_program(&ps, &nmn, &vocab, &a, &img).unwrap();
    let tb = execute_program(&ps, &nmn, &vocab, &b, &img).unwrap();
    assert_eq!(full.nodes[1].inputs[0], ta.nodes[1].output.unwrap());
    assert_eq!(full.nodes[1].inputs[1], tb.nodes[1].output.unwrap());
    let and_out = full.nodes[1].output.unwrap();
    for i in 0..9 {
        assert_eq!(and_out[i], full.nodes[1].inputs[0][i].min(full.nodes[1].inputs[1][i]));
    }
}

#[test]
fn gradients_touch_only_used_modules() {
    let vocab = ProgramVocab::shapes();
    let data = small_data();
    let mut ps = ParamSet::new();
    let nmn = Nmn::new(&mut ps, &vocab, &mut ChaCha8Rng::seed_from_u64(4));
    let ids = nmn.param_ids();
    ps.zero_grads_of(&ids);
    let p = vocab.parse_names(&["answer", "transform[left]", "find[green]"]).unwrap();
    let item = &data.train[1];
    let mut tape = Tape::new();
    let lp = answer_log_prob(&mut tape, &ps, &nmn, &vocab, &p, &data.image(item), Answer::Yes).unwrap();
    let loss = tape.sum_all(lp).unwrap();
    tape.backward(loss, &mut ps).unwrap();
    let used: Vec<usize> = p.tokens().to_vec();
    for t in 0..vocab.len() {
        for id in nmn.token_ids(t) {
            let g = ps.grad(id).unwrap();
            let nonzero = g.data().iter().any(|&v| v != 0.0);
            if !used.contains(&t) {
                assert!(!nonzero, "{} received gradient", ps.name(id));
            }
        }
    }
}

#[test]
fn executor_gradients_match_finite_differences() {
    let vocab = ProgramVocab::shapes();
    let data = small_data();
    let mut ps = ParamSet::new();
    let nmn = Nmn::new(&mut ps, &vocab, &mut ChaCha8Rng::seed_from_u64(5));
    // give the answer head non-zero weights so every path carries signal
    let head = nmn.token_ids(vocab.id("answer").unwrap());
    for &id in &head {
        let v = ps.value_mut(id);
        for (i, x) in v.data_mut().iter_mut().enumerate() {
            *x = ((i * 7919) % 13) as f64 / 13.0 - 0.5;
        }
    }
    let p = vocab
        .parse_names(&["answer", "and", "transform[below]", "find[blue]", "find[square]"])
        .unwrap();
    let img = render_scene(data.scene(&data.train[2]));
    let ids = nmn.param_ids();
    let report = check_params(
        &mut ps,
        &ids,
        |tape: &mut Tape, ps: &ParamSet| {
            let lp = answer_log_prob(tape, ps, &nmn, &vocab, &p, &img, Answer::No)
                .map_err(|e| match e {
                    probnmn::Error::Autodiff(a) => a,
                    other => panic!("{other}"),
                })?;
            tape.sum_all(lp)
        },
        1e-5,
        1e-4,
        400,
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}
