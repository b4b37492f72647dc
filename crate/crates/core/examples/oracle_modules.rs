//! Sets the module network to hand-derived oracle weights and compares its
//! answers on gold programs with the symbolic executor.

use probnmn::model::ProbNmn;
use probnmn::nmn::{execute_program, rig_oracle_weights};
use probnmn::seq::Dims;
use probnmn::world::{generate_dataset, symbolic_execute, Answer, DatasetConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let data = generate_dataset(&DatasetConfig {
        train: 10,
        val: 300,
        test: 10,
        supervision_fraction: 0.5,
        seed: 1,
        density: 0.5,
    })
    .unwrap();
    let mut model = ProbNmn::new(
        data.program_vocab.clone(),
        data.question_vocab.clone(),
        Dims::default(),
        &mut ChaCha8Rng::seed_from_u64(0),
    );
    let nmn = model.nmn.clone();
    rig_oracle_weights(&mut model.params, &nmn, &model.program_vocab).unwrap();

    let mut agree = 0;
    for item in &data.val {
        let trace = execute_program(&model.params, &model.nmn, &model.program_vocab, &item.program, &data.image(item)).unwrap();
        let oracle = symbolic_execute(&item.program, data.scene(item), &data.program_vocab).unwrap();
        if trace.answer() == oracle.answer {
            agree += 1;
        }
    }
    println!("rigged network agrees with the oracle on {agree} of {} gold programs", data.val.len());

    let item = data.val.iter().find(|i| i.program.len() >= 4).unwrap();
    let trace = execute_program(&model.params, &model.nmn, &model.program_vocab, &item.program, &data.image(item)).unwrap();
    println!("{}", data.program_vocab.render(&item.program));
    println!("  attention per module, cells in row-major order");
    for node in &trace.nodes {
        if let Some(att) = node.output {
            let cells: Vec<String> = att.iter().map(|a| format!("{a:.2}")).collect();
            println!("  {:<18} {}", data.program_vocab.name(node.token), cells.join(" "));
        }
    }
    let p = |a: Answer| trace.log_probs[a.index()].exp();
    println!("  p(yes) {:.3}  p(no) {:.3}  gold {}", p(Answer::Yes), p(Answer::No), item.answer.name());
}
