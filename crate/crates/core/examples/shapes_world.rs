//! Generates a small synthetic world and prints a few questions with their
//! programs, symbolic answers and the scene grid.

use probnmn::world::{generate_dataset, symbolic_execute, DatasetConfig};

fn main() {
    let config = DatasetConfig {
        train: 200,
        val: 20,
        test: 20,
        supervision_fraction: 0.1,
        seed: 7,
        density: 0.5,
    };
    let data = generate_dataset(&config).expect("valid config");
    println!(
        "{} train ({} with programs), {} val, {} test, {} scenes",
        data.train.len(),
        data.teaching().count(),
        data.val.len(),
        data.test.len(),
        data.scenes.len()
    );

    for item in data.val.iter().take(4) {
        let scene = data.scene(item);
        println!();
        for (row, cells) in scene.cells().chunks(3).enumerate() {
            let names: Vec<String> = cells
                .iter()
                .map(|c| match c {
                    Some(o) => format!("{:>16}", format!("{} {}", o.color.name(), o.shape.name())),
                    None => format!("{:>16}", "."),
                })
                .collect();
            println!("  row {row}: {}", names.join(""));
        }
        let result = symbolic_execute(&item.program, scene, &data.program_vocab).unwrap();
        println!("  question: {}", data.question_vocab.render(&item.question));
        println!("  program:  {}", data.program_vocab.render(&item.program));
        println!("  answer:   {} (oracle {})", item.answer.name(), result.answer.name());
    }
}
