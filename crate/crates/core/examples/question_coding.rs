//! Question coding on a small world: trains the inference network and the
//! question reconstructor against a frozen prior, then compares with the
//! baseline that only sees the teaching pairs.

use probnmn::pipeline::{initial_model, pretrain_stage, PipelineConfig};
use probnmn::train::{run_question_coding, run_supervised_only, MetricsLog, StageOptions};
use probnmn::world::generate_dataset;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut config = PipelineConfig::default();
    config.data.train = 2000;
    config.data.val = 200;
    config.data.test = 10;
    config.data.supervision_fraction = 0.2;
    config.prior.steps = 500;
    let opts = StageOptions {
        epochs: 8,
        patience: 3,
        lr: Some(1e-2),
    };
    let data = generate_dataset(&config.data).unwrap();

    let mut prior = initial_model(&config, &data);
    pretrain_stage(&mut prior, &config, &data, &mut MetricsLog::in_memory()).unwrap();

    let mut coded = prior.clone();
    let qc = run_question_coding(&mut coded, &data, &config.hyperparams, &opts, config.seed, &mut MetricsLog::in_memory()).unwrap();
    let mut baseline = prior;
    let sup = run_supervised_only(&mut baseline, &data, &config.hyperparams, &opts, config.seed, &mut MetricsLog::in_memory()).unwrap();

    println!("val program accuracy: question coding {:.3}, teaching pairs only {:.3}", qc.best_metric, sup.best_metric);
    for e in &qc.epochs {
        println!(
            "  epoch {}: reconstruction {:.3}, invalid {}",
            e.epoch, e.val.reconstruction_accuracy, e.val.invalid_programs
        );
    }
}
