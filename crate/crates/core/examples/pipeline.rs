//! Runs every training stage on a small world from a TOML config, writes
//! per-stage checkpoints and a metric log, then resumes joint training from
//! the module-training checkpoint and checks it reproduces the first run.

use probnmn::config::parse_config;
use probnmn::model::Stage;
use probnmn::persist::load_checkpoint;
use probnmn::pipeline::run_pipeline;
use probnmn::train::{stage_checkpoint_path, MetricsLog};
use probnmn::world::generate_dataset;

const CONFIG: &str = r#"
seed = 11
gamma_sweep = [1.0, 10.0]
[data]
train = 1500
val = 200
test = 100
supervision_fraction = 0.2
[prior]
steps = 500
[question_coding]
epochs = 6
lr = 1e-2
[module_training]
epochs = 10
lr = 1e-2
[joint_training]
epochs = 2
"#;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let config = parse_config(CONFIG).unwrap();
    let data = generate_dataset(&config.data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut log = MetricsLog::to_file(dir.path().join("metrics.jsonl"));
    let (_, report) = run_pipeline(&config, &data, None, Some(dir.path()), &mut log).unwrap();
    for (stage, m) in &report.stage_val {
        println!(
            "{:<16} program {:.3}  reconstruction {:.3}  vqa {:.3}",
            stage.name(),
            m.program_accuracy,
            m.reconstruction_accuracy,
            m.vqa_accuracy
        );
    }
    println!("selected gamma {:?}", report.selected_gamma);

    let start = load_checkpoint(&stage_checkpoint_path(dir.path(), Stage::ModuleTraining))
        .unwrap()
        .into_model(Some((&data.program_vocab, &data.question_vocab)))
        .unwrap();
    let (_, resumed) = run_pipeline(&config, &data, Some(start), None, &mut MetricsLog::in_memory()).unwrap();
    println!("resumed joint training matches: {}", resumed.final_val == report.final_val);
}
