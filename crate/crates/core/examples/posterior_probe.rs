//! Probes which prior programs make the module network answer yes or no on
//! one image, first with oracle module weights and then with a briefly
//! trained network.

use probnmn::config::parse_config;
use probnmn::nmn::rig_oracle_weights;
use probnmn::pipeline::run_pipeline;
use probnmn::probe::{posterior_probe, ProbeResult};
use probnmn::train::MetricsLog;
use probnmn::world::{generate_dataset, Answer, DatasetSplit};
use probnmn::model::ProbNmn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn show(label: &str, model: &ProbNmn, data: &DatasetSplit, r: &ProbeResult) {
    println!(
        "{label} {}: acceptance {:.3}, coherence {:?}, {} unique programs",
        r.target.name(),
        r.acceptance_rate(),
        r.coherence,
        r.accepted.len()
    );
    for e in r.accepted.iter().take(3) {
        let q = e.question.as_ref().map(|q| data.question_vocab.render(q)).unwrap_or_default();
        println!("    {:>7.3}  {:<45} {q}", e.log_prior, model.program_vocab.render(&e.program));
    }
}

fn main() {
    let config = parse_config(
        "seed = 4\n[data]\ntrain = 1500\nval = 100\ntest = 10\nsupervision_fraction = 1.0\n\
         [prior]\nsteps = 500\n[question_coding]\nepochs = 5\nlr = 1e-2\n\
         [module_training]\nepochs = 10\nlr = 1e-2\n[joint_training]\nepochs = 1\n",
    )
    .unwrap();
    let data = generate_dataset(&config.data).unwrap();
    let (trained, _) = run_pipeline(&config, &data, None, None, &mut MetricsLog::in_memory()).unwrap();
    let mut rigged = trained.clone();
    let nmn = rigged.nmn.clone();
    rig_oracle_weights(&mut rigged.params, &nmn, &rigged.program_vocab).unwrap();

    let item = &data.val[0];
    let (image, scene) = (data.image(item), data.scene(item));
    println!("question: {}", data.question_vocab.render(&item.question));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (label, model) in [("rigged", &rigged), ("trained", &trained)] {
        for target in Answer::ALL {
            let r = posterior_probe(model, &image, Some(scene), target, 2000, 5, &mut rng).unwrap();
            show(label, model, &data, &r);
        }
    }
}
