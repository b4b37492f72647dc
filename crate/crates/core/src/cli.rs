//! Command-line front end. [`run_cli`] maps argv to an exit code: 0 on
//! success, 1 on usage errors, 2 on runtime failures.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::load_config;
use crate::error::{Error, Result};
use crate::gradsuite::model_gradchecks;
use crate::grammar::{is_valid, Program};
use crate::model::{ProbNmn, Stage};
use crate::nmn::{execute_program, rig_oracle_weights};
use crate::persist::{load_checkpoint, read_dataset, save_checkpoint, write_dataset, Checkpoint};
use crate::pipeline::{run_pipeline, PipelineConfig, PriorMode};
use crate::prior::{pretrain_prior, PriorSource};
use crate::probe::{evaluate, posterior_probe};
use crate::train::{
    run_joint_training, run_module_training, run_question_coding, stage_rng, MetricsLog,
};
use crate::world::dataset::{generate_dataset, DatasetSplit, Split};
use crate::world::oracle::Answer;

#[derive(Debug, Parser)]
#[command(name = "probnmn", version, about = "Probabilistic neural module networks on a synthetic shapes world")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: CommonArgs,
}

/// Flags shared by every subcommand. Set flags override the config file,
/// which overrides built-in defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// TOML experiment config
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    /// Input checkpoint
    #[arg(long, global = true)]
    pub ckpt: Option<PathBuf>,
    /// Output file or directory
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub supervision_fraction: Option<f64>,
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    #[arg(long, global = true)]
    pub beta: Option<f64>,
    #[arg(long, global = true)]
    pub gamma: Option<f64>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    #[arg(long, global = true)]
    pub samples: Option<usize>,
    #[arg(long, global = true)]
    pub allow_cold_start: bool,
    #[arg(long, global = true)]
    pub length_normalize: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AnswerArg {
    Yes,
    No,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a dataset into --out (or --data-dir)
    GenerateData,
    /// Pretrain and freeze the program prior; writes a checkpoint to --out
    PretrainPrior,
    /// Train the inference network and reconstructor from --ckpt
    QuestionCoding,
    /// Train the module network from --ckpt
    ModuleTraining,
    /// Train everything jointly from --ckpt
    JointTraining,
    /// Run every remaining stage; checkpoints and logs go to --out
    RunPipeline,
    /// Greedy-decoding metrics of --ckpt on a split
    Evaluate {
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
    },
    /// Sample prior programs that yield --answer on one item's image
    Probe {
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
        /// Index of the item within the split
        #[arg(long, default_value_t = 0)]
        item: usize,
        #[arg(long, value_enum)]
        answer: AnswerArg,
        #[arg(long, default_value_t = 2000)]
        draws: usize,
        #[arg(long, default_value_t = 10)]
        top_k: usize,
        /// Use hand-set oracle module weights instead of the checkpoint's
        #[arg(long)]
        rigged: bool,
    },
    /// Finite-difference checks of every primitive and model
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        points: usize,
    },
}

/// Built-in defaults, then the config file, then flags.
pub fn resolve_config(args: &CommonArgs) -> Result<PipelineConfig> {
    let mut c = match &args.config {
        Some(p) => load_config(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = args.seed {
        c.seed = s;
        c.data.seed = s;
    }
    if let Some(f) = args.supervision_fraction {
        c.data.supervision_fraction = f;
    }
    let hp = &mut c.hyperparams;
    if let Some(v) = args.alpha {
        hp.alpha = v;
    }
    if let Some(v) = args.beta {
        hp.beta = v;
    }
    if let Some(v) = args.gamma {
        hp.gamma = v;
        c.gamma_sweep.clear();
    }
    if let Some(v) = args.batch_size {
        hp.batch_size = v;
    }
    if let Some(v) = args.samples {
        hp.samples = v;
    }
    if args.length_normalize {
        hp.length_normalize = true;
    }
    if args.allow_cold_start {
        c.allow_cold_start = true;
    }
    Ok(c)
}

/// Parses `argv` (program name first) and runs the command.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(true) => 0,
        Ok(false) => 2,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            2
        }
    }
}

fn need<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Config(format!("this command needs --{flag}")))
}

fn load_data(args: &CommonArgs) -> Result<DatasetSplit> {
    read_dataset(need(&args.data_dir, "data-dir")?)
}

fn load_model(args: &CommonArgs, data: &DatasetSplit) -> Result<ProbNmn> {
    let ckpt = load_checkpoint(need(&args.ckpt, "ckpt")?)?;
    ckpt.into_model(Some((&data.program_vocab, &data.question_vocab)))
}

fn metrics_log_for(out: &Path) -> MetricsLog {
    let dir = out.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    MetricsLog::to_file(dir.join("metrics.jsonl"))
}

fn print_json<T: Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("report serializes"));
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in rows {
        let line = serde_json::to_string(r).expect("record serializes");
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalRecord {
    id: usize,
    question: String,
    gold_program: String,
    predicted_program: String,
    valid: bool,
    answer_probs: Option<[f64; 2]>,
    predicted: Answer,
    answer: Answer,
}

/// Runs a parsed command; `Ok(false)` reports a failed check.
pub fn execute(cli: &Cli) -> Result<bool> {
    let args = &cli.common;
    let config = resolve_config(args)?;
    let seed = config.seed;
    let hp = &config.hyperparams;
    match &cli.command {
        Command::GenerateData => {
            let out = args
                .out
                .as_deref()
                .or(args.data_dir.as_deref())
                .ok_or_else(|| Error::Config("generate-data needs --out or --data-dir".into()))?;
            let data = generate_dataset(&config.data).map_err(Error::Config)?;
            write_dataset(out, &data)?;
            println!(
                "wrote {} train ({} teaching), {} val, {} test items to {}",
                data.train.len(),
                data.teaching().count(),
                data.val.len(),
                data.test.len(),
                out.display()
            );
        }
        Command::PretrainPrior => {
            let out = need(&args.out, "out")?;
            let data = load_data(args)?;
            let mut model = ProbNmn::new(
                data.program_vocab.clone(),
                data.question_vocab.clone(),
                config.dims,
                &mut stage_rng(seed, Stage::Initialized),
            );
            let corpus: Vec<Program> = data.teaching().map(|i| i.program.clone()).collect();
            let source = match config.prior_mode {
                PriorMode::Syntactic => PriorSource::Syntactic,
                PriorMode::Empirical => PriorSource::Empirical(&corpus),
            };
            let prior = model.prior.clone();
            let r = pretrain_prior(
                &mut model.params,
                &prior,
                &model.program_vocab,
                source,
                &config.prior,
                &mut stage_rng(seed, Stage::PriorPretrained),
            )?;
            model.stage = Stage::PriorPretrained;
            save_checkpoint(out, &Checkpoint::from_model(&model, hp, seed))?;
            print_json(&r);
        }
        Command::QuestionCoding | Command::ModuleTraining | Command::JointTraining => {
            let out = need(&args.out, "out")?;
            let data = load_data(args)?;
            let mut model = load_model(args, &data)?;
            let mut log = metrics_log_for(out);
            let report = match cli.command {
                Command::QuestionCoding => {
                    run_question_coding(&mut model, &data, hp, &config.question_coding, seed, &mut log)?
                }
                Command::ModuleTraining => {
                    run_module_training(&mut model, &data, hp, &config.module_training, seed, &mut log)?
                }
                _ => run_joint_training(
                    &mut model,
                    &data,
                    hp,
                    &config.joint_training,
                    seed,
                    config.allow_cold_start,
                    &mut log,
                )?,
            };
            save_checkpoint(out, &Checkpoint::from_model(&model, hp, seed))?;
            print_json(&report);
        }
        Command::RunPipeline => {
            let out = need(&args.out, "out")?;
            fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
            let data = match &args.data_dir {
                Some(d) => read_dataset(d)?,
                None => {
                    let data = generate_dataset(&config.data).map_err(Error::Config)?;
                    write_dataset(&out.join("data"), &data)?;
                    data
                }
            };
            let start = match &args.ckpt {
                Some(_) => Some(load_model(args, &data)?),
                None => None,
            };
            let cfg_path = out.join("config.toml");
            fs::write(&cfg_path, crate::config::render_config(&config)).map_err(|e| Error::io(&cfg_path, e))?;
            let mut log = MetricsLog::to_file(out.join("metrics.jsonl"));
            let (_, report) = run_pipeline(&config, &data, start, Some(out), &mut log)?;
            let path = out.join("report.json");
            let text = serde_json::to_string_pretty(&report).expect("report serializes");
            fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
            print_json(&report.final_val);
        }
        Command::Evaluate { split } => {
            let data = load_data(args)?;
            let model = load_model(args, &data)?;
            let items = data.items((*split).into());
            let metrics = evaluate(&model, &data, items)?;
            if let Some(out) = &args.out {
                let qs: Vec<&[usize]> = items.iter().map(|i| i.question.as_slice()).collect();
                let parsed = crate::probe::ProgramParser::parse(&model, &qs)?;
                let mut rows = Vec::with_capacity(items.len());
                for (item, z) in items.iter().zip(parsed) {
                    let z = Program::new(z);
                    let valid = is_valid(&z, &model.program_vocab);
                    let probs = crate::probe::VisualAnswerer::answer_probs(&model, &z, &data.image(item))?;
                    let p = probs.unwrap_or([0.5, 0.5]);
                    rows.push(EvalRecord {
                        id: item.id,
                        question: data.question_vocab.render(&item.question),
                        gold_program: data.program_vocab.render(&item.program),
                        predicted_program: data.program_vocab.render(&z),
                        valid,
                        answer_probs: probs,
                        predicted: Answer::from_index(crate::seq::argmax_lowest(&p)),
                        answer: item.answer,
                    });
                }
                write_jsonl(out, &rows)?;
            }
            print_json(&metrics);
        }
        Command::Probe {
            split,
            item,
            answer,
            draws,
            top_k,
            rigged,
        } => {
            let data = load_data(args)?;
            let mut model = match &args.ckpt {
                Some(_) => load_model(args, &data)?,
                None if *rigged => ProbNmn::new(
                    data.program_vocab.clone(),
                    data.question_vocab.clone(),
                    config.dims,
                    &mut stage_rng(seed, Stage::Initialized),
                ),
                None => return Err(Error::Config("probe needs --ckpt (or --rigged)".into())),
            };
            if *rigged {
                let nmn = model.nmn.clone();
                rig_oracle_weights(&mut model.params, &nmn, &model.program_vocab)?;
            }
            let items = data.items((*split).into());
            let it = items.get(*item).ok_or_else(|| {
                Error::Config(format!("item {item} out of range ({} items)", items.len()))
            })?;
            let target = match answer {
                AnswerArg::Yes => Answer::Yes,
                AnswerArg::No => Answer::No,
            };
            let image = data.image(it);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = posterior_probe(&model, &image, Some(data.scene(it)), target, *draws, *top_k, &mut rng)?;
            if let Some(out) = &args.out {
                write_jsonl(out, &r.accepted)?;
            }
            let gold = execute_program(&model.params, &model.nmn, &model.program_vocab, &it.program, &image)?;
            println!("question: {}", data.question_vocab.render(&it.question));
            println!(
                "gold program: {} (answer {:?}, module network says {:?})",
                data.program_vocab.render(&it.program),
                it.answer,
                gold.answer()
            );
            println!(
                "target {:?}: {} of {} draws accepted ({} invalid), {} unique programs",
                target,
                r.accepted_draws,
                r.draws,
                r.invalid_draws,
                r.accepted.len()
            );
            match r.coherence {
                Some(c) => println!("coherence with the symbolic oracle: {:.1}%", 100.0 * c),
                None => println!("coherence: no accepted programs"),
            }
            for e in r.accepted.iter().take(*top_k) {
                println!(
                    "  {:8.3}  {:<60} oracle {:?}  x: {}",
                    e.log_prior,
                    data.program_vocab.render(&e.program),
                    e.oracle_answer.unwrap_or(target),
                    e.question
                        .as_ref()
                        .map(|q| data.question_vocab.render(q))
                        .unwrap_or_default()
                );
            }
        }
        Command::Gradcheck { points } => {
            let mut ok = true;
            for e in autodiff::suite::run_primitive_suite(*points, seed, 1e-5, 1e-4)? {
                ok &= e.passed();
                println!(
                    "{} {:<14} worst rel err {:.2e} over {} points",
                    if e.passed() { "PASS" } else { "FAIL" },
                    e.name,
                    e.worst.max_rel_err,
                    e.points
                );
            }
            for m in model_gradchecks(seed, 1e-5, 1e-4, 400)? {
                ok &= m.report.passed();
                println!(
                    "{} {:<14} worst rel err {:.2e} over {} coordinates",
                    if m.report.passed() { "PASS" } else { "FAIL" },
                    m.name,
                    m.report.max_rel_err,
                    m.report.checked
                );
            }
            return Ok(ok);
        }
    }
    Ok(true)
}
