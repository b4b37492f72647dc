//! End-to-end training: prior pretraining, question coding, module
//! training and joint training, with a checkpoint after every stage.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grammar::Program;
use crate::model::{ProbNmn, Stage};
use crate::persist::{save_checkpoint, Checkpoint};
use crate::prior::{pretrain_prior, PretrainConfig, PretrainReport, PriorSource};
use crate::probe::{evaluate, Metrics};
use crate::seq::Dims;
use crate::train::{
    run_joint_training, run_module_training, run_question_coding, stage_checkpoint_path, stage_rng,
    Hyperparams, MetricsLog, StageOptions, StageReport,
};
use crate::world::dataset::{DatasetConfig, DatasetSplit};

/// Where the prior's training programs come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorMode {
    /// Programs simulated from the grammar.
    #[default]
    Syntactic,
    /// Gold programs of the teaching items, without their questions.
    Empirical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub workers: usize,
    pub data: DatasetConfig,
    pub dims: Dims,
    pub hyperparams: Hyperparams,
    pub prior_mode: PriorMode,
    pub prior: PretrainConfig,
    pub question_coding: StageOptions,
    pub module_training: StageOptions,
    pub joint_training: StageOptions,
    /// Candidate answer scales for joint training; the best on validation
    /// VQA accuracy is kept. Empty means `hyperparams.gamma` alone.
    pub gamma_sweep: Vec<f64>,
    pub skip_module_training: bool,
    pub allow_cold_start: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            workers: 1,
            data: DatasetConfig::default(),
            dims: Dims::default(),
            hyperparams: Hyperparams::default(),
            prior_mode: PriorMode::Syntactic,
            prior: PretrainConfig::default(),
            question_coding: StageOptions::default(),
            module_training: StageOptions::default(),
            joint_training: StageOptions::default(),
            gamma_sweep: Vec::new(),
            skip_module_training: false,
            allow_cold_start: false,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.hyperparams.validate()?;
        self.data.validate().map_err(Error::Config)?;
        if self.workers != 1 {
            return Err(Error::Config(format!(
                "only a single worker is supported, got {}",
                self.workers
            )));
        }
        if self.skip_module_training && !self.allow_cold_start {
            return Err(Error::Config(
                "skipping module training needs allow_cold_start".into(),
            ));
        }
        if let Some(g) = self.gamma_sweep.iter().find(|g| !(**g >= 1.0)) {
            return Err(Error::Config(format!("gamma {g} is below 1")));
        }
        Ok(())
    }

    fn gammas(&self) -> Vec<f64> {
        if self.gamma_sweep.is_empty() {
            vec![self.hyperparams.gamma]
        } else {
            self.gamma_sweep.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub gamma: f64,
    pub report: StageReport,
    pub val: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub prior: Option<PretrainReport>,
    pub question_coding: Option<StageReport>,
    pub module_training: Option<StageReport>,
    pub joint_training: Vec<SweepEntry>,
    pub selected_gamma: Option<f64>,
    /// Validation metrics after each completed stage.
    pub stage_val: Vec<(Stage, Metrics)>,
    pub final_val: Option<Metrics>,
}

/// Fresh model built from the initialization stream of `config.seed`.
pub fn initial_model(config: &PipelineConfig, data: &DatasetSplit) -> ProbNmn {
    ProbNmn::new(
        data.program_vocab.clone(),
        data.question_vocab.clone(),
        config.dims,
        &mut stage_rng(config.seed, Stage::Initialized),
    )
}

/// Pretrains the prior of `model` and marks it `PriorPretrained`; this is
/// the first step of [`run_pipeline`].
pub fn pretrain_stage(
    model: &mut ProbNmn,
    config: &PipelineConfig,
    data: &DatasetSplit,
    log: &mut MetricsLog,
) -> Result<PretrainReport> {
    let corpus: Vec<Program> = data.teaching().map(|i| i.program.clone()).collect();
    let source = match config.prior_mode {
        PriorMode::Syntactic => PriorSource::Syntactic,
        PriorMode::Empirical => PriorSource::Empirical(&corpus),
    };
    let r = pretrain_prior(
        &mut model.params,
        &model.prior,
        &model.program_vocab,
        source,
        &config.prior,
        &mut stage_rng(config.seed, Stage::PriorPretrained),
    )?;
    log::info!("prior: nll {:.4} -> {:.4}", r.nll_before, r.nll_after);
    log.record(Stage::PriorPretrained.name(), r.steps, "nll_before", r.nll_before)?;
    log.record(Stage::PriorPretrained.name(), r.steps, "nll_after", r.nll_after)?;
    model.stage = Stage::PriorPretrained;
    Ok(r)
}

/// Runs every stage not yet reflected in `start` (a fresh model when
/// `None`). Checkpoints go to `out_dir` when given.
pub fn run_pipeline(
    config: &PipelineConfig,
    data: &DatasetSplit,
    start: Option<ProbNmn>,
    out_dir: Option<&Path>,
    log: &mut MetricsLog,
) -> Result<(ProbNmn, PipelineReport)> {
    config.validate()?;
    let seed = config.seed;
    let hp = &config.hyperparams;
    let mut model = match start {
        Some(m) => m,
        None => initial_model(config, data),
    };
    let save = |model: &ProbNmn, stage: Stage, hp: &Hyperparams| -> Result<()> {
        match out_dir {
            Some(dir) => save_checkpoint(
                &stage_checkpoint_path(dir, stage),
                &Checkpoint::from_model(model, hp, seed),
            ),
            None => Ok(()),
        }
    };
    let mut report = PipelineReport {
        prior: None,
        question_coding: None,
        module_training: None,
        joint_training: Vec::new(),
        selected_gamma: None,
        stage_val: Vec::new(),
        final_val: None,
    };

    if model.stage < Stage::PriorPretrained {
        let r = pretrain_stage(&mut model, config, data, log)?;
        save(&model, Stage::PriorPretrained, hp)?;
        report.prior = Some(r);
    }

    if model.stage < Stage::QuestionCoding {
        let r = run_question_coding(&mut model, data, hp, &config.question_coding, seed, log)?;
        save(&model, Stage::QuestionCoding, hp)?;
        report
            .stage_val
            .push((Stage::QuestionCoding, evaluate(&model, data, &data.val)?));
        report.question_coding = Some(r);
    }

    if model.stage < Stage::ModuleTraining && !config.skip_module_training {
        let r = run_module_training(&mut model, data, hp, &config.module_training, seed, log)?;
        save(&model, Stage::ModuleTraining, hp)?;
        report
            .stage_val
            .push((Stage::ModuleTraining, evaluate(&model, data, &data.val)?));
        report.module_training = Some(r);
    }

    if model.stage < Stage::JointTraining {
        let mut best: Option<(f64, ProbNmn, Hyperparams)> = None;
        for gamma in config.gammas() {
            let hp_g = Hyperparams {
                gamma,
                ..hp.clone()
            };
            let mut candidate = model.clone();
            log.record(Stage::JointTraining.name(), 0, "gamma", gamma)?;
            let r = run_joint_training(
                &mut candidate,
                data,
                &hp_g,
                &config.joint_training,
                seed,
                config.allow_cold_start,
                log,
            )?;
            let val = evaluate(&candidate, data, &data.val)?;
            log::info!("joint training gamma {gamma}: val vqa {:.4}", val.vqa_accuracy);
            let better = best.as_ref().is_none_or(|(b, _, _)| val.vqa_accuracy > *b);
            report.joint_training.push(SweepEntry {
                gamma,
                report: r,
                val,
            });
            if better {
                best = Some((val.vqa_accuracy, candidate, hp_g));
            }
        }
        let (_, chosen, hp_g) = best.expect("at least one gamma");
        model = chosen;
        report.selected_gamma = Some(hp_g.gamma);
        save(&model, Stage::JointTraining, &hp_g)?;
        report
            .stage_val
            .push((Stage::JointTraining, evaluate(&model, data, &data.val)?));
    }

    report.final_val = Some(evaluate(&model, data, &data.val)?);
    Ok((model, report))
}
