//! The full set of learned components sharing one parameter store.

use autodiff::{ParamId, ParamSet};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::grammar::{ProgramVocab, MAX_PROGRAM_LEN};
use crate::nmn::Nmn;
use crate::seq::{Dims, Init, LmParams, Seq2SeqParams};
use crate::world::templates::{QuestionVocab, MAX_QUESTION_LEN};

pub const PRIOR_PREFIX: &str = "prior.";
pub const INFERENCE_PREFIX: &str = "qphi.";
pub const RECONSTRUCTOR_PREFIX: &str = "psigma.";

/// Uniform init range for the sequence models.
pub const SEQ_INIT: f64 = 0.08;

/// How far training has progressed; stored in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Initialized,
    PriorPretrained,
    QuestionCoding,
    ModuleTraining,
    JointTraining,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Initialized => "initialized",
            Stage::PriorPretrained => "prior-pretrained",
            Stage::QuestionCoding => "question-coding",
            Stage::ModuleTraining => "module-training",
            Stage::JointTraining => "joint-training",
        }
    }

    pub fn parse(s: &str) -> Option<Stage> {
        [
            Stage::Initialized,
            Stage::PriorPretrained,
            Stage::QuestionCoding,
            Stage::ModuleTraining,
            Stage::JointTraining,
        ]
        .into_iter()
        .find(|st| st.name() == s)
    }
}

/// Program prior `p(z)`, inference network `q(z|x)`, question
/// reconstructor `p(x|z)` and the module network, over one [`ParamSet`].
#[derive(Debug, Clone)]
pub struct ProbNmn {
    pub params: ParamSet,
    pub program_vocab: ProgramVocab,
    pub question_vocab: QuestionVocab,
    pub dims: Dims,
    pub prior: LmParams,
    pub inference: Seq2SeqParams,
    pub reconstructor: Seq2SeqParams,
    pub nmn: Nmn,
    pub stage: Stage,
}

impl ProbNmn {
    pub fn new<R: Rng + ?Sized>(
        program_vocab: ProgramVocab,
        question_vocab: QuestionVocab,
        dims: Dims,
        rng: &mut R,
    ) -> Self {
        let mut params = ParamSet::new();
        let init = Init::Uniform(SEQ_INIT);
        let (nz, nx) = (program_vocab.len(), question_vocab.len());
        let prior = LmParams::new(&mut params, PRIOR_PREFIX, nz, MAX_PROGRAM_LEN, dims, init, rng);
        let inference = Seq2SeqParams::new(
            &mut params,
            INFERENCE_PREFIX,
            nx,
            MAX_QUESTION_LEN,
            nz,
            MAX_PROGRAM_LEN,
            dims,
            init,
            rng,
        );
        let reconstructor = Seq2SeqParams::new(
            &mut params,
            RECONSTRUCTOR_PREFIX,
            nz,
            MAX_PROGRAM_LEN,
            nx,
            MAX_QUESTION_LEN,
            dims,
            init,
            rng,
        );
        let nmn = Nmn::new(&mut params, &program_vocab, rng);
        ProbNmn {
            params,
            program_vocab,
            question_vocab,
            dims,
            prior,
            inference,
            reconstructor,
            nmn,
            stage: Stage::Initialized,
        }
    }

    pub fn shapes<R: Rng + ?Sized>(dims: Dims, rng: &mut R) -> Self {
        Self::new(ProgramVocab::shapes(), QuestionVocab::shapes(), dims, rng)
    }

    /// Rebuilds component handles over an existing parameter store.
    pub fn attach(
        params: ParamSet,
        program_vocab: ProgramVocab,
        question_vocab: QuestionVocab,
        dims: Dims,
        stage: Stage,
    ) -> Result<Self> {
        let (nz, nx) = (program_vocab.len(), question_vocab.len());
        let prior = LmParams::attach(&params, PRIOR_PREFIX, nz, MAX_PROGRAM_LEN, dims)?;
        let inference = Seq2SeqParams::attach(
            &params,
            INFERENCE_PREFIX,
            nx,
            MAX_QUESTION_LEN,
            nz,
            MAX_PROGRAM_LEN,
            dims,
        )?;
        let reconstructor = Seq2SeqParams::attach(
            &params,
            RECONSTRUCTOR_PREFIX,
            nz,
            MAX_PROGRAM_LEN,
            nx,
            MAX_QUESTION_LEN,
            dims,
        )?;
        let nmn = Nmn::attach(&params, &program_vocab)?;
        Ok(ProbNmn {
            params,
            program_vocab,
            question_vocab,
            dims,
            prior,
            inference,
            reconstructor,
            nmn,
            stage,
        })
    }

    pub fn prior_ids(&self) -> Vec<ParamId> {
        self.prior.param_ids()
    }

    /// Inference network parameters.
    pub fn phi_ids(&self) -> Vec<ParamId> {
        self.inference.param_ids()
    }

    /// Reconstructor parameters.
    pub fn sigma_ids(&self) -> Vec<ParamId> {
        self.reconstructor.param_ids()
    }

    /// Module network parameters, stem included.
    pub fn theta_ids(&self) -> Vec<ParamId> {
        self.nmn.param_ids()
    }

    /// Draws fresh module-network weights in place.
    pub fn reinit_nmn<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let mut scratch = ParamSet::new();
        let fresh = Nmn::new(&mut scratch, &self.program_vocab, rng);
        for (old, new) in self.nmn.param_ids().into_iter().zip(fresh.param_ids()) {
            let v = scratch.value(new).clone();
            self.params
                .set_value(old, v)
                .expect("identical module layout");
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn attach_round_trips_handles() {
        let m = ProbNmn::shapes(Dims { embed: 4, hidden: 6 }, &mut ChaCha8Rng::seed_from_u64(0));
        let again = ProbNmn::attach(
            m.params.clone(),
            m.program_vocab.clone(),
            m.question_vocab.clone(),
            m.dims,
            m.stage,
        )
        .unwrap();
        assert_eq!(again.inference, m.inference);
        assert_eq!(again.nmn, m.nmn);
    }

    #[test]
    fn stage_names_parse() {
        for s in ["initialized", "question-coding", "joint-training"] {
            assert_eq!(Stage::parse(s).unwrap().name(), s);
        }
    }
}
