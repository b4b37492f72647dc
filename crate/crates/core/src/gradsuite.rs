//! Finite-difference checks of every model's teacher-forced loss.

use autodiff::{check_params, AdError, GradCheckReport, ParamId, ParamSet, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grammar::ProgramVocab;
use crate::model::ProbNmn;
use crate::nmn::answer_log_prob;
use crate::seq::{lm_log_prob_batch, seq2seq_log_prob_batch, Dims};
use crate::world::oracle::Answer;
use crate::world::render::render_scene;
use crate::world::scene::sample_scene;
use crate::world::templates::QuestionVocab;

#[derive(Debug, Clone)]
pub struct ModelCheck {
    pub name: &'static str,
    pub report: GradCheckReport,
}

fn ad(e: Error) -> AdError {
    match e {
        Error::Autodiff(a) => a,
        other => AdError::InvalidAttr {
            op: "model",
            detail: other.to_string(),
        },
    }
}

fn check<F>(ps: &mut ParamSet, ids: &[ParamId], h: f64, rtol: f64, coords: usize, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamSet) -> Result<Var>,
{
    Ok(check_params(
        ps,
        ids,
        |t, p| {
            let v = f(t, p).map_err(ad)?;
            t.sum_all(v)
        },
        h,
        rtol,
        coords,
    )?)
}

/// Checks the prior, inference network, reconstructor and module network
/// on a small model. `coords` bounds the perturbed entries per model.
pub fn model_gradchecks(seed: u64, h: f64, rtol: f64, coords: usize) -> Result<Vec<ModelCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pv = ProgramVocab::shapes();
    let qv = QuestionVocab::shapes();
    let model = ProbNmn::new(pv.clone(), qv.clone(), Dims { embed: 4, hidden: 5 }, &mut rng);
    let mut ps = model.params.clone();
    let programs = [
        pv.parse_names(&["answer", "find[red]"])?,
        pv.parse_names(&["answer", "and", "transform[left]", "find[circle]", "find[blue]"])?,
    ];
    let zs: Vec<&[usize]> = programs.iter().map(|p| p.tokens()).collect();
    let q1 = qv.encode(&["is", "a", "red", "thing", "present"]);
    let q2 = qv.encode(&["is", "there", "a", "blue", "circle", "left", "of", "a", "circle"]);
    let (q1, q2) = q1.zip(q2).ok_or_else(|| Error::Config("question outside vocabulary".into()))?;
    let xs: Vec<&[usize]> = vec![&q1, &q2];

    let mut out = Vec::new();
    let ids = model.prior_ids();
    out.push(ModelCheck {
        name: "prior",
        report: check(&mut ps, &ids, h, rtol, coords, |t, p| {
            lm_log_prob_batch(t, p, &model.prior, &zs, false)
        })?,
    });
    let ids = model.phi_ids();
    out.push(ModelCheck {
        name: "inference",
        report: check(&mut ps, &ids, h, rtol, coords, |t, p| {
            seq2seq_log_prob_batch(t, p, &model.inference, &xs, &zs, false)
        })?,
    });
    let ids = model.sigma_ids();
    out.push(ModelCheck {
        name: "reconstructor",
        report: check(&mut ps, &ids, h, rtol, coords, |t, p| {
            seq2seq_log_prob_batch(t, p, &model.reconstructor, &zs, &xs, true)
        })?,
    });

    // dense random module weights: no exact-zero pre-activations on black
    // pixels and a live answer head on every path
    for id in model.theta_ids() {
        for x in ps.value_mut(id).data_mut() {
            *x = rng.gen_range(-0.5..0.5);
        }
    }
    let scene = sample_scene(&mut rng, 0.5);
    let image = render_scene(&scene);
    let ids = model.theta_ids();
    out.push(ModelCheck {
        name: "module network",
        report: check(&mut ps, &ids, h, rtol, coords, |t, p| {
            answer_log_prob(t, p, &model.nmn, &pv, &programs[1], &image, Answer::Yes)
        })?,
    });
    Ok(out)
}
