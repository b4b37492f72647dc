//! Neural module network: a small CNN stem over the image and one module
//! per program token, assembled along the program tree.
//!
//! Attention maps are `[9, 1]` columns over the 3x3 grid of stem features
//! (`[9, 64]`), so they line up one-to-one with the symbolic oracle's cell
//! masks. The last feature channel is a constant 1, so the answer head
//! sees the total attention mass even on empty (all-black) cells.

use autodiff::{ParamId, ParamSet, Tape, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::grammar::{parse_to_tree, ModuleKind, Program, ProgramTree, ProgramVocab, Token};
use crate::world::oracle::{semantics, Answer, Attribute, Semantics};
use crate::world::render::{glyph, glyph_area, Image, CELL_PX, CHANNELS, IMAGE_PX};
use crate::world::scene::{Color, Shape, CELLS, GRID};

pub const FEATURES: usize = 64;
/// Channels produced by the second convolution; the constant channel
/// completes [`FEATURES`].
pub const LEARNED_FEATURES: usize = FEATURES - 1;
pub const ANSWERS: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct CnnStem {
    pub conv1_w: ParamId,
    pub conv1_b: ParamId,
    pub conv2_w: ParamId,
    pub conv2_b: ParamId,
}

/// Parameters of one token's module. `and` has none.
#[derive(Debug, Clone, PartialEq)]
pub enum Module {
    Find { w: ParamId, b: ParamId },
    Transform { k: ParamId, w: ParamId, b: ParamId },
    And,
    Answer { w: ParamId, b: ParamId },
}

impl Module {
    pub fn param_ids(&self) -> Vec<ParamId> {
        match *self {
            Module::Find { w, b } | Module::Answer { w, b } => vec![w, b],
            Module::Transform { k, w, b } => vec![k, w, b],
            Module::And => vec![],
        }
    }
}

/// One module per token of the program vocabulary, indexed by token id.
#[derive(Debug, Clone, PartialEq)]
pub struct ModuleBank {
    pub modules: Vec<Module>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Nmn {
    pub stem: CnnStem,
    pub bank: ModuleBank,
}

/// Per-node values of one forward execution, in prefix order.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceNode {
    pub token: Token,
    /// Input attention maps (one per child).
    pub inputs: Vec<[f64; CELLS]>,
    /// Output attention; `None` for the answer root.
    pub output: Option<[f64; CELLS]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExecutionTrace {
    pub nodes: Vec<TraceNode>,
    pub log_probs: [f64; ANSWERS],
}

impl ExecutionTrace {
    /// Argmax answer, ties to the lowest answer index.
    pub fn answer(&self) -> Answer {
        Answer::from_index(crate::seq::argmax_lowest(&self.log_probs))
    }
}

/// Initial bias of find and transform modules (sigmoid(-3) is about 0.05).
pub const ATTENTION_BIAS_INIT: f64 = -3.0;

/// Initial answer weights and bias: the yes logit minus the no logit is
/// `2 * mass - 1`, read through the constant feature channel. Without this
/// the head first latches onto object appearance, and programs whose
/// answer depends on attention over empty cells never train.
pub fn answer_head_init() -> (Tensor, Tensor) {
    let yes = Answer::Yes.index();
    let mut w = Tensor::zeros(&[FEATURES, ANSWERS]);
    w.data_mut()[CONST_CH * ANSWERS + yes] = 2.0;
    let mut b = Tensor::zeros(&[ANSWERS]);
    b.data_mut()[yes] = -1.0;
    (w, b)
}

fn module_name(vocab: &ProgramVocab, t: Token) -> String {
    format!("bank.{}", vocab.name(t))
}

fn uniform<R: Rng + ?Sized>(shape: &[usize], s: f64, rng: &mut R) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-s..=s))
}

fn get(params: &ParamSet, name: &str, shape: &[usize]) -> Result<ParamId> {
    let id = params
        .lookup(name)
        .ok_or_else(|| Error::Mismatch(format!("missing parameter `{name}`")))?;
    if params.value(id).shape() != shape {
        return Err(Error::Mismatch(format!(
            "parameter `{name}` has shape {:?}, expected {shape:?}",
            params.value(id).shape()
        )));
    }
    Ok(id)
}

fn module_shapes(kind: ModuleKind) -> &'static [(&'static str, &'static [usize])] {
    match kind {
        ModuleKind::Find => &[("w", &[FEATURES, 1]), ("b", &[1])],
        ModuleKind::Transform => &[("k", &[9, 1]), ("w", &[FEATURES, 1]), ("b", &[1])],
        ModuleKind::And => &[],
        ModuleKind::Answer => &[("w", &[FEATURES, ANSWERS]), ("b", &[ANSWERS])],
    }
}

const STEM_SHAPES: [(&str, &[usize]); 4] = [
    ("stem.conv1.w", &[CELL_PX, CELL_PX, CHANNELS, FEATURES]),
    ("stem.conv1.b", &[FEATURES]),
    ("stem.conv2.w", &[1, 1, FEATURES, LEARNED_FEATURES]),
    ("stem.conv2.b", &[LEARNED_FEATURES]),
];

impl Nmn {
    /// Randomly initialized stem and modules. Attention biases start at
    /// [`ATTENTION_BIAS_INIT`] so maps begin nearly empty, and the answer
    /// head starts as a soft test of total attention mass against 1/2
    /// (see [`answer_head_init`]).
    pub fn new<R: Rng + ?Sized>(params: &mut ParamSet, vocab: &ProgramVocab, rng: &mut R) -> Self {
        let fan1 = (CELL_PX * CELL_PX * CHANNELS) as f64;
        let mut stem_ids = Vec::new();
        for (name, shape) in STEM_SHAPES {
            let v = if name.ends_with(".b") {
                Tensor::zeros(shape)
            } else {
                let fan = if name.contains("conv1") { fan1 } else { FEATURES as f64 };
                uniform(shape, (3.0 / fan).sqrt(), rng)
            };
            stem_ids.push(params.add(name, v));
        }
        let mut modules = Vec::with_capacity(vocab.len());
        for t in 0..vocab.len() {
            let kind = vocab.kind(t);
            let mut ids = Vec::new();
            for (suffix, shape) in module_shapes(kind) {
                let v = match (kind, *suffix) {
                    (ModuleKind::Answer, "w") => answer_head_init().0,
                    (ModuleKind::Answer, _) => answer_head_init().1,
                    (_, "b") => Tensor::full(shape, ATTENTION_BIAS_INIT),
                    _ => uniform(shape, 0.1, rng),
                };
                ids.push(params.add(format!("{}.{suffix}", module_name(vocab, t)), v));
            }
            modules.push(Self::module_from(kind, &ids));
        }
        Nmn {
            stem: CnnStem {
                conv1_w: stem_ids[0],
                conv1_b: stem_ids[1],
                conv2_w: stem_ids[2],
                conv2_b: stem_ids[3],
            },
            bank: ModuleBank { modules },
        }
    }

    pub fn attach(params: &ParamSet, vocab: &ProgramVocab) -> Result<Self> {
        let mut stem_ids = Vec::new();
        for (name, shape) in STEM_SHAPES {
            stem_ids.push(get(params, name, shape)?);
        }
        let mut modules = Vec::with_capacity(vocab.len());
        for t in 0..vocab.len() {
            let kind = vocab.kind(t);
            let mut ids = Vec::new();
            for (suffix, shape) in module_shapes(kind) {
                ids.push(get(params, &format!("{}.{suffix}", module_name(vocab, t)), shape)?);
            }
            modules.push(Self::module_from(kind, &ids));
        }
        Ok(Nmn {
            stem: CnnStem {
                conv1_w: stem_ids[0],
                conv1_b: stem_ids[1],
                conv2_w: stem_ids[2],
                conv2_b: stem_ids[3],
            },
            bank: ModuleBank { modules },
        })
    }

    fn module_from(kind: ModuleKind, ids: &[ParamId]) -> Module {
        match kind {
            ModuleKind::Find => Module::Find { w: ids[0], b: ids[1] },
            ModuleKind::Transform => Module::Transform {
                k: ids[0],
                w: ids[1],
                b: ids[2],
            },
            ModuleKind::And => Module::And,
            ModuleKind::Answer => Module::Answer { w: ids[0], b: ids[1] },
        }
    }

    pub fn stem_ids(&self) -> Vec<ParamId> {
        let s = &self.stem;
        vec![s.conv1_w, s.conv1_b, s.conv2_w, s.conv2_b]
    }

    pub fn token_ids(&self, token: Token) -> Vec<ParamId> {
        self.bank.modules[token].param_ids()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.stem_ids();
        for m in &self.bank.modules {
            ids.extend(m.param_ids());
        }
        ids
    }

    /// Stem features, `[9, 64]`, rows in cell order `row * 3 + col`.
    pub fn encode_image(&self, tape: &mut Tape, params: &ParamSet, image: &Image) -> Result<Var> {
        let x = tape.constant(image_tensor(image))?;
        let w1 = tape.param(params, self.stem.conv1_w)?;
        let b1 = tape.param(params, self.stem.conv1_b)?;
        let w2 = tape.param(params, self.stem.conv2_w)?;
        let b2 = tape.param(params, self.stem.conv2_b)?;
        let h = tape.conv2d(x, w1, CELL_PX)?;
        let h = tape.add(h, b1)?;
        let h = tape.relu(h)?;
        let h = tape.conv2d(h, w2, 1)?;
        let h = tape.add(h, b2)?;
        let h = tape.relu(h)?;
        let h = tape.reshape(h, &[CELLS, LEARNED_FEATURES])?;
        let ones = tape.constant(Tensor::ones(&[CELLS, 1]))?;
        Ok(tape.concat(&[h, ones], 1)?)
    }

    /// Executes `program` over precomputed features, returning the `[1, 2]`
    /// answer log-probabilities and the per-node attention vars in prefix
    /// order (`None` for the answer root).
    pub fn execute_on_tape(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        vocab: &ProgramVocab,
        program: &Program,
        features: Var,
    ) -> Result<(Var, Vec<(Token, Vec<Var>, Option<Var>)>)> {
        let tree = parse_to_tree(program, vocab)?;
        if tree.token >= self.bank.modules.len() {
            return Err(Error::UnknownToken {
                token: tree.token,
                vocab: self.bank.modules.len(),
            });
        }
        let mut nodes = Vec::with_capacity(program.len());
        let out = self.eval(tape, params, &tree, features, &mut nodes)?;
        match out {
            Value::Logits(v) => Ok((v, nodes)),
            Value::Attention(_) => unreachable!("validated root is answer"),
        }
    }

    fn eval(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        node: &ProgramTree,
        f: Var,
        trace: &mut Vec<(Token, Vec<Var>, Option<Var>)>,
    ) -> Result<Value> {
        let module = self.bank.modules.get(node.token).ok_or(Error::UnknownToken {
            token: node.token,
            vocab: self.bank.modules.len(),
        })?;
        let slot = trace.len();
        trace.push((node.token, Vec::new(), None));
        let mut inputs = Vec::with_capacity(node.children.len());
        for child in &node.children {
            match self.eval(tape, params, child, f, trace)? {
                Value::Attention(a) => inputs.push(a),
                Value::Logits(_) => unreachable!("answer only at the root"),
            }
        }
        let out = match *module {
            Module::Find { w, b } => {
                let w = tape.param(params, w)?;
                let b = tape.param(params, b)?;
                let z = tape.affine(f, w, b)?;
                Value::Attention(tape.sigmoid(z)?)
            }
            Module::Transform { k, w, b } => {
                let shift = tape.constant(shift_matrix())?;
                let k = tape.param(params, k)?;
                let w = tape.param(params, w)?;
                let b = tape.param(params, b)?;
                let nb = tape.matmul(shift, inputs[0])?;
                let nb = tape.reshape(nb, &[CELLS, 9])?;
                let conv = tape.matmul(nb, k)?;
                let feat = tape.affine(f, w, b)?;
                let z = tape.add(conv, feat)?;
                Value::Attention(tape.sigmoid(z)?)
            }
            Module::And => Value::Attention(tape.min(inputs[0], inputs[1])?),
            Module::Answer { w, b } => {
                let w = tape.param(params, w)?;
                let b = tape.param(params, b)?;
                let a = tape.reshape(inputs[0], &[1, CELLS])?;
                let pooled = tape.matmul(a, f)?;
                let logits = tape.affine(pooled, w, b)?;
                Value::Logits(tape.log_softmax(logits)?)
            }
        };
        trace[slot].1 = inputs;
        if let Value::Attention(a) = out {
            trace[slot].2 = Some(a);
        }
        Ok(out)
    }
}

enum Value {
    Attention(Var),
    Logits(Var),
}

pub fn image_tensor(image: &Image) -> Tensor {
    Tensor::new(vec![IMAGE_PX, IMAGE_PX, CHANNELS], image.pixels().to_vec())
        .expect("image has fixed size")
}

/// `[81, 9]` matrix mapping an attention column to the 3x3 neighbourhood of
/// every cell (zero outside the grid). Row `cell * 9 + k` reads offset
/// `k = (dr + 1) * 3 + (dc + 1)`.
pub fn shift_matrix() -> Tensor {
    let mut m = Tensor::zeros(&[CELLS * 9, CELLS]);
    let g = GRID as isize;
    for r in 0..g {
        for c in 0..g {
            for dr in -1..=1isize {
                for dc in -1..=1isize {
                    let (sr, sc) = (r + dr, c + dc);
                    if (0..g).contains(&sr) && (0..g).contains(&sc) {
                        let row = ((r * g + c) * 9 + (dr + 1) * 3 + (dc + 1)) as usize;
                        m.data_mut()[row * CELLS + (sr * g + sc) as usize] = 1.0;
                    }
                }
            }
        }
    }
    m
}

fn column(t: &Tensor) -> [f64; CELLS] {
    let mut out = [0.0; CELLS];
    out.copy_from_slice(t.data());
    out
}

/// Forward execution on one image.
pub fn execute_program(
    params: &ParamSet,
    nmn: &Nmn,
    vocab: &ProgramVocab,
    program: &Program,
    image: &Image,
) -> Result<ExecutionTrace> {
    let mut tape = Tape::new();
    let f = nmn.encode_image(&mut tape, params, image)?;
    let (logp, nodes) = nmn.execute_on_tape(&mut tape, params, vocab, program, f)?;
    let lp = tape.value(logp).data();
    Ok(ExecutionTrace {
        nodes: nodes
            .into_iter()
            .map(|(token, ins, out)| TraceNode {
                token,
                inputs: ins.iter().map(|&v| column(tape.value(v))).collect(),
                output: out.map(|v| column(tape.value(v))),
            })
            .collect(),
        log_probs: [lp[0], lp[1]],
    })
}

/// Differentiable `log p(answer | image; program modules)`, a `[1]` var.
pub fn answer_log_prob(
    tape: &mut Tape,
    params: &ParamSet,
    nmn: &Nmn,
    vocab: &ProgramVocab,
    program: &Program,
    image: &Image,
    answer: Answer,
) -> Result<Var> {
    let f = nmn.encode_image(tape, params, image)?;
    let (logp, _) = nmn.execute_on_tape(tape, params, vocab, program, f)?;
    Ok(tape.gather(logp, &[answer.index()])?)
}

// Hand-set weights that make the network compute the symbolic semantics.

const COLOR_CH: usize = 0;
const SHAPE_CH: usize = 3;
const CONST_CH: usize = LEARNED_FEATURES;

/// Overwrites stem and module weights so that attention maps approximate
/// the oracle's cell sets and the answer head thresholds their total mass.
/// Every token must have shapes-world semantics.
pub fn rig_oracle_weights(params: &mut ParamSet, nmn: &Nmn, vocab: &ProgramVocab) -> Result<()> {
    // Stem: colour channels count pixels of each colour, shape channels
    // fire 0.5 on an exact template match.
    let mut w1 = Tensor::zeros(&[CELL_PX, CELL_PX, CHANNELS, FEATURES]);
    let mut b1 = Tensor::zeros(&[FEATURES]);
    let idx = |y: usize, x: usize, ch: usize, o: usize| ((y * CELL_PX + x) * CHANNELS + ch) * FEATURES + o;
    for (ci, _) in Color::ALL.iter().enumerate() {
        for y in 0..CELL_PX {
            for x in 0..CELL_PX {
                w1.data_mut()[idx(y, x, ci, COLOR_CH + ci)] = 1.0;
            }
        }
    }
    for (si, &shape) in Shape::ALL.iter().enumerate() {
        for y in 0..CELL_PX {
            for x in 0..CELL_PX {
                let v = if glyph(shape, y, x) { 1.0 } else { -1.0 };
                for ch in 0..CHANNELS {
                    w1.data_mut()[idx(y, x, ch, SHAPE_CH + si)] = v;
                }
            }
        }
        b1.data_mut()[SHAPE_CH + si] = -(glyph_area(shape) as f64 - 0.5);
    }
    let mut w2 = Tensor::zeros(&[1, 1, FEATURES, LEARNED_FEATURES]);
    for c in 0..LEARNED_FEATURES {
        w2.data_mut()[c * LEARNED_FEATURES + c] = 1.0;
    }
    params.set_value(nmn.stem.conv1_w, w1)?;
    params.set_value(nmn.stem.conv1_b, b1)?;
    params.set_value(nmn.stem.conv2_w, w2)?;
    params.set_value(nmn.stem.conv2_b, Tensor::zeros(&[LEARNED_FEATURES]))?;

    let min_area = Shape::ALL.iter().map(|&s| glyph_area(s)).min().unwrap_or(1) as f64;
    for t in 0..vocab.len() {
        let sem = semantics(vocab, t).ok_or_else(|| {
            Error::Config(format!("token `{}` has no shapes-world meaning", vocab.name(t)))
        })?;
        match (sem, &nmn.bank.modules[t]) {
            (Semantics::Find(attr), &Module::Find { w, b }) => {
                let mut wv = Tensor::zeros(&[FEATURES, 1]);
                match attr {
                    Attribute::Color(c) => {
                        let ci = Color::ALL.iter().position(|&x| x == c).unwrap_or(0);
                        wv.data_mut()[COLOR_CH + ci] = 10.0 / min_area;
                    }
                    Attribute::Shape(s) => {
                        let si = Shape::ALL.iter().position(|&x| x == s).unwrap_or(0);
                        wv.data_mut()[SHAPE_CH + si] = 20.0;
                    }
                }
                params.set_value(w, wv)?;
                params.set_value(b, Tensor::vector(vec![-5.0]))?;
            }
            (Semantics::Transform(d), &Module::Transform { k, w, b }) => {
                let (dr, dc) = d.source_offset();
                let mut kv = Tensor::zeros(&[9, 1]);
                kv.data_mut()[((dr + 1) * 3 + (dc + 1)) as usize] = 20.0;
                params.set_value(k, kv)?;
                params.set_value(w, Tensor::zeros(&[FEATURES, 1]))?;
                params.set_value(b, Tensor::vector(vec![-10.0]))?;
            }
            (Semantics::And, Module::And) => {}
            (Semantics::Answer, &Module::Answer { w, b }) => {
                let mut wv = Tensor::zeros(&[FEATURES, ANSWERS]);
                wv.data_mut()[CONST_CH * ANSWERS + Answer::Yes.index()] = 20.0;
                let mut bv = Tensor::zeros(&[ANSWERS]);
                bv.data_mut()[Answer::Yes.index()] = -10.0;
                params.set_value(w, wv)?;
                params.set_value(b, bv)?;
            }
            _ => {
                return Err(Error::Config(format!(
                    "module kind of `{}` disagrees with its meaning",
                    vocab.name(t)
                )))
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::render::render_scene;
    use crate::world::scene::Scene;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ParamSet, Nmn, ProgramVocab) {
        let vocab = ProgramVocab::shapes();
        let mut ps = ParamSet::new();
        let nmn = Nmn::new(&mut ps, &vocab, &mut ChaCha8Rng::seed_from_u64(1));
        (ps, nmn, vocab)
    }

    fn prog(v: &ProgramVocab, s: &str) -> Program {
        v.parse_names(&s.split(' ').collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn stem_output_shape() {
        let (ps, nmn, _) = setup();
        let mut tape = Tape::new();
        let img = render_scene(&Scene::empty().with(1, 1, Shape::Circle, Color::Red));
        let f = nmn.encode_image(&mut tape, &ps, &img).unwrap();
        assert_eq!(tape.shape(f), &[9, 64]);
    }

    #[test]
    fn zero_bank_gives_uniform_answers() {
        let (mut ps, nmn, v) = setup();
        for m in &nmn.bank.modules {
            for id in m.param_ids() {
                let shape = ps.value(id).shape().to_vec();
                ps.set_value(id, Tensor::zeros(&shape)).unwrap();
            }
        }
        let img = render_scene(&Scene::empty().with(0, 2, Shape::Square, Color::Blue));
        let tr = execute_program(&ps, &nmn, &v, &prog(&v, "answer find[red]"), &img).unwrap();
        assert_eq!(tr.log_probs, [0.5f64.ln(), 0.5f64.ln()]);
    }

    #[test]
    fn fresh_head_thresholds_attention_mass() {
        let (ps, nmn, v) = setup();
        let img = render_scene(&Scene::empty().with(0, 2, Shape::Square, Color::Blue));
        let tr = execute_program(&ps, &nmn, &v, &prog(&v, "answer transform[left] find[blue]"), &img)
            .unwrap();
        let mass: f64 = tr.nodes[1].output.unwrap().iter().sum();
        let p_yes = 1.0 / (1.0 + (-(2.0 * mass - 1.0)).exp());
        assert!((tr.log_probs[Answer::Yes.index()].exp() - p_yes).abs() < 1e-12);
        assert!((tr.log_probs.iter().map(|l| l.exp()).sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(tr.nodes.len(), 3);
        for n in &tr.nodes {
            for a in n.output.iter().chain(&n.inputs) {
                assert!(a.iter().all(|x| (0.0..=1.0).contains(x)));
            }
        }
    }

    #[test]
    fn shift_matrix_rows() {
        let s = shift_matrix();
        // centre cell sees all 9 neighbours; corner sees 4
        let ones = |cell: usize| s.data()[cell * 81..(cell + 1) * 81].iter().sum::<f64>();
        assert_eq!(ones(4), 9.0);
        assert_eq!(ones(0), 4.0);
    }

    #[test]
    fn invalid_program_is_an_error() {
        let (ps, nmn, v) = setup();
        let img = render_scene(&Scene::empty());
        let p = prog(&v, "find[red]");
        assert!(execute_program(&ps, &nmn, &v, &p, &img).is_err());
    }

    #[test]
    fn shape_templates_separate() {
        for &a in &Shape::ALL {
            for &b in &Shape::ALL {
                let mut resp = 0i64;
                for y in 0..CELL_PX {
                    for x in 0..CELL_PX {
                        if glyph(b, y, x) {
                            resp += if glyph(a, y, x) { 1 } else { -1 };
                        }
                    }
                }
                let area = glyph_area(a) as i64;
                if a == b {
                    assert_eq!(resp, area);
                } else {
                    assert!(resp < area, "{a:?} vs {b:?}");
                }
            }
        }
    }
}
