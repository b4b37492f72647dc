//! Exact set semantics of programs on scenes.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::scene::{Color, Scene, Shape, CELLS, GRID};
use crate::grammar::{parse_to_tree, GrammarError, Program, ProgramTree, ProgramVocab, Token};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Answer {
    Yes,
    No,
}

impl Answer {
    pub const ALL: [Answer; 2] = [Answer::Yes, Answer::No];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Answer {
        Answer::ALL[i]
    }

    pub fn from_bool(b: bool) -> Answer {
        if b {
            Answer::Yes
        } else {
            Answer::No
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Answer::Yes => "yes",
            Answer::No => "no",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Attribute {
    Color(Color),
    Shape(Shape),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Left,
    Right,
    Above,
    Below,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::Left,
        Direction::Right,
        Direction::Above,
        Direction::Below,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Direction::Left => "left",
            Direction::Right => "right",
            Direction::Above => "above",
            Direction::Below => "below",
        }
    }

    /// Grid offset from a result cell to the reference cell it depends on.
    pub fn source_offset(self) -> (isize, isize) {
        match self {
            Direction::Left => (0, 1),
            Direction::Right => (0, -1),
            Direction::Above => (1, 0),
            Direction::Below => (-1, 0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Semantics {
    Find(Attribute),
    Transform(Direction),
    And,
    Answer,
}

/// Meaning of a shapes-world token, read off its name.
pub fn semantics(vocab: &ProgramVocab, token: Token) -> Option<Semantics> {
    let name = vocab.name(token);
    if name == "and" {
        return Some(Semantics::And);
    }
    if name == "answer" {
        return Some(Semantics::Answer);
    }
    let arg = |prefix: &str| {
        name.strip_prefix(prefix)
            .and_then(|r| r.strip_suffix(']'))
            .map(str::to_string)
    };
    if let Some(a) = arg("find[") {
        if let Some(c) = Color::ALL.iter().find(|c| c.name() == a) {
            return Some(Semantics::Find(Attribute::Color(*c)));
        }
        if let Some(s) = Shape::ALL.iter().find(|s| s.name() == a) {
            return Some(Semantics::Find(Attribute::Shape(*s)));
        }
    }
    if let Some(a) = arg("transform[") {
        if let Some(d) = Direction::ALL.iter().find(|d| d.name() == a) {
            return Some(Semantics::Transform(*d));
        }
    }
    None
}

/// Boolean 3x3 cell set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Mask(pub [bool; CELLS]);

impl Mask {
    pub fn any(&self) -> bool {
        self.0.iter().any(|&b| b)
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn and(&self, other: &Mask) -> Mask {
        let mut m = [false; CELLS];
        for (i, v) in m.iter_mut().enumerate() {
            *v = self.0[i] && other.0[i];
        }
        Mask(m)
    }

    /// Cells lying in direction `d` of some cell of `self`.
    pub fn shift(&self, d: Direction) -> Mask {
        let (dr, dc) = d.source_offset();
        let mut m = [false; CELLS];
        for r in 0..GRID {
            for c in 0..GRID {
                let (sr, sc) = (r as isize + dr, c as isize + dc);
                if (0..GRID as isize).contains(&sr) && (0..GRID as isize).contains(&sc) {
                    m[r * GRID + c] = self.0[sr as usize * GRID + sc as usize];
                }
            }
        }
        Mask(m)
    }

    pub fn as_f64(&self) -> [f64; CELLS] {
        self.0.map(|b| if b { 1.0 } else { 0.0 })
    }
}

impl fmt::Display for Mask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in 0..GRID {
            let row: String = (0..GRID)
                .map(|c| if self.0[r * GRID + c] { '#' } else { '.' })
                .collect();
            if r + 1 < GRID {
                write!(f, "{row}/")?;
            } else {
                write!(f, "{row}")?;
            }
        }
        Ok(())
    }
}

pub fn find_mask(scene: &Scene, attr: Attribute) -> Mask {
    let mut m = [false; CELLS];
    for (i, c) in scene.cells().iter().enumerate() {
        m[i] = match (c, attr) {
            (Some(o), Attribute::Color(col)) => o.color == col,
            (Some(o), Attribute::Shape(s)) => o.shape == s,
            (None, _) => false,
        };
    }
    Mask(m)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Execution {
    pub answer: Answer,
    /// Output set of every node in prefix order; the root repeats its
    /// child's set.
    pub masks: Vec<Mask>,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum OracleError {
    #[error(transparent)]
    Grammar(#[from] GrammarError),
    #[error("token `{0}` has no shapes-world meaning")]
    Meaningless(String),
}

pub fn symbolic_execute(
    program: &Program,
    scene: &Scene,
    vocab: &ProgramVocab,
) -> Result<Execution, OracleError> {
    let tree = parse_to_tree(program, vocab)?;
    let mut masks = Vec::with_capacity(program.len());
    let root = eval(&tree, scene, vocab, &mut masks)?;
    Ok(Execution {
        answer: Answer::from_bool(root.any()),
        masks,
    })
}

fn eval(
    node: &ProgramTree,
    scene: &Scene,
    vocab: &ProgramVocab,
    out: &mut Vec<Mask>,
) -> Result<Mask, OracleError> {
    let sem = semantics(vocab, node.token)
        .ok_or_else(|| OracleError::Meaningless(vocab.name(node.token).to_string()))?;
    let slot = out.len();
    out.push(Mask::default());
    let m = match sem {
        Semantics::Find(a) => find_mask(scene, a),
        Semantics::Transform(d) => eval(&node.children[0], scene, vocab, out)?.shift(d),
        Semantics::And => {
            let a = eval(&node.children[0], scene, vocab, out)?;
            let b = eval(&node.children[1], scene, vocab, out)?;
            a.and(&b)
        }
        Semantics::Answer => eval(&node.children[0], scene, vocab, out)?,
    };
    out[slot] = m;
    Ok(m)
}
