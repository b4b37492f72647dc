//! Program vocabulary, prefix validation, parsing and simulation.
//!
//! A program is the prefix serialization of a tree of module applications.
//! `answer` sits at the root, `find` modules are the leaves, `transform`
//! takes one child and `and` two.

use std::collections::HashMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Index of a content token in a [`ProgramVocab`].
pub type Token = usize;

pub const MAX_PROGRAM_LEN: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModuleKind {
    Find,
    Transform,
    And,
    Answer,
}

impl ModuleKind {
    pub fn arity(self) -> usize {
        match self {
            ModuleKind::Find => 0,
            ModuleKind::Transform | ModuleKind::Answer => 1,
            ModuleKind::And => 2,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GrammarError {
    #[error("unknown token {token} at position {position}")]
    UnknownToken { token: usize, position: usize },
    #[error("unknown token name `{0}`")]
    UnknownName(String),
    #[error("invalid program: {0}")]
    Invalid(Verdict),
    #[error("malformed tree: {0}")]
    Structure(String),
    #[error("no program fits in {0} tokens")]
    Unsatisfiable(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSpec {
    pub name: String,
    pub kind: ModuleKind,
}

/// Ordered content tokens with their module kinds. Control symbols
/// (END, START, PAD) are appended after the content ids by the sequence
/// models and carry no kind.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProgramVocab {
    tokens: Vec<TokenSpec>,
    index: HashMap<String, Token>,
}

pub const SHAPES_PROGRAM_TOKENS: [(&str, ModuleKind); 12] = [
    ("find[red]", ModuleKind::Find),
    ("find[green]", ModuleKind::Find),
    ("find[blue]", ModuleKind::Find),
    ("find[circle]", ModuleKind::Find),
    ("find[triangle]", ModuleKind::Find),
    ("find[square]", ModuleKind::Find),
    ("transform[left]", ModuleKind::Transform),
    ("transform[right]", ModuleKind::Transform),
    ("transform[above]", ModuleKind::Transform),
    ("transform[below]", ModuleKind::Transform),
    ("and", ModuleKind::And),
    ("answer", ModuleKind::Answer),
];

impl ProgramVocab {
    pub fn new(tokens: Vec<TokenSpec>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.name.clone(), i))
            .collect();
        ProgramVocab { tokens, index }
    }

    /// The twelve-token vocabulary of the shapes world.
    pub fn shapes() -> Self {
        Self::new(
            SHAPES_PROGRAM_TOKENS
                .iter()
                .map(|&(name, kind)| TokenSpec {
                    name: name.to_string(),
                    kind,
                })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn specs(&self) -> &[TokenSpec] {
        &self.tokens
    }

    pub fn kind(&self, t: Token) -> ModuleKind {
        self.tokens[t].kind
    }

    pub fn arity(&self, t: Token) -> usize {
        self.tokens[t].kind.arity()
    }

    pub fn name(&self, t: Token) -> &str {
        &self.tokens[t].name
    }

    pub fn id(&self, name: &str) -> Result<Token, GrammarError> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| GrammarError::UnknownName(name.to_string()))
    }

    pub fn tokens_of_kind(&self, kind: ModuleKind) -> Vec<Token> {
        (0..self.len()).filter(|&t| self.kind(t) == kind).collect()
    }

    pub fn parse_names(&self, names: &[&str]) -> Result<Program, GrammarError> {
        names
            .iter()
            .map(|n| self.id(n))
            .collect::<Result<Vec<_>, _>>()
            .map(Program::new)
    }

    pub fn render(&self, program: &Program) -> String {
        program
            .tokens()
            .iter()
            .map(|&t| {
                if t < self.len() {
                    self.name(t).to_string()
                } else {
                    format!("<{t}>")
                }
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Token sequence `(z_1 .. z_T)`; not necessarily valid.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Program(Vec<Token>);

impl Program {
    pub fn new(tokens: Vec<Token>) -> Self {
        Program(tokens)
    }

    pub fn tokens(&self) -> &[Token] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_tokens(self) -> Vec<Token> {
        self.0
    }
}

impl From<Vec<Token>> for Program {
    fn from(v: Vec<Token>) -> Self {
        Program(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InvalidReason {
    Empty,
    /// The tree completed before the sequence ended.
    CompletedEarly,
    /// Child slots were still open at the end.
    Incomplete { open_slots: usize },
    RootNotAnswer,
    AnswerBelowRoot,
}

/// Outcome of [`validate_prefix`]. Positions are 1-based token positions;
/// `len + 1` denotes the end of the sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Valid,
    Invalid { position: usize, reason: InvalidReason },
}

impl Verdict {
    pub fn is_valid(&self) -> bool {
        matches!(self, Verdict::Valid)
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verdict::Valid => write!(f, "valid"),
            Verdict::Invalid { position, reason } => write!(f, "{reason:?} at position {position}"),
        }
    }
}

/// Prefix-arity walk: `open := 1`, then per token `open := open - 1 + arity`.
/// Valid iff `open` first reaches zero exactly at the last token, the root
/// is an `answer` module and no other `answer` appears.
pub fn validate_prefix(program: &Program, vocab: &ProgramVocab) -> Result<Verdict, GrammarError> {
    let toks = program.tokens();
    for (i, &t) in toks.iter().enumerate() {
        if t >= vocab.len() {
            return Err(GrammarError::UnknownToken {
                token: t,
                position: i + 1,
            });
        }
    }
    if toks.is_empty() {
        return Ok(Verdict::Invalid {
            position: 1,
            reason: InvalidReason::Empty,
        });
    }
    let mut open = 1usize;
    for (i, &t) in toks.iter().enumerate() {
        if open == 0 {
            return Ok(Verdict::Invalid {
                position: i + 1,
                reason: InvalidReason::CompletedEarly,
            });
        }
        open = open - 1 + vocab.arity(t);
    }
    if open != 0 {
        return Ok(Verdict::Invalid {
            position: toks.len() + 1,
            reason: InvalidReason::Incomplete { open_slots: open },
        });
    }
    if vocab.kind(toks[0]) != ModuleKind::Answer {
        return Ok(Verdict::Invalid {
            position: 1,
            reason: InvalidReason::RootNotAnswer,
        });
    }
    if let Some(i) = toks[1..]
        .iter()
        .position(|&t| vocab.kind(t) == ModuleKind::Answer)
    {
        return Ok(Verdict::Invalid {
            position: i + 2,
            reason: InvalidReason::AnswerBelowRoot,
        });
    }
    Ok(Verdict::Valid)
}

pub fn is_valid(program: &Program, vocab: &ProgramVocab) -> bool {
    matches!(validate_prefix(program, vocab), Ok(Verdict::Valid))
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ProgramTree {
    pub token: Token,
    pub children: Vec<ProgramTree>,
}

impl ProgramTree {
    pub fn leaf(token: Token) -> Self {
        ProgramTree {
            token,
            children: Vec::new(),
        }
    }

    pub fn node(token: Token, children: Vec<ProgramTree>) -> Self {
        ProgramTree { token, children }
    }

    pub fn size(&self) -> usize {
        1 + self.children.iter().map(|c| c.size()).sum::<usize>()
    }

    /// Renders as `answer{and{find[red], find[blue]}}`.
    pub fn display(&self, vocab: &ProgramVocab) -> String {
        if self.children.is_empty() {
            vocab.name(self.token).to_string()
        } else {
            let inner: Vec<String> = self.children.iter().map(|c| c.display(vocab)).collect();
            format!("{}{{{}}}", vocab.name(self.token), inner.join(", "))
        }
    }
}

pub fn parse_to_tree(program: &Program, vocab: &ProgramVocab) -> Result<ProgramTree, GrammarError> {
    let verdict = validate_prefix(program, vocab)?;
    if !verdict.is_valid() {
        return Err(GrammarError::Invalid(verdict));
    }
    fn go(toks: &[Token], pos: &mut usize, vocab: &ProgramVocab) -> ProgramTree {
        let t = toks[*pos];
        *pos += 1;
        let children = (0..vocab.arity(t)).map(|_| go(toks, pos, vocab)).collect();
        ProgramTree { token: t, children }
    }
    let mut pos = 0;
    Ok(go(program.tokens(), &mut pos, vocab))
}

pub fn serialize_tree(tree: &ProgramTree, vocab: &ProgramVocab) -> Result<Program, GrammarError> {
    fn go(
        node: &ProgramTree,
        root: bool,
        vocab: &ProgramVocab,
        out: &mut Vec<Token>,
    ) -> Result<(), GrammarError> {
        if node.token >= vocab.len() {
            return Err(GrammarError::UnknownToken {
                token: node.token,
                position: out.len() + 1,
            });
        }
        let kind = vocab.kind(node.token);
        if node.children.len() != kind.arity() {
            return Err(GrammarError::Structure(format!(
                "`{}` has {} children, arity is {}",
                vocab.name(node.token),
                node.children.len(),
                kind.arity()
            )));
        }
        if root != (kind == ModuleKind::Answer) {
            return Err(GrammarError::Structure(if root {
                format!("root `{}` is not an answer module", vocab.name(node.token))
            } else {
                "answer module below the root".to_string()
            }));
        }
        out.push(node.token);
        for c in &node.children {
            go(c, false, vocab, out)?;
        }
        Ok(())
    }
    let mut out = Vec::with_capacity(tree.size());
    go(tree, true, vocab, &mut out)?;
    Ok(Program(out))
}

/// Candidate filter applied to whole simulated programs.
pub fn violates_constraints(tree: &ProgramTree, vocab: &ProgramVocab) -> bool {
    if vocab.kind(tree.token) == ModuleKind::And {
        let (a, b) = (&tree.children[0], &tree.children[1]);
        if a.children.is_empty() && b.children.is_empty() && a.token == b.token {
            return true;
        }
    }
    tree.children.iter().any(|c| violates_constraints(c, vocab))
}

/// Samples a syntactically valid program of at most `max_len` tokens.
///
/// Stage one walks left to right, drawing uniformly among the tokens that
/// keep the prefix completable within the remaining budget. Stage two
/// rejects whole candidates that fail [`violates_constraints`].
pub fn simulate_program<R: Rng + ?Sized>(
    vocab: &ProgramVocab,
    rng: &mut R,
    max_len: usize,
) -> Result<Program, GrammarError> {
    let answers = vocab.tokens_of_kind(ModuleKind::Answer);
    let finds = vocab.tokens_of_kind(ModuleKind::Find);
    if max_len < 2 || answers.is_empty() || finds.is_empty() {
        return Err(GrammarError::Unsatisfiable(max_len));
    }
    let body: Vec<Token> = (0..vocab.len())
        .filter(|&t| vocab.kind(t) != ModuleKind::Answer)
        .collect();
    let mut candidates = Vec::with_capacity(body.len());
    loop {
        let mut toks = vec![*answers.choose(rng).expect("nonempty")];
        let mut open = 1usize;
        while open > 0 {
            let used = toks.len() + 1;
            candidates.clear();
            // every open slot needs at least one more token
            candidates.extend(body.iter().copied().filter(|&t| {
                let after = open - 1 + vocab.arity(t);
                used + after <= max_len
            }));
            let t = *candidates.choose(rng).expect("find tokens always fit");
            open = open - 1 + vocab.arity(t);
            toks.push(t);
        }
        let program = Program(toks);
        let tree = parse_to_tree(&program, vocab)?;
        if !violates_constraints(&tree, vocab) {
            return Ok(program);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn v() -> ProgramVocab {
        ProgramVocab::shapes()
    }

    #[test]
    fn shapes_vocab_layout() {
        let v = v();
        assert_eq!(v.len(), 12);
        assert_eq!(v.tokens_of_kind(ModuleKind::Find).len(), 6);
        assert_eq!(v.tokens_of_kind(ModuleKind::Transform).len(), 4);
        assert_eq!(v.arity(v.id("and").unwrap()), 2);
        assert_eq!(v.arity(v.id("answer").unwrap()), 1);
    }

    #[test]
    fn validator_examples() {
        let v = v();
        let p = v
            .parse_names(&["answer", "and", "find[red]", "find[blue]"])
            .unwrap();
        assert_eq!(validate_prefix(&p, &v).unwrap(), Verdict::Valid);

        let p = v.parse_names(&["answer"]).unwrap();
        assert_eq!(
            validate_prefix(&p, &v).unwrap(),
            Verdict::Invalid {
                position: 2,
                reason: InvalidReason::Incomplete { open_slots: 1 }
            }
        );

        let p = v.parse_names(&["find[red]", "find[blue]"]).unwrap();
        assert_eq!(
            validate_prefix(&p, &v).unwrap(),
            Verdict::Invalid {
                position: 2,
                reason: InvalidReason::CompletedEarly
            }
        );

        let p = v.parse_names(&["answer", "answer", "find[red]"]).unwrap();
        assert!(matches!(
            validate_prefix(&p, &v).unwrap(),
            Verdict::Invalid {
                reason: InvalidReason::AnswerBelowRoot,
                ..
            }
        ));
    }

    #[test]
    fn unknown_token_is_an_error() {
        let err = validate_prefix(&Program::new(vec![11, 40]), &v()).unwrap_err();
        assert_eq!(
            err,
            GrammarError::UnknownToken {
                token: 40,
                position: 2
            }
        );
    }

    #[test]
    fn parse_examples() {
        let v = v();
        let p = v
            .parse_names(&["answer", "and", "find[red]", "transform[left]", "find[blue]"])
            .unwrap();
        let tree = parse_to_tree(&p, &v).unwrap();
        assert_eq!(
            tree.display(&v),
            "answer{and{find[red], transform[left]{find[blue]}}}"
        );
        let p = v.parse_names(&["answer", "find[red]"]).unwrap();
        assert_eq!(parse_to_tree(&p, &v).unwrap().display(&v), "answer{find[red]}");
        let bad = v.parse_names(&["answer"]).unwrap();
        assert!(matches!(
            parse_to_tree(&bad, &v),
            Err(GrammarError::Invalid(_))
        ));
    }

    #[test]
    fn serialize_examples() {
        let v = v();
        let t = ProgramTree::node(
            v.id("answer").unwrap(),
            vec![ProgramTree::leaf(v.id("find[green]").unwrap())],
        );
        assert_eq!(
            serialize_tree(&t, &v).unwrap(),
            v.parse_names(&["answer", "find[green]"]).unwrap()
        );
        let lone = ProgramTree::leaf(v.id("find[green]").unwrap());
        assert!(matches!(
            serialize_tree(&lone, &v),
            Err(GrammarError::Structure(_))
        ));
        let wrong_arity = ProgramTree::node(v.id("answer").unwrap(), vec![]);
        assert!(matches!(
            serialize_tree(&wrong_arity, &v),
            Err(GrammarError::Structure(_))
        ));
    }

    #[test]
    fn budget_two_gives_answer_find() {
        let v = v();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let p = simulate_program(&v, &mut rng, 2).unwrap();
            assert_eq!(p.len(), 2);
            assert_eq!(v.kind(p.tokens()[0]), ModuleKind::Answer);
            assert_eq!(v.kind(p.tokens()[1]), ModuleKind::Find);
        }
        assert_eq!(
            simulate_program(&v, &mut rng, 1),
            Err(GrammarError::Unsatisfiable(1))
        );
    }

    #[test]
    fn constraint_filter_rejects_duplicate_leaves() {
        let v = v();
        let p = v
            .parse_names(&["answer", "and", "find[red]", "find[red]"])
            .unwrap();
        assert!(violates_constraints(&parse_to_tree(&p, &v).unwrap(), &v));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..2000 {
            let p = simulate_program(&v, &mut rng, MAX_PROGRAM_LEN).unwrap();
            assert!(!violates_constraints(&parse_to_tree(&p, &v).unwrap(), &v));
        }
    }
}
