//! Question realization from programs and its inverse.
//!
//! Noun phrases follow the program in prefix order:
//!
//! ```text
//! find[c]        -> "<c> thing"        (colors)
//! find[s]        -> "<s>"              (shapes)
//! transform[d] X -> "left of" X | "right of" X | "above" X | "below" X
//! and X Y        -> "both" X "and" Y
//! ```
//!
//! and a question wraps the phrase in one of three frames. Every frame and
//! phrase rule starts with a distinct word, so parsing is a single
//! left-to-right pass.

use std::collections::HashMap;

use rand::Rng;

use super::oracle::{semantics, Attribute, Direction, Semantics};
use crate::grammar::{parse_to_tree, serialize_tree, Program, ProgramTree, ProgramVocab, Token};

pub const MAX_QUESTION_LEN: usize = 15;

pub const QUESTION_WORDS: [&str; 19] = [
    "is", "there", "a", "any", "present", "both", "and", "red", "green", "blue", "thing",
    "circle", "triangle", "square", "left", "right", "of", "above", "below",
];

/// Word vocabulary of questions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuestionVocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl QuestionVocab {
    pub fn new(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        QuestionVocab { words, index }
    }

    pub fn shapes() -> Self {
        Self::new(QUESTION_WORDS.iter().map(|w| w.to_string()).collect())
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, w: &str) -> Option<usize> {
        self.index.get(w).copied()
    }

    pub fn word(&self, id: usize) -> &str {
        self.words.get(id).map(String::as_str).unwrap_or("<?>")
    }

    pub fn encode(&self, words: &[&str]) -> Option<Vec<usize>> {
        words.iter().map(|w| self.id(w)).collect()
    }

    pub fn render(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.word(i)).collect::<Vec<_>>().join(" ")
    }
}

/// Surface frames around the noun phrase, with their sampling weights.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    pub frame_weights: Vec<f64>,
}

impl Default for TemplateSet {
    fn default() -> Self {
        TemplateSet {
            frame_weights: vec![0.7, 0.2, 0.1],
        }
    }
}

const FRAMES: usize = 3;

impl TemplateSet {
    pub fn frames(&self) -> usize {
        FRAMES
    }

    pub fn sample_frame<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let total: f64 = self.frame_weights.iter().sum();
        let mut u = rng.gen_range(0.0..total);
        for (i, w) in self.frame_weights.iter().enumerate() {
            if u < *w {
                return i;
            }
            u -= w;
        }
        self.frame_weights.len() - 1
    }
}

fn phrase(node: &ProgramTree, vocab: &ProgramVocab, out: &mut Vec<&'static str>) {
    match semantics(vocab, node.token).expect("shapes token") {
        Semantics::Find(Attribute::Color(c)) => {
            out.push(c.name());
            out.push("thing");
        }
        Semantics::Find(Attribute::Shape(s)) => out.push(s.name()),
        Semantics::Transform(d) => {
            out.push(d.name());
            if matches!(d, Direction::Left | Direction::Right) {
                out.push("of");
            }
            phrase(&node.children[0], vocab, out);
        }
        Semantics::And => {
            out.push("both");
            phrase(&node.children[0], vocab, out);
            out.push("and");
            phrase(&node.children[1], vocab, out);
        }
        Semantics::Answer => phrase(&node.children[0], vocab, out),
    }
}

/// Words of the question for a valid program in the given frame.
pub fn realize(program: &Program, frame: usize, vocab: &ProgramVocab) -> Option<Vec<&'static str>> {
    let tree = parse_to_tree(program, vocab).ok()?;
    let mut np = Vec::new();
    phrase(&tree, vocab, &mut np);
    let mut q: Vec<&'static str> = match frame {
        0 => vec!["is", "there", "a"],
        1 => vec!["is", "there", "any"],
        2 => vec!["is", "a"],
        _ => return None,
    };
    q.extend(np);
    if frame == 2 {
        q.push("present");
    }
    Some(q)
}

struct Reader<'a> {
    words: &'a [&'a str],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn next(&mut self) -> Option<&'a str> {
        let w = self.words.get(self.pos).copied();
        self.pos += 1;
        w
    }

    fn expect(&mut self, w: &str) -> Option<()> {
        (self.next()? == w).then_some(())
    }
}

fn token_for(vocab: &ProgramVocab, name: &str) -> Option<Token> {
    vocab.id(name).ok()
}

fn parse_phrase(r: &mut Reader<'_>, vocab: &ProgramVocab) -> Option<ProgramTree> {
    let w = r.next()?;
    match w {
        "red" | "green" | "blue" => {
            r.expect("thing")?;
            Some(ProgramTree::leaf(token_for(vocab, &format!("find[{w}]"))?))
        }
        "circle" | "triangle" | "square" => Some(ProgramTree::leaf(token_for(vocab, &format!("find[{w}]"))?)),
        "left" | "right" | "above" | "below" => {
            if w == "left" || w == "right" {
                r.expect("of")?;
            }
            let child = parse_phrase(r, vocab)?;
            Some(ProgramTree::node(
                token_for(vocab, &format!("transform[{w}]"))?,
                vec![child],
            ))
        }
        "both" => {
            let a = parse_phrase(r, vocab)?;
            r.expect("and")?;
            let b = parse_phrase(r, vocab)?;
            Some(ProgramTree::node(token_for(vocab, "and")?, vec![a, b]))
        }
        _ => None,
    }
}

/// Inverse of [`realize`]: recovers `(program, frame)` from question words.
pub fn parse_question(words: &[&str], vocab: &ProgramVocab) -> Option<(Program, usize)> {
    let mut r = Reader { words, pos: 0 };
    r.expect("is")?;
    let frame = match r.next()? {
        "there" => match r.next()? {
            "a" => 0,
            "any" => 1,
            _ => return None,
        },
        "a" => 2,
        _ => return None,
    };
    let np = parse_phrase(&mut r, vocab)?;
    if frame == 2 {
        r.expect("present")?;
    }
    if r.pos != words.len() {
        return None;
    }
    let tree = ProgramTree::node(token_for(vocab, "answer")?, vec![np]);
    Some((serialize_tree(&tree, vocab).ok()?, frame))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::{simulate_program, MAX_PROGRAM_LEN};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn simplest_question() {
        let v = ProgramVocab::shapes();
        let p = v.parse_names(&["answer", "find[red]"]).unwrap();
        assert_eq!(realize(&p, 0, &v).unwrap().join(" "), "is there a red thing");
        let p = v
            .parse_names(&["answer", "and", "find[circle]", "transform[left]", "find[green]"])
            .unwrap();
        assert_eq!(
            realize(&p, 2, &v).unwrap().join(" "),
            "is a both circle and left of green thing present"
        );
    }

    #[test]
    fn realization_is_invertible_and_short() {
        let v = ProgramVocab::shapes();
        let qv = QuestionVocab::shapes();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5000 {
            let p = simulate_program(&v, &mut rng, MAX_PROGRAM_LEN).unwrap();
            for frame in 0..FRAMES {
                let q = realize(&p, frame, &v).unwrap();
                assert!(q.len() <= MAX_QUESTION_LEN, "{q:?}");
                assert!(qv.encode(&q).is_some());
                assert_eq!(parse_question(&q, &v), Some((p.clone(), frame)));
            }
        }
    }

    #[test]
    fn garbage_does_not_parse() {
        let v = ProgramVocab::shapes();
        assert_eq!(parse_question(&["is", "there", "a"], &v), None);
        assert_eq!(parse_question(&["is", "there", "a", "red"], &v), None);
        assert_eq!(
            parse_question(&["is", "there", "a", "circle", "circle"], &v),
            None
        );
    }
}
