//! Question/program/answer triples over random scenes, split into teaching,
//! VQA, validation and test sets.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::oracle::{symbolic_execute, Answer};
use super::render::{render_scene, Image};
use super::scene::{sample_scene, Scene};
use super::templates::{realize, QuestionVocab, TemplateSet};
use crate::grammar::{simulate_program, Program, ProgramVocab, MAX_PROGRAM_LEN};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QaItem {
    pub id: usize,
    pub split: Split,
    pub scene_id: usize,
    /// Word ids in the question vocabulary.
    pub question: Vec<usize>,
    pub answer: Answer,
    pub program: Program,
    /// Program visible to training (teaching set) or hidden (VQA set).
    pub teaching: bool,
    pub frame: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub supervision_fraction: f64,
    pub seed: u64,
    pub density: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            train: 6000,
            val: 600,
            test: 600,
            supervision_fraction: 0.1,
            seed: 0,
            density: 0.5,
        }
    }
}

impl DatasetConfig {
    /// `ceil(fraction * train)`.
    pub fn teaching_count(&self) -> usize {
        let n = (self.supervision_fraction * self.train as f64 - 1e-9).ceil();
        (n.max(0.0) as usize).min(self.train)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.train == 0 || self.val == 0 || self.test == 0 {
            return Err("split sizes must be at least 1".into());
        }
        if !(self.supervision_fraction > 0.0 && self.supervision_fraction <= 1.0) {
            return Err(format!(
                "supervision fraction {} outside (0, 1]",
                self.supervision_fraction
            ));
        }
        if !(self.density > 0.0 && self.density <= 1.0) {
            return Err(format!("density {} outside (0, 1]", self.density));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub config: DatasetConfig,
    pub program_vocab: ProgramVocab,
    pub question_vocab: QuestionVocab,
    pub scenes: Vec<Scene>,
    pub train: Vec<QaItem>,
    pub val: Vec<QaItem>,
    pub test: Vec<QaItem>,
}

impl DatasetSplit {
    pub fn teaching(&self) -> impl Iterator<Item = &QaItem> {
        self.train.iter().filter(|i| i.teaching)
    }

    pub fn vqa(&self) -> impl Iterator<Item = &QaItem> {
        self.train.iter().filter(|i| !i.teaching)
    }

    pub fn scene(&self, item: &QaItem) -> &Scene {
        &self.scenes[item.scene_id]
    }

    pub fn image(&self, item: &QaItem) -> Image {
        render_scene(&self.scenes[item.scene_id])
    }

    pub fn items(&self, split: Split) -> &[QaItem] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// A generated question for a given scene.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedQa {
    pub program: Program,
    pub frame: usize,
    pub question: Vec<usize>,
    pub answer: Answer,
}

/// Draws a program from the grammar simulator, answers it on `scene` and
/// realizes the question. With a `target`, programs are redrawn (up to
/// `tries` times) until the answer matches; the last draw is returned
/// either way.
pub fn generate_qa<R: Rng + ?Sized>(
    scene: &Scene,
    rng: &mut R,
    templates: &TemplateSet,
    vocab: &ProgramVocab,
    qvocab: &QuestionVocab,
    target: Option<Answer>,
    tries: usize,
) -> GeneratedQa {
    let mut last = None;
    for _ in 0..tries.max(1) {
        let program = simulate_program(vocab, rng, MAX_PROGRAM_LEN).expect("budget fits");
        let answer = symbolic_execute(&program, scene, vocab)
            .expect("simulated programs are valid")
            .answer;
        let frame = templates.sample_frame(rng);
        let words = realize(&program, frame, vocab).expect("valid program");
        let question = qvocab.encode(&words).expect("template words are in vocab");
        let qa = GeneratedQa {
            program,
            frame,
            question,
            answer,
        };
        if target.is_none_or(|t| t == answer) {
            return qa;
        }
        last = Some(qa);
    }
    last.expect("at least one draw")
}

fn item_rng(seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(split.tag());
    rng.set_word_pos(0);
    let base: u64 = rng.gen();
    ChaCha8Rng::seed_from_u64(base ^ (index as u64).wrapping_mul(0x9E3779B97F4A7C15))
}

/// In-memory dataset generation; pure function of the config.
pub fn generate_dataset(config: &DatasetConfig) -> Result<DatasetSplit, String> {
    config.validate()?;
    let vocab = ProgramVocab::shapes();
    let qvocab = QuestionVocab::shapes();
    let templates = TemplateSet::default();
    let mut scenes = Vec::new();
    let mut train_hashes = HashSet::new();

    let make = |split: Split, n: usize, scenes: &mut Vec<Scene>, train_hashes: &mut HashSet<u64>| {
        let mut items = Vec::with_capacity(n);
        for index in 0..n {
            let mut rng = item_rng(config.seed, split, index);
            let target = Answer::from_bool(rng.gen_bool(0.5));
            let (scene, qa) = loop {
                let scene = sample_scene(&mut rng, config.density);
                if split != Split::Train && train_hashes.contains(&scene.content_hash()) {
                    continue;
                }
                let qa = generate_qa(&scene, &mut rng, &templates, &vocab, &qvocab, Some(target), 20);
                if qa.answer == target {
                    break (scene, qa);
                }
            };
            if split == Split::Train {
                train_hashes.insert(scene.content_hash());
            }
            let scene_id = scenes.len();
            scenes.push(scene);
            items.push(QaItem {
                id: index,
                split,
                scene_id,
                question: qa.question,
                answer: qa.answer,
                program: qa.program,
                teaching: false,
                frame: qa.frame,
            });
        }
        items
    };
    let mut train = make(Split::Train, config.train, &mut scenes, &mut train_hashes);
    let val = make(Split::Val, config.val, &mut scenes, &mut train_hashes);
    let test = make(Split::Test, config.test, &mut scenes, &mut train_hashes);

    let mut rng = item_rng(config.seed, Split::Train, usize::MAX);
    train.shuffle(&mut rng);
    let n_teach = config.teaching_count();
    for item in train.iter_mut().take(n_teach) {
        item.teaching = true;
    }
    Ok(DatasetSplit {
        config: config.clone(),
        program_vocab: vocab,
        question_vocab: qvocab,
        scenes,
        train,
        val,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(fraction: f64) -> DatasetConfig {
        DatasetConfig {
            train: 300,
            val: 60,
            test: 60,
            supervision_fraction: fraction,
            seed: 3,
            density: 0.5,
        }
    }

    #[test]
    fn teaching_count_arithmetic() {
        let c = DatasetConfig::default();
        assert_eq!(c.teaching_count(), 600);
        assert_eq!(c.train - c.teaching_count(), 5400);
    }

    #[test]
    fn oracle_agrees_and_answers_balance() {
        let d = generate_dataset(&small(0.1)).unwrap();
        let mut yes = 0;
        for item in d.train.iter().chain(&d.val).chain(&d.test) {
            let e = symbolic_execute(&item.program, d.scene(item), &d.program_vocab).unwrap();
            assert_eq!(e.answer, item.answer);
            yes += (item.answer == Answer::Yes) as usize;
        }
        let frac = yes as f64 / 420.0;
        assert!((frac - 0.5).abs() < 0.1, "{frac}");
        assert_eq!(d.teaching().count(), 30);
        let teach: HashSet<usize> = d.teaching().map(|i| i.id).collect();
        assert!(d.vqa().all(|i| !teach.contains(&i.id)));
    }

    #[test]
    fn held_out_scenes_are_new() {
        let d = generate_dataset(&small(0.1)).unwrap();
        let train: HashSet<u64> = d.train.iter().map(|i| d.scene(i).content_hash()).collect();
        for i in d.val.iter().chain(&d.test) {
            assert!(!train.contains(&d.scene(i).content_hash()));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_dataset(&small(0.2)).unwrap();
        let b = generate_dataset(&small(0.2)).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.scenes, b.scenes);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(generate_dataset(&small(0.0)).is_err());
        let mut c = small(0.1);
        c.val = 0;
        assert!(generate_dataset(&c).is_err());
    }
}
