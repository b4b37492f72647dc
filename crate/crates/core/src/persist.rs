//! On-disk formats: binary checkpoints and the JSON-lines dataset files.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic "PNMNCKPT" | version u32 | header length u32 | header JSON
//! tensor count u32
//! per tensor: name length u32 | name UTF-8 | rank u32 | extents u32.. | f64 payload
//! SHA-256 of everything above (32 bytes)
//! ```

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use autodiff::{ParamSet, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grammar::{is_valid, ModuleKind, Program, ProgramVocab, TokenSpec};
use crate::model::{ProbNmn, Stage};
use crate::seq::Dims;
use crate::train::Hyperparams;
use crate::world::dataset::{DatasetConfig, DatasetSplit, QaItem, Split};
use crate::world::oracle::{symbolic_execute, Answer};
use crate::world::scene::{Color, Scene, Shape};
use crate::world::templates::QuestionVocab;

pub const MAGIC: &[u8; 8] = b"PNMNCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabEntry {
    pub name: String,
    pub kind: ModuleKind,
    pub arity: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub stage: Stage,
    pub seed: u64,
    pub workers: usize,
    pub dims: Dims,
    pub program_vocab: Vec<VocabEntry>,
    pub question_vocab: Vec<String>,
    /// Hex SHA-256 over both vocabulary tables.
    pub vocab_hash: String,
    pub hyperparams: Hyperparams,
    pub frozen: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParamSet,
}

pub fn vocab_entries(vocab: &ProgramVocab) -> Vec<VocabEntry> {
    vocab
        .specs()
        .iter()
        .map(|s| VocabEntry {
            name: s.name.clone(),
            kind: s.kind,
            arity: s.kind.arity(),
        })
        .collect()
}

pub fn vocab_hash(program: &ProgramVocab, question: &QuestionVocab) -> String {
    let mut h = Sha256::new();
    for s in program.specs() {
        h.update(s.name.as_bytes());
        h.update([0, s.kind.arity() as u8, 0]);
    }
    h.update([0xff]);
    for w in question.words() {
        h.update(w.as_bytes());
        h.update([0]);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn from_model(model: &ProbNmn, hp: &Hyperparams, seed: u64) -> Self {
        let frozen = model
            .params
            .iter()
            .filter(|(_, p)| p.frozen)
            .map(|(_, p)| p.name.clone())
            .collect();
        Checkpoint {
            header: CheckpointHeader {
                format_version: FORMAT_VERSION,
                stage: model.stage,
                seed,
                workers: 1,
                dims: model.dims,
                program_vocab: vocab_entries(&model.program_vocab),
                question_vocab: model.question_vocab.words().to_vec(),
                vocab_hash: vocab_hash(&model.program_vocab, &model.question_vocab),
                hyperparams: hp.clone(),
                frozen,
            },
            params: model.params.clone(),
        }
    }

    pub fn program_vocab(&self) -> ProgramVocab {
        ProgramVocab::new(
            self.header
                .program_vocab
                .iter()
                .map(|e| TokenSpec {
                    name: e.name.clone(),
                    kind: e.kind,
                })
                .collect(),
        )
    }

    pub fn question_vocab(&self) -> QuestionVocab {
        QuestionVocab::new(self.header.question_vocab.clone())
    }

    /// Rebuilds the model, refusing if the vocabularies differ from the
    /// expected ones.
    pub fn into_model(self, expected: Option<(&ProgramVocab, &QuestionVocab)>) -> Result<ProbNmn> {
        let pv = self.program_vocab();
        let qv = self.question_vocab();
        if let Some((epv, eqv)) = expected {
            let want = vocab_hash(epv, eqv);
            if want != self.header.vocab_hash {
                return Err(Error::Mismatch(vocab_diff(epv, eqv, &pv, &qv)));
            }
        }
        ProbNmn::attach(self.params, pv, qv, self.header.dims, self.header.stage)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (_, p) in self.params.iter() {
            let name = p.name.as_bytes();
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name);
            out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 32 {
            return Err(Error::Integrity("file too short".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if body[..8] != MAGIC[..] {
            return Err(Error::Integrity("bad magic".into()));
        }
        let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Mismatch(format!(
                "format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Integrity("checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 12 };
        let hlen = r.u32()? as usize;
        let header: CheckpointHeader = serde_json::from_slice(r.take(hlen)?)
            .map_err(|e| Error::Integrity(format!("header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Mismatch(format!(
                "header format version {}, expected {FORMAT_VERSION}",
                header.format_version
            )));
        }
        let n = r.u32()? as usize;
        let mut params = ParamSet::new();
        for _ in 0..n {
            let nlen = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| Error::Integrity("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let count: usize = shape.iter().product();
            let raw = r.take(count.checked_mul(8).ok_or_else(|| Error::Integrity("extent overflow".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data)
                .map_err(|e| Error::Integrity(format!("tensor `{name}`: {e}")))?;
            if params.lookup(&name).is_some() {
                return Err(Error::Integrity(format!("duplicate tensor `{name}`")));
            }
            params.add(name, t);
        }
        if r.pos != body.len() {
            return Err(Error::Integrity("trailing bytes after tensors".into()));
        }
        for name in &header.frozen {
            let id = params
                .lookup(name)
                .ok_or_else(|| Error::Integrity(format!("frozen tensor `{name}` missing")))?;
            params.set_frozen(id, true);
        }
        Ok(Checkpoint { header, params })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Integrity("truncated tensor section".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn vocab_diff(epv: &ProgramVocab, eqv: &QuestionVocab, pv: &ProgramVocab, qv: &QuestionVocab) -> String {
    let names = |v: &ProgramVocab| v.specs().iter().map(|s| s.name.clone()).collect::<Vec<_>>();
    let (a, b) = (names(epv), names(pv));
    let mut parts = Vec::new();
    let missing: Vec<_> = a.iter().filter(|n| !b.contains(n)).collect();
    let extra: Vec<_> = b.iter().filter(|n| !a.contains(n)).collect();
    if !missing.is_empty() || !extra.is_empty() {
        parts.push(format!("program tokens missing {missing:?}, unexpected {extra:?}"));
    } else if a != b {
        parts.push("program token order differs".to_string());
    }
    if eqv.words() != qv.words() {
        parts.push(format!(
            "question vocabulary differs ({} vs {} words)",
            eqv.len(),
            qv.len()
        ));
    }
    if parts.is_empty() {
        parts.push("token kinds differ".to_string());
    }
    format!("vocabulary mismatch: {}", parts.join("; "))
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

// Dataset files.

#[derive(Debug, Serialize, Deserialize)]
struct SceneRecord {
    id: usize,
    cells: Vec<(usize, usize, Shape, Color)>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ItemRecord {
    id: usize,
    split: Split,
    scene_id: usize,
    question: Vec<String>,
    answer: Answer,
    program: Vec<String>,
    teaching: bool,
    frame: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Sizes {
    train: usize,
    val: usize,
    test: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct MetaRecord {
    seed: u64,
    sizes: Sizes,
    supervision_fraction: f64,
    density: f64,
    program_vocab: Vec<VocabEntry>,
    question_vocab: Vec<String>,
}

pub const SCENES_FILE: &str = "scenes.jsonl";
pub const ITEMS_FILE: &str = "items.jsonl";
pub const META_FILE: &str = "meta.json";

fn write_lines<T: Serialize>(path: &Path, rows: impl Iterator<Item = T>) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for row in rows {
        serde_json::to_writer(&mut w, &row).map_err(|e| Error::format(path, e.to_string()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_dataset(dir: &Path, data: &DatasetSplit) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_lines(
        &dir.join(SCENES_FILE),
        data.scenes.iter().enumerate().map(|(id, s)| SceneRecord {
            id,
            cells: s.to_records(),
        }),
    )?;
    let pv = &data.program_vocab;
    let qv = &data.question_vocab;
    write_lines(
        &dir.join(ITEMS_FILE),
        data.train
            .iter()
            .chain(&data.val)
            .chain(&data.test)
            .map(|i| ItemRecord {
                id: i.id,
                split: i.split,
                scene_id: i.scene_id,
                question: i.question.iter().map(|&w| qv.word(w).to_string()).collect(),
                answer: i.answer,
                program: i.program.tokens().iter().map(|&t| pv.name(t).to_string()).collect(),
                teaching: i.teaching,
                frame: i.frame,
            }),
    )?;
    let c = &data.config;
    let meta = MetaRecord {
        seed: c.seed,
        sizes: Sizes {
            train: c.train,
            val: c.val,
            test: c.test,
        },
        supervision_fraction: c.supervision_fraction,
        density: c.density,
        program_vocab: vocab_entries(pv),
        question_vocab: qv.words().to_vec(),
    };
    let path = dir.join(META_FILE);
    let text = serde_json::to_string_pretty(&meta).expect("meta serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?,
        );
    }
    Ok(out)
}

pub fn read_dataset(dir: &Path) -> Result<DatasetSplit> {
    let meta_path = dir.join(META_FILE);
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: MetaRecord =
        serde_json::from_str(&text).map_err(|e| Error::format(&meta_path, e.to_string()))?;
    let pv = ProgramVocab::new(
        meta.program_vocab
            .iter()
            .map(|e| TokenSpec {
                name: e.name.clone(),
                kind: e.kind,
            })
            .collect(),
    );
    let qv = QuestionVocab::new(meta.question_vocab.clone());

    let scenes_path = dir.join(SCENES_FILE);
    let records: Vec<SceneRecord> = read_lines(&scenes_path)?;
    let mut scenes = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        if r.id != i {
            return Err(Error::format(&scenes_path, format!("scene id {} out of order", r.id)));
        }
        scenes.push(
            Scene::from_records(&r.cells)
                .ok_or_else(|| Error::format(&scenes_path, format!("scene {i} is malformed")))?,
        );
    }

    let items_path = dir.join(ITEMS_FILE);
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for r in read_lines::<ItemRecord>(&items_path)? {
        let bad = |d: String| Error::format(&items_path, format!("item {} ({:?}): {d}", r.id, r.split));
        if r.scene_id >= scenes.len() {
            return Err(bad(format!("scene id {} does not resolve", r.scene_id)));
        }
        let names: Vec<&str> = r.program.iter().map(String::as_str).collect();
        let program: Program = pv.parse_names(&names).map_err(|e| bad(e.to_string()))?;
        if !is_valid(&program, &pv) {
            return Err(bad("invalid gold program".into()));
        }
        let words: Vec<&str> = r.question.iter().map(String::as_str).collect();
        let question = qv
            .encode(&words)
            .ok_or_else(|| bad("question word outside vocabulary".into()))?;
        let oracle = symbolic_execute(&program, &scenes[r.scene_id], &pv)?;
        if oracle.answer != r.answer {
            return Err(bad("answer disagrees with the program on its scene".into()));
        }
        let item = QaItem {
            id: r.id,
            split: r.split,
            scene_id: r.scene_id,
            question,
            answer: r.answer,
            program,
            teaching: r.teaching,
            frame: r.frame,
        };
        match r.split {
            Split::Train => train.push(item),
            Split::Val => val.push(item),
            Split::Test => test.push(item),
        }
    }
    Ok(DatasetSplit {
        config: DatasetConfig {
            train: meta.sizes.train,
            val: meta.sizes.val,
            test: meta.sizes.test,
            supervision_fraction: meta.supervision_fraction,
            seed: meta.seed,
            density: meta.density,
        },
        program_vocab: pv,
        question_vocab: qv,
        scenes,
        train,
        val,
        test,
    })
}
