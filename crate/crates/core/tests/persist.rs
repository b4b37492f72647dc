use std::fs;

use probnmn::grammar::{ModuleKind, ProgramVocab, TokenSpec};
use probnmn::model::{ProbNmn, Stage};
use probnmn::persist::{
    load_checkpoint, read_dataset, save_checkpoint, write_dataset, Checkpoint, ITEMS_FILE, MAGIC,
    SCENES_FILE,
};
use probnmn::seq::Dims;
use probnmn::train::{run_joint_training, Hyperparams, MetricsLog, StageOptions};
use probnmn::world::{generate_dataset, DatasetConfig};
use probnmn::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_model(stage: Stage) -> ProbNmn {
    let mut m = ProbNmn::shapes(Dims { embed: 4, hidden: 6 }, &mut ChaCha8Rng::seed_from_u64(11));
    m.stage = stage;
    m.prior.set_frozen(&mut m.params, true);
    m
}

fn tiny_config() -> DatasetConfig {
    DatasetConfig {
        train: 60,
        val: 12,
        test: 12,
        supervision_fraction: 0.2,
        seed: 4,
        density: 0.5,
    }
}

#[test]
fn save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.ckpt");
    let b = dir.path().join("b.ckpt");
    let model = small_model(Stage::QuestionCoding);
    let hp = Hyperparams {
        beta: 0.25,
        ..Hyperparams::default()
    };
    save_checkpoint(&a, &Checkpoint::from_model(&model, &hp, 42)).unwrap();
    let loaded = load_checkpoint(&a).unwrap();
    assert_eq!(loaded.header.stage, Stage::QuestionCoding);
    assert_eq!(loaded.header.seed, 42);
    assert_eq!(loaded.header.hyperparams, hp);
    assert_eq!(loaded.header.workers, 1);
    assert!(loaded.params.values_bit_equal(&model.params));
    save_checkpoint(&b, &loaded).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let again = loaded.into_model(None).unwrap();
    assert_eq!(again.stage, Stage::QuestionCoding);
    assert!(again.prior_ids().iter().all(|&id| again.params.is_frozen(id)));
    assert!(again.phi_ids().iter().all(|&id| !again.params.is_frozen(id)));
}

fn tensor_section_offset(bytes: &[u8]) -> usize {
    let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    16 + hlen + 4
}

fn reseal(body: &mut Vec<u8>) {
    use sha2::{Digest, Sha256};
    let digest = Sha256::digest(&body[..]);
    body.extend_from_slice(&digest);
}

#[test]
fn tampered_extent_is_an_integrity_error() {
    let model = small_model(Stage::PriorPretrained);
    let bytes = Checkpoint::from_model(&model, &Hyperparams::default(), 0).to_bytes();
    let off = tensor_section_offset(&bytes);
    let name_len = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
    let extent = off + 4 + name_len + 4;

    let mut tampered = bytes.clone();
    tampered[extent] ^= 0x01;
    assert!(matches!(Checkpoint::from_bytes(&tampered), Err(Error::Integrity(_))));

    // even with a recomputed checksum the tensor section no longer parses
    let mut body = bytes[..bytes.len() - 32].to_vec();
    body[extent] = body[extent].wrapping_add(1);
    reseal(&mut body);
    assert!(matches!(Checkpoint::from_bytes(&body), Err(Error::Integrity(_))));
}

#[test]
fn truncation_is_an_integrity_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.ckpt");
    let model = small_model(Stage::PriorPretrained);
    let bytes = Checkpoint::from_model(&model, &Hyperparams::default(), 0).to_bytes();
    for cut in [10, bytes.len() / 2, bytes.len() - 1] {
        fs::write(&path, &bytes[..cut]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Integrity(_))), "cut at {cut}");
    }
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert_ne!(&bad_magic[..8], MAGIC);
    assert!(matches!(Checkpoint::from_bytes(&bad_magic), Err(Error::Integrity(_))));
}

#[test]
fn version_mismatch_is_refused() {
    let model = small_model(Stage::PriorPretrained);
    let mut body = Checkpoint::from_model(&model, &Hyperparams::default(), 0).to_bytes();
    body.truncate(body.len() - 32);
    body[8..12].copy_from_slice(&99u32.to_le_bytes());
    reseal(&mut body);
    match Checkpoint::from_bytes(&body) {
        Err(Error::Mismatch(m)) => assert!(m.contains("99"), "{m}"),
        other => panic!("expected a version mismatch, got {other:?}"),
    }
}

#[test]
fn vocab_mismatch_names_the_difference() {
    let model = small_model(Stage::PriorPretrained);
    let ckpt = Checkpoint::from_model(&model, &Hyperparams::default(), 0);
    let mut specs = ProgramVocab::shapes().specs().to_vec();
    specs.push(TokenSpec {
        name: "find[purple]".into(),
        kind: ModuleKind::Find,
    });
    let other = ProgramVocab::new(specs);
    match ckpt.into_model(Some((&other, &model.question_vocab))) {
        Err(Error::Mismatch(m)) => assert!(m.contains("find[purple]"), "{m}"),
        other => panic!("expected a vocab mismatch, got {:?}", other.map(|m| m.stage)),
    }
}

#[test]
fn dataset_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_dataset(&tiny_config()).unwrap();
    write_dataset(dir.path(), &data).unwrap();
    let back = read_dataset(dir.path()).unwrap();
    assert_eq!(back.config, data.config);
    assert_eq!(back.scenes, data.scenes);
    assert_eq!(back.train, data.train);
    assert_eq!(back.val, data.val);
    assert_eq!(back.test, data.test);
    assert_eq!(back.program_vocab, data.program_vocab);
    assert_eq!(back.question_vocab, data.question_vocab);

    let other = tempfile::tempdir().unwrap();
    write_dataset(other.path(), &back).unwrap();
    for f in [SCENES_FILE, ITEMS_FILE, "meta.json"] {
        assert_eq!(
            fs::read(dir.path().join(f)).unwrap(),
            fs::read(other.path().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn dangling_scene_ids_and_bad_programs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_dataset(&tiny_config()).unwrap();
    write_dataset(dir.path(), &data).unwrap();
    let items = dir.path().join(ITEMS_FILE);
    let original = fs::read_to_string(&items).unwrap();

    let first = original.lines().next().unwrap();
    let mut v: serde_json::Value = serde_json::from_str(first).unwrap();
    v["scene_id"] = serde_json::json!(100_000);
    fs::write(&items, format!("{v}\n")).unwrap();
    assert!(matches!(read_dataset(dir.path()), Err(Error::Format { .. })));

    let mut v: serde_json::Value = serde_json::from_str(first).unwrap();
    v["program"] = serde_json::json!(["and", "find[red]"]);
    fs::write(&items, format!("{v}\n")).unwrap();
    assert!(matches!(read_dataset(dir.path()), Err(Error::Format { .. })));

    let mut v: serde_json::Value = serde_json::from_str(first).unwrap();
    let flipped = if v["answer"] == "yes" { "no" } else { "yes" };
    v["answer"] = serde_json::json!(flipped);
    fs::write(&items, format!("{v}\n")).unwrap();
    assert!(matches!(read_dataset(dir.path()), Err(Error::Format { .. })));
}

#[test]
fn coding_checkpoint_cold_starts_joint_training() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("qc.ckpt");
    let data = generate_dataset(&tiny_config()).unwrap();
    let model = small_model(Stage::QuestionCoding);
    let hp = Hyperparams {
        batch_size: 30,
        ..Hyperparams::default()
    };
    save_checkpoint(&path, &Checkpoint::from_model(&model, &hp, 3)).unwrap();
    let opts = StageOptions {
        epochs: 1,
        patience: 1,
        lr: None,
    };

    let mut m = load_checkpoint(&path).unwrap().into_model(None).unwrap();
    let refused = run_joint_training(&mut m, &data, &hp, &opts, 3, false, &mut MetricsLog::in_memory());
    assert!(matches!(refused, Err(Error::Prerequisite(_))));

    let mut m = load_checkpoint(&path).unwrap().into_model(None).unwrap();
    let before = m.params.flatten_values(&m.theta_ids());
    run_joint_training(&mut m, &data, &hp, &opts, 3, true, &mut MetricsLog::in_memory()).unwrap();
    assert_eq!(m.stage, Stage::JointTraining);
    // the module network was redrawn: the saved initial weights are gone
    let after = m.params.flatten_values(&m.theta_ids());
    assert_ne!(before, after);
    let prior_before = model.params.flatten_values(&model.prior_ids());
    assert_eq!(prior_before, m.params.flatten_values(&m.prior_ids()));
}
