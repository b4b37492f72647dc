//! Tree-enumeration oracle for the program grammar.

use std::collections::HashSet;

use probnmn::grammar::{
    is_valid, parse_to_tree, serialize_tree, simulate_program, validate_prefix, ModuleKind, Program,
    ProgramVocab, TokenSpec, MAX_PROGRAM_LEN,
};
use probnmn::seq::enumerate_sequences;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn five() -> ProgramVocab {
    let spec = |name: &str, kind| TokenSpec {
        name: name.into(),
        kind,
    };
    ProgramVocab::new(vec![
        spec("find[a]", ModuleKind::Find),
        spec("find[b]", ModuleKind::Find),
        spec("transform[t]", ModuleKind::Transform),
        spec("and", ModuleKind::And),
        spec("answer", ModuleKind::Answer),
    ])
}

/// Prefix serializations of every tree below the root with at most
/// `budget` nodes, built by structural recursion.
pub fn subtrees(budget: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if budget == 0 {
        return out;
    }
    out.push(vec![0]);
    out.push(vec![1]);
    for c in subtrees(budget - 1) {
        out.push([vec![2], c].concat());
    }
    for left in subtrees(budget - 1) {
        for right in subtrees(budget - 1 - left.len()) {
            out.push([vec![3], left.clone(), right].concat());
        }
    }
    out
}

/// Checks validator, incremental validator, parser and serializer against
/// the oracle on every sequence of length at most four over [`five`].
/// Returns the number of valid sequences.
pub fn exhaustive_check() -> Result<usize, String> {
    let vocab = five();
    let oracle: HashSet<Vec<usize>> = subtrees(3).into_iter().map(|c| [vec![4], c].concat()).collect();
    let mut valid = 0;
    for seq in enumerate_sequences(5, 4) {
        let p = Program::new(seq.clone());
        let expected = oracle.contains(&seq);
        if is_valid(&p, &vocab) != expected {
            return Err(format!("validator disagrees on {seq:?}"));
        }
        let prefix = validate_prefix(&p, &vocab).map_err(|e| e.to_string())?;
        if prefix.is_valid() != expected {
            return Err(format!("prefix validator disagrees on {seq:?}"));
        }
        match parse_to_tree(&p, &vocab) {
            Ok(tree) => {
                if !expected {
                    return Err(format!("{seq:?} parsed but is invalid"));
                }
                if tree.size() != seq.len() || serialize_tree(&tree, &vocab).ok() != Some(p) {
                    return Err(format!("{seq:?} does not round-trip"));
                }
                valid += 1;
            }
            Err(_) if expected => return Err(format!("{seq:?} failed to parse")),
            Err(_) => {}
        }
    }
    if valid != oracle.len() {
        return Err(format!("{valid} valid sequences, oracle has {}", oracle.len()));
    }
    Ok(valid)
}

/// Number of invalid or out-of-range programs among `n` simulated ones
/// per vocabulary.
pub fn simulation_failures(n: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for vocab in [five(), ProgramVocab::shapes()] {
        for _ in 0..n {
            let p = simulate_program(&vocab, &mut rng, MAX_PROGRAM_LEN).unwrap();
            if !is_valid(&p, &vocab) || !(2..=MAX_PROGRAM_LEN).contains(&p.len()) {
                bad += 1;
            }
        }
    }
    bad
}
