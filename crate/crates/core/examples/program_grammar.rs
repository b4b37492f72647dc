//! Samples programs from the grammar, parses them into trees and checks a
//! few hand-written sequences with the incremental validator.

use probnmn::grammar::{
    parse_to_tree, serialize_tree, simulate_program, validate_prefix, ProgramVocab, MAX_PROGRAM_LEN,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let vocab = ProgramVocab::shapes();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    println!("{} module tokens", vocab.len());
    for _ in 0..5 {
        let p = simulate_program(&vocab, &mut rng, MAX_PROGRAM_LEN).unwrap();
        let tree = parse_to_tree(&p, &vocab).unwrap();
        assert_eq!(serialize_tree(&tree, &vocab).unwrap(), p);
        println!("{:<55} {}", vocab.render(&p), tree.display(&vocab));
    }

    println!();
    for names in [
        vec!["answer", "find[red]"],
        vec!["answer", "and", "find[red]"],
        vec!["find[red]"],
        vec!["answer", "find[red]", "find[blue]"],
    ] {
        let p = vocab.parse_names(&names).unwrap();
        println!("{:<40} {:?}", names.join(" "), validate_prefix(&p, &vocab).unwrap());
    }
}
