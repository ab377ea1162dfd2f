//! Writes the bundled synthetic fixtures:
//! `cargo run -p mtlab-cli --example make_fixtures -- crates/cli/tests/fixtures/synthetic`

use std::path::PathBuf;

use mtlab::synthetic::{generate, SyntheticConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = PathBuf::from(std::env::args().nth(1).ok_or("usage: make_fixtures OUT_DIR")?);
    let task = generate(&SyntheticConfig::default());
    for (dir, corpus) in [
        ("parent/train", &task.parent_train),
        ("parent/dev", &task.parent_dev),
        ("intermediate/train", &task.intermediate_train),
        ("intermediate/dev", &task.intermediate_dev),
        ("child/train", &task.child_train),
        ("child/dev", &task.child_dev),
        ("child/test", &task.child_test),
    ] {
        corpus.save_dir(&out.join(dir))?;
    }
    Ok(())
}
