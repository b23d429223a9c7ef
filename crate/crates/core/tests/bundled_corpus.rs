//! The bundled synthetic corpus must stay in sync with its generator.
//! Regenerate with `REVBROWSE_BLESS=1 cargo test -p revbrowse-core --test bundled_corpus`.

use std::path::PathBuf;

use revbrowse_core::corpus::synthetic::{generate, write_amazon, SyntheticSpec};
use revbrowse_core::corpus::{kcore_filter, parse_reviews};

fn fixture() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/corpus/synthetic_reviews.jsonl")
}

fn rendered() -> Vec<u8> {
    let c = generate(&SyntheticSpec::default());
    let mut buf = Vec::new();
    write_amazon(&mut buf, &c.reviews, &c.items).unwrap();
    buf
}

#[test]
fn bundled_corpus_matches_generator() {
    let fresh = rendered();
    if std::env::var_os("REVBROWSE_BLESS").is_some() {
        std::fs::write(fixture(), &fresh).unwrap();
    }
    let on_disk = std::fs::read(fixture()).expect("bundled corpus present");
    assert!(on_disk == fresh, "bundled corpus differs from the generator output");
}

#[test]
fn bundled_corpus_shape() {
    let parsed = parse_reviews(std::fs::File::open(fixture()).map(std::io::BufReader::new).unwrap()).unwrap();
    assert_eq!(parsed.skipped, 0);
    assert_eq!(parsed.items.len(), 60);
    let kept = kcore_filter(&parsed.reviews, 5);
    let users: std::collections::HashSet<&str> = kept.iter().map(|r| r.user_id.as_str()).collect();
    assert_eq!(users.len(), 200);
}
