use std::time::Instant;

use revbrowse_core::corpus::synthetic::{generate, SyntheticSpec};
use revbrowse_core::corpus::{build_sequences, kcore_filter, leave_one_out_split, Corpus, InteractionSequence};
use revbrowse_core::extraction::cache::ExtractionCache;
use revbrowse_core::extraction::{extract_all_item_features, Extractor, MockChatClient};
use revbrowse_core::prefrag::train::{embed_samples, hit_at_1, train_adapter};
use revbrowse_core::prefrag::{build_contrastive_set, ContrastiveParams, FeatureStore, MockEmbedder, ProjectionAdapter, TrainConfig};

#[test]
fn trained_adapter_separates_planted_tastes() {
    let start = Instant::now();
    let synth = generate(&SyntheticSpec::default());
    let corpus = Corpus::new(kcore_filter(&synth.reviews, 5), synth.items);
    let client = MockChatClient;
    let cache = ExtractionCache::in_memory();
    let extractor = Extractor::new(&client, &cache);

    let train_seqs: Vec<InteractionSequence> = build_sequences(&corpus.reviews)
        .iter()
        .map(|s| {
            let split = leave_one_out_split(s).unwrap();
            InteractionSequence { user_id: s.user_id.clone(), events: split.train }
        })
        .collect();
    let reviews: Vec<_> = train_seqs
        .iter()
        .flat_map(|s| s.events.iter().map(|e| corpus.review(&e.review_id).unwrap()))
        .collect();
    let extracted = extract_all_item_features(&extractor, &corpus, &reviews, 4).unwrap();
    let mut store = FeatureStore::new();
    for f in extracted.features {
        let user = corpus.review(&f.review_id).unwrap().user_id.clone();
        store.insert(&user, f);
    }
    let prefs = |user: &str, ids: &[String]| {
        let rs: Vec<_> = ids.iter().map(|id| corpus.review(id).unwrap()).collect();
        extractor.preferences_for(&corpus, user, &rs)
    };
    let (samples, stats) = build_contrastive_set(&train_seqs, &store, &prefs, &ContrastiveParams::default()).unwrap();
    assert!(samples.len() > 150, "{stats:?}");
    let embedder = MockEmbedder::new(384);
    let cfg = TrainConfig::default();
    let groups = embed_samples(&samples, &embedder, 64).unwrap();
    let untrained = hit_at_1(&groups, &ProjectionAdapter::init(384, 384, cfg.seed, cfg.hyper).weights_f64()).unwrap();
    let out = train_adapter(&samples, &[], &embedder, &cfg).unwrap();
    let trained = hit_at_1(&groups, &out.adapter.weights_f64()).unwrap();
    assert!(start.elapsed().as_secs() < 60);
    assert!(out.trace.last().unwrap().train_loss < out.trace[0].train_loss);
    assert!(trained > 0.9, "trained hit@1 {trained}");
    assert!(untrained <= 0.6, "untrained hit@1 {untrained}");
}
