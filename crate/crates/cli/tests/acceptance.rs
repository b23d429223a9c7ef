//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use revbrowse_core::corpus::synthetic::{generate, SyntheticSpec};
use revbrowse_core::corpus::{
    build_sequences, kcore_filter, leave_one_out_split, Corpus, InteractionSequence, Review,
};
use revbrowse_core::eval::metrics::{mrr_at_k, ndcg_at_k, recall_at_k};
use revbrowse_core::eval::UserOutcome;
use revbrowse_core::extraction::cache::ExtractionCache;
use revbrowse_core::extraction::prompt::{render_item_feature_prompt, render_user_pref_prompt, ReviewInput};
use revbrowse_core::extraction::{extract_all_item_features, Extractor, MockChatClient, UserPreferences};
use revbrowse_core::prefrag::contrastive::window_bounds;
use revbrowse_core::prefrag::index::FeatureMatrix;
use revbrowse_core::prefrag::loss::loss_and_grad;
use revbrowse_core::prefrag::train::{embed_samples, hit_at_1, train_adapter};
use revbrowse_core::prefrag::{
    build_contrastive_set, retrieve_topk, ContrastiveGroup, ContrastiveParams, ContrastiveSample, FeatureStore,
    MockEmbedder, ProjectionAdapter, Retrieved, TrainConfig,
};
use revbrowse_core::ranker::{render_recommendation_prompt, Ablation, Candidate, CandidateSlate};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn core_fixture(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures").join(rel)
}

fn random_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let d = rng.random_range(2..=16);
        let out = rng.random_range(2..=16);
        let b = rng.random_range(1..=4);
        let tau = rng.random_range(0.2..2.0);
        let batch: Vec<ContrastiveGroup> = (0..b)
            .map(|_| {
                let m = rng.random_range(1..=5);
                ContrastiveGroup {
                    query: random_vec(&mut rng, d),
                    positive: random_vec(&mut rng, d),
                    negatives: (0..m).map(|_| random_vec(&mut rng, d)).collect(),
                }
            })
            .collect();
        let w = Array2::from_shape_fn((out, d), |_| rng.random_range(-1.0..1.0));
        let analytic = loss_and_grad(&batch, &w, tau, true).map_err(|e| e.to_string())?.1.unwrap();
        let mut fd = Array2::<f64>::zeros(w.raw_dim());
        for idx in ndarray::indices(w.raw_dim()) {
            let mut plus = w.clone();
            plus[idx] += h;
            let mut minus = w.clone();
            minus[idx] -= h;
            let lp = loss_and_grad(&batch, &plus, tau, false).map_err(|e| e.to_string())?.0;
            let lm = loss_and_grad(&batch, &minus, tau, false).map_err(|e| e.to_string())?.0;
            fd[idx] = (lp - lm) / (2.0 * h);
        }
        let diff = (&analytic - &fd).mapv(|v| v * v).sum().sqrt();
        let scale = analytic.mapv(|v| v * v).sum().sqrt().max(fd.mapv(|v| v * v).sum().sqrt()).max(1e-12);
        worst = worst.max(diff / scale);
    }
    let elapsed = start.elapsed();
    ensure(worst < 1e-4, || format!("max relative error {worst:.3e}"))?;
    ensure(elapsed < Duration::from_secs(10), || format!("took {elapsed:?}"))?;
    Ok(format!("max relative error {worst:.2e} in {elapsed:.2?}"))
}

fn loss_anchors() -> Outcome {
    let id = Array2::<f64>::eye(4);
    let q = vec![0.4, -0.1, 0.7, 0.2];
    let a = vec![-0.3, 0.5, 0.1, 0.9];
    let mut worst: f64 = 0.0;
    for m in [1usize, 40] {
        let g = ContrastiveGroup {
            query: q.clone(),
            positive: a.clone(),
            negatives: vec![a.clone(); m],
        };
        let l = loss_and_grad(&[g], &id, 1.0, false).map_err(|e| e.to_string())?.0;
        let err = (l - (1.0 + m as f64).ln()).abs();
        ensure(err < 1e-9, || format!("m={m}: loss {l}"))?;
        worst = worst.max(err);
    }
    let g = ContrastiveGroup {
        query: q.clone(),
        positive: q.clone(),
        negatives: vec![q.iter().map(|v| -v).collect()],
    };
    let l = loss_and_grad(&[g], &id, 1.0, false).map_err(|e| e.to_string())?.0;
    let err = (l - (1.0 + (-2.0f64).exp()).ln()).abs();
    ensure(err < 1e-9, || format!("opposite pair: loss {l}"))?;
    Ok(format!("max abs error {:.1e}", worst.max(err)))
}

fn retrieval_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let grid = [-1.0f32, -0.5, -0.0, 0.0, 0.5, 1.0];
    for case in 0..1000 {
        let dim = rng.random_range(1..=16);
        let n = rng.random_range(0..=60);
        let tied = rng.random_bool(0.5);
        let draw = |rng: &mut ChaCha8Rng| {
            if tied {
                grid[rng.random_range(0..grid.len())]
            } else {
                rng.random_range(-1.0f32..1.0)
            }
        };
        let rows: Vec<f32> = (0..n * dim).map(|_| draw(&mut rng)).collect();
        let query: Vec<f32> = (0..dim).map(|_| draw(&mut rng)).collect();
        let texts: Vec<String> = (0..n).map(|i| format!("t{i}")).collect();
        let k = rng.random_range(0..=n + 3);

        let mut full: Vec<(f64, usize)> = (0..n)
            .map(|i| {
                let s: f64 = rows[i * dim..(i + 1) * dim]
                    .iter()
                    .zip(&query)
                    .map(|(&a, &b)| a as f64 * b as f64)
                    .sum();
                (s, i)
            })
            .collect();
        full.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let expected: Vec<usize> = full.iter().take(k).map(|&(_, i)| i).collect();

        let got: Vec<Retrieved> = retrieve_topk(&query, FeatureMatrix::new(dim, &rows, &texts), k);
        let got_rows: Vec<usize> = got.iter().map(|r| r.row).collect();
        ensure(got_rows == expected, || format!("case {case}: {got_rows:?} != {expected:?}"))?;
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(5), || format!("took {elapsed:?}"))?;
    Ok(format!("1000 instances in {elapsed:.2?}"))
}

fn metric_identities() -> Outcome {
    for r in 1..=50 {
        for k in [5, 10] {
            let (m, n, rc) = (mrr_at_k(Some(r), k), ndcg_at_k(Some(r), k), recall_at_k(Some(r), k));
            ensure(m <= n && n <= rc, || format!("r={r} k={k}: {m} {n} {rc}"))?;
        }
        ensure(
            mrr_at_k(Some(r), 5) <= mrr_at_k(Some(r), 10)
                && ndcg_at_k(Some(r), 5) <= ndcg_at_k(Some(r), 10)
                && recall_at_k(Some(r), 5) <= recall_at_k(Some(r), 10),
            || format!("r={r} not monotone in k"),
        )?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let ranks: Vec<Option<usize>> = (0..rng.random_range(1..40))
            .map(|_| rng.random_bool(0.9).then(|| rng.random_range(1..=50)))
            .collect();
        let mean = |f: fn(Option<usize>, usize) -> f64, k| ranks.iter().map(|&r| f(r, k)).sum::<f64>() / ranks.len() as f64;
        for k in [5, 10] {
            ensure(mean(mrr_at_k, k) <= mean(ndcg_at_k, k) && mean(ndcg_at_k, k) <= mean(recall_at_k, k), || {
                format!("means out of order at k={k}")
            })?;
        }
    }
    Ok("ranks 1..50, k in {5,10} and 200 fuzzed rank lists".into())
}

fn brute_force_core(reviews: &[Review], k: usize) -> BTreeSet<String> {
    let mut alive: Vec<&Review> = reviews.iter().collect();
    loop {
        let mut ud: BTreeMap<&str, usize> = BTreeMap::new();
        let mut id: BTreeMap<&str, usize> = BTreeMap::new();
        for r in &alive {
            *ud.entry(&r.user_id).or_default() += 1;
            *id.entry(&r.item_id).or_default() += 1;
        }
        let next: Vec<&Review> = alive
            .iter()
            .copied()
            .filter(|r| ud[r.user_id.as_str()] >= k && id[r.item_id.as_str()] >= k)
            .collect();
        if next.len() == alive.len() {
            return next.into_iter().map(|r| r.review_id.clone()).collect();
        }
        alive = next;
    }
}

fn kcore_fuzz() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut survivors = 0;
    for case in 0..50 {
        let users = rng.random_range(3..40);
        let items = rng.random_range(3..30);
        let density = rng.random_range(0.05..0.6);
        let mut reviews = Vec::new();
        for u in 0..users {
            for i in 0..items {
                if rng.random_bool(density) {
                    reviews.push(Review {
                        review_id: format!("r{}", reviews.len()),
                        user_id: format!("u{u}"),
                        item_id: format!("i{i}"),
                        rating: 4,
                        text: "ok".into(),
                        summary: None,
                        timestamp: reviews.len() as i64,
                        helpful_votes: 0,
                    });
                }
            }
        }
        let kept = kcore_filter(&reviews, 5);
        let mut ud: BTreeMap<&str, usize> = BTreeMap::new();
        let mut id: BTreeMap<&str, usize> = BTreeMap::new();
        for r in &kept {
            *ud.entry(&r.user_id).or_default() += 1;
            *id.entry(&r.item_id).or_default() += 1;
        }
        ensure(ud.values().chain(id.values()).all(|&d| d >= 5), || format!("case {case}: degree below 5"))?;
        let got: BTreeSet<String> = kept.iter().map(|r| r.review_id.clone()).collect();
        ensure(got == brute_force_core(&reviews, 5), || format!("case {case}: differs from oracle"))?;
        survivors += usize::from(!kept.is_empty());
    }
    Ok(format!("50 corpora, {survivors} with a non-empty core"))
}

struct Synthetic {
    corpus: Corpus,
    store: FeatureStore,
}

fn extract_synthetic(spec: &SyntheticSpec, seqs: impl Fn(&Corpus) -> Vec<InteractionSequence>) -> Result<(Synthetic, Vec<InteractionSequence>), String> {
    let synth = generate(spec);
    let corpus = Corpus::new(kcore_filter(&synth.reviews, 5), synth.items);
    let seqs = seqs(&corpus);
    let client = MockChatClient;
    let cache = ExtractionCache::in_memory();
    let extractor = Extractor::new(&client, &cache);
    let reviews: Vec<_> = seqs
        .iter()
        .flat_map(|s| s.events.iter().map(|e| corpus.review(&e.review_id).unwrap()))
        .collect();
    let extracted = extract_all_item_features(&extractor, &corpus, &reviews, 4).map_err(|e| e.to_string())?;
    let mut store = FeatureStore::new();
    for f in extracted.features {
        let user = corpus.review(&f.review_id).unwrap().user_id.clone();
        store.insert(&user, f);
    }
    Ok((Synthetic { corpus, store }, seqs))
}

fn build_samples(s: &Synthetic, seqs: &[InteractionSequence], params: &ContrastiveParams) -> Result<(Vec<ContrastiveSample>, usize), String> {
    let client = MockChatClient;
    let cache = ExtractionCache::in_memory();
    let extractor = Extractor::new(&client, &cache);
    let prefs = |user: &str, ids: &[String]| {
        let rs: Vec<_> = ids.iter().map(|id| s.corpus.review(id).unwrap()).collect();
        extractor.preferences_for(&s.corpus, user, &rs)
    };
    let (samples, stats) = build_contrastive_set(seqs, &s.store, &prefs, params).map_err(|e| e.to_string())?;
    Ok((samples, stats.windows))
}

fn positive_not_negative(samples: &[ContrastiveSample]) -> Result<(), String> {
    for s in samples {
        let pos = s.positive_text.trim().to_lowercase();
        ensure(
            !s.negative_review_ids.contains(&s.positive_review_id)
                && s.negative_texts.iter().all(|t| t.trim().to_lowercase() != pos),
            || format!("positive of {} / {} among negatives", s.user_id, s.item_id),
        )?;
    }
    Ok(())
}

fn contrastive_counts() -> Outcome {
    let params = ContrastiveParams::default();
    let mut detail = Vec::new();
    for n in [20usize, 25, 40] {
        ensure(window_bounds(n, 20, 1).len() == n - 20 + 1, || format!("window_bounds({n})"))?;
        let spec = SyntheticSpec {
            users: 30,
            min_len: n,
            max_len: n,
            ..SyntheticSpec::default()
        };
        let (synth, seqs) = extract_synthetic(&spec, |c| build_sequences(&c.reviews))?;
        let full: Vec<_> = seqs.into_iter().filter(|s| s.len() == n).collect();
        ensure(!full.is_empty(), || format!("no length-{n} sequences survived"))?;
        let (samples, windows) = build_samples(&synth, &full, &params)?;
        ensure(windows == full.len() * (n - 19), || {
            format!("n={n}: {windows} windows over {} sequences", full.len())
        })?;
        positive_not_negative(&samples)?;
        detail.push(format!("n={n}: {} windows/seq", n - 19));
    }

    let (synth, seqs) = extract_synthetic(&SyntheticSpec::default(), train_sequences)?;
    let (samples, _) = build_samples(&synth, &seqs, &params)?;
    positive_not_negative(&samples)?;
    detail.push(format!("{} bundled-corpus samples clean", samples.len()));
    Ok(detail.join(", "))
}

fn train_sequences(c: &Corpus) -> Vec<InteractionSequence> {
    build_sequences(&c.reviews)
        .iter()
        .map(|s| InteractionSequence {
            user_id: s.user_id.clone(),
            events: leave_one_out_split(s).unwrap().train,
        })
        .collect()
}

fn learning_signal() -> Outcome {
    let start = Instant::now();
    let (synth, seqs) = extract_synthetic(&SyntheticSpec::default(), train_sequences)?;
    let (samples, _) = build_samples(&synth, &seqs, &ContrastiveParams::default())?;
    let embedder = MockEmbedder::new(384);
    let cfg = TrainConfig::default();
    let groups = embed_samples(&samples, &embedder, 64).map_err(|e| e.to_string())?;
    let init = ProjectionAdapter::init(384, 384, cfg.seed, cfg.hyper);
    let untrained = hit_at_1(&groups, &init.weights_f64()).map_err(|e| e.to_string())?;
    let out = train_adapter(&samples, &[], &embedder, &cfg).map_err(|e| e.to_string())?;
    let trained = hit_at_1(&groups, &out.adapter.weights_f64()).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let detail = format!("hit@1 untrained {untrained:.3} -> trained {trained:.3} in {elapsed:.1?}");
    ensure(trained > 0.9 && untrained <= 0.6 && elapsed < Duration::from_secs(60), || detail.clone())?;
    Ok(detail)
}

fn golden_prompts() -> Outcome {
    let golden = |name: &str| std::fs::read_to_string(core_fixture(&format!("prompts/{name}"))).unwrap();
    let review = |title: &str, text: &str, rating| ReviewInput {
        item_id: "B000FIXTURE".into(),
        title: title.into(),
        text: text.into(),
        rating,
    };
    let user = render_user_pref_prompt(&[review(
        "Crunchy Peanut Butter Pretzels",
        "These are crunchy and fresh. Love them!",
        5,
    )]);
    ensure(user == golden("user_prompt_1.txt"), || "user preference prompt differs".into())?;
    let item = render_item_feature_prompt(&review(
        "Sea Salt Kettle Chips",
        "Too salty for me, but the \"crunch\" is great.",
        3,
    ));
    ensure(item == golden("item_prompt_1.txt"), || "item feature prompt differs".into())?;

    let phrases = |texts: &[&str]| -> Vec<Retrieved> {
        texts
            .iter()
            .enumerate()
            .map(|(row, t)| Retrieved { text: t.to_string(), score: 0.5, row })
            .collect()
    };
    let slate = CandidateSlate {
        candidates: vec![
            Candidate {
                item_id: "B001".into(),
                title: "Honey Roasted Almonds".into(),
                retrieved_pros: phrases(&["crunchy texture", "fresh taste"]),
                retrieved_cons: vec![],
            },
            Candidate {
                item_id: "B002".into(),
                title: "Spicy Ramen Bowl".into(),
                retrieved_pros: phrases(&["bold flavor"]),
                retrieved_cons: phrases(&["too salty", "small portion"]),
            },
        ],
    };
    let prefs = UserPreferences {
        user_id: "U1".into(),
        like: vec!["crunchy snacks".into(), "fresh ingredients".into()],
        dislike: vec!["overly salty food".into()],
        source_review_ids: vec![],
    };
    let history = vec!["Crunchy Peanut Butter Pretzels".to_string(), "Sea Salt Kettle Chips".to_string()];
    for (variant, file) in [
        (Ablation::Full, "rec_prompt_1.txt"),
        (Ablation::NoPref, "rec_prompt_1_no_pref.txt"),
        (Ablation::NoReviews, "rec_prompt_1_no_reviews.txt"),
        (Ablation::NoPrefNoReviews, "rec_prompt_1_no_pref_no_reviews.txt"),
    ] {
        let p = render_recommendation_prompt(&history, Some(&prefs), &slate, variant.flags());
        ensure(p == golden(file), || format!("{file} differs"))?;
    }
    Ok("user, item and 4 recommendation variants byte-equal".into())
}

/// Artifacts from one mock run of the CLI on the bundled corpus.
struct E2eRun {
    _dir: tempfile::TempDir,
    workdir: PathBuf,
    result: Outcome,
}

fn revbrowse(workdir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_revbrowse"))
        .args(args)
        .arg("--input")
        .arg(core_fixture("corpus/synthetic_reviews.jsonl"))
        .arg("--workdir")
        .arg(workdir)
        .env_remove("REVBROWSE_API_KEY")
        .env_remove("REVBROWSE_CONFIG")
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || {
        format!("`{}` exited {:?}: {}", args.join(" "), out.status.code(), String::from_utf8_lossy(&out.stderr))
    })
}

fn e2e_smoke() -> E2eRun {
    let dir = tempfile::tempdir().unwrap();
    let workdir = dir.path().join("artifacts");
    let result = (|| {
        let start = Instant::now();
        for cmd in ["ingest", "extract", "build-trainset", "train", "index"] {
            revbrowse(&workdir, &[cmd])?;
        }
        revbrowse(&workdir, &["evaluate", "--all-ablations"])?;
        let ranks = std::fs::read_to_string(workdir.join("reports/ranks.jsonl")).map_err(|e| e.to_string())?;
        let first: UserOutcome = serde_json::from_str(ranks.lines().next().ok_or("empty rank dump")?).map_err(|e| e.to_string())?;
        revbrowse(&workdir, &["recommend", &first.user_id])?;
        let elapsed = start.elapsed();
        ensure(elapsed < Duration::from_secs(60), || format!("seven commands took {elapsed:?}"))?;

        let index = workdir.join("index.bin");
        let before = std::fs::read(&index).map_err(|e| e.to_string())?;
        revbrowse(&workdir, &["index"])?;
        let after = std::fs::read(&index).map_err(|e| e.to_string())?;
        ensure(before == after, || "index rerun is not byte-identical".into())?;
        Ok(format!("seven commands in {elapsed:.1?}, index rerun identical"))
    })();
    E2eRun { _dir: dir, workdir, result }
}

fn metric_records(workdir: &Path) -> Result<Vec<Value>, String> {
    let text = std::fs::read_to_string(workdir.join("reports/metrics.jsonl")).map_err(|e| e.to_string())?;
    text.lines().map(|l| serde_json::from_str(l).map_err(|e| e.to_string())).collect()
}

fn metric_oracle(run: &E2eRun) -> Outcome {
    run.result.as_ref().map_err(|e| format!("no run: {e}"))?;
    let records = metric_records(&run.workdir)?;
    let ranks = std::fs::read_to_string(run.workdir.join("reports/ranks.jsonl")).map_err(|e| e.to_string())?;
    let outcomes: Vec<UserOutcome> = ranks
        .lines()
        .map(|l| serde_json::from_str(l).map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    let ranked: Vec<&UserOutcome> = outcomes.iter().filter(|o| o.skipped.is_none()).collect();
    let n = ranked.len() as f64;
    let mut worst: f64 = 0.0;
    let full: Vec<&Value> = records.iter().filter(|r| r["ablation"] == "FULL").collect();
    ensure(!full.is_empty(), || "no FULL records".into())?;
    for rec in full {
        let k = rec["k"].as_u64().unwrap() as usize;
        ensure(rec["user_count"].as_u64() == Some(ranked.len() as u64), || "user count mismatch".into())?;
        let (mut recall, mut ndcg, mut mrr) = (0.0, 0.0, 0.0);
        for o in &ranked {
            if let Some(r) = o.rank.filter(|&r| (1..=k).contains(&r)) {
                recall += 1.0;
                ndcg += 1.0 / ((r + 1) as f64).log2();
                mrr += 1.0 / r as f64;
            }
        }
        for (name, want) in [("recall", recall / n), ("ndcg", ndcg / n), ("mrr", mrr / n)] {
            let err = (rec[name].as_f64().unwrap() - want).abs();
            ensure(err <= 1e-12, || format!("{name}@{k} off by {err:e}"))?;
            worst = worst.max(err);
        }
    }
    Ok(format!("{} users, max abs error {worst:.1e}", ranked.len()))
}

fn ablation_direction(run: &E2eRun) -> Outcome {
    run.result.as_ref().map_err(|e| format!("no run: {e}"))?;
    let records = metric_records(&run.workdir)?;
    let ndcg5 = |variant: &str| {
        records
            .iter()
            .find(|r| r["ablation"] == variant && r["k"] == 5)
            .and_then(|r| r["ndcg"].as_f64())
            .ok_or_else(|| format!("no {variant} N@5"))
    };
    let (full, no_reviews) = (ndcg5("FULL")?, ndcg5("NO_REVIEWS")?);
    let detail = format!("FULL N@5 {full:.4} vs NO_REVIEWS {no_reviews:.4}");
    ensure(full >= no_reviews, || detail.clone())?;
    Ok(detail)
}

fn main() {
    let run = e2e_smoke();
    let results: Vec<(&str, Outcome)> = vec![
        ("gradient correctness", gradient_check()),
        ("loss anchors", loss_anchors()),
        ("retrieval oracle", retrieval_oracle()),
        ("metric oracle", metric_oracle(&run)),
        ("metric identities", metric_identities()),
        ("k-core guarantee", kcore_fuzz()),
        ("contrastive-set counts", contrastive_counts()),
        ("learning signal", learning_signal()),
        ("ablation direction", ablation_direction(&run)),
        ("end-to-end smoke", run.result.clone()),
        ("golden prompts", golden_prompts()),
    ];
    let mut failed = 0;
    for (name, r) in &results {
        match r {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    println!("{} of {} acceptance criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
