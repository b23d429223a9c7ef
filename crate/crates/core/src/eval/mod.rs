//! Leave-one-out evaluation over candidate slates.

pub mod metrics;

use std::collections::HashSet;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::client::{Embedder, LogprobClient};
use crate::corpus::{Corpus, Review, SplitSpec};
use crate::extraction::{ExtractionError, Extractor, UserPreferences};
use crate::prefrag::index::{encode_user, FeatureIndex, UserVectors};
use crate::prefrag::{PrefragError, ProjectionAdapter};
use crate::ranker::{
    assemble_slate, inject_ground_truth, mock_score, render_recommendation_prompt, score_with_verbalizer,
    Ablation, CandidateProvider, CandidateSlate, CandidateStrategy, RankedResult, RankerError, TrainingPair,
};
use crate::ranker::verbalizer::label;
pub use metrics::{mrr_at_k, ndcg_at_k, recall_at_k};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no test users to evaluate")]
    EmptyTestSet,
    #[error(transparent)]
    Extraction(#[from] ExtractionError),
    #[error(transparent)]
    Prefrag(#[from] PrefragError),
    #[error(transparent)]
    Ranker(#[from] RankerError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Scoring back end.
#[derive(Clone, Copy)]
pub enum Scorer<'a> {
    Mock,
    Verbalizer(&'a dyn LogprobClient),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    Mock,
    Verbalizer,
}

/// Fitted pipeline pieces evaluation runs against.
pub struct EvalContext<'a> {
    pub corpus: &'a Corpus,
    pub splits: &'a [SplitSpec],
    pub index: &'a FeatureIndex,
    pub adapter: &'a ProjectionAdapter,
    pub embedder: &'a dyn Embedder,
    pub extractor: &'a Extractor<'a>,
    pub candidates: &'a CandidateProvider,
    pub scorer: Scorer<'a>,
    /// Fingerprint of the artifacts above.
    pub upstream: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub ks: Vec<usize>,
    pub top_k: usize,
    pub slate_size: usize,
    pub inject: bool,
    pub seed: u64,
    pub ablation: Ablation,
    /// Most recent reviews used to extract rank-time preferences.
    pub preference_reviews: usize,
    pub concurrency: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            ks: vec![5, 10],
            top_k: 2,
            slate_size: 20,
            inject: true,
            seed: 42,
            ablation: Ablation::Full,
            preference_reviews: 20,
            concurrency: 4,
        }
    }
}

/// Per-user outcome, also the rank dump record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserOutcome {
    pub user_id: String,
    pub ground_truth: String,
    /// 1-based rank of the held-out item; `None` when it was not slated.
    pub rank: Option<usize>,
    pub slate_size: usize,
    pub injected: bool,
    pub degraded: bool,
    /// Reason the user could not be evaluated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ks: Vec<usize>,
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
    pub mrr: Vec<f64>,
    /// Users that were ranked (including misses).
    pub user_count: usize,
    pub skipped_count: usize,
    /// Users whose held-out item was not on the slate.
    pub missed_count: usize,
    pub injected_count: usize,
    pub degraded: bool,
    pub strategy: CandidateStrategy,
    pub scorer: ScorerKind,
    pub top_k: usize,
    pub ablation: Ablation,
    pub slate_size: usize,
    pub inject: bool,
    pub seed: u64,
    pub fingerprint: String,
}

impl MetricsReport {
    fn from_outcomes(outcomes: &[UserOutcome], ctx: &EvalContext<'_>, settings: &EvalSettings) -> Self {
        let evaluated: Vec<&UserOutcome> = outcomes.iter().filter(|o| o.skipped.is_none()).collect();
        let n = evaluated.len().max(1) as f64;
        let mean = |f: fn(Option<usize>, usize) -> f64, k: usize| {
            evaluated.iter().map(|o| f(o.rank, k)).sum::<f64>() / n
        };
        let scorer = match ctx.scorer {
            Scorer::Mock => ScorerKind::Mock,
            Scorer::Verbalizer(_) => ScorerKind::Verbalizer,
        };
        MetricsReport {
            ks: settings.ks.clone(),
            recall: settings.ks.iter().map(|&k| mean(recall_at_k, k)).collect(),
            ndcg: settings.ks.iter().map(|&k| mean(ndcg_at_k, k)).collect(),
            mrr: settings.ks.iter().map(|&k| mean(mrr_at_k, k)).collect(),
            user_count: evaluated.len(),
            skipped_count: outcomes.len() - evaluated.len(),
            missed_count: evaluated.iter().filter(|o| o.rank.is_none()).count(),
            injected_count: evaluated.iter().filter(|o| o.injected).count(),
            degraded: evaluated.iter().any(|o| o.degraded),
            strategy: ctx.candidates.strategy(),
            scorer,
            top_k: settings.top_k,
            ablation: settings.ablation,
            slate_size: settings.slate_size,
            inject: settings.inject,
            seed: settings.seed,
            fingerprint: run_fingerprint(&ctx.upstream, ctx.candidates.strategy(), scorer, settings),
        }
    }

    pub fn skipped_fraction(&self) -> f64 {
        let total = self.user_count + self.skipped_count;
        if total == 0 {
            0.0
        } else {
            self.skipped_count as f64 / total as f64
        }
    }

    pub fn table(&self) -> String {
        let mut out = format!("{:>6} {:>8} {:>8} {:>8}\n", "k", "Recall", "NDCG", "MRR");
        for (i, k) in self.ks.iter().enumerate() {
            out.push_str(&format!(
                "{:>6} {:>8.4} {:>8.4} {:>8.4}\n",
                k, self.recall[i], self.ndcg[i], self.mrr[i]
            ));
        }
        out.push_str(&format!(
            "users {} | skipped {} | missed {} | injected {}{}\n",
            self.user_count,
            self.skipped_count,
            self.missed_count,
            self.injected_count,
            if self.degraded { " | DEGRADED scoring" } else { "" }
        ));
        out.push_str(&format!(
            "variant {} | K {} | strategy {:?} | fingerprint {}\n",
            self.ablation.as_str(),
            self.top_k,
            self.strategy,
            &self.fingerprint[..12.min(self.fingerprint.len())]
        ));
        out
    }

    /// One JSON record per k.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (i, k) in self.ks.iter().enumerate() {
            let rec = serde_json::json!({
                "k": k,
                "recall": self.recall[i],
                "ndcg": self.ndcg[i],
                "mrr": self.mrr[i],
                "user_count": self.user_count,
                "skipped_count": self.skipped_count,
                "missed_count": self.missed_count,
                "injected_count": self.injected_count,
                "degraded": self.degraded,
                "ablation": self.ablation,
                "top_k": self.top_k,
                "strategy": self.strategy,
                "scorer": self.scorer,
                "seed": self.seed,
                "fingerprint": self.fingerprint,
            });
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        w.flush()
    }
}

fn run_fingerprint(upstream: &str, strategy: CandidateStrategy, scorer: ScorerKind, s: &EvalSettings) -> String {
    let mut h = Sha256::new();
    h.update(upstream.as_bytes());
    h.update(serde_json::to_vec(&(strategy, scorer, s)).expect("settings serialize"));
    hex::encode(h.finalize())
}

pub fn write_rank_dump<W: Write>(mut w: W, outcomes: &[UserOutcome]) -> std::io::Result<()> {
    for o in outcomes {
        serde_json::to_writer(&mut w, o)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

/// Latest `limit` reviews of a user's test history.
pub fn rank_time_reviews<'c>(corpus: &'c Corpus, split: &SplitSpec, limit: usize) -> Vec<&'c Review> {
    let history = split.test_history();
    let start = history.len().saturating_sub(limit);
    history[start..]
        .iter()
        .filter_map(|e| corpus.review(&e.review_id))
        .collect()
}

/// Slate and prompt of one user, before scoring.
pub struct PreparedUser {
    pub prefs: Option<UserPreferences>,
    pub slate: CandidateSlate,
    pub prompt: String,
    pub injected: bool,
}

/// Everything the ranker produced for one user.
pub struct UserRanking {
    pub prefs: Option<UserPreferences>,
    pub slate: CandidateSlate,
    pub prompt: String,
    pub result: RankedResult,
    pub injected: bool,
}

/// Build the slate of one user and render its prompt.
pub fn prepare_user(
    ctx: &EvalContext<'_>,
    settings: &EvalSettings,
    split: &SplitSpec,
) -> Result<PreparedUser, EvalError> {
    let history = split.test_history();
    let seen: HashSet<&str> = history.iter().map(|e| e.item_id.as_str()).collect();
    let mut ids = ctx.candidates.provide(&split.user_id, &seen, settings.slate_size)?;
    let injected = settings.inject
        && inject_ground_truth(&mut ids, &split.test.item_id, settings.slate_size, settings.seed, &split.user_id);

    let reviews = rank_time_reviews(ctx.corpus, split, settings.preference_reviews);
    let prefs = ctx.extractor.preferences_for(ctx.corpus, &split.user_id, &reviews)?;
    let flags = settings.ablation.flags();
    let vectors = match (&prefs, flags.features) {
        (Some(p), true) => encode_user(p, ctx.embedder, ctx.adapter)?,
        _ => UserVectors::default(),
    };
    let slate = assemble_slate(&ids, ctx.corpus, ctx.index, &vectors, settings.top_k)?;
    let titles: Vec<String> = history.iter().map(|e| ctx.corpus.title(&e.item_id).to_string()).collect();
    let prompt = render_recommendation_prompt(&titles, prefs.as_ref(), &slate, flags);
    Ok(PreparedUser {
        prefs,
        slate,
        prompt,
        injected,
    })
}

/// Build, render and score the slate of one user.
pub fn rank_user(
    ctx: &EvalContext<'_>,
    settings: &EvalSettings,
    split: &SplitSpec,
) -> Result<UserRanking, EvalError> {
    let p = prepare_user(ctx, settings, split)?;
    let result = match ctx.scorer {
        Scorer::Mock => mock_score(&p.slate),
        Scorer::Verbalizer(client) => score_with_verbalizer(client, &p.prompt, &p.slate)?,
    };
    let result = result.with_ground_truth(p.slate.position(&split.test.item_id));
    Ok(UserRanking {
        prefs: p.prefs,
        slate: p.slate,
        prompt: p.prompt,
        result,
        injected: p.injected,
    })
}

/// Prompt/label pairs for training a recommender elsewhere. The target is
/// each user's validation item, ranked from the events before it, so test
/// items never appear as labels. Users whose target is not on the slate are
/// left out.
pub fn training_pairs(ctx: &EvalContext<'_>, settings: &EvalSettings) -> Result<Vec<TrainingPair>, EvalError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(settings.concurrency.max(1))
        .build()
        .map_err(|e| EvalError::Io(std::io::Error::other(e)))?;
    let pairs: Vec<Option<TrainingPair>> = pool.install(|| {
        ctx.splits
            .par_iter()
            .map(|s| {
                let (last, earlier) = s.train.split_last().expect("train split is nonempty");
                let shifted = SplitSpec {
                    user_id: s.user_id.clone(),
                    train: earlier.to_vec(),
                    validation: last.clone(),
                    test: s.validation.clone(),
                };
                match prepare_user(ctx, settings, &shifted) {
                    Ok(p) => Ok(p.slate.position(&shifted.test.item_id).map(|pos| TrainingPair {
                        prompt: p.prompt,
                        label: label(pos),
                    })),
                    Err(EvalError::Ranker(RankerError::MissingUser(_) | RankerError::SlateSize(_))) => Ok(None),
                    Err(e) => Err(e),
                }
            })
            .collect::<Result<Vec<_>, EvalError>>()
    })?;
    Ok(pairs.into_iter().flatten().collect())
}

pub fn write_training_pairs<W: Write>(mut w: W, pairs: &[TrainingPair]) -> std::io::Result<()> {
    for p in pairs {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

fn outcome(ctx: &EvalContext<'_>, settings: &EvalSettings, split: &SplitSpec) -> Result<UserOutcome, EvalError> {
    let mut out = UserOutcome {
        user_id: split.user_id.clone(),
        ground_truth: split.test.item_id.clone(),
        rank: None,
        slate_size: 0,
        injected: false,
        degraded: false,
        skipped: None,
    };
    match rank_user(ctx, settings, split) {
        Ok(r) => {
            out.rank = r.result.rank_of_ground_truth;
            out.slate_size = r.slate.len();
            out.injected = r.injected;
            out.degraded = r.result.degraded;
        }
        Err(EvalError::Ranker(e @ (RankerError::MissingUser(_) | RankerError::SlateSize(_)))) => {
            out.skipped = Some(e.to_string());
        }
        Err(e) => return Err(e),
    }
    Ok(out)
}

/// Rank every test user and aggregate metrics. Users are processed in
/// parallel and reduced in input order, so the report does not depend on
/// thread scheduling.
pub fn evaluate(
    ctx: &EvalContext<'_>,
    settings: &EvalSettings,
) -> Result<(MetricsReport, Vec<UserOutcome>), EvalError> {
    if ctx.splits.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(settings.concurrency.max(1))
        .build()
        .map_err(|e| EvalError::Io(std::io::Error::other(e)))?;
    let outcomes: Vec<UserOutcome> = pool.install(|| {
        ctx.splits
            .par_iter()
            .map(|s| outcome(ctx, settings, s))
            .collect::<Result<Vec<_>, _>>()
    })?;
    Ok((MetricsReport::from_outcomes(&outcomes, ctx, settings), outcomes))
}

pub fn run_ablation(
    ctx: &EvalContext<'_>,
    settings: &EvalSettings,
    variant: Ablation,
) -> Result<(MetricsReport, Vec<UserOutcome>), EvalError> {
    let settings = EvalSettings {
        ablation: variant,
        ..settings.clone()
    };
    evaluate(ctx, &settings)
}

/// One evaluation per retrieval depth, same seeds throughout.
pub fn run_topk_sweep(
    ctx: &EvalContext<'_>,
    settings: &EvalSettings,
    top_ks: &[usize],
) -> Result<Vec<MetricsReport>, EvalError> {
    top_ks
        .iter()
        .map(|&k| {
            let settings = EvalSettings {
                top_k: k,
                ..settings.clone()
            };
            evaluate(ctx, &settings).map(|(r, _)| r)
        })
        .collect()
}
