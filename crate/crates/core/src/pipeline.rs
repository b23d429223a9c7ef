//! Pipeline stages and their on-disk artifacts.
//!
//! Every artifact records a fingerprint that hashes the fingerprint of the
//! artifact it was built from plus the configuration the stage reads. A stage
//! recomputes the expected fingerprint of each input and refuses to run on a
//! mismatch unless forced.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::client::{ChatClient, ClientError, Embedder, LogprobClient};
use crate::config::{fingerprint_of, ConfigError, PipelineConfig};
use crate::corpus::{
    build_sequences, kcore_filter, leave_one_out_split, parse_reviews, write_canonical, Corpus, CorpusError,
    CorpusStats, InteractionSequence, Review, SplitSpec,
};
use crate::eval::{
    evaluate, run_ablation, run_topk_sweep, training_pairs, write_rank_dump, write_training_pairs, EvalContext,
    EvalError, EvalSettings, MetricsReport, Scorer, UserRanking,
};
use crate::extraction::cache::ExtractionCache;
use crate::extraction::prompt::TEMPLATE_VERSION;
use crate::extraction::{extract_all_item_features, ExtractionError, Extractor, ItemFeatures, MockChatClient};
use crate::http::{HttpChatClient, HttpEmbedder, HttpLogprobClient, HttpSettings, API_KEY_ENV};
use crate::prefrag::train::EpochRecord;
use crate::prefrag::{
    build_contrastive_set, train_adapter, ContrastiveParams, ContrastiveSample, FeatureIndex, FeatureStore,
    MockEmbedder, PrefragError, ProjectionAdapter, TrainConfig,
};
use crate::ranker::{letter, Ablation, CandidateProvider, CandidateStrategy, RankerError, ReplayClient};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Ingest,
    Extract,
    BuildTrainset,
    Train,
    Index,
    Recommend,
    Evaluate,
}

impl Stage {
    pub fn command(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Extract => "extract",
            Stage::BuildTrainset => "build-trainset",
            Stage::Train => "train",
            Stage::Index => "index",
            Stage::Recommend => "recommend",
            Stage::Evaluate => "evaluate",
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("missing artifact {}; run `revbrowse {}` first", path.display(), producer.command())]
    Missing { path: PathBuf, producer: Stage },
    #[error("input file {} not found", .0.display())]
    MissingInput(PathBuf),
    #[error(
        "stale artifact {}: fingerprint {found} does not match the current configuration and inputs ({expected}); rerun `revbrowse {}` or pass --force",
        path.display(), producer.command()
    )]
    Stale {
        path: PathBuf,
        producer: Stage,
        expected: String,
        found: String,
    },
    #[error("remote client failure: {0}")]
    Client(String),
    #[error("{0}")]
    Validation(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl PipelineError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Missing { .. } | PipelineError::MissingInput(_) | PipelineError::Stale { .. } => 2,
            PipelineError::Client(_) => 3,
            PipelineError::Io { .. } => 2,
            _ => 4,
        }
    }
}

impl From<ClientError> for PipelineError {
    fn from(e: ClientError) -> Self {
        PipelineError::Client(e.to_string())
    }
}

impl From<ExtractionError> for PipelineError {
    fn from(e: ExtractionError) -> Self {
        match e {
            ExtractionError::Cache(source) => PipelineError::Io {
                path: PathBuf::from("extraction cache"),
                source,
            },
            other => PipelineError::Client(other.to_string()),
        }
    }
}

impl From<PrefragError> for PipelineError {
    fn from(e: PrefragError) -> Self {
        match e {
            PrefragError::Client(c) => c.into(),
            other => PipelineError::Validation(other.to_string()),
        }
    }
}

impl From<RankerError> for PipelineError {
    fn from(e: RankerError) -> Self {
        match e {
            RankerError::Client(c) => c.into(),
            RankerError::Capability => PipelineError::Client(e.to_string()),
            other => PipelineError::Validation(other.to_string()),
        }
    }
}

impl From<EvalError> for PipelineError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Extraction(x) => x.into(),
            EvalError::Prefrag(x) => x.into(),
            EvalError::Ranker(x) => x.into(),
            EvalError::EmptyTestSet => PipelineError::Validation(e.to_string()),
            EvalError::Io(source) => PipelineError::Io {
                path: PathBuf::from("evaluation"),
                source,
            },
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Write through a temporary sibling and rename, so readers never see a
/// partial artifact.
fn write_atomic<F>(path: &Path, body: F) -> Result<(), PipelineError>
where
    F: FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
{
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let file = File::create(&tmp).map_err(io_err(&tmp))?;
    let mut w = BufWriter::new(file);
    body(&mut w).and_then(|_| w.flush()).map_err(io_err(&tmp))?;
    drop(w);
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

/// First line of a line-delimited artifact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Header {
    #[serde(rename = "_artifact")]
    pub artifact: String,
    pub fingerprint: String,
    #[serde(default)]
    pub meta: Value,
}

fn write_header<W: Write>(w: &mut W, artifact: &str, fingerprint: &str, meta: Value) -> std::io::Result<()> {
    let h = Header {
        artifact: artifact.into(),
        fingerprint: fingerprint.into(),
        meta,
    };
    serde_json::to_writer(&mut *w, &h)?;
    w.write_all(b"\n")
}

fn write_lines<W: Write, T: Serialize>(w: &mut W, rows: impl IntoIterator<Item = T>) -> std::io::Result<()> {
    for r in rows {
        serde_json::to_writer(&mut *w, &r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

fn open_artifact(path: &Path, producer: Stage) -> Result<BufReader<File>, PipelineError> {
    match File::open(path) {
        Ok(f) => Ok(BufReader::new(f)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(PipelineError::Missing {
            path: path.to_path_buf(),
            producer,
        }),
        Err(source) => Err(PipelineError::Io {
            path: path.to_path_buf(),
            source,
        }),
    }
}

fn read_header<R: BufRead>(r: &mut R, path: &Path, artifact: &str) -> Result<Header, PipelineError> {
    let mut first = String::new();
    r.read_line(&mut first).map_err(io_err(path))?;
    let h: Header = serde_json::from_str(first.trim())
        .map_err(|e| PipelineError::Validation(format!("{}: bad artifact header: {e}", path.display())))?;
    if h.artifact != artifact {
        return Err(PipelineError::Validation(format!(
            "{}: expected a {artifact} artifact, found {}",
            path.display(),
            h.artifact
        )));
    }
    Ok(h)
}

fn read_rows<R: BufRead, T: for<'de> Deserialize<'de>>(r: R, path: &Path) -> Result<Vec<T>, PipelineError> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| {
            PipelineError::Validation(format!("{} line {}: {e}", path.display(), n + 2))
        })?);
    }
    Ok(out)
}

/// Accept `found` if it equals `expected` or the run is forced.
fn check(path: &Path, producer: Stage, expected: &str, found: &str, force: bool) -> Result<(), PipelineError> {
    if expected == found {
        return Ok(());
    }
    if force {
        log::warn!("{} is stale; continuing because of --force", path.display());
        return Ok(());
    }
    Err(PipelineError::Stale {
        path: path.to_path_buf(),
        producer,
        expected: expected.into(),
        found: found.into(),
    })
}

fn sha256_file(path: &Path) -> Result<String, PipelineError> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => PipelineError::MissingInput(path.to_path_buf()),
        _ => PipelineError::Io {
            path: path.to_path_buf(),
            source: e,
        },
    })?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn json_str<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("value serializes")
}

/// Model clients selected by the mode switches.
pub struct Clients {
    pub chat: Box<dyn ChatClient>,
    pub embedder: Box<dyn Embedder>,
    /// `None` selects the offline scorer.
    pub scorer: Option<Box<dyn LogprobClient>>,
}

impl Clients {
    pub fn from_config(cfg: &PipelineConfig) -> Result<Self, PipelineError> {
        let c = &cfg.client;
        let http = || {
            let mut s = HttpSettings::new(c.base_url.clone());
            s.max_attempts = c.max_retries;
            s.timeout = Duration::from_secs(c.timeout_secs);
            s.requests_per_second = c.requests_per_second;
            s
        };
        let needs_key = !cfg.mock_extraction() || !cfg.mock_embedding() || (!cfg.mock_scoring() && cfg.paths.replay.is_none());
        if needs_key && http().api_key.is_none() {
            log::warn!("{API_KEY_ENV} is not set; remote requests are sent without credentials");
        }
        let chat: Box<dyn ChatClient> = if cfg.mock_extraction() {
            Box::new(MockChatClient)
        } else {
            Box::new(HttpChatClient::new(http(), c.chat_model.clone()))
        };
        let embedder: Box<dyn Embedder> = if cfg.mock_embedding() {
            Box::new(MockEmbedder::new(c.embedding_dim))
        } else {
            Box::new(HttpEmbedder::new(http(), c.embedding_model.clone(), c.embedding_dim))
        };
        let scorer: Option<Box<dyn LogprobClient>> = if cfg.mock_scoring() {
            None
        } else if let Some(path) = &cfg.paths.replay {
            Some(Box::new(ReplayClient::open(path)?))
        } else {
            Some(Box::new(HttpLogprobClient::new(http(), c.completion_model.clone())))
        };
        Ok(Clients { chat, embedder, scorer })
    }
}

/// Loaded corpus plus derived sequences and splits.
pub struct CorpusArtifact {
    pub corpus: Corpus,
    pub fingerprint: String,
    pub splits: Vec<SplitSpec>,
    /// Users with too few events to split.
    pub unsplittable: usize,
}

impl CorpusArtifact {
    /// Reviews before each user's test event; everything for users that
    /// cannot be split.
    pub fn non_test_reviews(&self) -> Vec<&Review> {
        let test: HashSet<&str> = self.splits.iter().map(|s| s.test.review_id.as_str()).collect();
        self.corpus
            .reviews
            .iter()
            .filter(|r| !test.contains(r.review_id.as_str()))
            .collect()
    }

    /// Training-event sequences, one per split user.
    pub fn train_sequences(&self) -> Vec<InteractionSequence> {
        self.splits
            .iter()
            .map(|s| InteractionSequence {
                user_id: s.user_id.clone(),
                events: s.train.clone(),
            })
            .collect()
    }

    /// Train followed by validation events, one per split user.
    pub fn history_sequences(&self) -> Vec<InteractionSequence> {
        self.splits
            .iter()
            .map(|s| InteractionSequence {
                user_id: s.user_id.clone(),
                events: s.test_history(),
            })
            .collect()
    }

    pub fn split(&self, user_id: &str) -> Option<&SplitSpec> {
        self.splits.iter().find(|s| s.user_id == user_id)
    }
}

fn corpus_fingerprint(input_sha: &str, cfg: &PipelineConfig) -> String {
    fingerprint_of(&["corpus", input_sha, &json_str(&cfg.corpus)])
}

fn features_fingerprint(upstream: &str, chat: &dyn ChatClient) -> String {
    fingerprint_of(&["features", upstream, TEMPLATE_VERSION, chat.model_id()])
}

fn trainset_params(cfg: &PipelineConfig) -> ContrastiveParams {
    let p = &cfg.prefrag;
    ContrastiveParams {
        window: p.window,
        negatives: p.negatives,
        stride: p.stride,
        pad_negatives: p.pad_negatives,
        seed: p.seed,
        last_window_only: false,
    }
}

fn trainset_fingerprint(upstream: &str, cfg: &PipelineConfig) -> String {
    fingerprint_of(&["trainset", upstream, &json_str(&trainset_params(cfg))])
}

fn train_config(cfg: &PipelineConfig) -> TrainConfig {
    let p = &cfg.prefrag;
    TrainConfig {
        hyper: crate::prefrag::adapter::AdapterHyper {
            step_size: p.step_size,
            epochs: p.epochs,
            batch_size: p.batch_size,
            tau: p.tau,
            init_noise: p.init_noise,
        },
        out_dim: p.out_dim,
        seed: p.seed,
        ..TrainConfig::default()
    }
}

fn adapter_fingerprint(upstream: &str, cfg: &PipelineConfig, embedder: &dyn Embedder) -> String {
    let tc = train_config(cfg);
    fingerprint_of(&[
        "adapter",
        upstream,
        embedder.model_id(),
        &embedder.dim().to_string(),
        &json_str(&(tc.hyper, tc.out_dim, tc.seed)),
    ])
}

fn index_fingerprint(upstream: &str) -> String {
    fingerprint_of(&["index", upstream])
}

/// Handle to a configured pipeline.
pub struct Pipeline {
    pub cfg: PipelineConfig,
    pub clients: Clients,
    /// Proceed past stale upstream artifacts.
    pub force: bool,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, force: bool) -> Result<Self, PipelineError> {
        cfg.validate()?;
        let clients = Clients::from_config(&cfg)?;
        Ok(Pipeline { cfg, clients, force })
    }

    pub fn with_clients(cfg: PipelineConfig, clients: Clients, force: bool) -> Result<Self, PipelineError> {
        cfg.validate()?;
        Ok(Pipeline { cfg, clients, force })
    }

    fn cache(&self) -> Result<ExtractionCache, PipelineError> {
        let path = self.cfg.paths.cache();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        ExtractionCache::open(&path).map_err(io_err(&path))
    }

    fn extractor<'a>(&'a self, cache: &'a ExtractionCache) -> Extractor<'a> {
        Extractor::new(self.clients.chat.as_ref(), cache).with_max_retries(self.cfg.client.max_retries)
    }

    /// Parse, filter and write the canonical corpus.
    pub fn ingest(&self) -> Result<String, PipelineError> {
        let input = &self.cfg.paths.input;
        let input_sha = sha256_file(input)?;
        let file = File::open(input).map_err(io_err(input))?;
        let parsed = parse_reviews(BufReader::new(file))?;
        let kept = kcore_filter(&parsed.reviews, self.cfg.corpus.kcore);
        if kept.is_empty() {
            return Err(PipelineError::Validation(format!(
                "no reviews survive {}-core filtering of {} input reviews",
                self.cfg.corpus.kcore,
                parsed.reviews.len()
            )));
        }
        let corpus = Corpus::new(kept, parsed.items);
        let stats = CorpusStats::compute(&corpus.reviews);
        let fp = corpus_fingerprint(&input_sha, &self.cfg);
        let meta = json!({
            "input_sha256": input_sha,
            "kcore": self.cfg.corpus.kcore,
            "parsed_reviews": parsed.reviews.len(),
            "malformed_lines": parsed.skipped,
            "empty_text": corpus.reviews.iter().filter(|r| r.has_empty_text()).count(),
            "stats": stats,
        });
        let path = self.cfg.paths.corpus();
        write_atomic(&path, |w| {
            write_header(w, "corpus", &fp, meta)?;
            write_canonical(w, &corpus.reviews, &corpus.items)
        })?;
        let stats_path = self.cfg.paths.workdir.join("corpus_stats.txt");
        write_atomic(&stats_path, |w| w.write_all(stats.table().as_bytes()))?;
        Ok(format!(
            "parsed {} reviews ({} malformed lines skipped); kept {} after {}-core\n{}wrote {}",
            parsed.reviews.len(),
            parsed.skipped,
            corpus.reviews.len(),
            self.cfg.corpus.kcore,
            stats.table(),
            path.display()
        ))
    }

    /// Load the canonical corpus and check it against the configuration and
    /// the current input file.
    pub fn load_corpus(&self) -> Result<CorpusArtifact, PipelineError> {
        let path = self.cfg.paths.corpus();
        let mut r = open_artifact(&path, Stage::Ingest)?;
        let header = read_header(&mut r, &path, "corpus")?;
        let recorded = header.meta["input_sha256"].as_str().unwrap_or_default().to_string();
        let input_sha = match sha256_file(&self.cfg.paths.input) {
            Ok(sha) => sha,
            Err(PipelineError::MissingInput(_)) => recorded,
            Err(e) => return Err(e),
        };
        check(&path, Stage::Ingest, &corpus_fingerprint(&input_sha, &self.cfg), &header.fingerprint, self.force)?;
        let parsed = parse_reviews(r)?;
        let corpus = Corpus::new(parsed.reviews, parsed.items);
        let mut splits = Vec::new();
        let mut unsplittable = 0;
        for seq in build_sequences(&corpus.reviews) {
            match leave_one_out_split(&seq) {
                Ok(s) => splits.push(s),
                Err(_) => unsplittable += 1,
            }
        }
        Ok(CorpusArtifact {
            corpus,
            fingerprint: header.fingerprint,
            splits,
            unsplittable,
        })
    }

    /// Extract item features from every non-test review.
    pub fn extract(&self) -> Result<String, PipelineError> {
        let ca = self.load_corpus()?;
        let cache = self.cache()?;
        let extractor = self.extractor(&cache);
        let reviews = ca.non_test_reviews();
        let out = extract_all_item_features(&extractor, &ca.corpus, &reviews, self.cfg.client.concurrency)?;
        for (rid, raw) in &out.failed {
            log::warn!("feature extraction failed for review {rid}; last response {raw:?}");
        }
        let fp = features_fingerprint(&ca.fingerprint, self.clients.chat.as_ref());
        let path = self.cfg.paths.features();
        let rows: Vec<FeatureRecord> = out
            .features
            .iter()
            .map(|f| FeatureRecord {
                user_id: ca.corpus.review(&f.review_id).map(|r| r.user_id.clone()).unwrap_or_default(),
                features: f.clone(),
            })
            .collect();
        let meta = json!({
            "reviews": reviews.len(),
            "extracted": rows.len(),
            "dropped": out.dropped,
            "failed": out.failed.len(),
            "model": self.clients.chat.model_id(),
        });
        write_atomic(&path, |w| {
            write_header(w, "features", &fp, meta)?;
            write_lines(w, &rows)
        })?;
        Ok(format!(
            "extracted features for {} of {} reviews ({} empty, {} failed); wrote {}",
            rows.len(),
            reviews.len(),
            out.dropped,
            out.failed.len(),
            path.display()
        ))
    }

    pub fn load_features(&self, ca: &CorpusArtifact) -> Result<(FeatureStore, Vec<ItemFeatures>, String), PipelineError> {
        let path = self.cfg.paths.features();
        let mut r = open_artifact(&path, Stage::Extract)?;
        let header = read_header(&mut r, &path, "features")?;
        let expected = features_fingerprint(&ca.fingerprint, self.clients.chat.as_ref());
        check(&path, Stage::Extract, &expected, &header.fingerprint, self.force)?;
        let rows: Vec<FeatureRecord> = read_rows(r, &path)?;
        let mut store = FeatureStore::new();
        let mut list = Vec::with_capacity(rows.len());
        for row in rows {
            list.push(row.features.clone());
            store.insert(&row.user_id, row.features);
        }
        Ok((store, list, header.fingerprint))
    }

    /// Windowed contrastive samples: training windows end at training
    /// events; each user's validation sample is the window ending at the
    /// validation event.
    pub fn build_trainset(&self) -> Result<String, PipelineError> {
        let ca = self.load_corpus()?;
        let (store, _, features_fp) = self.load_features(&ca)?;
        let cache = self.cache()?;
        let extractor = self.extractor(&cache);
        let prefs = |user: &str, ids: &[String]| {
            let reviews: Vec<&Review> = ids.iter().filter_map(|id| ca.corpus.review(id)).collect();
            extractor.preferences_for(&ca.corpus, user, &reviews)
        };
        let params = trainset_params(&self.cfg);
        let (train, train_stats) = build_contrastive_set(&ca.train_sequences(), &store, &prefs, &params)?;
        let val_params = ContrastiveParams {
            last_window_only: true,
            ..params
        };
        let (val, val_stats) = build_contrastive_set(&ca.history_sequences(), &store, &prefs, &val_params)?;
        if train.is_empty() {
            return Err(PipelineError::Validation(format!(
                "no contrastive training samples could be built ({train_stats:?})"
            )));
        }
        let fp = trainset_fingerprint(&features_fp, &self.cfg);
        let path = self.cfg.paths.trainset();
        let meta = json!({ "train": train_stats, "validation": val_stats, "params": params });
        let rows = train
            .iter()
            .map(|s| SampleRecord { split: SampleSplit::Train, sample: s })
            .chain(val.iter().map(|s| SampleRecord { split: SampleSplit::Validation, sample: s }));
        write_atomic(&path, |w| {
            write_header(w, "trainset", &fp, meta)?;
            write_lines(w, rows)
        })?;
        Ok(format!(
            "{} training samples from {} windows, {} validation samples; wrote {}",
            train.len(),
            train_stats.windows,
            val.len(),
            path.display()
        ))
    }

    pub fn load_trainset(
        &self,
        features_fp: &str,
    ) -> Result<(Vec<ContrastiveSample>, Vec<ContrastiveSample>, String), PipelineError> {
        let path = self.cfg.paths.trainset();
        let mut r = open_artifact(&path, Stage::BuildTrainset)?;
        let header = read_header(&mut r, &path, "trainset")?;
        check(
            &path,
            Stage::BuildTrainset,
            &trainset_fingerprint(features_fp, &self.cfg),
            &header.fingerprint,
            self.force,
        )?;
        let rows: Vec<OwnedSampleRecord> = read_rows(r, &path)?;
        let (mut train, mut val) = (Vec::new(), Vec::new());
        for row in rows {
            match row.split {
                SampleSplit::Train => train.push(row.sample),
                SampleSplit::Validation => val.push(row.sample),
            }
        }
        Ok((train, val, header.fingerprint))
    }

    fn trainset_fp_only(&self, features_fp: &str) -> Result<String, PipelineError> {
        let path = self.cfg.paths.trainset();
        let mut r = open_artifact(&path, Stage::BuildTrainset)?;
        let header = read_header(&mut r, &path, "trainset")?;
        check(
            &path,
            Stage::BuildTrainset,
            &trainset_fingerprint(features_fp, &self.cfg),
            &header.fingerprint,
            self.force,
        )?;
        Ok(header.fingerprint)
    }

    /// Fit the projection adapter and write it with its epoch trace.
    pub fn train(&self) -> Result<String, PipelineError> {
        let ca = self.load_corpus()?;
        let (_, _, features_fp) = self.load_features(&ca)?;
        let (train, val, trainset_fp) = self.load_trainset(&features_fp)?;
        let outcome = train_adapter(&train, &val, self.clients.embedder.as_ref(), &train_config(&self.cfg))?;
        let fp = adapter_fingerprint(&trainset_fp, &self.cfg, self.clients.embedder.as_ref());
        let path = self.cfg.paths.adapter();
        write_atomic(&path, |w| outcome.adapter.write_to(w, &fp))?;
        let trace_path = self.cfg.paths.train_trace();
        write_atomic(&trace_path, |w| {
            write_header(w, "train_trace", &fp, json!({ "best_epoch": outcome.best_epoch, "steps": outcome.steps }))?;
            write_lines(w, &outcome.trace)
        })?;
        let mut msg = String::new();
        for r in &outcome.trace {
            let _ = writeln!(msg, "{}", format_epoch(r));
        }
        let _ = write!(
            msg,
            "best epoch {} after {} steps; wrote {}",
            outcome.best_epoch,
            outcome.steps,
            path.display()
        );
        Ok(msg)
    }

    pub fn load_adapter(&self, trainset_fp: &str) -> Result<(ProjectionAdapter, String), PipelineError> {
        let path = self.cfg.paths.adapter();
        if !path.exists() {
            return Err(PipelineError::Missing {
                path,
                producer: Stage::Train,
            });
        }
        let (adapter, found) = ProjectionAdapter::load(&path)?;
        let expected = adapter_fingerprint(trainset_fp, &self.cfg, self.clients.embedder.as_ref());
        check(&path, Stage::Train, &expected, &found, self.force)?;
        Ok((adapter, found))
    }

    /// Embed and project every extracted phrase into the feature index.
    pub fn index(&self) -> Result<String, PipelineError> {
        let ca = self.load_corpus()?;
        let (_, features, features_fp) = self.load_features(&ca)?;
        let trainset_fp = self.trainset_fp_only(&features_fp)?;
        let (adapter, adapter_fp) = self.load_adapter(&trainset_fp)?;
        let index = FeatureIndex::build(&features, self.clients.embedder.as_ref(), &adapter)?;
        let fp = index_fingerprint(&adapter_fp);
        let path = self.cfg.paths.index();
        write_atomic(&path, |w| index.write_to(w, &fp))?;
        Ok(format!(
            "indexed {} phrases for {} items ({} skipped), dimension {}; wrote {}",
            index.row_count(),
            index.item_count(),
            index.skipped(),
            index.dim(),
            path.display()
        ))
    }

    pub fn load_index(&self, adapter_fp: &str) -> Result<(FeatureIndex, String), PipelineError> {
        let path = self.cfg.paths.index();
        if !path.exists() {
            return Err(PipelineError::Missing {
                path,
                producer: Stage::Index,
            });
        }
        let (index, found) = FeatureIndex::load(&path)?;
        check(&path, Stage::Index, &index_fingerprint(adapter_fp), &found, self.force)?;
        Ok((index, found))
    }

    /// Every artifact needed for ranking, verified along the chain.
    pub fn load_ranking_inputs(&self) -> Result<RankingInputs, PipelineError> {
        let corpus = self.load_corpus()?;
        let (_, _, features_fp) = self.load_features(&corpus)?;
        let trainset_fp = self.trainset_fp_only(&features_fp)?;
        let (adapter, adapter_fp) = self.load_adapter(&trainset_fp)?;
        let (index, index_fp) = self.load_index(&adapter_fp)?;
        let candidates = match self.cfg.ranker.strategy {
            CandidateStrategy::File => {
                let path = self.cfg.paths.slates.clone().ok_or_else(|| {
                    PipelineError::Validation("strategy `file` needs paths.slates".into())
                })?;
                let r = File::open(&path).map(BufReader::new).map_err(|e| match e.kind() {
                    std::io::ErrorKind::NotFound => PipelineError::MissingInput(path.clone()),
                    _ => PipelineError::Io { path: path.clone(), source: e },
                })?;
                CandidateProvider::from_slate_file(r)?
            }
            s => CandidateProvider::from_events(s, corpus.splits.iter().flat_map(|sp| sp.train.iter())),
        };
        let upstream = fingerprint_of(&["rank", &index_fp, self.clients.chat.model_id()]);
        Ok(RankingInputs {
            corpus,
            adapter,
            index,
            candidates,
            upstream,
        })
    }

    pub fn eval_settings(&self) -> EvalSettings {
        let r = &self.cfg.ranker;
        EvalSettings {
            ks: self.cfg.eval.ks.clone(),
            top_k: r.top_k,
            slate_size: r.slate_size,
            inject: r.inject,
            seed: r.seed,
            ablation: self.cfg.mode.ablation,
            preference_reviews: r.preference_reviews,
            concurrency: self.cfg.client.concurrency,
        }
    }

    fn with_context<T>(
        &self,
        inputs: &RankingInputs,
        f: impl FnOnce(&EvalContext<'_>) -> Result<T, PipelineError>,
    ) -> Result<T, PipelineError> {
        let cache = self.cache()?;
        let extractor = self.extractor(&cache);
        let scorer = match &self.clients.scorer {
            Some(c) => Scorer::Verbalizer(c.as_ref()),
            None => Scorer::Mock,
        };
        let ctx = EvalContext {
            corpus: &inputs.corpus.corpus,
            splits: &inputs.corpus.splits,
            index: &inputs.index,
            adapter: &inputs.adapter,
            embedder: self.clients.embedder.as_ref(),
            extractor: &extractor,
            candidates: &inputs.candidates,
            scorer,
            upstream: inputs.upstream.clone(),
        };
        f(&ctx)
    }

    /// Rank the slate of one user.
    pub fn recommend(&self, user_id: &str) -> Result<UserRanking, PipelineError> {
        let inputs = self.load_ranking_inputs()?;
        let split = inputs
            .corpus
            .split(user_id)
            .cloned()
            .ok_or_else(|| PipelineError::Validation(format!("user {user_id} has no evaluable history")))?;
        let settings = self.eval_settings();
        self.with_context(&inputs, |ctx| Ok(crate::eval::rank_user(ctx, &settings, &split)?))
    }

    /// Evaluate every test user and write the reports.
    pub fn evaluate(&self, opts: &EvaluateOptions) -> Result<EvaluateOutput, PipelineError> {
        let inputs = self.load_ranking_inputs()?;
        let settings = self.eval_settings();
        let dir = self.cfg.paths.reports();
        self.with_context(&inputs, |ctx| {
            let (report, outcomes) = evaluate(ctx, &settings)?;
            let mut extra = Vec::new();
            if opts.all_ablations {
                for v in Ablation::ALL.into_iter().filter(|&v| v != settings.ablation) {
                    extra.push(run_ablation(ctx, &settings, v)?.0);
                }
            }
            if !opts.sweep_top_k.is_empty() {
                extra.extend(run_topk_sweep(ctx, &settings, &opts.sweep_top_k)?);
            }
            let pairs = if opts.export_pairs { Some(training_pairs(ctx, &settings)?) } else { None };

            let metrics = dir.join("metrics.jsonl");
            write_atomic(&metrics, |w| {
                report.write_jsonl(&mut *w)?;
                extra.iter().try_for_each(|r| r.write_jsonl(&mut *w))
            })?;
            write_atomic(&dir.join("ranks.jsonl"), |w| write_rank_dump(w, &outcomes))?;
            let mut table = report.table();
            for r in &extra {
                table.push('\n');
                table.push_str(&r.table());
            }
            write_atomic(&dir.join("metrics.txt"), |w| w.write_all(table.as_bytes()))?;
            if let Some(pairs) = &pairs {
                write_atomic(&dir.join("training_pairs.jsonl"), |w| write_training_pairs(w, pairs))?;
            }
            Ok(EvaluateOutput {
                report,
                extra,
                table,
                pairs: pairs.map_or(0, |p| p.len()),
            })
        })
        .and_then(|out| {
            let frac = out.report.skipped_fraction();
            if frac > self.cfg.eval.max_skipped_fraction {
                return Err(PipelineError::Validation(format!(
                    "{} of {} users skipped ({:.1}%), above the allowed {:.1}%",
                    out.report.skipped_count,
                    out.report.user_count + out.report.skipped_count,
                    frac * 100.0,
                    self.cfg.eval.max_skipped_fraction * 100.0
                )));
            }
            Ok(out)
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FeatureRecord {
    user_id: String,
    #[serde(flatten)]
    features: ItemFeatures,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum SampleSplit {
    Train,
    Validation,
}

#[derive(Serialize)]
struct SampleRecord<'a> {
    split: SampleSplit,
    #[serde(flatten)]
    sample: &'a ContrastiveSample,
}

#[derive(Deserialize)]
struct OwnedSampleRecord {
    split: SampleSplit,
    #[serde(flatten)]
    sample: ContrastiveSample,
}

pub struct RankingInputs {
    pub corpus: CorpusArtifact,
    pub adapter: ProjectionAdapter,
    pub index: FeatureIndex,
    pub candidates: CandidateProvider,
    pub upstream: String,
}

#[derive(Debug, Clone, Default)]
pub struct EvaluateOptions {
    pub all_ablations: bool,
    pub sweep_top_k: Vec<usize>,
    pub export_pairs: bool,
}

#[derive(Debug)]
pub struct EvaluateOutput {
    pub report: MetricsReport,
    /// Ablation and sweep runs, in execution order.
    pub extra: Vec<MetricsReport>,
    pub table: String,
    pub pairs: usize,
}

fn format_epoch(r: &EpochRecord) -> String {
    let mut s = format!("epoch {:>2}  train loss {:.5}  hit@1 {:.3}", r.epoch, r.train_loss, r.train_hit_at_1);
    if let (Some(l), Some(h)) = (r.val_loss, r.val_hit_at_1) {
        let _ = write!(s, "  val loss {l:.5}  val hit@1 {h:.3}");
    }
    s
}

/// Ranked slate with scores and the phrases retrieved for each candidate.
pub fn format_recommendation(user_id: &str, r: &UserRanking, ground_truth: Option<&str>) -> String {
    let mut out = format!("user {user_id}");
    if r.result.degraded {
        out.push_str(" (degraded scoring: parsed from generated text)");
    }
    out.push('\n');
    if let Some(p) = &r.prefs {
        let _ = writeln!(out, "  likes:    {}", p.like.join("; "));
        let _ = writeln!(out, "  dislikes: {}", p.dislike.join("; "));
    }
    for (rank, &pos) in r.result.order.iter().enumerate() {
        let c = &r.slate.candidates[pos];
        let mark = if ground_truth == Some(c.item_id.as_str()) { " *" } else { "" };
        let _ = writeln!(
            out,
            "{:>3}. ({}) {:>9.4}  {} [{}]{}",
            rank + 1,
            letter(pos),
            r.result.scores[pos],
            c.title,
            c.item_id,
            mark
        );
        for p in &c.retrieved_pros {
            let _ = writeln!(out, "          + {} ({:.3})", p.text, p.score);
        }
        for p in &c.retrieved_cons {
            let _ = writeln!(out, "          - {} ({:.3})", p.text, p.score);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        let missing = PipelineError::Missing {
            path: "x".into(),
            producer: Stage::Index,
        };
        assert_eq!(missing.exit_code(), 2);
        assert!(missing.to_string().contains("revbrowse index"));
        assert_eq!(PipelineError::Client("x".into()).exit_code(), 3);
        assert_eq!(PipelineError::Validation("x".into()).exit_code(), 4);
    }

    #[test]
    fn check_respects_force() {
        assert!(check(Path::new("a"), Stage::Train, "x", "y", false).is_err());
        assert!(check(Path::new("a"), Stage::Train, "x", "y", true).is_ok());
        assert!(check(Path::new("a"), Stage::Train, "x", "x", false).is_ok());
    }

    #[test]
    fn header_round_trip() {
        let mut buf = Vec::new();
        write_header(&mut buf, "features", "abc", json!({"n": 1})).unwrap();
        let mut r = &buf[..];
        let h = read_header(&mut r, Path::new("f"), "features").unwrap();
        assert_eq!(h.fingerprint, "abc");
        let mut r = &buf[..];
        assert!(read_header(&mut r, Path::new("f"), "corpus").is_err());
    }

    #[test]
    fn chain_changes_downstream() {
        let cfg = PipelineConfig::default();
        let a = trainset_fingerprint("f1", &cfg);
        assert_ne!(a, trainset_fingerprint("f2", &cfg));
        let mut other = cfg.clone();
        other.prefrag.window = 10;
        assert_ne!(a, trainset_fingerprint("f1", &other));
        let mut ranker_only = cfg.clone();
        ranker_only.ranker.top_k = 3;
        assert_eq!(a, trainset_fingerprint("f1", &ranker_only));
    }
}
