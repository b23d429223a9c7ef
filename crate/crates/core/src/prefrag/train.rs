//! Mini-batch gradient descent on the InfoNCE objective.

use std::collections::{BTreeSet, HashMap};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adapter::{AdapterHyper, ProjectionAdapter};
use super::contrastive::ContrastiveSample;
use super::loss::{group_scores, loss_and_grad, ContrastiveGroup};
use super::PrefragError;
use crate::client::Embedder;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub hyper: AdapterHyper,
    /// Output dimension; `None` keeps the embedding dimension.
    pub out_dim: Option<usize>,
    pub seed: u64,
    /// Texts per embedding request.
    pub embed_chunk: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hyper: AdapterHyper::default(),
            out_dim: None,
            seed: 42,
            embed_chunk: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub train_hit_at_1: f64,
    pub val_hit_at_1: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub adapter: ProjectionAdapter,
    /// Entry 0 is the initialization.
    pub trace: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub steps: usize,
}

/// Embed every distinct text once, in sorted order and fixed-size chunks.
pub fn embed_texts<'a, I>(
    texts: I,
    embedder: &dyn Embedder,
    chunk: usize,
) -> Result<HashMap<String, Vec<f64>>, PrefragError>
where
    I: IntoIterator<Item = &'a str>,
{
    let unique: Vec<String> = texts
        .into_iter()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .map(str::to_string)
        .collect();
    let mut out = HashMap::with_capacity(unique.len());
    for part in unique.chunks(chunk.max(1)) {
        let vectors = embedder.embed(part)?;
        for (text, v) in part.iter().zip(vectors) {
            if v.len() != embedder.dim() {
                return Err(PrefragError::Dimension {
                    expected: embedder.dim(),
                    actual: v.len(),
                });
            }
            out.insert(text.clone(), v.into_iter().map(f64::from).collect());
        }
    }
    Ok(out)
}

/// Embedded groups for `samples`, in sample order.
pub fn embed_samples(
    samples: &[ContrastiveSample],
    embedder: &dyn Embedder,
    chunk: usize,
) -> Result<Vec<ContrastiveGroup>, PrefragError> {
    let texts = samples.iter().flat_map(|s| {
        [s.query_text.as_str(), s.positive_text.as_str()]
            .into_iter()
            .chain(s.negative_texts.iter().map(String::as_str))
    });
    let table = embed_texts(texts, embedder, chunk)?;
    Ok(samples
        .iter()
        .map(|s| ContrastiveGroup {
            query: table[&s.query_text].clone(),
            positive: table[&s.positive_text].clone(),
            negatives: s.negative_texts.iter().map(|t| table[t].clone()).collect(),
        })
        .collect())
}

/// Fraction of groups whose positive strictly outscores every negative.
pub fn hit_at_1(groups: &[ContrastiveGroup], w: &Array2<f64>) -> Result<f64, PrefragError> {
    if groups.is_empty() {
        return Err(PrefragError::Domain("no groups to score".into()));
    }
    let scores = group_scores(groups, w)?;
    let hits = scores
        .iter()
        .filter(|s| s[1..].iter().all(|&neg| s[0] > neg))
        .count();
    Ok(hits as f64 / groups.len() as f64)
}

fn full_loss(groups: &[ContrastiveGroup], w: &Array2<f64>, tau: f64) -> Result<f64, PrefragError> {
    Ok(loss_and_grad(groups, w, tau, false)?.0)
}

/// Train a projection on `train`, keeping the weights with the lowest
/// validation loss (training loss when `val` is empty).
pub fn train_adapter(
    train: &[ContrastiveSample],
    val: &[ContrastiveSample],
    embedder: &dyn Embedder,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, PrefragError> {
    if train.is_empty() {
        return Err(PrefragError::Domain("no training samples".into()));
    }
    let train_groups = embed_samples(train, embedder, cfg.embed_chunk)?;
    let val_groups = embed_samples(val, embedder, cfg.embed_chunk)?;
    train_groups_adapter(&train_groups, &val_groups, embedder.dim(), cfg)
}

/// [`train_adapter`] on pre-embedded groups.
pub fn train_groups_adapter(
    train: &[ContrastiveGroup],
    val: &[ContrastiveGroup],
    in_dim: usize,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, PrefragError> {
    let hyper = cfg.hyper;
    if train.is_empty() {
        return Err(PrefragError::Domain("no training samples".into()));
    }
    if hyper.batch_size == 0 || !(hyper.step_size > 0.0) {
        return Err(PrefragError::Domain("batch size and step size must be positive".into()));
    }
    let init = ProjectionAdapter::init(in_dim, cfg.out_dim.unwrap_or(in_dim), cfg.seed, hyper);
    let mut w = init.weights_f64();

    let record = |epoch: usize, w: &Array2<f64>| -> Result<EpochRecord, PrefragError> {
        let train_loss = full_loss(train, w, hyper.tau)?;
        let (val_loss, val_hit_at_1) = if val.is_empty() {
            (None, None)
        } else {
            (Some(full_loss(val, w, hyper.tau)?), Some(hit_at_1(val, w)?))
        };
        Ok(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            train_hit_at_1: hit_at_1(train, w)?,
            val_hit_at_1,
        })
    };
    let selection = |r: &EpochRecord| r.val_loss.unwrap_or(r.train_loss);

    let mut trace = vec![record(0, &w)?];
    let mut best = (selection(&trace[0]), 0, w.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut steps = 0;

    for epoch in 1..=hyper.epochs as usize {
        order.shuffle(&mut rng);
        for (step, chunk) in order.chunks(hyper.batch_size as usize).enumerate() {
            let batch: Vec<ContrastiveGroup> = chunk.iter().map(|&i| train[i].clone()).collect();
            let (loss, grad) = loss_and_grad(&batch, &w, hyper.tau, true)?;
            let grad = grad.expect("gradient requested");
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(PrefragError::NonFinite { epoch, step, loss });
            }
            w.scaled_add(-hyper.step_size, &grad);
            steps += 1;
        }
        let rec = record(epoch, &w)?;
        log::info!(
            "epoch {epoch}: train loss {:.6}, val loss {:?}, train hit@1 {:.4}",
            rec.train_loss,
            rec.val_loss,
            rec.train_hit_at_1
        );
        if selection(&rec) < best.0 {
            best = (selection(&rec), epoch, w.clone());
        }
        trace.push(rec);
    }

    Ok(TrainOutcome {
        adapter: ProjectionAdapter::from_f64(&best.2, cfg.seed, hyper),
        trace,
        best_epoch: best.1,
        steps,
    })
}
