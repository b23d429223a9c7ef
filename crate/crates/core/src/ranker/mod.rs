//! Candidate slates, recommendation prompts and verbalizer scoring.

pub mod prompt;
pub mod verbalizer;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::BufRead;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::ClientError;
use crate::corpus::{Corpus, Event};
use crate::prefrag::index::{FeatureIndex, Polarity, UserVectors};
use crate::prefrag::{retrieve_topk, Retrieved};
use crate::text::fnv1a64;

pub use prompt::{render_recommendation_prompt, Ablation, RenderFlags, TrainingPair};
pub use verbalizer::{mock_score, score_with_verbalizer, RankedResult, ReplayClient};

pub const LETTERS: &[u8; 26] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZ";
pub const MAX_SLATE: usize = 26;
pub const DEFAULT_SLATE: usize = 20;

pub fn letter(i: usize) -> char {
    LETTERS[i] as char
}

#[derive(Debug, Error)]
pub enum RankerError {
    #[error("slate size {0} outside 2..=26")]
    SlateSize(usize),
    #[error("no candidate slate for user {0}")]
    MissingUser(String),
    #[error("candidate slates file: {0}")]
    SlateFile(String),
    #[error("scoring client cannot return log-probabilities or text; use mock scoring or a client with generation support")]
    Capability,
    #[error(transparent)]
    Client(#[from] ClientError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateStrategy {
    Popularity,
    Recency,
    File,
}

/// First-stage candidate generator.
#[derive(Debug, Clone)]
pub struct CandidateProvider {
    strategy: CandidateStrategy,
    /// Items by interaction count desc, then id.
    popular: Vec<String>,
    /// Items by latest interaction desc, then id.
    recent: Vec<String>,
    slates: HashMap<String, Vec<String>>,
}

impl CandidateProvider {
    /// Counts and recency are taken from `events` (normally training events).
    pub fn from_events<'a, I>(strategy: CandidateStrategy, events: I) -> Self
    where
        I: IntoIterator<Item = &'a Event>,
    {
        let mut stats: BTreeMap<&str, (usize, i64)> = BTreeMap::new();
        for e in events {
            let s = stats.entry(&e.item_id).or_insert((0, i64::MIN));
            s.0 += 1;
            s.1 = s.1.max(e.timestamp);
        }
        let mut popular: Vec<(&str, usize)> = stats.iter().map(|(k, v)| (*k, v.0)).collect();
        popular.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let mut recent: Vec<(&str, i64)> = stats.iter().map(|(k, v)| (*k, v.1)).collect();
        recent.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        CandidateProvider {
            strategy,
            popular: popular.into_iter().map(|(k, _)| k.to_string()).collect(),
            recent: recent.into_iter().map(|(k, _)| k.to_string()).collect(),
            slates: HashMap::new(),
        }
    }

    /// Externally supplied slates, one `{"user_id", "item_ids"}` object per line.
    pub fn from_slate_file<R: BufRead>(reader: R) -> Result<Self, RankerError> {
        #[derive(Deserialize)]
        struct Line {
            user_id: String,
            item_ids: Vec<String>,
        }
        let mut slates = HashMap::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| RankerError::SlateFile(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Line = serde_json::from_str(&line)
                .map_err(|e| RankerError::SlateFile(format!("line {}: {e}", n + 1)))?;
            slates.insert(rec.user_id, rec.item_ids);
        }
        Ok(CandidateProvider {
            strategy: CandidateStrategy::File,
            popular: Vec::new(),
            recent: Vec::new(),
            slates,
        })
    }

    pub fn strategy(&self) -> CandidateStrategy {
        self.strategy
    }

    /// Candidate item ids for one user. `history` is excluded from
    /// popularity slates only.
    pub fn provide(
        &self,
        user_id: &str,
        history: &HashSet<&str>,
        slate_size: usize,
    ) -> Result<Vec<String>, RankerError> {
        if !(2..=MAX_SLATE).contains(&slate_size) {
            return Err(RankerError::SlateSize(slate_size));
        }
        match self.strategy {
            CandidateStrategy::Popularity => Ok(self
                .popular
                .iter()
                .filter(|i| !history.contains(i.as_str()))
                .take(slate_size)
                .cloned()
                .collect()),
            CandidateStrategy::Recency => Ok(self.recent.iter().take(slate_size).cloned().collect()),
            CandidateStrategy::File => {
                let slate = self
                    .slates
                    .get(user_id)
                    .ok_or_else(|| RankerError::MissingUser(user_id.to_string()))?;
                if slate.len() > MAX_SLATE {
                    return Err(RankerError::SlateSize(slate.len()));
                }
                Ok(slate.clone())
            }
        }
    }
}

/// Put `truth` into `slate` at a position derived from `seed` and `user_id`
/// unless it is already there. A full slate loses the item at that position.
/// Returns whether the slate changed.
pub fn inject_ground_truth(
    slate: &mut Vec<String>,
    truth: &str,
    slate_size: usize,
    seed: u64,
    user_id: &str,
) -> bool {
    if slate.iter().any(|i| i == truth) {
        return false;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a64(user_id.as_bytes()));
    if slate.len() < slate_size {
        let pos = rng.random_range(0..=slate.len());
        slate.insert(pos, truth.to_string());
    } else {
        let pos = rng.random_range(0..slate.len());
        slate[pos] = truth.to_string();
    }
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub item_id: String,
    pub title: String,
    pub retrieved_pros: Vec<Retrieved>,
    pub retrieved_cons: Vec<Retrieved>,
}

impl Candidate {
    pub fn pros(&self) -> Vec<&str> {
        self.retrieved_pros.iter().map(|r| r.text.as_str()).collect()
    }

    pub fn cons(&self) -> Vec<&str> {
        self.retrieved_cons.iter().map(|r| r.text.as_str()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSlate {
    pub candidates: Vec<Candidate>,
}

impl CandidateSlate {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn position(&self, item_id: &str) -> Option<usize> {
        self.candidates.iter().position(|c| c.item_id == item_id)
    }
}

/// Retrieve the top-`k` pros (against likes) and cons (against dislikes) of
/// every slated item.
pub fn assemble_slate(
    item_ids: &[String],
    corpus: &Corpus,
    index: &FeatureIndex,
    user: &UserVectors,
    k: usize,
) -> Result<CandidateSlate, RankerError> {
    if !(2..=MAX_SLATE).contains(&item_ids.len()) {
        return Err(RankerError::SlateSize(item_ids.len()));
    }
    let side = |item: &str, polarity: Polarity, e: &Option<Vec<f32>>| match e {
        Some(e) => retrieve_topk(e, index.matrix(item, polarity), k),
        None => Vec::new(),
    };
    let candidates = item_ids
        .iter()
        .map(|item| Candidate {
            item_id: item.clone(),
            title: corpus.title(item).to_string(),
            retrieved_pros: side(item, Polarity::Pros, &user.like),
            retrieved_cons: side(item, Polarity::Cons, &user.dislike),
        })
        .collect();
    Ok(CandidateSlate { candidates })
}
