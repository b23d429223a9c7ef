//! Sliding-window construction of contrastive training samples.

use std::collections::{BTreeMap, HashMap};

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::InteractionSequence;
use crate::extraction::{ExtractionError, ItemFeatures, UserPreferences};
use crate::text::{fnv1a64, join_phrases, normalize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    /// Likes as queries, pros as answers.
    LikePros,
    /// Dislikes as queries, cons as answers.
    DislikeCons,
}

impl Branch {
    pub const ALL: [Branch; 2] = [Branch::LikePros, Branch::DislikeCons];

    pub fn query_side(self, prefs: &UserPreferences) -> &[String] {
        match self {
            Branch::LikePros => &prefs.like,
            Branch::DislikeCons => &prefs.dislike,
        }
    }

    pub fn answer_side(self, features: &ItemFeatures) -> &[String] {
        match self {
            Branch::LikePros => &features.pros,
            Branch::DislikeCons => &features.cons,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContrastiveSample {
    pub branch: Branch,
    pub query_text: String,
    pub positive_text: String,
    pub negative_texts: Vec<String>,
    pub user_id: String,
    pub item_id: String,
    pub positive_review_id: String,
    pub negative_review_ids: Vec<String>,
}

/// Item features keyed by review, with the reviewing user.
#[derive(Debug, Default, Clone)]
pub struct FeatureStore {
    by_review: HashMap<String, (String, ItemFeatures)>,
    by_item: BTreeMap<String, Vec<String>>,
}

impl FeatureStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, user_id: &str, features: ItemFeatures) {
        let ids = self.by_item.entry(features.item_id.clone()).or_default();
        if let Err(pos) = ids.binary_search(&features.review_id) {
            ids.insert(pos, features.review_id.clone());
        }
        self.by_review
            .insert(features.review_id.clone(), (user_id.to_string(), features));
    }

    pub fn get(&self, review_id: &str) -> Option<&ItemFeatures> {
        self.by_review.get(review_id).map(|(_, f)| f)
    }

    pub fn len(&self) -> usize {
        self.by_review.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_review.is_empty()
    }

    /// `(user, features)` for every review of `item_id`, ordered by review id.
    pub fn for_item<'a>(&'a self, item_id: &str) -> impl Iterator<Item = (&'a str, &'a ItemFeatures)> + 'a {
        self.by_item
            .get(item_id)
            .into_iter()
            .flatten()
            .map(move |rid| {
                let (u, f) = &self.by_review[rid];
                (u.as_str(), f)
            })
    }

    pub fn items(&self) -> impl Iterator<Item = &str> {
        self.by_item.keys().map(String::as_str)
    }
}

/// Source of windowed user preferences.
pub trait PreferenceSource {
    fn window_preferences(
        &self,
        user_id: &str,
        review_ids: &[String],
    ) -> Result<Option<UserPreferences>, ExtractionError>;
}

impl<F> PreferenceSource for F
where
    F: Fn(&str, &[String]) -> Result<Option<UserPreferences>, ExtractionError>,
{
    fn window_preferences(
        &self,
        user_id: &str,
        review_ids: &[String],
    ) -> Result<Option<UserPreferences>, ExtractionError> {
        self(user_id, review_ids)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveParams {
    pub window: usize,
    pub negatives: usize,
    pub stride: usize,
    /// Top up missing negatives with features of other items.
    pub pad_negatives: bool,
    pub seed: u64,
    /// Emit only each sequence's final window (used for validation).
    pub last_window_only: bool,
}

impl Default for ContrastiveParams {
    fn default() -> Self {
        ContrastiveParams {
            window: 20,
            negatives: 40,
            stride: 1,
            pad_negatives: false,
            seed: 0,
            last_window_only: false,
        }
    }
}

#[derive(Debug, Default, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildStats {
    pub windows: usize,
    pub samples: usize,
    pub short_sequences: usize,
    pub missing_features: usize,
    pub missing_preferences: usize,
    pub dropped_no_negatives: usize,
    pub duplicate_negatives: usize,
}

/// Half-open `[start, end)` windows over a sequence of `n` events.
///
/// Sequences shorter than `window` yield one window over everything, and
/// sequences shorter than 3 yield none.
pub fn window_bounds(n: usize, window: usize, stride: usize) -> Vec<(usize, usize)> {
    if n < 3 {
        return Vec::new();
    }
    if n < window {
        return vec![(0, n)];
    }
    (0..=n - window)
        .step_by(stride.max(1))
        .map(|s| (s, s + window))
        .collect()
}

pub fn build_contrastive_set(
    sequences: &[InteractionSequence],
    store: &FeatureStore,
    preferences: &dyn PreferenceSource,
    params: &ContrastiveParams,
) -> Result<(Vec<ContrastiveSample>, BuildStats), ExtractionError> {
    assert!(params.window >= 2, "window must be at least 2");
    assert!(params.negatives >= 1, "need at least one negative");

    let mut samples = Vec::new();
    let mut stats = BuildStats::default();
    let all_items: Vec<&str> = store.items().collect();

    for seq in sequences {
        let mut bounds = window_bounds(seq.len(), params.window, params.stride);
        if bounds.is_empty() {
            stats.short_sequences += 1;
            continue;
        }
        if params.last_window_only {
            bounds = vec![*bounds.last().unwrap()];
        }
        for (start, end) in bounds {
            stats.windows += 1;
            let prefix: Vec<String> = seq.events[start..end - 1]
                .iter()
                .map(|e| e.review_id.clone())
                .collect();
            let last = &seq.events[end - 1];
            let Some(positive) = store.get(&last.review_id) else {
                stats.missing_features += 1;
                continue;
            };
            let Some(prefs) = preferences.window_preferences(&seq.user_id, &prefix)? else {
                stats.missing_preferences += 1;
                continue;
            };

            for branch in Branch::ALL {
                let query = branch.query_side(&prefs);
                let answer = branch.answer_side(positive);
                if query.is_empty() || answer.is_empty() {
                    continue;
                }
                let positive_text = join_phrases(answer);
                let positive_norm = normalize(&positive_text);

                let mut negative_texts = Vec::new();
                let mut negative_ids = Vec::new();
                for (user, other) in store.for_item(&last.item_id) {
                    if negative_texts.len() == params.negatives {
                        break;
                    }
                    if user == seq.user_id {
                        continue;
                    }
                    let side = branch.answer_side(other);
                    if side.is_empty() {
                        continue;
                    }
                    let text = join_phrases(side);
                    if normalize(&text) == positive_norm {
                        stats.duplicate_negatives += 1;
                        continue;
                    }
                    negative_texts.push(text);
                    negative_ids.push(other.review_id.clone());
                }

                if negative_texts.len() < params.negatives && params.pad_negatives {
                    let key = format!("{}|{}|{:?}", seq.user_id, last.review_id, branch);
                    let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ fnv1a64(key.as_bytes()));
                    let others: Vec<&str> = all_items
                        .iter()
                        .copied()
                        .filter(|i| *i != last.item_id)
                        .collect();
                    let mut tries = 0;
                    while negative_texts.len() < params.negatives && tries < params.negatives * 4 {
                        tries += 1;
                        let Some(item) = others.choose(&mut rng) else { break };
                        let pool: Vec<_> = store
                            .for_item(item)
                            .filter(|(_, f)| !branch.answer_side(f).is_empty())
                            .collect();
                        let Some((_, f)) = pool.choose(&mut rng) else { continue };
                        let text = join_phrases(branch.answer_side(f));
                        if normalize(&text) == positive_norm {
                            continue;
                        }
                        negative_texts.push(text);
                        negative_ids.push(f.review_id.clone());
                    }
                }

                if negative_texts.is_empty() {
                    stats.dropped_no_negatives += 1;
                    continue;
                }
                samples.push(ContrastiveSample {
                    branch,
                    query_text: join_phrases(query),
                    positive_text,
                    negative_texts,
                    user_id: seq.user_id.clone(),
                    item_id: last.item_id.clone(),
                    positive_review_id: last.review_id.clone(),
                    negative_review_ids: negative_ids,
                });
                stats.samples += 1;
            }
        }
    }
    Ok((samples, stats))
}
