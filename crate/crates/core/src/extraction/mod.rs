//! Structured preference and feature extraction from review text.

pub mod cache;
pub mod mock;
pub mod prompt;
pub mod response;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{ChatClient, ClientError};
use crate::corpus::{Corpus, Review};
use cache::{cache_key, ExtractionCache};
use prompt::{
    render_item_feature_prompt, render_user_pref_prompt, serialize_review, serialize_reviews,
    ReviewInput, TEMPLATE_VERSION,
};
use response::{parse_feature_response, parse_preference_response, PolarPhrases, ResponseError};

pub use mock::MockChatClient;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionKind {
    UserPreference,
    ItemFeature,
}

impl ExtractionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExtractionKind::UserPreference => "user_preference",
            ExtractionKind::ItemFeature => "item_feature",
        }
    }
}

#[derive(Debug, Error)]
pub enum ExtractionError {
    #[error("extraction failed after {attempts} attempt(s); last response: {last_raw:?}")]
    Failed { attempts: u32, last_raw: String },
    #[error("extraction response has the wrong shape ({source}); response: {raw:?}")]
    Schema {
        #[source]
        source: ResponseError,
        raw: String,
    },
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("failed to write extraction cache: {0}")]
    Cache(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserPreferences {
    pub user_id: String,
    pub like: Vec<String>,
    pub dislike: Vec<String>,
    pub source_review_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemFeatures {
    pub item_id: String,
    pub review_id: String,
    pub pros: Vec<String>,
    pub cons: Vec<String>,
}

/// One rendered request.
#[derive(Debug, Clone)]
pub struct ExtractionRequest {
    pub kind: ExtractionKind,
    pub prompt_text: String,
    pub source_ids: Vec<String>,
    pub attempt: u32,
}

pub const DEFAULT_MAX_RETRIES: u32 = 3;

/// Render -> call -> parse, with retries on unparseable responses and a
/// write-through cache.
pub struct Extractor<'a> {
    client: &'a dyn ChatClient,
    cache: &'a ExtractionCache,
    max_retries: u32,
}

impl<'a> Extractor<'a> {
    pub fn new(client: &'a dyn ChatClient, cache: &'a ExtractionCache) -> Self {
        Extractor {
            client,
            cache,
            max_retries: DEFAULT_MAX_RETRIES,
        }
    }

    pub fn with_max_retries(mut self, max_retries: u32) -> Self {
        self.max_retries = max_retries.max(1);
        self
    }

    fn run(
        &self,
        kind: ExtractionKind,
        inputs: &str,
        prompt_text: String,
        source_ids: Vec<String>,
        parse: fn(&str) -> Result<PolarPhrases, ResponseError>,
    ) -> Result<PolarPhrases, ExtractionError> {
        let key = cache_key(TEMPLATE_VERSION, kind, inputs, self.client.model_id());
        if let Some(hit) = self.cache.get(&key) {
            return Ok(hit);
        }

        let mut request = ExtractionRequest {
            kind,
            prompt_text,
            source_ids,
            attempt: 0,
        };
        let mut last_raw = String::new();
        while request.attempt < self.max_retries {
            request.attempt += 1;
            let raw = self.client.complete(&request.prompt_text)?;
            match parse(&raw) {
                Ok(value) => {
                    self.cache.put(&key, kind, &value)?;
                    return Ok(value);
                }
                Err(e) if e.is_repairable() => {
                    log::debug!(
                        "unparseable {} response for {:?} (attempt {})",
                        kind.as_str(),
                        request.source_ids,
                        request.attempt
                    );
                    last_raw = raw;
                }
                Err(source) => return Err(ExtractionError::Schema { source, raw }),
            }
        }
        Err(ExtractionError::Failed {
            attempts: request.attempt,
            last_raw,
        })
    }

    /// Preferences over `reviews`; `None` when both lists come back empty.
    pub fn extract_user_preferences(
        &self,
        user_id: &str,
        reviews: &[ReviewInput],
        source_review_ids: &[String],
    ) -> Result<Option<UserPreferences>, ExtractionError> {
        let phrases = self.run(
            ExtractionKind::UserPreference,
            &serialize_reviews(reviews),
            render_user_pref_prompt(reviews),
            source_review_ids.to_vec(),
            parse_preference_response,
        )?;
        if phrases.is_empty() {
            return Ok(None);
        }
        Ok(Some(UserPreferences {
            user_id: user_id.to_string(),
            like: phrases.positive,
            dislike: phrases.negative,
            source_review_ids: source_review_ids.to_vec(),
        }))
    }

    /// Features of one review; `None` is the drop signal for an empty result.
    pub fn extract_item_features(
        &self,
        review: &Review,
        title: &str,
    ) -> Result<Option<ItemFeatures>, ExtractionError> {
        let input = review_input(review, title);
        let phrases = self.run(
            ExtractionKind::ItemFeature,
            &serialize_review(&input),
            render_item_feature_prompt(&input),
            vec![review.review_id.clone()],
            parse_feature_response,
        )?;
        if phrases.is_empty() {
            return Ok(None);
        }
        Ok(Some(ItemFeatures {
            item_id: review.item_id.clone(),
            review_id: review.review_id.clone(),
            pros: phrases.positive,
            cons: phrases.negative,
        }))
    }

    /// Preferences over a list of reviews looked up in `corpus`.
    pub fn preferences_for(
        &self,
        corpus: &Corpus,
        user_id: &str,
        reviews: &[&Review],
    ) -> Result<Option<UserPreferences>, ExtractionError> {
        let inputs: Vec<ReviewInput> = reviews
            .iter()
            .map(|r| review_input(r, corpus.title(&r.item_id)))
            .collect();
        let ids: Vec<String> = reviews.iter().map(|r| r.review_id.clone()).collect();
        if inputs.is_empty() {
            return Ok(None);
        }
        self.extract_user_preferences(user_id, &inputs, &ids)
    }
}

pub fn review_input(review: &Review, title: &str) -> ReviewInput {
    ReviewInput {
        item_id: review.item_id.clone(),
        title: title.to_string(),
        text: review.text.clone(),
        rating: review.rating,
    }
}

/// Outcome of a bulk feature extraction.
#[derive(Debug, Default)]
pub struct FeatureExtraction {
    pub features: Vec<ItemFeatures>,
    pub dropped: usize,
    pub failed: Vec<(String, String)>,
}

/// Extract features for every review with at most `concurrency` requests in
/// flight. Output follows input order.
pub fn extract_all_item_features(
    extractor: &Extractor<'_>,
    corpus: &Corpus,
    reviews: &[&Review],
    concurrency: usize,
) -> Result<FeatureExtraction, ExtractionError> {
    use rayon::prelude::*;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(concurrency.max(1))
        .build()
        .map_err(|e| ExtractionError::Client(ClientError::Other(e.to_string())))?;
    let results: Vec<Result<Option<ItemFeatures>, ExtractionError>> = pool.install(|| {
        reviews
            .par_iter()
            .map(|r| extractor.extract_item_features(r, corpus.title(&r.item_id)))
            .collect()
    });

    let mut out = FeatureExtraction::default();
    for (review, result) in reviews.iter().zip(results) {
        match result {
            Ok(Some(f)) => out.features.push(f),
            Ok(None) => {
                log::debug!("review {} yielded no pros or cons; dropped", review.review_id);
                out.dropped += 1;
            }
            Err(ExtractionError::Failed { last_raw, .. }) => {
                out.failed.push((review.review_id.clone(), last_raw));
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}
