//! Rule-based offline extractor.
//!
//! Review text is scanned for aspect trigger words from a fixed lexicon.
//! Ratings 4-5 route every matched aspect to the positive side, ratings 1-2
//! to the negative side, and rating 3 decides per clause using a small
//! sentiment lexicon. Item-side outputs use an aspect's *feature* phrase and
//! user-side outputs its *preference* phrase; the two phrasings share no
//! tokens, so a retriever has to learn which preference matches which
//! feature.

use std::collections::HashMap;

use serde::Deserialize;

use super::prompt::{ITEM_INPUT_PREFIX, USER_INPUT_PREFIX};
use super::response::{PolarPhrases, MAX_PHRASES};
use crate::client::{ChatClient, ClientError};
use crate::text::tokens;

#[derive(Debug, Clone, Copy)]
pub struct Aspect {
    pub name: &'static str,
    pub triggers: &'static [&'static str],
    pub feature: &'static str,
    pub preference: &'static str,
}

macro_rules! aspect {
    ($name:literal, [$($t:literal),+], $feature:literal, $pref:literal) => {
        Aspect { name: $name, triggers: &[$($t),+], feature: $feature, preference: $pref }
    };
}

pub const ASPECTS: &[Aspect] = &[
    aspect!("crunch", ["crunchy", "crispy", "crunch"], "crunchy texture", "crisp snacks"),
    aspect!("freshness", ["fresh", "freshness"], "fresh ingredients", "recently made goods"),
    aspect!("sweetness", ["sweet", "sugary", "sweetness"], "sweet flavor", "sugary treats"),
    aspect!("saltiness", ["salty", "salted", "saltiness"], "salty seasoning", "savory bites"),
    aspect!("spice", ["spicy", "spice", "spiciness"], "spicy kick", "bold heat"),
    aspect!("nutrition", ["healthy", "nutritious", "nutrition"], "nutritious content", "wholesome eating"),
    aspect!("taste", ["tasty", "delicious", "flavorful"], "delicious taste", "yummy food"),
    aspect!("aroma", ["smell", "scent", "aroma"], "pleasant aroma", "nice fragrance"),
    aspect!("packaging", ["packaging", "packaged", "wrapper"], "protective packaging", "careful wrapping"),
    aspect!("durability", ["durable", "sturdy", "durability"], "durable build", "rugged equipment"),
    aspect!("comfort", ["comfortable", "comfy", "comfort"], "comfortable fit", "cozy wear"),
    aspect!("sizing", ["size", "sizing", "fits"], "accurate sizing", "true measurements"),
    aspect!("style", ["stylish", "style", "design"], "stylish design", "attractive appearance"),
    aspect!("fabric", ["fabric", "soft", "material"], "soft fabric", "gentle materials"),
    aspect!("weight", ["lightweight", "weight", "heavy"], "lightweight body", "easy carrying"),
    aspect!("quality", ["quality", "craftsmanship", "workmanship"], "solid quality", "fine workmanship"),
    aspect!("graphics", ["graphics", "visuals", "graphic"], "impressive graphics", "beautiful scenery"),
    aspect!("story", ["story", "plot", "storyline"], "engaging story", "narrative depth"),
    aspect!("controls", ["controls", "responsive", "control"], "responsive controls", "smooth handling"),
    aspect!("multiplayer", ["multiplayer", "coop", "online"], "multiplayer modes", "playing with friends"),
    aspect!("difficulty", ["challenging", "difficult", "difficulty"], "challenging gameplay", "tough puzzles"),
    aspect!("replay", ["replay", "replayability", "replayable"], "high replay value", "games worth revisiting"),
    aspect!("battery", ["battery", "charge", "charging"], "long battery life", "enduring power"),
    aspect!("noise", ["quiet", "noise", "noisy"], "quiet operation", "silent devices"),
];

const POSITIVE_WORDS: &[&str] = &[
    "good", "great", "love", "loved", "loves", "excellent", "nice", "perfect", "enjoy", "enjoyed",
    "amazing", "best", "awesome", "wonderful", "fantastic", "happy", "like", "liked", "recommend",
];

const NEGATIVE_WORDS: &[&str] = &[
    "bad", "poor", "terrible", "awful", "hate", "hated", "disappointing", "disappointed", "worst",
    "broke", "broken", "cheap", "bland", "stale", "weak", "flimsy", "not", "never", "too",
    "problem", "issue", "unfortunately",
];

pub fn aspect_by_name(name: &str) -> Option<&'static Aspect> {
    ASPECTS.iter().find(|a| a.name == name)
}

fn trigger_table() -> &'static HashMap<&'static str, usize> {
    static TABLE: std::sync::OnceLock<HashMap<&'static str, usize>> = std::sync::OnceLock::new();
    TABLE.get_or_init(|| {
        ASPECTS
            .iter()
            .enumerate()
            .flat_map(|(i, a)| a.triggers.iter().map(move |t| (*t, i)))
            .collect()
    })
}

/// Aspect indices in order of first mention.
fn aspects_in(text: &str) -> Vec<usize> {
    let table = trigger_table();
    let mut found = Vec::new();
    for tok in tokens(text) {
        if let Some(&i) = table.get(tok.as_str()) {
            if !found.contains(&i) {
                found.push(i);
            }
        }
    }
    found
}

/// Clauses for rating-3 sentiment: split on sentence punctuation, commas,
/// semicolons and the word "but".
fn clauses(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for piece in text.split(['.', '!', '?', ',', ';']) {
        let mut current = Vec::new();
        for tok in tokens(piece) {
            if tok == "but" {
                if !current.is_empty() {
                    out.push(current.join(" "));
                }
                current.clear();
            } else {
                current.push(tok);
            }
        }
        if !current.is_empty() {
            out.push(current.join(" "));
        }
    }
    out
}

fn sentiment(clause: &str) -> i32 {
    tokens(clause)
        .map(|t| {
            if POSITIVE_WORDS.contains(&t.as_str()) {
                1
            } else if NEGATIVE_WORDS.contains(&t.as_str()) {
                -1
            } else {
                0
            }
        })
        .sum()
}

/// Aspect indices on the positive and negative side of one review.
fn polar_aspects(rating: u8, text: &str) -> (Vec<usize>, Vec<usize>) {
    match rating {
        4.. => (aspects_in(text), Vec::new()),
        0..=2 => (Vec::new(), aspects_in(text)),
        3 => {
            let mut pos = Vec::new();
            let mut neg = Vec::new();
            for clause in clauses(text) {
                let side = match sentiment(&clause) {
                    s if s > 0 => &mut pos,
                    s if s < 0 => &mut neg,
                    _ => continue,
                };
                for a in aspects_in(&clause) {
                    if !side.contains(&a) {
                        side.push(a);
                    }
                }
            }
            (pos, neg)
        }
    }
}

fn feature_phrases(idx: &[usize]) -> Vec<String> {
    idx.iter()
        .take(MAX_PHRASES)
        .map(|&i| ASPECTS[i].feature.to_string())
        .collect()
}

/// Pros and cons of a single review.
pub fn mock_extract(rating: u8, text: &str) -> PolarPhrases {
    let (pos, neg) = polar_aspects(rating, text);
    PolarPhrases {
        positive: feature_phrases(&pos),
        negative: feature_phrases(&neg),
    }
}

/// Likes and dislikes over a window of `(rating, text)` reviews.
///
/// Each review votes for its aspects on one side; an aspect lands on the side
/// with more votes (ties are dropped). Within a side aspects are ordered by
/// vote count, then first mention.
pub fn mock_preferences<'a, I>(reviews: I) -> PolarPhrases
where
    I: IntoIterator<Item = (u8, &'a str)>,
{
    // aspect -> (likes, dislikes, first mention)
    let mut tally: HashMap<usize, (u32, u32, usize)> = HashMap::new();
    let mut order = 0usize;
    for (rating, text) in reviews {
        let (pos, neg) = polar_aspects(rating, text);
        for (idx, is_pos) in pos.into_iter().map(|a| (a, true)).chain(neg.into_iter().map(|a| (a, false))) {
            let entry = tally.entry(idx).or_insert_with(|| {
                order += 1;
                (0, 0, order)
            });
            if is_pos {
                entry.0 += 1;
            } else {
                entry.1 += 1;
            }
        }
    }

    let mut like: Vec<(u32, usize, usize)> = Vec::new();
    let mut dislike: Vec<(u32, usize, usize)> = Vec::new();
    for (&idx, &(l, d, first)) in &tally {
        if l > d {
            like.push((l, first, idx));
        } else if d > l {
            dislike.push((d, first, idx));
        }
    }
    let finish = |mut side: Vec<(u32, usize, usize)>| -> Vec<String> {
        side.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        side.into_iter()
            .take(MAX_PHRASES)
            .map(|(_, _, i)| ASPECTS[i].preference.to_string())
            .collect()
    };
    PolarPhrases {
        positive: finish(like),
        negative: finish(dislike),
    }
}

#[derive(Deserialize)]
struct PromptReview {
    review: String,
    score: u8,
}

/// Offline [`ChatClient`] that reads the serialized reviews back out of an
/// extraction prompt and answers with the rule-based extraction as JSON.
#[derive(Debug, Default, Clone)]
pub struct MockChatClient;

pub const MOCK_MODEL_ID: &str = "mock-extractor-v1";

impl ChatClient for MockChatClient {
    fn model_id(&self) -> &str {
        MOCK_MODEL_ID
    }

    fn complete(&self, prompt: &str) -> Result<String, ClientError> {
        for line in prompt.lines() {
            if let Some(payload) = line.strip_prefix(USER_INPUT_PREFIX) {
                let reviews: Vec<PromptReview> = serde_json::from_str(payload)
                    .map_err(|e| ClientError::Other(format!("mock: bad review list: {e}")))?;
                let p = mock_preferences(reviews.iter().map(|r| (r.score, r.review.as_str())));
                return Ok(serde_json::json!({"Like": p.positive, "Dislike": p.negative}).to_string());
            }
            if let Some(payload) = line.strip_prefix(ITEM_INPUT_PREFIX) {
                let review: PromptReview = serde_json::from_str(payload)
                    .map_err(|e| ClientError::Other(format!("mock: bad review: {e}")))?;
                let p = mock_extract(review.score, &review.review);
                return Ok(serde_json::json!({"Pros": p.positive, "Cons": p.negative}).to_string());
            }
        }
        Ok("I could not find any reviews in the request.".to_string())
    }
}
