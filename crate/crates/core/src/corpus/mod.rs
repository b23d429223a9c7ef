//! Review corpus ingestion and preprocessing.
//!
//! Reads line-delimited review and metadata records (raw Amazon-2014 field
//! names or the canonical names written by [`write_canonical`]), applies
//! iterative k-core filtering and builds per-user chronological sequences
//! with leave-one-out splits.

pub mod synthetic;

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to read review stream: {0}")]
    Io(#[from] std::io::Error),
    #[error("corpus format error: {malformed} of {total} lines are malformed")]
    Format { malformed: usize, total: usize },
    #[error("cannot split sequence of user {user_id}: {len} events, need at least 3")]
    Split { user_id: String, len: usize },
}

/// One user's review of one item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Review {
    pub review_id: String,
    pub user_id: String,
    pub item_id: String,
    pub rating: u8,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<String>,
    pub timestamp: i64,
    #[serde(default)]
    pub helpful_votes: u64,
}

impl Review {
    pub fn has_empty_text(&self) -> bool {
        self.text.trim().is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemMeta {
    pub item_id: String,
    pub title: String,
}

impl ItemMeta {
    /// Blank titles fall back to the item id.
    pub fn new(item_id: impl Into<String>, title: impl Into<String>) -> Self {
        let item_id = item_id.into();
        let title = title.into();
        let title = if title.trim().is_empty() {
            item_id.clone()
        } else {
            title.trim().to_string()
        };
        ItemMeta { item_id, title }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub item_id: String,
    pub review_id: String,
    pub timestamp: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionSequence {
    pub user_id: String,
    pub events: Vec<Event>,
}

impl InteractionSequence {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

/// Leave-one-out split of one user's sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSpec {
    pub user_id: String,
    pub train: Vec<Event>,
    pub validation: Event,
    pub test: Event,
}

impl SplitSpec {
    /// Events preceding the test event (train followed by validation).
    pub fn test_history(&self) -> Vec<Event> {
        let mut events = self.train.clone();
        events.push(self.validation.clone());
        events
    }
}

/// Result of parsing a review stream.
#[derive(Debug, Default, Clone)]
pub struct ParsedCorpus {
    pub reviews: Vec<Review>,
    pub items: Vec<ItemMeta>,
    pub skipped: usize,
    pub empty_text: usize,
}

enum Record {
    Review(Review),
    Meta(ItemMeta),
    Artifact,
}

fn str_field<'a>(obj: &'a serde_json::Map<String, Value>, keys: &[&str]) -> Option<&'a str> {
    keys.iter().find_map(|k| obj.get(*k).and_then(Value::as_str))
}

fn int_field(obj: &serde_json::Map<String, Value>, keys: &[&str]) -> Option<i64> {
    keys.iter().find_map(|k| {
        let v = obj.get(*k)?;
        if let Some(i) = v.as_i64() {
            return Some(i);
        }
        let f = v.as_f64()?;
        (f.fract() == 0.0 && f.is_finite()).then_some(f as i64)
    })
}

fn parse_record(line: &str) -> Option<Record> {
    let value: Value = serde_json::from_str(line).ok()?;
    let obj = value.as_object()?;
    if obj.contains_key("_artifact") {
        return Some(Record::Artifact);
    }

    let user = str_field(obj, &["reviewerID", "user_id"]);
    let item = str_field(obj, &["asin", "item_id"])?;
    if item.is_empty() {
        return None;
    }

    let Some(user) = user else {
        let title = str_field(obj, &["title"])?;
        return Some(Record::Meta(ItemMeta::new(item, title)));
    };
    if user.is_empty() {
        return None;
    }

    let rating = int_field(obj, &["overall", "rating"])?;
    if !(1..=5).contains(&rating) {
        return None;
    }
    let timestamp = int_field(obj, &["unixReviewTime", "timestamp"])?;
    let text = match obj.get("reviewText").or_else(|| obj.get("text")) {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Null) | None => String::new(),
        Some(_) => return None,
    };
    let summary = str_field(obj, &["summary"]).map(str::to_string);
    let helpful_votes = match obj.get("helpful") {
        Some(Value::Array(pair)) => pair.first().and_then(Value::as_u64).unwrap_or(0),
        _ => obj.get("helpful_votes").and_then(Value::as_u64).unwrap_or(0),
    };
    let review_id = str_field(obj, &["review_id", "reviewID"])
        .map(str::to_string)
        .unwrap_or_else(|| format!("{user}_{item}_{timestamp}"));

    Some(Record::Review(Review {
        review_id,
        user_id: user.to_string(),
        item_id: item.to_string(),
        rating: rating as u8,
        text,
        summary,
        timestamp,
        helpful_votes,
    }))
}

/// Parse a line-delimited stream of review and metadata records.
///
/// Blank lines are ignored. Lines that are not valid records are skipped and
/// counted; if more than half of the non-blank lines are malformed the whole
/// stream is rejected. Synthesized review ids that collide get a `#n` suffix.
pub fn parse_reviews<R: BufRead>(reader: R) -> Result<ParsedCorpus, CorpusError> {
    let mut out = ParsedCorpus::default();
    let mut total = 0usize;
    let mut seen_ids: HashMap<String, usize> = HashMap::new();
    let mut item_pos: HashMap<String, usize> = HashMap::new();

    for line in reader.lines() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        match parse_record(trimmed) {
            Some(Record::Artifact) => {}
            Some(Record::Review(mut review)) => {
                total += 1;
                let n = seen_ids.entry(review.review_id.clone()).or_insert(0);
                *n += 1;
                if *n > 1 {
                    review.review_id = format!("{}#{}", review.review_id, *n - 1);
                }
                if review.has_empty_text() {
                    out.empty_text += 1;
                }
                out.reviews.push(review);
            }
            Some(Record::Meta(meta)) => {
                total += 1;
                // Later metadata for the same item overrides earlier lines.
                match item_pos.get(&meta.item_id) {
                    Some(&i) => out.items[i] = meta,
                    None => {
                        item_pos.insert(meta.item_id.clone(), out.items.len());
                        out.items.push(meta);
                    }
                }
            }
            None => {
                total += 1;
                out.skipped += 1;
            }
        }
    }

    if total > 0 && out.skipped * 2 > total {
        return Err(CorpusError::Format {
            malformed: out.skipped,
            total,
        });
    }
    Ok(out)
}

/// Iterative k-core: drop users and items with fewer than `k` interactions
/// until no entity is below threshold. Input order is preserved.
pub fn kcore_filter(reviews: &[Review], k: usize) -> Vec<Review> {
    assert!(k >= 1, "k-core threshold must be at least 1");

    let mut user_deg: HashMap<&str, usize> = HashMap::new();
    let mut item_deg: HashMap<&str, usize> = HashMap::new();
    let mut by_user: HashMap<&str, Vec<usize>> = HashMap::new();
    let mut by_item: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, r) in reviews.iter().enumerate() {
        *user_deg.entry(&r.user_id).or_default() += 1;
        *item_deg.entry(&r.item_id).or_default() += 1;
        by_user.entry(&r.user_id).or_default().push(i);
        by_item.entry(&r.item_id).or_default().push(i);
    }

    let mut alive = vec![true; reviews.len()];
    let mut dead_users: HashSet<&str> = HashSet::new();
    let mut dead_items: HashSet<&str> = HashSet::new();
    let mut queue: VecDeque<(bool, &str)> = VecDeque::new();
    for (u, &d) in &user_deg {
        if d < k {
            queue.push_back((true, u));
        }
    }
    for (it, &d) in &item_deg {
        if d < k {
            queue.push_back((false, it));
        }
    }

    while let Some((is_user, id)) = queue.pop_front() {
        let newly_dead = if is_user {
            dead_users.insert(id)
        } else {
            dead_items.insert(id)
        };
        if !newly_dead {
            continue;
        }
        let rows = if is_user { &by_user[id] } else { &by_item[id] };
        for &row in rows {
            if !alive[row] {
                continue;
            }
            alive[row] = false;
            let r = &reviews[row];
            if is_user {
                let d = item_deg.get_mut(r.item_id.as_str()).unwrap();
                *d -= 1;
                if *d < k && !dead_items.contains(r.item_id.as_str()) {
                    queue.push_back((false, &r.item_id));
                }
            } else {
                let d = user_deg.get_mut(r.user_id.as_str()).unwrap();
                *d -= 1;
                if *d < k && !dead_users.contains(r.user_id.as_str()) {
                    queue.push_back((true, &r.user_id));
                }
            }
        }
    }

    reviews
        .iter()
        .zip(alive)
        .filter_map(|(r, keep)| keep.then(|| r.clone()))
        .collect()
}

/// One chronological sequence per user, ordered by user id.
///
/// Events are sorted by timestamp with ties broken by review id, so the
/// result does not depend on input order.
pub fn build_sequences(reviews: &[Review]) -> Vec<InteractionSequence> {
    let mut grouped: BTreeMap<&str, Vec<&Review>> = BTreeMap::new();
    for r in reviews {
        grouped.entry(&r.user_id).or_default().push(r);
    }
    grouped
        .into_iter()
        .map(|(user, mut rs)| {
            rs.sort_by(|a, b| {
                a.timestamp
                    .cmp(&b.timestamp)
                    .then_with(|| a.review_id.cmp(&b.review_id))
            });
            InteractionSequence {
                user_id: user.to_string(),
                events: rs
                    .into_iter()
                    .map(|r| Event {
                        item_id: r.item_id.clone(),
                        review_id: r.review_id.clone(),
                        timestamp: r.timestamp,
                    })
                    .collect(),
            }
        })
        .collect()
}

pub fn leave_one_out_split(seq: &InteractionSequence) -> Result<SplitSpec, CorpusError> {
    let n = seq.events.len();
    if n < 3 {
        return Err(CorpusError::Split {
            user_id: seq.user_id.clone(),
            len: n,
        });
    }
    Ok(SplitSpec {
        user_id: seq.user_id.clone(),
        train: seq.events[..n - 2].to_vec(),
        validation: seq.events[n - 2].clone(),
        test: seq.events[n - 1].clone(),
    })
}

/// Summary statistics after preprocessing.
///
/// `mean_length` is events per user and `density` is
/// interactions / (users * items).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub mean_length: f64,
    pub density: f64,
}

impl CorpusStats {
    pub fn compute(reviews: &[Review]) -> Self {
        let users: HashSet<&str> = reviews.iter().map(|r| r.user_id.as_str()).collect();
        let items: HashSet<&str> = reviews.iter().map(|r| r.item_id.as_str()).collect();
        let interactions = reviews.len();
        let (u, i) = (users.len(), items.len());
        CorpusStats {
            users: u,
            items: i,
            interactions,
            mean_length: if u == 0 { 0.0 } else { interactions as f64 / u as f64 },
            density: if u == 0 || i == 0 {
                0.0
            } else {
                interactions as f64 / (u as f64 * i as f64)
            },
        }
    }

    pub fn table(&self) -> String {
        format!(
            "{:>8} {:>8} {:>12} {:>8} {:>10}\n{:>8} {:>8} {:>12} {:>8.2} {:>10.1e}\n",
            "Users",
            "Items",
            "Interact",
            "Length",
            "Density",
            self.users,
            self.items,
            self.interactions,
            self.mean_length,
            self.density
        )
    }
}

/// Write reviews and item metadata in canonical line-delimited form.
pub fn write_canonical<W: Write>(
    mut out: W,
    reviews: &[Review],
    items: &[ItemMeta],
) -> std::io::Result<()> {
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
    }
    for r in reviews {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

/// Lookup tables over a preprocessed corpus.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub reviews: Vec<Review>,
    pub items: Vec<ItemMeta>,
    review_pos: HashMap<String, usize>,
    item_pos: HashMap<String, usize>,
}

impl Corpus {
    /// Items without metadata get a placeholder title equal to their id.
    pub fn new(reviews: Vec<Review>, items: Vec<ItemMeta>) -> Self {
        let reviewed: HashSet<&str> = reviews.iter().map(|r| r.item_id.as_str()).collect();
        let mut kept: Vec<ItemMeta> = items
            .into_iter()
            .filter(|m| reviewed.contains(m.item_id.as_str()))
            .collect();
        let known: HashSet<String> = kept.iter().map(|m| m.item_id.clone()).collect();
        let mut missing: Vec<&str> = reviewed
            .into_iter()
            .filter(|id| !known.contains(*id))
            .collect();
        missing.sort_unstable();
        kept.extend(missing.into_iter().map(|id| ItemMeta::new(id, "")));
        kept.sort_by(|a, b| a.item_id.cmp(&b.item_id));

        let review_pos = reviews
            .iter()
            .enumerate()
            .map(|(i, r)| (r.review_id.clone(), i))
            .collect();
        let item_pos = kept
            .iter()
            .enumerate()
            .map(|(i, m)| (m.item_id.clone(), i))
            .collect();
        Corpus {
            reviews,
            items: kept,
            review_pos,
            item_pos,
        }
    }

    pub fn review(&self, review_id: &str) -> Option<&Review> {
        self.review_pos.get(review_id).map(|&i| &self.reviews[i])
    }

    pub fn item(&self, item_id: &str) -> Option<&ItemMeta> {
        self.item_pos.get(item_id).map(|&i| &self.items[i])
    }

    pub fn title<'a>(&'a self, item_id: &'a str) -> &'a str {
        self.item(item_id).map_or(item_id, |m| m.title.as_str())
    }

    pub fn sequences(&self) -> Vec<InteractionSequence> {
        build_sequences(&self.reviews)
    }
}
