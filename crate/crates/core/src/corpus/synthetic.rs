//! Seeded synthetic review corpus with planted tastes.
//!
//! Every user has two liked aspects and one disliked aspect; every item has a
//! three-aspect signature. Users mostly pick items that share a liked aspect
//! and praise exactly the shared aspects, sometimes pick an item with their
//! disliked aspect and complain about it, and occasionally pick at random and
//! leave a review without any aspect words. Aspect words come from the
//! offline extractor's lexicon, so the mock pipeline recovers the plant.

use std::io::Write;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::{ItemMeta, Review};
use crate::extraction::mock::{aspect_by_name, Aspect};

/// Aspects used by the generator.
pub const SYNTHETIC_ASPECTS: &[&str] = &[
    "crunch", "freshness", "sweetness", "saltiness", "spice", "nutrition", "taste", "aroma",
    "packaging", "quality", "weight", "noise",
];

const BRANDS: &[&str] = &["Golden", "Harbor", "Summit", "Maple", "Cedar", "Willow"];
const PRODUCTS: &[&str] = &[
    "Snack Mix", "Trail Bites", "Crackers", "Granola", "Cookies", "Pretzels", "Chips", "Bars",
    "Popcorn", "Nuts",
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub users: usize,
    pub items: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub random_pick: f64,
    pub mixed_pick: f64,
    pub hate_pick: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            users: 200,
            items: 60,
            min_len: 6,
            max_len: 12,
            random_pick: 0.10,
            mixed_pick: 0.15,
            hate_pick: 0.15,
            seed: 20240601,
        }
    }
}

/// Planted structure, for tests that want to check what was recovered.
#[derive(Debug, Clone, PartialEq)]
pub struct Plant {
    /// Per user: (liked aspect names, disliked aspect name).
    pub users: Vec<(String, [&'static str; 2], &'static str)>,
    /// Per item: signature aspect names.
    pub items: Vec<(String, [&'static str; 3])>,
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub reviews: Vec<Review>,
    pub items: Vec<ItemMeta>,
    pub plant: Plant,
}

fn aspect(name: &str) -> &'static Aspect {
    aspect_by_name(name).expect("synthetic aspect in lexicon")
}

fn trigger<R: Rng>(name: &str, rng: &mut R) -> &'static str {
    aspect(name).triggers.choose(rng).copied().expect("aspect has triggers")
}

fn praise<R: Rng>(aspects: &[&str], rng: &mut R) -> String {
    let words: Vec<&str> = aspects.iter().map(|a| trigger(a, rng)).collect();
    let body = match words.as_slice() {
        [one] => one.to_string(),
        [a, b] => format!("{a} and {b}"),
        _ => words.join(", "),
    };
    match rng.random_range(0..3) {
        0 => format!("Great {body} snack, would buy again."),
        1 => format!("Really {body}. Love it!"),
        _ => format!("So {body}, exactly what I wanted."),
    }
}

pub fn generate(spec: &SyntheticSpec) -> SyntheticCorpus {
    assert!(spec.items <= BRANDS.len() * PRODUCTS.len(), "not enough distinct titles");
    assert!(spec.min_len >= 3 && spec.min_len <= spec.max_len);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let n = SYNTHETIC_ASPECTS.len();
    let mut triples: Vec<[&'static str; 3]> = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            for k in j + 1..n {
                triples.push([SYNTHETIC_ASPECTS[i], SYNTHETIC_ASPECTS[j], SYNTHETIC_ASPECTS[k]]);
            }
        }
    }
    triples.shuffle(&mut rng);
    assert!(spec.items <= triples.len(), "not enough aspect triples");

    let mut titles: Vec<String> = BRANDS
        .iter()
        .flat_map(|b| PRODUCTS.iter().map(move |p| format!("{b} {p}")))
        .collect();
    titles.shuffle(&mut rng);

    let items: Vec<(String, [&'static str; 3])> = (0..spec.items)
        .map(|i| (format!("B{:08}", 1000 + i), triples[i]))
        .collect();
    let metas: Vec<ItemMeta> = items
        .iter()
        .zip(&titles)
        .map(|((id, _), t)| ItemMeta::new(id.clone(), t.clone()))
        .collect();

    let mut plant_users = Vec::with_capacity(spec.users);
    let mut reviews = Vec::new();
    let start = 1_388_534_400i64;

    for u in 0..spec.users {
        let user_id = format!("A{:05}SYN", u);
        let picked: Vec<&&str> = SYNTHETIC_ASPECTS.choose_multiple(&mut rng, 3).collect();
        let tastes = [*picked[0], *picked[1]];
        let hate = *picked[2];
        plant_users.push((user_id.clone(), tastes, hate));

        let len = rng.random_range(spec.min_len..=spec.max_len);
        let mut used: Vec<usize> = Vec::new();
        let mut ts = start + rng.random_range(0..200) * 86_400;

        for _ in 0..len {
            let fresh = |pred: &dyn Fn(&[&str; 3]) -> bool, used: &[usize]| -> Vec<usize> {
                (0..items.len())
                    .filter(|i| !used.contains(i) && pred(&items[*i].1))
                    .collect()
            };
            let likes = |s: &[&str; 3]| s.iter().any(|a| tastes.contains(a));
            let roll: f64 = rng.random();

            let (pool, kind) = if roll < spec.random_pick {
                (fresh(&|_| true, &used), 0)
            } else if roll < spec.random_pick + spec.mixed_pick {
                (fresh(&|s| s.contains(&hate) && likes(s), &used), 1)
            } else if roll < spec.random_pick + spec.mixed_pick + spec.hate_pick {
                (fresh(&|s| s.contains(&hate) && !likes(s), &used), 2)
            } else {
                (fresh(&|s| likes(s) && !s.contains(&hate), &used), 3)
            };
            let (pool, kind) = if pool.is_empty() {
                (fresh(&|s| likes(s), &used), 3)
            } else {
                (pool, kind)
            };
            let Some(&item) = pool.choose(&mut rng) else { break };
            used.push(item);
            let sig = items[item].1;
            let liked: Vec<&str> = sig.iter().copied().filter(|a| tastes.contains(a)).collect();

            let (rating, text, summary) = match kind {
                0 => (3, "It was okay. Arrived on time.".to_string(), "Fine"),
                1 => (
                    3,
                    format!(
                        "Love the {} part, but the {} side was disappointing.",
                        liked
                            .iter()
                            .map(|a| trigger(a, &mut rng))
                            .collect::<Vec<_>>()
                            .join(" and "),
                        trigger(hate, &mut rng)
                    ),
                    "Mixed feelings",
                ),
                2 => (2, format!("Terrible {} experience. Not for me.", trigger(hate, &mut rng)), "Nope"),
                _ => (rng.random_range(4..=5), praise(&liked, &mut rng), "Recommended"),
            };

            // about one step in eight shares the previous timestamp
            if rng.random_range(0..8) != 0 {
                ts += rng.random_range(1..30) * 86_400;
            }
            reviews.push(Review {
                review_id: format!("{}_{}_{}", user_id, items[item].0, ts),
                user_id: user_id.clone(),
                item_id: items[item].0.clone(),
                rating,
                text,
                summary: Some(summary.to_string()),
                timestamp: ts,
                helpful_votes: rng.random_range(0..4),
            });
        }
    }

    SyntheticCorpus {
        reviews,
        items: metas,
        plant: Plant {
            users: plant_users,
            items,
        },
    }
}

/// Write item metadata then reviews using raw Amazon-2014 field names.
pub fn write_amazon<W: Write>(mut out: W, reviews: &[Review], items: &[ItemMeta]) -> std::io::Result<()> {
    for m in items {
        serde_json::to_writer(&mut out, &json!({"asin": m.item_id, "title": m.title}))?;
        out.write_all(b"\n")?;
    }
    for r in reviews {
        let record = json!({
            "reviewerID": r.user_id,
            "asin": r.item_id,
            "reviewText": r.text,
            "summary": r.summary,
            "overall": r.rating as f64,
            "unixReviewTime": r.timestamp,
            "helpful": [r.helpful_votes, r.helpful_votes + 1],
        });
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_sequences, kcore_filter};
    use crate::extraction::mock::mock_extract;

    #[test]
    fn deterministic() {
        let spec = SyntheticSpec::default();
        assert_eq!(generate(&spec).reviews, generate(&spec).reviews);
        let other = SyntheticSpec { seed: 1, ..spec };
        assert_ne!(generate(&spec).reviews, generate(&other).reviews);
    }

    #[test]
    fn survives_five_core() {
        let c = generate(&SyntheticSpec::default());
        let kept = kcore_filter(&c.reviews, 5);
        assert!(kept.len() * 10 >= c.reviews.len() * 9, "{} of {}", kept.len(), c.reviews.len());
        assert_eq!(build_sequences(&kept).len(), 200);
    }

    #[test]
    fn praised_aspects_are_tastes() {
        let c = generate(&SyntheticSpec::default());
        for r in c.reviews.iter().filter(|r| r.rating >= 4) {
            let (_, tastes, _) = c.plant.users.iter().find(|u| u.0 == r.user_id).unwrap();
            let pros = mock_extract(r.rating, &r.text).positive;
            assert!(!pros.is_empty(), "{}", r.text);
            for p in pros {
                assert!(tastes.iter().any(|t| aspect(t).feature == p), "{p} in {}", r.text);
            }
        }
    }

    #[test]
    fn amazon_round_trip() {
        let c = generate(&SyntheticSpec {
            users: 5,
            ..SyntheticSpec::default()
        });
        let mut buf = Vec::new();
        write_amazon(&mut buf, &c.reviews, &c.items).unwrap();
        let parsed = crate::corpus::parse_reviews(buf.as_slice()).unwrap();
        assert_eq!(parsed.reviews, c.reviews);
        assert_eq!(parsed.items, c.items);
    }
}
