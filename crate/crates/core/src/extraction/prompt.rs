//! Extraction prompt templates.
//!
//! Review inputs are serialized as compact JSON objects with keys `title`,
//! `review` and `score`, in that order. Changing either template or the
//! serialization requires bumping [`TEMPLATE_VERSION`], which is part of the
//! extraction cache key.

use serde::Serialize;

pub const TEMPLATE_VERSION: &str = "extract-v1";

pub const USER_TEMPLATE: &str = "Instruction:
Given a list of items a user bought along with their title, reviews, and score in JSON format, generate user preferences.

Input:
User reviews: {reviews}

Response:
A JSON object with two keys: Like and Dislike, each containing up to 5 high-level user preferences based on the comments.
Preferences must:
1. Reflect general likes and dislikes, not specific brands or items.
2. Be derived from the content of the reviews.
3. Exclude mentions of delivery time or pricing.
4. Be concise and simple.

Output format:
{
  \"Like\": [\"...\"],
  \"Dislike\": [\"...\"]
}
";

pub const ITEM_TEMPLATE: &str = "Instruction:
Given user reviews of purchased items in JSON format, extract high-level item properties from the comments.

Input:
Item review: {review}

Response:
A JSON object with two keys: Pros and Cons, each containing up to 5 high-level item properties.
Properties must:
1. Summarize general strengths and weaknesses of the items.
2. Be derived from the content of the reviews.
3. Avoid mentioning specific brands or item names.
4. Exclude any comments related to delivery time or pricing.
5. Be simple, short, and concise.

Output format:
{
  \"Pros\": [\"...\"],
  \"Cons\": [\"...\"]
}
";

/// Line prefixes that carry the serialized inputs. The offline mock client
/// reads its inputs back from these lines.
pub const USER_INPUT_PREFIX: &str = "User reviews: ";
pub const ITEM_INPUT_PREFIX: &str = "Item review: ";

/// One review as shown to the extraction model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReviewInput {
    pub item_id: String,
    pub title: String,
    pub text: String,
    pub rating: u8,
}

#[derive(Serialize)]
struct SerializedReview<'a> {
    title: &'a str,
    review: &'a str,
    score: u8,
}

impl ReviewInput {
    fn serialized(&self) -> SerializedReview<'_> {
        let title = if self.title.trim().is_empty() {
            self.item_id.as_str()
        } else {
            self.title.as_str()
        };
        SerializedReview {
            title,
            review: &self.text,
            score: self.rating,
        }
    }
}

pub fn serialize_reviews(reviews: &[ReviewInput]) -> String {
    let list: Vec<_> = reviews.iter().map(ReviewInput::serialized).collect();
    serde_json::to_string(&list).expect("review list serializes")
}

pub fn serialize_review(review: &ReviewInput) -> String {
    serde_json::to_string(&review.serialized()).expect("review serializes")
}

/// Panics on an empty review list.
pub fn render_user_pref_prompt(reviews: &[ReviewInput]) -> String {
    assert!(!reviews.is_empty(), "user preference prompt needs at least one review");
    USER_TEMPLATE.replacen("{reviews}", &serialize_reviews(reviews), 1)
}

pub fn render_item_feature_prompt(review: &ReviewInput) -> String {
    ITEM_TEMPLATE.replacen("{review}", &serialize_review(review), 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(title: &str, text: &str, rating: u8) -> ReviewInput {
        ReviewInput {
            item_id: "B00TEST".into(),
            title: title.into(),
            text: text.into(),
            rating,
        }
    }

    fn slot_line<'a>(prompt: &'a str, prefix: &str) -> &'a str {
        prompt
            .lines()
            .find_map(|l| l.strip_prefix(prefix))
            .expect("slot line present")
    }

    #[test]
    fn empty_title_falls_back_to_item_id() {
        let p = render_item_feature_prompt(&input("  ", "fine", 4));
        assert!(p.contains(r#"{"title":"B00TEST","review":"fine","score":4}"#));
    }

    #[test]
    fn reviews_keep_input_order() {
        let rs = [input("A", "one", 5), input("B", "two", 3), input("C", "three", 1)];
        let p = render_user_pref_prompt(&rs);
        let parsed: serde_json::Value = serde_json::from_str(slot_line(&p, USER_INPUT_PREFIX)).unwrap();
        let titles: Vec<_> = parsed.as_array().unwrap().iter().map(|r| r["title"].as_str().unwrap()).collect();
        assert_eq!(titles, ["A", "B", "C"]);
    }

    #[test]
    fn embedded_quotes_are_escaped() {
        let text = "He said \"best chips\"\nand left a \\ mark";
        let p = render_item_feature_prompt(&input("T", text, 5));
        let line = slot_line(&p, ITEM_INPUT_PREFIX);
        let parsed: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(parsed["review"], text);
    }

    #[test]
    fn empty_review_text_still_renders() {
        let p = render_item_feature_prompt(&input("T", "", 3));
        assert!(p.contains(r#""review":"""#));
        assert!(p.starts_with("Instruction:\n"));
    }
}
