//! Parsing of extraction responses.
//!
//! Models wrap their JSON in prose or code fences often enough that the
//! parser scans for the first balanced `{...}` substring that is valid JSON.

use serde_json::{Map, Value};
use thiserror::Error;

/// Maximum number of phrases kept per list.
pub const MAX_PHRASES: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ResponseError {
    /// No JSON object in the text; worth asking the model again.
    #[error("no JSON object found in response")]
    NoObject,
    #[error("response schema error: {0}")]
    Schema(String),
}

impl ResponseError {
    pub fn is_repairable(&self) -> bool {
        matches!(self, ResponseError::NoObject)
    }
}

/// Positive and negative phrase lists of one extraction (Like/Dislike or
/// Pros/Cons).
#[derive(Debug, Clone, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PolarPhrases {
    pub positive: Vec<String>,
    pub negative: Vec<String>,
}

impl PolarPhrases {
    pub fn is_empty(&self) -> bool {
        self.positive.is_empty() && self.negative.is_empty()
    }
}

/// End offset (exclusive) of the balanced object starting at `start`.
fn balanced_end(bytes: &[u8], start: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if in_string {
            match b {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i + 1);
                }
            }
            _ => {}
        }
    }
    None
}

/// First balanced `{...}` substring of `raw` that parses as a JSON object.
pub fn first_json_object(raw: &str) -> Option<Map<String, Value>> {
    let bytes = raw.as_bytes();
    let mut from = 0;
    while let Some(off) = raw[from..].find('{') {
        let start = from + off;
        if let Some(end) = balanced_end(bytes, start) {
            if let Ok(Value::Object(obj)) = serde_json::from_str::<Value>(&raw[start..end]) {
                return Some(obj);
            }
        }
        from = start + 1;
    }
    None
}

fn phrase_list(obj: &Map<String, Value>, key: &str) -> Result<Vec<String>, ResponseError> {
    let value = obj.get(key).or_else(|| {
        obj.iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(key))
            .map(|(_, v)| v)
    });
    let Some(value) = value else {
        return Err(ResponseError::Schema(format!("missing key {key:?}")));
    };
    let Value::Array(items) = value else {
        return Err(ResponseError::Schema(format!("{key:?} is not an array")));
    };
    let mut out = Vec::new();
    for item in items {
        let Value::String(s) = item else {
            return Err(ResponseError::Schema(format!("{key:?} contains a non-string entry")));
        };
        let s = s.trim();
        if !s.is_empty() {
            out.push(s.to_string());
        }
    }
    out.truncate(MAX_PHRASES);
    Ok(out)
}

fn parse_pair(raw: &str, pos: &str, neg: &str) -> Result<PolarPhrases, ResponseError> {
    let obj = first_json_object(raw).ok_or(ResponseError::NoObject)?;
    Ok(PolarPhrases {
        positive: phrase_list(&obj, pos)?,
        negative: phrase_list(&obj, neg)?,
    })
}

/// Parse a `{"Like": [...], "Dislike": [...]}` response.
pub fn parse_preference_response(raw: &str) -> Result<PolarPhrases, ResponseError> {
    parse_pair(raw, "Like", "Dislike")
}

/// Parse a `{"Pros": [...], "Cons": [...]}` response. Both lists empty means
/// the record should be dropped; callers check [`PolarPhrases::is_empty`].
pub fn parse_feature_response(raw: &str) -> Result<PolarPhrases, ResponseError> {
    parse_pair(raw, "Pros", "Cons")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn clean_object() {
        let p = parse_preference_response(r#"{"Like":["crunchy snacks"],"Dislike":["artificial flavor"]}"#).unwrap();
        assert_eq!(p.positive, ["crunchy snacks"]);
        assert_eq!(p.negative, ["artificial flavor"]);
    }

    #[test]
    fn seven_likes_truncated_to_five() {
        let raw = r#"{"Like":["a","b","c","d","e","f","g"],"Dislike":[]}"#;
        let p = parse_preference_response(raw).unwrap();
        assert_eq!(p.positive, ["a", "b", "c", "d", "e"]);
        assert!(p.negative.is_empty());
    }

    #[test]
    fn trims_and_drops_blank_entries() {
        let raw = r#"{"Pros":["  nutritious ", "", "   "],"Cons":[]}"#;
        let p = parse_feature_response(raw).unwrap();
        assert_eq!(p.positive, ["nutritious"]);
        assert!(p.negative.is_empty());
    }

    #[test]
    fn both_empty_is_drop_signal() {
        let p = parse_feature_response(r#"{"Pros":[],"Cons":[]}"#).unwrap();
        assert!(p.is_empty());
    }

    #[test]
    fn no_object_is_repairable() {
        let err = parse_feature_response("I cannot help with that.").unwrap_err();
        assert_eq!(err, ResponseError::NoObject);
        assert!(err.is_repairable());
    }

    #[test]
    fn wrong_types_are_schema_errors() {
        for raw in [
            r#"{"Pros":"nutritious","Cons":[]}"#,
            r#"{"Pros":[1],"Cons":[]}"#,
            r#"{"Pros":[]}"#,
        ] {
            let err = parse_feature_response(raw).unwrap_err();
            assert!(matches!(err, ResponseError::Schema(_)), "{raw}");
            assert!(!err.is_repairable());
        }
    }

    #[test]
    fn braces_inside_strings_do_not_confuse_scanner() {
        let raw = r#"Note {not json} then {"Pros":["curly } brace"],"Cons":["x { y"]}"#;
        let p = parse_feature_response(raw).unwrap();
        assert_eq!(p.positive, ["curly } brace"]);
        assert_eq!(p.negative, ["x { y"]);
    }

    proptest! {
        #[test]
        fn parser_is_total(raw in ".{0,200}") {
            let _ = parse_preference_response(&raw);
            let _ = parse_feature_response(&raw);
        }

        #[test]
        fn parsed_lists_respect_cap(
            likes in proptest::collection::vec("[a-z ]{0,12}", 0..12),
            dislikes in proptest::collection::vec("[a-z ]{0,12}", 0..12),
            prefix in "[^{}]{0,20}",
        ) {
            let body = serde_json::json!({"Like": likes, "Dislike": dislikes});
            let raw = format!("{prefix}```json\n{body}\n```");
            let p = parse_preference_response(&raw).unwrap();
            prop_assert!(p.positive.len() <= MAX_PHRASES);
            prop_assert!(p.negative.len() <= MAX_PHRASES);
            prop_assert!(p.positive.iter().chain(&p.negative).all(|s| !s.trim().is_empty()));
        }
    }
}
