//! Recommendation prompt rendering.

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{letter, CandidateSlate};
use crate::extraction::UserPreferences;

pub const MAX_HISTORY: usize = 20;

const INSTRUCTION: &str = "Instruction:\nGiven user history in chronological order, recommend an item from the candidate pool with its index letter.\n\nInput:\n";
const RESPONSE: &str = "\n\nResponse:\n";
const NONE_NOTED: &str = "none noted";

/// Which prompt fields are rendered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderFlags {
    pub preferences: bool,
    pub features: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Ablation {
    Full,
    NoPref,
    NoReviews,
    NoPrefNoReviews,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::Full,
        Ablation::NoPref,
        Ablation::NoReviews,
        Ablation::NoPrefNoReviews,
    ];

    pub fn flags(self) -> RenderFlags {
        RenderFlags {
            preferences: matches!(self, Ablation::Full | Ablation::NoReviews),
            features: matches!(self, Ablation::Full | Ablation::NoPref),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "FULL",
            Ablation::NoPref => "NO_PREF",
            Ablation::NoReviews => "NO_REVIEWS",
            Ablation::NoPrefNoReviews => "NO_PREF_NO_REVIEWS",
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown ablation variant {s:?}"))
    }
}

fn phrase_list(phrases: &[&str]) -> String {
    if phrases.is_empty() {
        NONE_NOTED.to_string()
    } else {
        phrases.join(", ")
    }
}

/// Render the prompt for one user. Only the latest [`MAX_HISTORY`] titles
/// are kept; missing preferences render as empty lists.
pub fn render_recommendation_prompt(
    history_titles: &[String],
    prefs: Option<&UserPreferences>,
    slate: &CandidateSlate,
    flags: RenderFlags,
) -> String {
    assert!(!history_titles.is_empty(), "history must be nonempty");
    let start = history_titles.len().saturating_sub(MAX_HISTORY);
    let mut out = String::from(INSTRUCTION);
    out.push_str("User history: ");
    out.push_str(&json!(history_titles[start..]).to_string());
    out.push_str(";\n");

    if flags.preferences {
        let (like, dislike) = prefs.map_or((&[][..], &[][..]), |p| (&p.like[..], &p.dislike[..]));
        out.push_str("User preference: ");
        out.push_str(&format!("{{\"Like\":{},\"Dislike\":{}}}", json!(like), json!(dislike)));
        out.push_str(";\n");
    }

    let entries: Vec<String> = slate
        .candidates
        .iter()
        .enumerate()
        .map(|(i, c)| {
            if flags.features {
                format!(
                    "({}) title: {}, pros: {}, cons: {}",
                    letter(i),
                    c.title,
                    phrase_list(&c.pros()),
                    phrase_list(&c.cons())
                )
            } else {
                format!("({}) title: {}", letter(i), c.title)
            }
        })
        .collect();
    out.push_str("Candidate pool: ");
    out.push_str(&entries.join("; "));
    out.push_str(RESPONSE);
    out
}

/// One supervised example: the prompt and the letter of the held-out item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingPair {
    pub prompt: String,
    pub label: String,
}
