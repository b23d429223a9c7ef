//! Letter verbalizer, offline scorer and recorded-response replay.

use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{letter, CandidateSlate, RankerError, LETTERS};
use crate::client::{ClientError, LogprobClient, TokenLogprobs};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedResult {
    /// Score per slate position (letter order).
    pub scores: Vec<f64>,
    /// Slate positions by score descending, ties in letter order.
    pub order: Vec<usize>,
    /// 1-based rank of the ground-truth item, when it is on the slate.
    pub rank_of_ground_truth: Option<usize>,
    /// Scored from generated text instead of log-probabilities.
    pub degraded: bool,
}

impl RankedResult {
    /// Stable descending sort of `scores`; `NaN` counts as `-inf`.
    pub fn from_scores(scores: Vec<f64>) -> Self {
        let key = |s: f64| if s.is_nan() { f64::NEG_INFINITY } else { s };
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| key(scores[b]).total_cmp(&key(scores[a])).then(a.cmp(&b)));
        RankedResult {
            scores,
            order,
            rank_of_ground_truth: None,
            degraded: false,
        }
    }

    /// 1-based rank of slate position `pos`.
    pub fn rank_of(&self, pos: usize) -> Option<usize> {
        self.order.iter().position(|&p| p == pos).map(|r| r + 1)
    }

    pub fn with_ground_truth(mut self, pos: Option<usize>) -> Self {
        self.rank_of_ground_truth = pos.and_then(|p| self.rank_of(p));
        self
    }
}

/// Per-letter log-probabilities for a slate of `n`; letters missing from the
/// returned tokens get `-inf`. Tokens are matched after trimming whitespace.
pub fn letter_scores(logprobs: &TokenLogprobs, n: usize) -> Vec<f64> {
    let mut scores = vec![f64::NEG_INFINITY; n];
    for (token, &lp) in logprobs {
        let t = token.trim();
        if t.len() != 1 {
            continue;
        }
        if let Some(i) = LETTERS[..n].iter().position(|&l| l == t.as_bytes()[0]) {
            if lp > scores[i] {
                scores[i] = lp;
            }
        }
    }
    scores
}

/// Slate position named by generated text: a leading letter or the first
/// `(X)` pattern.
fn parse_generated_letter(text: &str, n: usize) -> Option<usize> {
    let in_slate = |c: char| LETTERS[..n].iter().position(|&l| l as char == c);
    let t = text.trim_start().trim_start_matches('(');
    let mut chars = t.chars();
    if let Some(c) = chars.next() {
        if !chars.next().is_some_and(|c| c.is_alphanumeric()) {
            if let Some(i) = in_slate(c) {
                return Some(i);
            }
        }
    }
    let bytes = text.as_bytes();
    bytes
        .windows(3)
        .find(|w| w[0] == b'(' && w[2] == b')' && in_slate(w[1] as char).is_some())
        .and_then(|w| in_slate(w[1] as char))
}

/// Score a rendered prompt with the client's first-token log-probabilities.
/// Clients without log-probabilities fall back to parsing generated text,
/// which is flagged as degraded.
pub fn score_with_verbalizer(
    client: &dyn LogprobClient,
    prompt: &str,
    slate: &CandidateSlate,
) -> Result<RankedResult, RankerError> {
    let n = slate.len();
    match client.first_token_logprobs(prompt) {
        Ok(lp) => Ok(RankedResult::from_scores(letter_scores(&lp, n))),
        Err(ClientError::Unsupported(_)) => {
            let text = match client.generate(prompt) {
                Ok(t) => t,
                Err(ClientError::Unsupported(_)) => return Err(RankerError::Capability),
                Err(e) => return Err(e.into()),
            };
            let mut scores = vec![0.0; n];
            if let Some(i) = parse_generated_letter(&text, n) {
                scores[i] = 1.0;
            } else {
                log::warn!("no candidate letter in generated text {text:?}");
            }
            let mut r = RankedResult::from_scores(scores);
            r.degraded = true;
            Ok(r)
        }
        Err(e) => Err(e.into()),
    }
}

/// Offline scorer: mean retrieved-pros similarity minus mean retrieved-cons
/// similarity; an empty side contributes 0.
pub fn mock_score(slate: &CandidateSlate) -> RankedResult {
    let mean = |xs: &[crate::prefrag::Retrieved]| {
        if xs.is_empty() {
            0.0
        } else {
            xs.iter().map(|r| r.score).sum::<f64>() / xs.len() as f64
        }
    };
    let scores = slate
        .candidates
        .iter()
        .map(|c| mean(&c.retrieved_pros) - mean(&c.retrieved_cons))
        .collect();
    RankedResult::from_scores(scores)
}

pub fn prompt_hash(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplayRecord {
    pub prompt_sha256: String,
    pub logprobs: TokenLogprobs,
}

/// [`LogprobClient`] answering from recorded responses keyed by prompt hash.
#[derive(Debug, Clone, Default)]
pub struct ReplayClient {
    records: HashMap<String, TokenLogprobs>,
}

impl ReplayClient {
    pub fn from_reader<R: BufRead>(reader: R) -> Result<Self, ClientError> {
        let mut records = HashMap::new();
        for line in reader.lines() {
            let line = line.map_err(|e| ClientError::Other(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ReplayRecord =
                serde_json::from_str(&line).map_err(|e| ClientError::Decode(e.to_string()))?;
            records.insert(rec.prompt_sha256, rec.logprobs);
        }
        Ok(ReplayClient { records })
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self, ClientError> {
        let file = std::fs::File::open(path).map_err(|e| ClientError::Other(e.to_string()))?;
        Self::from_reader(std::io::BufReader::new(file))
    }

    pub fn insert(&mut self, prompt: &str, logprobs: TokenLogprobs) {
        self.records.insert(prompt_hash(prompt), logprobs);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

impl LogprobClient for ReplayClient {
    fn first_token_logprobs(&self, prompt: &str) -> Result<TokenLogprobs, ClientError> {
        let h = prompt_hash(prompt);
        self.records
            .get(&h)
            .cloned()
            .ok_or_else(|| ClientError::Other(format!("no recorded response for prompt {h}")))
    }
}

/// Letter label of slate position `pos`.
pub fn label(pos: usize) -> String {
    letter(pos).to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prefrag::Retrieved;
    use crate::ranker::Candidate;

    fn slate(n: usize) -> CandidateSlate {
        CandidateSlate {
            candidates: (0..n)
                .map(|i| Candidate {
                    item_id: format!("i{i}"),
                    title: format!("t{i}"),
                    retrieved_pros: vec![],
                    retrieved_cons: vec![],
                })
                .collect(),
        }
    }

    fn lp(pairs: &[(&str, f64)]) -> TokenLogprobs {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    struct TextOnly(&'static str);

    impl LogprobClient for TextOnly {
        fn first_token_logprobs(&self, _: &str) -> Result<TokenLogprobs, ClientError> {
            Err(ClientError::Unsupported("logprobs"))
        }

        fn generate(&self, _: &str) -> Result<String, ClientError> {
            Ok(self.0.to_string())
        }
    }

    struct Nothing;

    impl LogprobClient for Nothing {
        fn first_token_logprobs(&self, _: &str) -> Result<TokenLogprobs, ClientError> {
            Err(ClientError::Unsupported("logprobs"))
        }
    }

    #[test]
    fn ordering_by_logprob() {
        let mut c = ReplayClient::default();
        c.insert("p", lp(&[("A", -0.1), (" B", -2.3)]));
        let r = score_with_verbalizer(&c, "p", &slate(2)).unwrap();
        assert_eq!(r.order, [0, 1]);
        assert!(!r.degraded);
    }

    #[test]
    fn ties_keep_letter_order_and_missing_go_last() {
        let scores = letter_scores(&lp(&[("C", -1.0), ("B", -1.0), ("Z", 0.0), ("cat", 0.0)]), 4);
        assert_eq!(scores[0], f64::NEG_INFINITY);
        let r = RankedResult::from_scores(scores);
        assert_eq!(r.order, [1, 2, 0, 3]);
    }

    #[test]
    fn generation_fallback_is_degraded() {
        let r = score_with_verbalizer(&TextOnly(" (C) because"), "p", &slate(4)).unwrap();
        assert!(r.degraded);
        assert_eq!(r.order, [2, 0, 1, 3]);
        let r = score_with_verbalizer(&TextOnly("The answer is (B)."), "p", &slate(4)).unwrap();
        assert_eq!(r.order[0], 1);
        let r = score_with_verbalizer(&TextOnly("no idea"), "p", &slate(3)).unwrap();
        assert_eq!(r.order, [0, 1, 2]);
    }

    #[test]
    fn capability_error() {
        assert!(matches!(score_with_verbalizer(&Nothing, "p", &slate(2)), Err(RankerError::Capability)));
    }

    #[test]
    fn replay_missing_prompt() {
        let c = ReplayClient::default();
        assert!(matches!(score_with_verbalizer(&c, "p", &slate(2)), Err(RankerError::Client(_))));
    }

    #[test]
    fn replay_file_format() {
        let line = serde_json::json!({"prompt_sha256": prompt_hash("hello"), "logprobs": {"B": -0.5, "A": -1.5}});
        let c = ReplayClient::from_reader(line.to_string().as_bytes()).unwrap();
        let r = score_with_verbalizer(&c, "hello", &slate(3)).unwrap();
        assert_eq!(r.order, [1, 0, 2]);
    }

    #[test]
    fn mock_prefers_matching_pros() {
        let mut s = slate(3);
        s.candidates[1].retrieved_pros = vec![Retrieved {
            text: "crunchy texture".into(),
            score: 0.9,
            row: 0,
        }];
        s.candidates[2].retrieved_cons = vec![Retrieved {
            text: "salty seasoning".into(),
            score: 0.4,
            row: 1,
        }];
        let r = mock_score(&s).with_ground_truth(Some(1));
        assert_eq!(r.order, [1, 0, 2]);
        assert_eq!(r.rank_of_ground_truth, Some(1));
        assert_eq!(mock_score(&slate(5)).order, [0, 1, 2, 3, 4]);
    }
}
