//! Text normalization and hashing shared by the extraction mock, the mock
//! embedder and duplicate detection.

/// Lowercase, replace punctuation with spaces and collapse whitespace.
///
/// Two feature texts are duplicates when their normalized forms are equal.
pub fn normalize(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut pending_space = false;
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            out.extend(ch.to_lowercase());
        } else {
            pending_space = true;
        }
    }
    out
}

/// Lowercased alphanumeric tokens in order of appearance.
pub fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a over raw bytes.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// Separator used when a list of phrases becomes one query or answer text.
pub const PHRASE_SEPARATOR: &str = "; ";

pub fn join_phrases(phrases: &[String]) -> String {
    phrases.join(PHRASE_SEPARATOR)
}
