//! Per-item feature matrices and exact top-K retrieval.
//!
//! File layout (little-endian):
//!
//! ```text
//! magic       b"PRAG"
//! version     u32 (= 1)
//! dim         u32
//! row_count   u64
//! rows        row_count * dim f32
//! offsets     (row_count + 1) u64 into the text blob
//! text blob   UTF-8
//! group_count u32
//! groups      item_id (u32 length + bytes), pros start/len u64, cons start/len u64
//! skipped     u64
//! fingerprint u32 length + UTF-8 bytes
//! ```

use std::collections::{BTreeMap, HashSet};
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::adapter::{read_str, write_str, ProjectionAdapter};
use super::vector::is_usable;
use super::PrefragError;
use crate::client::Embedder;
use crate::extraction::{ItemFeatures, UserPreferences};
use crate::text::{join_phrases, normalize};

pub const INDEX_MAGIC: &[u8; 4] = b"PRAG";
pub const INDEX_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Pros,
    Cons,
}

/// Borrowed rows with their phrase texts.
#[derive(Debug, Clone, Copy)]
pub struct FeatureMatrix<'a> {
    pub dim: usize,
    pub rows: &'a [f32],
    pub texts: &'a [String],
}

impl<'a> FeatureMatrix<'a> {
    pub fn new(dim: usize, rows: &'a [f32], texts: &'a [String]) -> Self {
        assert_eq!(rows.len(), dim * texts.len(), "row count must match text count");
        FeatureMatrix { dim, rows, texts }
    }

    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }

    pub fn row(&self, i: usize) -> &'a [f32] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Retrieved {
    pub text: String,
    pub score: f64,
    pub row: usize,
}

/// Top `k` rows by dot product with `e` (cosine for unit rows and query),
/// ties broken by row order.
pub fn retrieve_topk(e: &[f32], matrix: FeatureMatrix<'_>, k: usize) -> Vec<Retrieved> {
    if k == 0 || matrix.is_empty() {
        return Vec::new();
    }
    assert_eq!(e.len(), matrix.dim, "query dimension must match the index");
    let mut scored: Vec<(f64, usize)> = (0..matrix.len())
        .map(|i| {
            let s = matrix
                .row(i)
                .iter()
                .zip(e)
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum::<f64>();
            // -0.0 and 0.0 must tie under total_cmp
            (s + 0.0, i)
        })
        .collect();
    let by_rank = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, by_rank);
        scored.truncate(k);
    }
    scored.sort_by(by_rank);
    scored
        .into_iter()
        .map(|(score, row)| Retrieved {
            text: matrix.texts[row].clone(),
            score,
            row,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct ItemGroups {
    pros: Range<usize>,
    cons: Range<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureIndex {
    dim: usize,
    rows: Vec<f32>,
    texts: Vec<String>,
    groups: BTreeMap<String, ItemGroups>,
    skipped: usize,
}

/// Projected, normalized vector of one text; `None` if unusable.
fn encode_text(
    text: &str,
    embedder: &dyn Embedder,
    adapter: &ProjectionAdapter,
) -> Result<Option<Vec<f32>>, PrefragError> {
    let mut v = embedder.embed(&[text.to_string()])?;
    let v = v.pop().ok_or_else(|| PrefragError::Domain("embedder returned no vector".into()))?;
    if !is_usable(&v) {
        return Ok(None);
    }
    adapter.project_normalized(&v)
}

impl FeatureIndex {
    /// Embed, project and normalize every phrase, grouped by item and
    /// polarity. Phrases that normalize to an already indexed phrase of the
    /// same group are not repeated; phrases that cannot be embedded are
    /// skipped and counted.
    pub fn build(
        features: &[ItemFeatures],
        embedder: &dyn Embedder,
        adapter: &ProjectionAdapter,
    ) -> Result<Self, PrefragError> {
        if embedder.dim() != adapter.in_dim() {
            return Err(PrefragError::Dimension {
                expected: adapter.in_dim(),
                actual: embedder.dim(),
            });
        }
        let mut by_item: BTreeMap<&str, Vec<&ItemFeatures>> = BTreeMap::new();
        for f in features {
            by_item.entry(&f.item_id).or_default().push(f);
        }

        let dim = adapter.out_dim();
        let mut index = FeatureIndex {
            dim,
            rows: Vec::new(),
            texts: Vec::new(),
            groups: BTreeMap::new(),
            skipped: 0,
        };
        for (item, mut reviews) in by_item {
            reviews.sort_by(|a, b| a.review_id.cmp(&b.review_id));
            let pros = index.push_group(reviews.iter().flat_map(|f| &f.pros), embedder, adapter)?;
            let cons = index.push_group(reviews.iter().flat_map(|f| &f.cons), embedder, adapter)?;
            index.groups.insert(item.to_string(), ItemGroups { pros, cons });
        }
        Ok(index)
    }

    fn push_group<'a>(
        &mut self,
        phrases: impl Iterator<Item = &'a String>,
        embedder: &dyn Embedder,
        adapter: &ProjectionAdapter,
    ) -> Result<Range<usize>, PrefragError> {
        let start = self.texts.len();
        let mut seen = HashSet::new();
        for phrase in phrases {
            if !seen.insert(normalize(phrase)) {
                continue;
            }
            match encode_text(phrase, embedder, adapter) {
                Ok(Some(v)) => {
                    self.rows.extend_from_slice(&v);
                    self.texts.push(phrase.clone());
                }
                Ok(None) | Err(PrefragError::Client(_)) => {
                    log::warn!("could not embed phrase {phrase:?}; skipped");
                    self.skipped += 1;
                }
                Err(e) => return Err(e),
            }
        }
        Ok(start..self.texts.len())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row_count(&self) -> usize {
        self.texts.len()
    }

    pub fn skipped(&self) -> usize {
        self.skipped
    }

    pub fn item_count(&self) -> usize {
        self.groups.len()
    }

    pub fn contains(&self, item_id: &str) -> bool {
        self.groups.contains_key(item_id)
    }

    /// Rows of one (item, polarity); empty for unknown items.
    pub fn matrix(&self, item_id: &str, polarity: Polarity) -> FeatureMatrix<'_> {
        let range = match self.groups.get(item_id) {
            Some(g) if polarity == Polarity::Pros => g.pros.clone(),
            Some(g) => g.cons.clone(),
            None => 0..0,
        };
        FeatureMatrix::new(
            self.dim,
            &self.rows[range.start * self.dim..range.end * self.dim],
            &self.texts[range],
        )
    }

    pub fn write_to<W: Write>(&self, mut w: W, fingerprint: &str) -> std::io::Result<()> {
        w.write_all(INDEX_MAGIC)?;
        w.write_u32::<LittleEndian>(INDEX_VERSION)?;
        w.write_u32::<LittleEndian>(self.dim as u32)?;
        w.write_u64::<LittleEndian>(self.row_count() as u64)?;
        for &x in &self.rows {
            w.write_f32::<LittleEndian>(x)?;
        }
        let mut offset = 0u64;
        w.write_u64::<LittleEndian>(0)?;
        for t in &self.texts {
            offset += t.len() as u64;
            w.write_u64::<LittleEndian>(offset)?;
        }
        for t in &self.texts {
            w.write_all(t.as_bytes())?;
        }
        w.write_u32::<LittleEndian>(self.groups.len() as u32)?;
        for (item, g) in &self.groups {
            write_str(&mut w, item)?;
            for r in [&g.pros, &g.cons] {
                w.write_u64::<LittleEndian>(r.start as u64)?;
                w.write_u64::<LittleEndian>(r.len() as u64)?;
            }
        }
        w.write_u64::<LittleEndian>(self.skipped as u64)?;
        write_str(&mut w, fingerprint)?;
        w.flush()
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<(Self, String), PrefragError> {
        let bad = |reason: &str| PrefragError::Format {
            kind: "index",
            reason: reason.to_string(),
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != INDEX_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != INDEX_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let dim = r.read_u32::<LittleEndian>()? as usize;
        let row_count = r.read_u64::<LittleEndian>()? as usize;
        let mut rows = vec![0f32; row_count * dim];
        r.read_f32_into::<LittleEndian>(&mut rows)?;
        let mut offsets = vec![0u64; row_count + 1];
        r.read_u64_into::<LittleEndian>(&mut offsets)?;
        if offsets[0] != 0 || offsets.windows(2).any(|w| w[1] < w[0]) {
            return Err(bad("text offsets not monotone"));
        }
        let mut blob = vec![0u8; offsets[row_count] as usize];
        r.read_exact(&mut blob)?;
        let texts = offsets
            .windows(2)
            .map(|w| {
                String::from_utf8(blob[w[0] as usize..w[1] as usize].to_vec())
                    .map_err(|e| bad(&e.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;

        let group_count = r.read_u32::<LittleEndian>()? as usize;
        let mut groups = BTreeMap::new();
        for _ in 0..group_count {
            let item = read_str(&mut r)?;
            let mut range = || -> Result<Range<usize>, PrefragError> {
                let start = r.read_u64::<LittleEndian>()? as usize;
                let len = r.read_u64::<LittleEndian>()? as usize;
                if start + len > row_count {
                    return Err(bad("group out of range"));
                }
                Ok(start..start + len)
            };
            let pros = range()?;
            let cons = range()?;
            groups.insert(item, ItemGroups { pros, cons });
        }
        let skipped = r.read_u64::<LittleEndian>()? as usize;
        let fingerprint = read_str(&mut r)?;
        Ok((
            FeatureIndex {
                dim,
                rows,
                texts,
                groups,
                skipped,
            },
            fingerprint,
        ))
    }

    pub fn save(&self, path: impl AsRef<Path>, fingerprint: &str) -> std::io::Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf, fingerprint)?;
        std::fs::write(path, buf)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, String), PrefragError> {
        let bytes = std::fs::read(path)?;
        Self::read_from(bytes.as_slice())
    }
}

/// Projected, normalized preference vectors of one user.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct UserVectors {
    pub like: Option<Vec<f32>>,
    pub dislike: Option<Vec<f32>>,
}

pub fn encode_user(
    prefs: &UserPreferences,
    embedder: &dyn Embedder,
    adapter: &ProjectionAdapter,
) -> Result<UserVectors, PrefragError> {
    if prefs.like.is_empty() && prefs.dislike.is_empty() {
        return Err(PrefragError::Domain(format!(
            "user {} has neither likes nor dislikes",
            prefs.user_id
        )));
    }
    let side = |phrases: &[String]| -> Result<Option<Vec<f32>>, PrefragError> {
        if phrases.is_empty() {
            return Ok(None);
        }
        encode_text(&join_phrases(phrases), embedder, adapter)
    };
    Ok(UserVectors {
        like: side(&prefs.like)?,
        dislike: side(&prefs.dislike)?,
    })
}
