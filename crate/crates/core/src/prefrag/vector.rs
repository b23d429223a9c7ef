//! Dense vector helpers. Arithmetic is done in f64 regardless of storage.

use super::PrefragError;

pub fn dot<A: Copy + Into<f64>, B: Copy + Into<f64>>(a: &[A], b: &[B]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x.into() * y.into()).sum()
}

pub fn norm<A: Copy + Into<f64>>(a: &[A]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity, clamped to [-1, 1] against rounding.
pub fn cosine<A: Copy + Into<f64>, B: Copy + Into<f64>>(q: &[A], a: &[B]) -> Result<f64, PrefragError> {
    if q.len() != a.len() {
        return Err(PrefragError::Dimension {
            expected: q.len(),
            actual: a.len(),
        });
    }
    let (nq, na) = (norm(q), norm(a));
    if nq == 0.0 || na == 0.0 {
        return Err(PrefragError::Domain("cosine of a zero vector".into()));
    }
    Ok((dot(q, a) / (nq * na)).clamp(-1.0, 1.0))
}

/// Unit-norm f32 copy, or `None` for a zero or non-finite vector.
pub fn normalized_f32(v: &[f64]) -> Option<Vec<f32>> {
    let n = norm(v);
    if n == 0.0 || !n.is_finite() {
        return None;
    }
    Some(v.iter().map(|x| (x / n) as f32).collect())
}

pub fn is_usable(v: &[f32]) -> bool {
    v.iter().all(|x| x.is_finite()) && v.iter().any(|&x| x != 0.0)
}
