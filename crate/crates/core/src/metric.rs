//! Distance metrics and the dense kernels behind them.
//!
//! Every distance in the crate funnels through [`dot`] and [`squared_l2`], and
//! the blocked kernels accumulate each pair in exactly the same order, so a
//! distance computed one query at a time is bitwise equal to the same distance
//! computed inside a batch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

const LANES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Euclidean,
    /// `1 - cos(a, b)`, in `[0, 2]`.
    Cosine,
}

impl Metric {
    pub fn code(self) -> u8 {
        match self {
            Metric::Euclidean => 0,
            Metric::Cosine => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Metric> {
        match code {
            0 => Some(Metric::Euclidean),
            1 => Some(Metric::Cosine),
            _ => None,
        }
    }

    /// Distance from precomputed norms; a zero norm under cosine is treated as
    /// orthogonal (distance 1). Used internally where centroids may legitimately
    /// be zero.
    #[inline]
    pub(crate) fn with_norms<S: Scalar>(self, a: &[S], a_norm: S, b: &[S], b_norm: S) -> S {
        match self {
            Metric::Euclidean => squared_l2(a, b).sqrt(),
            Metric::Cosine => cosine_from_dot(dot(a, b), a_norm, b_norm),
        }
    }

    /// Pairwise routine without norm bookkeeping.
    #[inline]
    pub(crate) fn eval<S: Scalar>(self, a: &[S], b: &[S]) -> S {
        match self {
            Metric::Euclidean => squared_l2(a, b).sqrt(),
            Metric::Cosine => cosine_from_dot(dot(a, b), norm(a), norm(b)),
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Metric::Euclidean => f.write_str("euclidean"),
            Metric::Cosine => f.write_str("cosine"),
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "euclidean" | "l2" => Ok(Metric::Euclidean),
            "cosine" | "angular" => Ok(Metric::Cosine),
            other => Err(Error::usage(format!("unknown metric {other:?}"))),
        }
    }
}

#[inline]
fn cosine_from_dot<S: Scalar>(dot: S, a_norm: S, b_norm: S) -> S {
    let denom = a_norm * b_norm;
    if denom <= S::zero() {
        return S::one();
    }
    let d = S::one() - dot / denom;
    let two = S::one() + S::one();
    d.max(S::zero()).min(two)
}

#[inline]
fn reduce<S: Scalar>(acc: &[S; LANES], tail: S) -> S {
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

#[inline]
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [S::zero(); LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..LANES {
            acc[i] = acc[i] + x[i] * y[i];
        }
    }
    let mut tail = S::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail = tail + *x * *y;
    }
    reduce(&acc, tail)
}

#[inline]
pub fn squared_l2<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [S::zero(); LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..LANES {
            let d = x[i] - y[i];
            acc[i] = acc[i] + d * d;
        }
    }
    let mut tail = S::zero();
    for (x, y) in ra.iter().zip(rb) {
        let d = *x - *y;
        tail = tail + d * d;
    }
    reduce(&acc, tail)
}

#[inline]
pub fn norm<S: Scalar>(a: &[S]) -> S {
    dot(a, a).sqrt()
}

/// Checked pairwise distance.
pub fn distance<S: Scalar>(a: &[S], b: &[S], metric: Metric) -> Result<S> {
    if a.len() != b.len() {
        return Err(Error::usage(format!("dimension mismatch: {} vs {}", a.len(), b.len())));
    }
    if metric == Metric::Cosine {
        let (na, nb) = (norm(a), norm(b));
        if na == S::zero() || nb == S::zero() {
            return Err(Error::domain("cosine distance of a zero vector"));
        }
        return Ok(cosine_from_dot(dot(a, b), na, nb));
    }
    Ok(metric.eval(a, b))
}

/// Distances from `q` to every row of the row-major `block` (`block.len() / dim` rows).
pub fn distance_one_to_many<S: Scalar>(q: &[S], block: &[S], metric: Metric) -> Result<Vec<S>> {
    let dim = q.len();
    if dim == 0 || !block.len().is_multiple_of(dim) {
        return Err(Error::usage(format!(
            "dimension mismatch: query dim {dim}, block of {} elements",
            block.len()
        )));
    }
    let norms = row_norms(block, dim);
    let mut out = vec![S::zero(); block.len() / dim];
    one_to_many_into(q, norm(q), block, &norms, metric, &mut out);
    Ok(out)
}

pub(crate) fn row_norms<S: Scalar>(block: &[S], dim: usize) -> Vec<S> {
    block.chunks_exact(dim).map(norm).collect()
}

pub(crate) fn one_to_many_into<S: Scalar>(q: &[S], q_norm: S, block: &[S], norms: &[S], metric: Metric, out: &mut [S]) {
    let dim = q.len();
    for (i, row) in block.chunks_exact(dim).enumerate() {
        out[i] = metric.with_norms(q, q_norm, row, norms[i]);
    }
}

/// Blocked distances between several queries and every row of `block`:
/// `out[qi * rows + r]`. Four queries share each row load; each pair is
/// accumulated identically to [`one_to_many_into`].
pub(crate) fn many_to_many_into<S: Scalar>(
    queries: &[&[S]],
    query_norms: &[S],
    block: &[S],
    norms: &[S],
    metric: Metric,
    out: &mut [S],
) {
    let nq = queries.len();
    if nq == 0 {
        return;
    }
    let dim = queries[0].len();
    let rows = block.len() / dim;
    debug_assert_eq!(out.len(), nq * rows);
    let mut qi = 0;
    while qi + 4 <= nq {
        let qs = [queries[qi], queries[qi + 1], queries[qi + 2], queries[qi + 3]];
        for (r, row) in block.chunks_exact(dim).enumerate() {
            let raw = match metric {
                Metric::Euclidean => squared_l2_x4(qs, row),
                Metric::Cosine => dot_x4(qs, row),
            };
            for j in 0..4 {
                out[(qi + j) * rows + r] = match metric {
                    Metric::Euclidean => raw[j].sqrt(),
                    Metric::Cosine => cosine_from_dot(raw[j], query_norms[qi + j], norms[r]),
                };
            }
        }
        qi += 4;
    }
    for q in qi..nq {
        one_to_many_into(
            queries[q],
            query_norms[q],
            block,
            norms,
            metric,
            &mut out[q * rows..(q + 1) * rows],
        );
    }
}

#[inline]
fn dot_x4<S: Scalar>(qs: [&[S]; 4], row: &[S]) -> [S; 4] {
    let mut acc = [[S::zero(); LANES]; 4];
    let chunks = row.len() / LANES;
    for c in 0..chunks {
        let base = c * LANES;
        let y = &row[base..base + LANES];
        for (j, q) in qs.iter().enumerate() {
            let x = &q[base..base + LANES];
            for i in 0..LANES {
                acc[j][i] = acc[j][i] + x[i] * y[i];
            }
        }
    }
    let mut out = [S::zero(); 4];
    for (j, q) in qs.iter().enumerate() {
        let mut tail = S::zero();
        for i in chunks * LANES..row.len() {
            tail = tail + q[i] * row[i];
        }
        out[j] = reduce(&acc[j], tail);
    }
    out
}

#[inline]
fn squared_l2_x4<S: Scalar>(qs: [&[S]; 4], row: &[S]) -> [S; 4] {
    let mut acc = [[S::zero(); LANES]; 4];
    let chunks = row.len() / LANES;
    for c in 0..chunks {
        let base = c * LANES;
        let y = &row[base..base + LANES];
        for (j, q) in qs.iter().enumerate() {
            let x = &q[base..base + LANES];
            for i in 0..LANES {
                let d = x[i] - y[i];
                acc[j][i] = acc[j][i] + d * d;
            }
        }
    }
    let mut out = [S::zero(); 4];
    for (j, q) in qs.iter().enumerate() {
        let mut tail = S::zero();
        for i in chunks * LANES..row.len() {
            let d = q[i] - row[i];
            tail = tail + d * d;
        }
        out[j] = reduce(&acc[j], tail);
    }
    out
}
