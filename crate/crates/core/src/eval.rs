//! Retrieval scoring: junk filtering, ranking, average precision and CMC.

use serde::Serialize;

use crate::error::{Error, Result};

/// Identity label marking distractor images; never a valid match.
pub const JUNK_IDENTITY: i64 = -1;

#[derive(Debug, Clone, PartialEq)]
pub struct GalleryItem {
    pub embedding: Vec<f64>,
    pub identity: i64,
    pub camera: i64,
}

/// A gallery entry that survived filtering, with its distance to the query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub index: usize,
    pub distance: f64,
    pub identity: i64,
    pub camera: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    #[serde(rename = "mAP")]
    pub map: f64,
    /// `cmc[k - 1]` is Rank-k.
    pub cmc: Vec<f64>,
    /// Average precision of every valid query, in query order.
    pub ap: Vec<f64>,
    pub valid_queries: usize,
    /// Queries with no relevant candidate after filtering.
    pub skipped_queries: Vec<usize>,
}

impl EvalReport {
    /// Rank-k for `1 <= k <= k_max`.
    pub fn rank(&self, k: usize) -> f64 {
        self.cmc[k.clamp(1, self.cmc.len()) - 1]
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Drops junk identities and same-identity same-camera entries, then sorts
/// by ascending distance with ties broken by gallery position.
pub fn rank_and_filter(query: &GalleryItem, gallery: &[GalleryItem]) -> Result<Vec<Candidate>> {
    if gallery.is_empty() {
        return Err(Error::contract("gallery is empty"));
    }
    let width = query.embedding.len();
    let mut out = Vec::with_capacity(gallery.len());
    for (index, g) in gallery.iter().enumerate() {
        if g.embedding.len() != width {
            return Err(Error::dim(format!(
                "query width {width}, gallery item {index} width {}",
                g.embedding.len()
            )));
        }
        if g.identity == JUNK_IDENTITY || (g.identity == query.identity && g.camera == query.camera) {
            continue;
        }
        out.push(Candidate {
            index,
            distance: euclidean(&query.embedding, &g.embedding),
            identity: g.identity,
            camera: g.camera,
        });
    }
    out.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.index.cmp(&b.index)));
    Ok(out)
}

/// Mean of precision@r over the ranks r of relevant items; `None` when
/// nothing is relevant.
pub fn average_precision(relevant: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &rel) in relevant.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

pub fn evaluate(queries: &[GalleryItem], gallery: &[GalleryItem], k_max: usize) -> Result<EvalReport> {
    if k_max == 0 {
        return Err(Error::contract("k_max must be positive"));
    }
    let mut ap = Vec::with_capacity(queries.len());
    let mut hits = vec![0usize; k_max];
    let mut skipped = Vec::new();
    for (qi, q) in queries.iter().enumerate() {
        let ranked = rank_and_filter(q, gallery)?;
        let flags: Vec<bool> = ranked.iter().map(|c| c.identity == q.identity).collect();
        let Some(value) = average_precision(&flags) else {
            skipped.push(qi);
            continue;
        };
        ap.push(value);
        let first = flags.iter().position(|&f| f).expect("AP implies a hit");
        for h in hits.iter_mut().skip(first) {
            *h += 1;
        }
    }
    if ap.is_empty() {
        return Err(Error::contract("no query has a relevant gallery item"));
    }
    let valid = ap.len();
    Ok(EvalReport {
        map: ap.iter().sum::<f64>() / valid as f64,
        cmc: hits.iter().map(|&h| h as f64 / valid as f64).collect(),
        ap,
        valid_queries: valid,
        skipped_queries: skipped,
    })
}
