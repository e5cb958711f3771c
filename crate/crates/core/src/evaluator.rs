//! Query → gallery ranking and mAP / CMC scoring.
//!
//! Gallery items sharing both identity and camera with the query are removed
//! before ranking. Distance ties are broken by gallery `sample_id`.

use std::cmp::Ordering;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRecord {
    pub sample_id: String,
    pub identity: u32,
    pub camera: u32,
    pub vector: Vec<f64>,
}

/// Ordered gallery for one query. `excluded` items are listed after the
/// ranked ones and never count.
#[derive(Clone, Debug, PartialEq)]
pub struct RankingResult {
    pub query: String,
    pub gallery: Vec<String>,
    pub distances: Vec<f64>,
    pub matches: Vec<bool>,
    pub excluded: Vec<bool>,
}

impl RankingResult {
    /// Match flags of the ranked (non-excluded) items in order.
    pub fn ranked_matches(&self) -> impl Iterator<Item = bool> + '_ {
        self.matches.iter().zip(&self.excluded).filter(|(_, &x)| !x).map(|(&m, _)| m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Metrics {
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "R1")]
    pub r1: f64,
    #[serde(rename = "R5")]
    pub r5: f64,
    #[serde(rename = "R10")]
    pub r10: f64,
    /// CMC(k) for k = 1, 2, …, gallery size.
    #[serde(skip)]
    pub cmc: Vec<f64>,
    pub queries: usize,
    pub dropped_queries: usize,
}

impl Metrics {
    /// CMC at rank `k` (1-based); ranks past the gallery size saturate.
    pub fn cmc_at(&self, k: usize) -> f64 {
        if k == 0 || self.cmc.is_empty() {
            return 0.0;
        }
        self.cmc[k.min(self.cmc.len()) - 1]
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn check_dims(queries: &[EmbeddingRecord], gallery: &[EmbeddingRecord]) -> Result<()> {
    let dim = queries.first().or(gallery.first()).map_or(0, |r| r.vector.len());
    if let Some(r) = queries.iter().chain(gallery).find(|r| r.vector.len() != dim) {
        return Err(Error::shape(
            "distance_matrix",
            format!("`{}` has {} dims, expected {dim}", r.sample_id, r.vector.len()),
        ));
    }
    if let Some(r) = queries.iter().chain(gallery).find(|r| r.vector.iter().any(|v| !v.is_finite())) {
        return Err(Error::InvalidValue(format!("non-finite embedding for `{}`", r.sample_id)));
    }
    Ok(())
}

/// Row `i`, column `j`: distance from query `i` to gallery item `j`.
pub fn distance_matrix(queries: &[EmbeddingRecord], gallery: &[EmbeddingRecord]) -> Result<Vec<Vec<f64>>> {
    check_dims(queries, gallery)?;
    Ok(queries
        .iter()
        .map(|q| gallery.iter().map(|g| euclidean(&q.vector, &g.vector)).collect())
        .collect())
}

pub fn rank(queries: &[EmbeddingRecord], gallery: &[EmbeddingRecord]) -> Result<Vec<RankingResult>> {
    if gallery.is_empty() {
        return Err(Error::Empty("gallery"));
    }
    let dist = distance_matrix(queries, gallery)?;
    Ok(queries
        .iter()
        .zip(&dist)
        .map(|(q, row)| {
            let mut order: Vec<usize> = (0..gallery.len()).collect();
            let excluded = |j: usize| gallery[j].identity == q.identity && gallery[j].camera == q.camera;
            order.sort_by(|&a, &b| {
                excluded(a)
                    .cmp(&excluded(b))
                    .then(row[a].partial_cmp(&row[b]).unwrap_or(Ordering::Equal))
                    .then_with(|| gallery[a].sample_id.cmp(&gallery[b].sample_id))
            });
            RankingResult {
                query: q.sample_id.clone(),
                gallery: order.iter().map(|&j| gallery[j].sample_id.clone()).collect(),
                distances: order.iter().map(|&j| row[j]).collect(),
                matches: order.iter().map(|&j| gallery[j].identity == q.identity).collect(),
                excluded: order.iter().map(|&j| excluded(j)).collect(),
            }
        })
        .collect())
}

pub fn evaluate(rankings: &[RankingResult]) -> Result<Metrics> {
    let width = rankings.iter().map(|r| r.gallery.len()).max().unwrap_or(0);
    if width == 0 {
        return Err(Error::Empty("gallery"));
    }
    let mut hits_at = vec![0usize; width];
    let mut ap_sum = 0.0;
    let mut used = 0;
    for r in rankings {
        let mut found = 0usize;
        let mut precision_sum = 0.0;
        let mut first = None;
        for (i, m) in r.ranked_matches().enumerate() {
            if m {
                found += 1;
                precision_sum += found as f64 / (i + 1) as f64;
                first.get_or_insert(i);
            }
        }
        let Some(first) = first else { continue };
        used += 1;
        ap_sum += precision_sum / found as f64;
        hits_at[first] += 1;
    }
    summarize(ap_sum, used, rankings.len(), &hits_at)
}

fn summarize(ap_sum: f64, used: usize, total: usize, hits_at: &[usize]) -> Result<Metrics> {
    if used == 0 {
        return Err(Error::Empty("queries with a cross-camera match"));
    }
    let mut acc = 0;
    let cmc: Vec<f64> = hits_at
        .iter()
        .map(|h| {
            acc += h;
            acc as f64 / used as f64
        })
        .collect();
    let mut m = Metrics {
        map: ap_sum / used as f64,
        r1: 0.0,
        r5: 0.0,
        r10: 0.0,
        cmc,
        queries: used,
        dropped_queries: total - used,
    };
    m.r1 = m.cmc_at(1);
    m.r5 = m.cmc_at(5);
    m.r10 = m.cmc_at(10);
    Ok(m)
}

/// Straightforward scorer sharing no code with [`rank`]/[`evaluate`]: each
/// candidate's rank is found by counting the candidates ahead of it.
pub fn evaluate_reference(queries: &[EmbeddingRecord], gallery: &[EmbeddingRecord]) -> Result<Metrics> {
    if gallery.is_empty() {
        return Err(Error::Empty("gallery"));
    }
    check_dims(queries, gallery)?;
    let mut hits_at = vec![0usize; gallery.len()];
    let mut ap_sum = 0.0;
    let mut used = 0;
    for q in queries {
        let cands: Vec<(f64, &str, bool)> = gallery
            .iter()
            .filter(|g| !(g.identity == q.identity && g.camera == q.camera))
            .map(|g| {
                let mut sq = 0.0;
                for k in 0..g.vector.len() {
                    sq += (q.vector[k] - g.vector[k]).powi(2);
                }
                (sq.sqrt(), g.sample_id.as_str(), g.identity == q.identity)
            })
            .collect();
        let ahead = |c: &(f64, &str, bool), o: &(f64, &str, bool)| o.0 < c.0 || (o.0 == c.0 && o.1 < c.1);
        let mut relevant_ranks: Vec<usize> = cands
            .iter()
            .filter(|c| c.2)
            .map(|c| 1 + cands.iter().filter(|o| ahead(c, o)).count())
            .collect();
        if relevant_ranks.is_empty() {
            continue;
        }
        relevant_ranks.sort_unstable();
        used += 1;
        let n = relevant_ranks.len() as f64;
        ap_sum += relevant_ranks.iter().enumerate().map(|(i, &r)| (i + 1) as f64 / r as f64).sum::<f64>() / n;
        hits_at[relevant_ranks[0] - 1] += 1;
    }
    summarize(ap_sum, used, queries.len(), &hits_at)
}

pub fn write_metrics_json(path: &Path, metrics: &Metrics) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(metrics)? + "\n")?;
    Ok(())
}

pub const RANKING_HEADER: [&str; 5] = ["query", "rank", "gallery", "distance", "is_match"];

/// One row per ranked (non-excluded) gallery item.
pub fn write_ranking_csv(path: &Path, rankings: &[RankingResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(RANKING_HEADER)?;
    for r in rankings {
        let ranked = r.gallery.iter().zip(&r.distances).zip(&r.matches).zip(&r.excluded);
        for (i, (((g, d), m), _)) in ranked.filter(|(_, &x)| !x).enumerate() {
            w.write_record([r.query.as_str(), &(i + 1).to_string(), g, &d.to_string(), if *m { "1" } else { "0" }])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, identity: u32, camera: u32, v: &[f64]) -> EmbeddingRecord {
        EmbeddingRecord {
            sample_id: id.into(),
            identity,
            camera,
            vector: v.to_vec(),
        }
    }

    #[test]
    fn three_four_five() {
        let d = distance_matrix(&[rec("q", 0, 0, &[0.0, 0.0])], &[rec("g", 0, 1, &[3.0, 4.0]), rec("h", 0, 1, &[0.0, 0.0])]).unwrap();
        assert_eq!(d, vec![vec![5.0, 0.0]]);
        assert!(distance_matrix(&[rec("q", 0, 0, &[0.0])], &[rec("g", 0, 1, &[3.0, 4.0])]).is_err());
    }

    #[test]
    fn hand_cases() {
        let q = [rec("q", 1, 0, &[0.0])];
        let g = [
            rec("a", 1, 1, &[1.0]),
            rec("b", 2, 1, &[2.0]),
            rec("c", 1, 1, &[3.0]),
            rec("d", 3, 1, &[4.0]),
            rec("e", 4, 1, &[5.0]),
        ];
        let m = evaluate(&rank(&q, &g).unwrap()).unwrap();
        assert!((m.map - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(m.r1, 1.0);
        assert_eq!(m, evaluate_reference(&q, &g).unwrap());
    }

    #[test]
    fn same_camera_match_drops_query() {
        let q = [rec("q1", 1, 0, &[0.0]), rec("q2", 2, 0, &[0.0])];
        let g = [rec("a", 1, 0, &[0.0]), rec("b", 2, 1, &[1.0]), rec("c", 3, 1, &[0.5])];
        let m = evaluate(&rank(&q, &g).unwrap()).unwrap();
        assert_eq!((m.queries, m.dropped_queries), (1, 1));
        assert!((m.map - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!((m.r1, m.r5), (0.0, 1.0));
    }

    #[test]
    fn ties_use_sample_id() {
        let q = [rec("q", 1, 0, &[0.0])];
        let g = [rec("z", 2, 1, &[1.0]), rec("a", 1, 1, &[1.0])];
        let r = rank(&q, &g).unwrap();
        assert_eq!(r[0].gallery, vec!["a", "z"]);
        assert!(rank(&q, &[]).is_err());
    }
}
