//! Verification metrics over embeddings: pairwise similarity scores,
//! recall at a target false accept rate, and ROC curves.
//!
//! A pair is accepted when its score is at least the threshold. For a FAR
//! budget the threshold is the smallest observed score whose false accept
//! fraction stays within budget, which maximizes recall.

use std::io::Write;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::RngStream;

const TILE: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Cosine,
    Inner,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub embeddings: Array2<f64>,
    pub labels: Vec<usize>,
}

impl EmbeddingSet {
    pub fn new(embeddings: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if embeddings.nrows() != labels.len() {
            return Err(Error::invalid(format!(
                "{} embeddings but {} labels",
                embeddings.nrows(),
                labels.len()
            )));
        }
        if labels.len() < 2 {
            return Err(Error::invalid("need at least two embeddings"));
        }
        Ok(Self { embeddings, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn select(&self, idx: &[usize]) -> (Array2<f64>, Vec<usize>) {
        let e = self.embeddings.select(ndarray::Axis(0), idx);
        let l = idx.iter().map(|&i| self.labels[i]).collect();
        (e, l)
    }

    /// Keeps every item of `num_identities` randomly chosen labels.
    pub fn subsample_identities(&self, num_identities: usize, stream: &RngStream) -> Result<Self> {
        let mut ids: Vec<usize> = self.labels.clone();
        ids.sort_unstable();
        ids.dedup();
        if num_identities >= ids.len() {
            return Ok(self.clone());
        }
        let mut rng = stream.rng();
        let keep: std::collections::HashSet<usize> =
            ids.choose_multiple(&mut rng, num_identities).copied().collect();
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep.contains(&self.labels[i])).collect();
        let (e, l) = self.select(&idx);
        Self::new(e, l)
    }
}

fn prepared(embeddings: &Array2<f64>, metric: Metric) -> Array2<f64> {
    match metric {
        Metric::Inner => embeddings.clone(),
        Metric::Cosine => {
            let mut e = embeddings.clone();
            for mut row in e.rows_mut() {
                let n = row.dot(&row).sqrt();
                if n > 0.0 {
                    row /= n;
                }
            }
            e
        }
    }
}

/// Scores of all unordered pairs, split into same-label (positive) and
/// different-label (negative) pairs. Rows are processed in tiles; output
/// order is fixed regardless of thread count.
pub fn pairwise_scores(es: &EmbeddingSet, metric: Metric) -> (Vec<f64>, Vec<f64>) {
    scores_of(&es.embeddings, &es.labels, metric)
}

fn scores_of(embeddings: &Array2<f64>, labels: &[usize], metric: Metric) -> (Vec<f64>, Vec<f64>) {
    let e = prepared(embeddings, metric);
    let n = labels.len();
    let tiles: Vec<(Vec<f64>, Vec<f64>)> = (0..n.div_ceil(TILE))
        .into_par_iter()
        .map(|t| {
            let start = t * TILE;
            let end = (start + TILE).min(n);
            let block = e.slice(ndarray::s![start..end, ..]);
            let rest = e.slice(ndarray::s![start.., ..]);
            let sims = block.dot(&rest.t());
            let mut pos = Vec::new();
            let mut neg = Vec::new();
            for i in start..end {
                for j in i + 1..n {
                    let s = sims[[i - start, j - start]];
                    if labels[i] == labels[j] {
                        pos.push(s);
                    } else {
                        neg.push(s);
                    }
                }
            }
            (pos, neg)
        })
        .collect();
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (p, q) in tiles {
        pos.extend(p);
        neg.extend(q);
    }
    (pos, neg)
}

/// Positive and negative scores sorted for repeated threshold queries.
#[derive(Debug, Clone)]
pub struct ScoreSummary {
    pos_ascending: Vec<f64>,
    neg_descending: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecallAtFar {
    pub far_target: f64,
    pub recall: f64,
    /// Smallest accepted score; `+inf` when nothing is accepted and `-inf`
    /// when everything is.
    pub threshold: f64,
}

impl ScoreSummary {
    pub fn new(mut pos: Vec<f64>, mut neg: Vec<f64>) -> Self {
        pos.sort_by(f64::total_cmp);
        neg.sort_by(|a, b| b.total_cmp(a));
        Self {
            pos_ascending: pos,
            neg_descending: neg,
        }
    }

    pub fn num_positive(&self) -> usize {
        self.pos_ascending.len()
    }

    pub fn num_negative(&self) -> usize {
        self.neg_descending.len()
    }

    /// Largest number of false accepts `m` with `m / |neg| <= far`.
    fn false_accept_budget(&self, far: f64) -> usize {
        let n = self.neg_descending.len();
        let nf = n as f64;
        let mut m = ((far * nf).floor() as usize).min(n);
        while m < n && (m + 1) as f64 / nf <= far {
            m += 1;
        }
        while m > 0 && m as f64 / nf > far {
            m -= 1;
        }
        m
    }

    pub fn recall_at(&self, far: f64) -> Result<RecallAtFar> {
        if !(far > 0.0 && far <= 1.0) {
            return Err(Error::invalid(format!("FAR target must be in (0, 1], got {far}")));
        }
        let unresolvable = || Error::UnresolvableFar {
            far,
            negatives: self.num_negative(),
            positives: self.num_positive(),
        };
        if self.pos_ascending.is_empty() || self.neg_descending.is_empty() {
            return Err(unresolvable());
        }
        let m = self.false_accept_budget(far);
        if m == 0 {
            return Err(unresolvable());
        }
        let n_pos = self.pos_ascending.len();
        if m >= self.neg_descending.len() {
            return Ok(RecallAtFar {
                far_target: far,
                recall: 1.0,
                threshold: self.pos_ascending[0].min(*self.neg_descending.last().expect("nonempty")),
            });
        }
        // Any threshold above the (m+1)-th largest negative keeps at most m
        // false accepts; the smallest such observed score maximizes recall.
        let v = self.neg_descending[m];
        let first_pos_above = self.pos_ascending.partition_point(|&p| p <= v);
        let recall = (n_pos - first_pos_above) as f64 / n_pos as f64;
        let negs_above = self.neg_descending.partition_point(|&x| x > v);
        let mut threshold = f64::INFINITY;
        if first_pos_above < n_pos {
            threshold = threshold.min(self.pos_ascending[first_pos_above]);
        }
        if negs_above > 0 {
            threshold = threshold.min(self.neg_descending[negs_above - 1]);
        }
        Ok(RecallAtFar {
            far_target: far,
            recall,
            threshold,
        })
    }
}

pub fn recall_at_far(es: &EmbeddingSet, far_target: f64, metric: Metric) -> Result<f64> {
    let (pos, neg) = pairwise_scores(es, metric);
    Ok(ScoreSummary::new(pos, neg).recall_at(far_target)?.recall)
}

/// Approximate recall@FAR pooling only pairs that fall in the same random
/// minibatch of `batch` items.
pub fn recall_at_far_minibatch(
    es: &EmbeddingSet,
    far_target: f64,
    batch: usize,
    stream: &RngStream,
    metric: Metric,
) -> Result<f64> {
    if batch < 2 {
        return Err(Error::invalid("minibatch size must be >= 2"));
    }
    let mut order: Vec<usize> = (0..es.len()).collect();
    order.shuffle(&mut stream.rng());
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for chunk in order.chunks(batch) {
        let (e, l) = es.select(chunk);
        let (p, n) = scores_of(&e, &l, metric);
        pos.extend(p);
        neg.extend(n);
    }
    Ok(ScoreSummary::new(pos, neg).recall_at(far_target)?.recall)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RecallAtFar>,
}

impl RocCurve {
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "far,recall,threshold")?;
        for p in &self.points {
            writeln!(w, "{},{},{}", p.far_target, p.recall, p.threshold)?;
        }
        Ok(())
    }
}

/// Recall at `num_points` FAR targets spaced geometrically from
/// `1 / |neg|` to 1.
pub fn roc_points(es: &EmbeddingSet, metric: Metric, num_points: usize) -> Result<RocCurve> {
    let (pos, neg) = pairwise_scores(es, metric);
    roc_from_summary(&ScoreSummary::new(pos, neg), num_points)
}

pub fn roc_from_summary(summary: &ScoreSummary, num_points: usize) -> Result<RocCurve> {
    if num_points < 2 {
        return Err(Error::invalid("ROC needs at least two points"));
    }
    if summary.num_negative() == 0 || summary.num_positive() == 0 {
        return Err(Error::UnresolvableFar {
            far: 1.0,
            negatives: summary.num_negative(),
            positives: summary.num_positive(),
        });
    }
    let fmin = 1.0 / summary.num_negative() as f64;
    let points = (0..num_points)
        .map(|i| {
            let far = if i + 1 == num_points {
                1.0
            } else {
                fmin * (1.0 / fmin).powf(i as f64 / (num_points - 1) as f64)
            };
            summary.recall_at(far.max(fmin))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RocCurve { points })
}

/// Recall at the standard FAR targets; `None` where unresolvable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub metric: Metric,
    pub num_embeddings: usize,
    pub positive_pairs: usize,
    pub negative_pairs: usize,
    pub recall_at_far: Vec<(f64, Option<f64>)>,
}

pub fn summarize(summary: &ScoreSummary, metric: Metric, n: usize, fars: &[f64]) -> Result<EvalSummary> {
    let recall_at_far = fars
        .iter()
        .map(|&f| match summary.recall_at(f) {
            Ok(r) => Ok((f, Some(r.recall))),
            Err(Error::UnresolvableFar { .. }) => Ok((f, None)),
            Err(e) => Err(e),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalSummary {
        metric,
        num_embeddings: n,
        positive_pairs: summary.num_positive(),
        negative_pairs: summary.num_negative(),
        recall_at_far,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn pair_counts() {
        let es = EmbeddingSet::new(array![[1.0, 0.0], [2.0, 0.0]], vec![3, 3]).unwrap();
        let (p, n) = pairwise_scores(&es, Metric::Cosine);
        assert_eq!((p.len(), n.len()), (1, 0));
        assert!((p[0] - 1.0).abs() < 1e-15);

        let es = EmbeddingSet::new(
            array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.0, 0.0, -1.0]],
            vec![0, 1, 2, 3],
        )
        .unwrap();
        let (p, n) = pairwise_scores(&es, Metric::Cosine);
        assert_eq!(p.len() + n.len(), 6);
        let mut zeros = n.iter().filter(|&&s| s == 0.0).count();
        zeros += p.iter().filter(|&&s| s == 0.0).count();
        assert_eq!(zeros, 5);
        assert!(EmbeddingSet::new(array![[1.0]], vec![0]).is_err());
        assert!(EmbeddingSet::new(array![[1.0], [2.0]], vec![0]).is_err());
    }

    #[test]
    fn perfect_separation() {
        let s = ScoreSummary::new(vec![1.0; 50], vec![0.0; 5000]);
        let r = s.recall_at(1e-3).unwrap();
        assert_eq!(r.recall, 1.0);
        assert_eq!(r.threshold, 1.0);
    }

    #[test]
    fn unresolvable_far() {
        let s = ScoreSummary::new(vec![1.0; 5], vec![0.0; 10]);
        assert!(matches!(s.recall_at(0.01), Err(Error::UnresolvableFar { .. })));
        let none = ScoreSummary::new(vec![], vec![0.0; 10]);
        assert!(matches!(none.recall_at(0.5), Err(Error::UnresolvableFar { .. })));
        assert!(s.recall_at(0.0).is_err());
        assert!(s.recall_at(1.5).is_err());
        assert_eq!(s.recall_at(1.0).unwrap().recall, 1.0);
    }

    #[test]
    fn ties_at_threshold_are_conservative() {
        // two negatives tied at 0.5: with one allowed false accept neither
        // may pass, so the threshold moves above 0.5
        let s = ScoreSummary::new(vec![0.5, 0.7, 0.9], vec![0.5, 0.5, 0.1, 0.0]);
        let r = s.recall_at(0.25).unwrap();
        assert_eq!(r.threshold, 0.7);
        assert!((r.recall - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn identically_distributed_scores() {
        use rand::Rng;
        let mut rng = RngStream::new(4, 4).rng();
        let pos: Vec<f64> = (0..10_000).map(|_| rng.gen::<f64>()).collect();
        let neg: Vec<f64> = (0..10_000).map(|_| rng.gen::<f64>()).collect();
        let r = ScoreSummary::new(pos, neg).recall_at(0.1).unwrap().recall;
        assert!((r - 0.1).abs() < 0.02, "{r}");
    }

    #[test]
    fn minibatch_equals_allpair_with_one_batch() {
        let mut rng = RngStream::new(1, 1).rng();
        use rand::Rng;
        let n = 60;
        let e = Array2::from_shape_fn((n, 4), |_| rng.gen::<f64>() - 0.5);
        let labels: Vec<usize> = (0..n).map(|i| i % 12).collect();
        let es = EmbeddingSet::new(e, labels).unwrap();
        let full = recall_at_far(&es, 0.05, Metric::Cosine).unwrap();
        let mb = recall_at_far_minibatch(&es, 0.05, n, &RngStream::new(2, 2), Metric::Cosine).unwrap();
        assert_eq!(full, mb);
        assert!(recall_at_far_minibatch(&es, 0.05, 1, &RngStream::new(2, 2), Metric::Cosine).is_err());
    }

    #[test]
    fn roc_is_monotone() {
        let mut rng = RngStream::new(8, 1).rng();
        use rand::Rng;
        let n = 80;
        let e = Array2::from_shape_fn((n, 3), |_| rng.gen::<f64>() - 0.5);
        let labels: Vec<usize> = (0..n).map(|i| i % 10).collect();
        let es = EmbeddingSet::new(e, labels).unwrap();
        let roc = roc_points(&es, Metric::Cosine, 20).unwrap();
        assert_eq!(roc.points.len(), 20);
        for w in roc.points.windows(2) {
            assert!(w[0].far_target <= w[1].far_target);
            assert!(w[0].recall <= w[1].recall);
        }
        assert_eq!(roc.points.last().unwrap().recall, 1.0);
        assert!(roc_points(&es, Metric::Cosine, 1).is_err());
        let mut buf = Vec::new();
        roc.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 21);
    }

    #[test]
    fn subsampling_identities() {
        let e = Array2::from_shape_fn((40, 2), |(i, j)| (i * 2 + j) as f64);
        let labels: Vec<usize> = (0..40).map(|i| i / 4).collect();
        let es = EmbeddingSet::new(e, labels).unwrap();
        let sub = es.subsample_identities(3, &RngStream::new(0, 0)).unwrap();
        assert_eq!(sub.len(), 12);
        let mut ids = sub.labels.clone();
        ids.dedup();
        assert_eq!(ids.len(), 3);
    }
}
