//! Privatizing aggregation of clipped client deltas.
//!
//! Two noise sources are provided: independent Gaussian noise per round, and
//! binary-tree correlated noise where the running sum of deltas is released
//! with the noise of the dyadic blocks covering `[1..t]`. Adaptive clip-norm
//! estimation tracks a target quantile of client update norms.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::{sample_gaussian_vector, ParamVector, RngStream, StreamPurpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mechanism {
    Gaussian,
    Tree,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub noise_multiplier: f64,
    pub clip_norm: f64,
    pub mechanism: Mechanism,
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_multiplier >= 0.0) || !self.noise_multiplier.is_finite() {
            return Err(Error::invalid(format!(
                "noise multiplier must be finite and >= 0, got {}",
                self.noise_multiplier
            )));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::invalid(format!(
                "clip norm must be > 0, got {}",
                self.clip_norm
            )));
        }
        if self.noise_multiplier > 0.0 && self.clip_norm.is_infinite() {
            return Err(Error::invalid(
                "noise requires a finite clip norm (sensitivity is unbounded)",
            ));
        }
        Ok(())
    }

    /// Standard deviation `sigma * gamma` of the noise added to a sum.
    pub fn noise_stddev(&self) -> f64 {
        if self.noise_multiplier == 0.0 {
            0.0
        } else {
            self.noise_multiplier * self.clip_norm
        }
    }
}

/// Sums `updates` in index order. All updates must share one length.
pub fn ordered_sum(updates: &[ParamVector]) -> Result<ParamVector> {
    let first = updates
        .first()
        .ok_or_else(|| Error::invalid("no updates to aggregate"))?;
    let mut acc = vec![0.0; first.len()];
    for u in updates {
        if u.len() != acc.len() {
            return Err(Error::invalid(format!(
                "update length {} differs from {}",
                u.len(),
                acc.len()
            )));
        }
        for (a, x) in acc.iter_mut().zip(u.as_slice()) {
            *a += x;
        }
    }
    ParamVector::new(acc)
}

/// `(sum(updates) + N(0, (sigma * gamma)^2 I)) / |updates|`.
pub fn gaussian_aggregate(
    updates: &[ParamVector],
    cfg: &NoiseConfig,
    stream: &RngStream,
) -> Result<ParamVector> {
    cfg.validate()?;
    let sum = ordered_sum(updates)?;
    let noise = sample_gaussian_vector(sum.len(), cfg.noise_stddev(), stream)?;
    sum.add_scaled(&noise, 1.0)?.scale(1.0 / updates.len() as f64)
}

/// Lazily materialized noise for a binary tree over `total_steps` leaves.
///
/// Node `(level, index)` covers steps `index * 2^level + 1 ..= (index + 1) * 2^level`.
/// Its unit-variance noise is drawn from a stream keyed by the node, so
/// every prefix covering a node sees the same draw.
#[derive(Debug, Clone)]
pub struct TreeState {
    total_steps: u64,
    len: usize,
    seed: u64,
    nodes: HashMap<(u32, u64), ParamVector>,
}

impl TreeState {
    pub fn new(total_steps: u64, len: usize, seed: u64) -> Self {
        Self {
            total_steps,
            len,
            seed,
            nodes: HashMap::new(),
        }
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Dyadic blocks whose union is `[1..t]`, largest first.
    pub fn decomposition(t: u64) -> Vec<(u32, u64)> {
        let mut nodes = Vec::with_capacity(t.count_ones() as usize);
        let mut covered = 0u64;
        for level in (0..64u32).rev() {
            if t & (1u64 << level) != 0 {
                nodes.push((level, covered >> level));
                covered += 1u64 << level;
            }
        }
        nodes
    }

    /// Unit-variance noise of one node.
    pub fn node_noise(&mut self, level: u32, index: u64) -> Result<&ParamVector> {
        if !self.nodes.contains_key(&(level, index)) {
            let stream = RngStream::derive(self.seed, StreamPurpose::TreeNode, level as u64, index);
            let v = sample_gaussian_vector(self.len, 1.0, &stream)?;
            self.nodes.insert((level, index), v);
        }
        Ok(&self.nodes[&(level, index)])
    }

    pub fn materialized_nodes(&self) -> usize {
        self.nodes.len()
    }
}

/// Noise attached to the prefix sum through step `t`: the sum of the
/// `popcount(t)` covering node noises, each scaled to standard deviation
/// `scale`.
pub fn tree_prefix_noise(state: &mut TreeState, t: u64, scale: f64) -> Result<ParamVector> {
    if t == 0 || t > state.total_steps {
        return Err(Error::invalid(format!(
            "tree step {t} outside 1..={}",
            state.total_steps
        )));
    }
    if !(scale >= 0.0) || !scale.is_finite() {
        return Err(Error::invalid(format!("noise scale must be >= 0, got {scale}")));
    }
    let mut acc = vec![0.0; state.len];
    if scale == 0.0 {
        return ParamVector::new(acc);
    }
    for (level, index) in TreeState::decomposition(t) {
        let node = state.node_noise(level, index)?;
        for (a, x) in acc.iter_mut().zip(node.as_slice()) {
            *a += x;
        }
    }
    ParamVector::new(acc)?.scale(scale)
}

/// Round-by-round server aggregation with tree-correlated noise.
///
/// Round `t` releases `(noised_prefix(t) - noised_prefix(t - 1)) / |S_t|`,
/// where `noised_prefix(t) = sum of all deltas through t + tree_prefix_noise(t)`.
#[derive(Debug, Clone)]
pub struct TreeAggregator {
    state: TreeState,
    last_step: u64,
}

impl TreeAggregator {
    pub fn new(total_steps: u64, len: usize, seed: u64) -> Self {
        Self {
            state: TreeState::new(total_steps, len, seed),
            last_step: 0,
        }
    }

    /// Continues a tree whose first `completed` steps were released earlier.
    pub fn resume(total_steps: u64, len: usize, seed: u64, completed: u64) -> Result<Self> {
        if completed > total_steps {
            return Err(Error::InvalidState(format!(
                "resume after step {completed} beyond {total_steps}"
            )));
        }
        Ok(Self {
            state: TreeState::new(total_steps, len, seed),
            last_step: completed,
        })
    }

    pub fn last_step(&self) -> u64 {
        self.last_step
    }

    pub fn state(&self) -> &TreeState {
        &self.state
    }

    /// Server delta for step `t`, which must be exactly one past the last.
    pub fn server_delta(
        &mut self,
        t: u64,
        updates: &[ParamVector],
        cfg: &NoiseConfig,
    ) -> Result<ParamVector> {
        cfg.validate()?;
        if t != self.last_step + 1 {
            return Err(Error::InvalidState(format!(
                "tree step {t} requested after step {}",
                self.last_step
            )));
        }
        let sum = ordered_sum(updates)?;
        if sum.len() != self.state.len {
            return Err(Error::invalid(format!(
                "update length {} differs from tree length {}",
                sum.len(),
                self.state.len
            )));
        }
        let scale = cfg.noise_stddev();
        let current = tree_prefix_noise(&mut self.state, t, scale)?;
        let noise = if t > 1 {
            let previous = tree_prefix_noise(&mut self.state, t - 1, scale)?;
            current.sub(&previous)?
        } else {
            current
        };
        self.last_step = t;
        sum.add_scaled(&noise, 1.0)?.scale(1.0 / updates.len() as f64)
    }
}

/// Online estimate of the clip norm targeting a quantile of update norms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveClipState {
    pub clip_norm: f64,
    pub target_quantile: f64,
    pub learning_rate: f64,
}

impl AdaptiveClipState {
    pub fn new(clip_norm: f64, target_quantile: f64, learning_rate: f64) -> Result<Self> {
        if !(clip_norm > 0.0) || !clip_norm.is_finite() {
            return Err(Error::invalid(format!("initial clip norm must be finite and > 0, got {clip_norm}")));
        }
        if !(target_quantile > 0.0 && target_quantile < 1.0) {
            return Err(Error::invalid(format!("target quantile must be in (0, 1), got {target_quantile}")));
        }
        if !(learning_rate > 0.0) || !learning_rate.is_finite() {
            return Err(Error::invalid(format!("clip learning rate must be > 0, got {learning_rate}")));
        }
        Ok(Self {
            clip_norm,
            target_quantile,
            learning_rate,
        })
    }

    /// `C <- C * exp(-lr * (b - q))` where `b` is the fraction of updates
    /// whose norm was at most `C`.
    pub fn step(self, clipped_fraction: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&clipped_fraction) {
            return Err(Error::invalid(format!(
                "fraction of unclipped updates must be in [0, 1], got {clipped_fraction}"
            )));
        }
        let factor = (-self.learning_rate * (clipped_fraction - self.target_quantile)).exp();
        Ok(Self {
            clip_norm: self.clip_norm * factor,
            ..self
        })
    }
}

/// Fraction of `norms` that are at most `clip_norm`.
pub fn unclipped_fraction(norms: &[f64], clip_norm: f64) -> f64 {
    if norms.is_empty() {
        return 0.0;
    }
    norms.iter().filter(|&&n| n <= clip_norm).count() as f64 / norms.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::new(v.to_vec()).unwrap()
    }

    fn cfg(sigma: f64, gamma: f64) -> NoiseConfig {
        NoiseConfig {
            noise_multiplier: sigma,
            clip_norm: gamma,
            mechanism: Mechanism::Gaussian,
        }
    }

    #[test]
    fn noiseless_mean() {
        let out = gaussian_aggregate(&[pv(&[1.0, 1.0]), pv(&[3.0, 3.0])], &cfg(0.0, 1.0), &RngStream::new(0, 0)).unwrap();
        assert_eq!(out, pv(&[2.0, 2.0]));
        assert!(gaussian_aggregate(&[], &cfg(0.0, 1.0), &RngStream::new(0, 0)).is_err());
        assert!(gaussian_aggregate(&[pv(&[1.0]), pv(&[1.0, 2.0])], &cfg(0.0, 1.0), &RngStream::new(0, 0)).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(cfg(-1.0, 1.0).validate().is_err());
        assert!(cfg(1.0, 0.0).validate().is_err());
        assert!(cfg(1.0, f64::INFINITY).validate().is_err());
        assert!(cfg(0.0, f64::INFINITY).validate().is_ok());
    }

    #[test]
    fn aggregate_is_mean_plus_scaled_noise() {
        let s = RngStream::new(3, 3);
        let c = cfg(1.5, 0.4);
        let ups = [pv(&[1.0, 0.0, -1.0]), pv(&[0.5, 0.5, 0.5])];
        let out = gaussian_aggregate(&ups, &c, &s).unwrap();
        let noise = sample_gaussian_vector(3, c.noise_stddev(), &s).unwrap();
        for i in 0..3 {
            let expect = (ups[0].as_slice()[i] + ups[1].as_slice()[i] + noise.as_slice()[i]) / 2.0;
            assert_eq!(out.as_slice()[i], expect);
        }
    }

    #[test]
    fn decomposition_shapes() {
        assert_eq!(TreeState::decomposition(1), vec![(0, 0)]);
        assert_eq!(TreeState::decomposition(3), vec![(1, 0), (0, 2)]);
        assert_eq!(TreeState::decomposition(12), vec![(3, 0), (2, 2)]);
        for t in 1..200u64 {
            let nodes = TreeState::decomposition(t);
            assert_eq!(nodes.len(), t.count_ones() as usize);
            // blocks tile [1..t] exactly
            let mut next = 1u64;
            for (level, index) in nodes {
                assert_eq!(index * (1 << level) + 1, next);
                next += 1 << level;
            }
            assert_eq!(next, t + 1);
        }
    }

    #[test]
    fn prefix_noise_node_reuse() {
        let mut st = TreeState::new(16, 4, 9);
        let a = tree_prefix_noise(&mut st, 3, 1.0).unwrap();
        let b = tree_prefix_noise(&mut st, 3, 1.0).unwrap();
        assert_eq!(a, b);
        assert_eq!(st.materialized_nodes(), 2);
        // prefix 2 is exactly node (1, 0), which prefix 3 also uses
        let p2 = tree_prefix_noise(&mut st, 2, 1.0).unwrap();
        let leaf3 = st.node_noise(0, 2).unwrap().clone();
        let sum = p2.add_scaled(&leaf3, 1.0).unwrap();
        for (x, y) in sum.as_slice().iter().zip(a.as_slice()) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!(tree_prefix_noise(&mut st, 0, 1.0).is_err());
        assert!(tree_prefix_noise(&mut st, 17, 1.0).is_err());
    }

    #[test]
    fn tree_delta_sequence() {
        let c = cfg(0.0, 1.0);
        let mut agg = TreeAggregator::new(4, 2, 1);
        let d = agg.server_delta(1, &[pv(&[1.0, 1.0]), pv(&[3.0, 3.0])], &c).unwrap();
        assert_eq!(d, pv(&[2.0, 2.0]));
        assert!(matches!(
            agg.server_delta(3, &[pv(&[1.0, 1.0])], &c),
            Err(Error::InvalidState(_))
        ));
        agg.server_delta(2, &[pv(&[1.0, 1.0])], &c).unwrap();
        assert_eq!(agg.last_step(), 2);
    }

    #[test]
    fn tree_deltas_telescope() {
        let c = cfg(0.8, 0.5);
        let total = 13u64;
        let mut agg = TreeAggregator::new(total, 3, 21);
        let mut released = vec![0.0; 3];
        let mut true_sum = vec![0.0; 3];
        for t in 1..=total {
            let ups: Vec<ParamVector> = (0..(t % 3 + 1))
                .map(|i| pv(&[t as f64 * 0.01, i as f64 * 0.02, -0.03]))
                .collect();
            for u in &ups {
                for (s, x) in true_sum.iter_mut().zip(u.as_slice()) {
                    *s += x;
                }
            }
            let d = agg.server_delta(t, &ups, &c).unwrap();
            for (r, x) in released.iter_mut().zip(d.as_slice()) {
                *r += x * ups.len() as f64;
            }
        }
        let mut st = TreeState::new(total, 3, 21);
        let noise = tree_prefix_noise(&mut st, total, c.noise_stddev()).unwrap();
        for i in 0..3 {
            assert!((released[i] - (true_sum[i] + noise.as_slice()[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn tree_reproducible_and_resumable() {
        let c = cfg(1.0, 1.0);
        let ups = [pv(&[0.1, 0.2])];
        let run = |agg: &mut TreeAggregator, from: u64, to: u64| -> Vec<ParamVector> {
            (from..=to).map(|t| agg.server_delta(t, &ups, &c).unwrap()).collect()
        };
        let full = run(&mut TreeAggregator::new(8, 2, 5), 1, 8);
        let again = run(&mut TreeAggregator::new(8, 2, 5), 1, 8);
        assert_eq!(full, again);
        let mut resumed = TreeAggregator::resume(8, 2, 5, 4).unwrap();
        assert_eq!(run(&mut resumed, 5, 8), full[4..].to_vec());
    }

    #[test]
    fn adaptive_clip_updates() {
        let s = AdaptiveClipState::new(2.0, 0.5, 0.2).unwrap();
        assert_eq!(s.step(0.5).unwrap().clip_norm, 2.0);
        assert!((s.step(1.0).unwrap().clip_norm / 2.0 - (-0.1f64).exp()).abs() < 1e-15);
        assert!((s.step(0.0).unwrap().clip_norm / 2.0 - 0.1f64.exp()).abs() < 1e-15);
        assert!((s.step(1.0).unwrap().clip_norm / 2.0 - 0.9048).abs() < 1e-4);
        assert!(s.step(1.5).is_err());
        assert!(AdaptiveClipState::new(0.0, 0.5, 0.2).is_err());
        assert!(AdaptiveClipState::new(1.0, 1.0, 0.2).is_err());
        assert_eq!(unclipped_fraction(&[0.5, 1.0, 1.5, 2.0], 1.0), 0.5);
    }

    proptest! {
        #[test]
        fn adaptive_clip_stays_positive(fracs in prop::collection::vec(0.0f64..=1.0, 1..500)) {
            let mut s = AdaptiveClipState::new(1.0, 0.5, 0.2).unwrap();
            for b in fracs {
                s = s.step(b).unwrap();
                prop_assert!(s.clip_norm > 0.0);
            }
        }

        #[test]
        fn substitute_one_sensitivity(
            raw in prop::collection::vec(prop::collection::vec(-5f64..5.0, 6), 2..8),
            replacement in prop::collection::vec(-50f64..50.0, 6),
            which in 0usize..8,
            gamma in 0.1f64..3.0,
        ) {
            let clipped: Vec<ParamVector> = raw.iter().map(|v| pv(v).clip_to_norm(gamma).unwrap()).collect();
            for c in &clipped {
                prop_assert!(c.l2_norm() <= gamma + 1e-12);
            }
            let which = which % clipped.len();
            let mut swapped = clipped.clone();
            swapped[which] = pv(&replacement).clip_to_norm(gamma).unwrap();
            let a = ordered_sum(&clipped).unwrap();
            let b = ordered_sum(&swapped).unwrap();
            prop_assert!(a.sub(&b).unwrap().l2_norm() <= 2.0 * gamma + 1e-9);
        }
    }
}
