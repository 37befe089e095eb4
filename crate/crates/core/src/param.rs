//! Flat parameter vectors and the primitives every other module builds on:
//! L2 clipping, elementwise updates, trainable masks and reproducible
//! Gaussian sampling.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A flat vector of model parameters or parameter deltas.
///
/// The length is fixed at construction and every entry is finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite parameter at index {i}: {}",
                values[i]
            )));
        }
        Ok(Self(values))
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn l2_norm(&self) -> f64 {
        l2_norm(&self.0)
    }

    /// Scales the vector by `min(1, gamma / ||v||)`.
    ///
    /// `gamma` may be `+inf`, which disables clipping. A zero vector is
    /// returned unchanged.
    pub fn clip_to_norm(&self, gamma: f64) -> Result<Self> {
        if gamma.is_nan() || gamma <= 0.0 {
            return Err(Error::invalid(format!("clip norm must be > 0, got {gamma}")));
        }
        let norm = self.l2_norm();
        if norm == 0.0 || norm <= gamma {
            return Ok(self.clone());
        }
        let scale = gamma / norm;
        Ok(Self(self.0.iter().map(|v| v * scale).collect()))
    }

    /// `self + c * src`, elementwise.
    pub fn add_scaled(&self, src: &ParamVector, c: f64) -> Result<Self> {
        self.check_len(src.len())?;
        let out: Vec<f64> = self.0.iter().zip(&src.0).map(|(d, s)| d + c * s).collect();
        Self::new(out)
    }

    /// `self - other`, elementwise.
    pub fn sub(&self, other: &ParamVector) -> Result<Self> {
        self.add_scaled(other, -1.0)
    }

    pub fn scale(&self, c: f64) -> Result<Self> {
        Self::new(self.0.iter().map(|v| v * c).collect())
    }

    /// Zeroes every frozen position.
    pub fn apply_mask(&self, mask: &TrainableMask) -> Result<Self> {
        self.check_len(mask.len())?;
        Ok(Self(
            self.0
                .iter()
                .zip(&mask.frozen)
                .map(|(&v, &frozen)| if frozen { 0.0 } else { v })
                .collect(),
        ))
    }

    /// Concatenates `self` and `tail`.
    pub fn concat(&self, tail: &ParamVector) -> Self {
        let mut v = Vec::with_capacity(self.len() + tail.len());
        v.extend_from_slice(&self.0);
        v.extend_from_slice(&tail.0);
        Self(v)
    }

    /// Splits into `[0, at)` and `[at, len)`.
    pub fn split_at(&self, at: usize) -> Result<(Self, Self)> {
        if at > self.len() {
            return Err(Error::invalid(format!(
                "split point {at} beyond length {}",
                self.len()
            )));
        }
        let (a, b) = self.0.split_at(at);
        Ok((Self(a.to_vec()), Self(b.to_vec())))
    }

    fn check_len(&self, other: usize) -> Result<()> {
        if self.len() != other {
            return Err(Error::invalid(format!(
                "length mismatch: {} vs {other}",
                self.len()
            )));
        }
        Ok(())
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Marks parameters that local training must not change.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainableMask {
    frozen: Vec<bool>,
}

impl TrainableMask {
    /// All parameters trainable.
    pub fn all_trainable(len: usize) -> Self {
        Self {
            frozen: vec![false; len],
        }
    }

    pub fn from_frozen(frozen: Vec<bool>) -> Self {
        Self { frozen }
    }

    /// Freezes the half-open index ranges given.
    pub fn with_frozen_ranges(len: usize, ranges: &[std::ops::Range<usize>]) -> Result<Self> {
        let mut frozen = vec![false; len];
        for r in ranges {
            if r.end > len || r.start > r.end {
                return Err(Error::invalid(format!(
                    "frozen range {r:?} outside parameter length {len}"
                )));
            }
            frozen[r.clone()].iter_mut().for_each(|f| *f = true);
        }
        Ok(Self { frozen })
    }

    pub fn len(&self) -> usize {
        self.frozen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frozen.is_empty()
    }

    pub fn is_frozen(&self, i: usize) -> bool {
        self.frozen[i]
    }

    pub fn num_frozen(&self) -> usize {
        self.frozen.iter().filter(|f| **f).count()
    }

    /// Extends the mask with `extra` trainable positions.
    pub fn extended(&self, extra: usize) -> Self {
        let mut frozen = self.frozen.clone();
        frozen.resize(self.frozen.len() + extra, false);
        Self { frozen }
    }
}

/// Names the purpose a random stream is used for, so that streams drawn for
/// different jobs in the same round never collide.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum StreamPurpose {
    Init = 1,
    UserSampling = 2,
    Grouping = 3,
    ExampleCap = 4,
    HeadInit = 5,
    Noise = 6,
    TreeNode = 7,
    Synthetic = 8,
    Eval = 9,
}

/// A deterministic, independently addressable random stream.
///
/// `(seed, stream_id)` selects a ChaCha20 key and stream; the same pair yields
/// bit-identical draws on every run and platform, and streams never depend on
/// the order in which other streams were consumed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self { seed, stream_id }
    }

    /// Stream keyed by `(purpose, round, index)` under a run seed.
    pub fn derive(seed: u64, purpose: StreamPurpose, round: u64, index: u64) -> Self {
        let id = mix(mix(mix(purpose as u64) ^ round) ^ index.rotate_left(32));
        Self::new(seed, id)
    }

    /// A child stream; used for sub-purposes of an already derived stream.
    pub fn child(&self, index: u64) -> Self {
        Self::new(self.seed, mix(self.stream_id ^ mix(index.wrapping_add(0x9e37))))
    }

    pub fn rng(&self) -> ChaCha20Rng {
        let mut rng = ChaCha20Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng
    }
}

// splitmix64 finalizer
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// I.i.d. `N(0, stddev^2)` entries drawn from `stream`.
pub fn sample_gaussian_vector(len: usize, stddev: f64, stream: &RngStream) -> Result<ParamVector> {
    if !(stddev >= 0.0) || !stddev.is_finite() {
        return Err(Error::invalid(format!(
            "standard deviation must be finite and >= 0, got {stddev}"
        )));
    }
    if stddev == 0.0 {
        return Ok(ParamVector::zeros(len));
    }
    let mut rng = stream.rng();
    let values = (0..len)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * stddev
        })
        .collect();
    Ok(ParamVector(values))
}
