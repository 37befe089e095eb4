//! Embedding backbone `f(theta, x)` and the bias-free linear softmax head.
//!
//! The backbone is a fully connected network with hand-written backprop.
//! Parameters live in one flat vector; each layer stores its weight matrix
//! row-major (`out x in`) followed by its bias. A backbone without hidden
//! layers is a plain bias-free linear map. The head `omega` is a
//! `num_classes x embed_dim` row-major matrix of class proxies, and logits
//! are the inner products `<omega_c, z>`.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::param::{sample_gaussian_vector, ParamVector, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation.
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    pub input_dim: usize,
    #[serde(default)]
    pub hidden_dims: Vec<usize>,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default)]
    pub l2_normalize_embedding: bool,
}

fn default_embed_dim() -> usize {
    32
}

fn default_activation() -> Activation {
    Activation::Relu
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Layer {
    fan_in: usize,
    fan_out: usize,
    offset: usize,
    bias: bool,
}

impl Layer {
    fn weight_len(&self) -> usize {
        self.fan_in * self.fan_out
    }

    fn len(&self) -> usize {
        self.weight_len() + if self.bias { self.fan_out } else { 0 }
    }
}

impl MlpConfig {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, embed_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dims,
            embed_dim,
            activation: Activation::Relu,
            l2_normalize_embedding: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.embed_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::invalid(format!(
                "all model dimensions must be >= 1 (input {}, hidden {:?}, embed {})",
                self.input_dim, self.hidden_dims, self.embed_dim
            )));
        }
        Ok(())
    }

    fn layers(&self) -> Vec<Layer> {
        let bias = !self.hidden_dims.is_empty();
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.embed_dim);
        let mut offset = 0;
        dims.windows(2)
            .map(|w| {
                let layer = Layer {
                    fan_in: w[0],
                    fan_out: w[1],
                    offset,
                    bias,
                };
                offset += layer.len();
                layer
            })
            .collect()
    }

    pub fn backbone_len(&self) -> usize {
        self.layers().iter().map(Layer::len).sum()
    }

    /// SHA-256 over a canonical rendering of the architecture.
    pub fn digest(&self) -> [u8; 32] {
        let canonical = format!(
            "mlp;input={};hidden={:?};embed={};activation={:?};l2norm={}",
            self.input_dim,
            self.hidden_dims,
            self.embed_dim,
            self.activation,
            self.l2_normalize_embedding
        );
        Sha256::digest(canonical.as_bytes()).into()
    }
}

/// How a full parameter vector divides into the privatized backbone and the
/// class-proxy head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSplit {
    pub backbone_len: usize,
    pub num_classes: usize,
    pub embed_dim: usize,
}

impl ModelSplit {
    pub fn head_len(&self) -> usize {
        self.num_classes * self.embed_dim
    }

    pub fn total_len(&self) -> usize {
        self.backbone_len + self.head_len()
    }
}

/// A minibatch: one input row per example and its class id.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if inputs.nrows() != labels.len() {
            return Err(Error::invalid(format!(
                "batch has {} input rows but {} labels",
                inputs.nrows(),
                labels.len()
            )));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Initializes a backbone with fan-in scaled uniform weights and zero biases.
pub fn build_model(
    cfg: &MlpConfig,
    num_classes: usize,
    stream: &RngStream,
) -> Result<(ParamVector, ModelSplit)> {
    cfg.validate()?;
    let mut rng = stream.rng();
    let layers = cfg.layers();
    let mut theta = vec![0.0; cfg.backbone_len()];
    let last = layers.len() - 1;
    for (i, layer) in layers.iter().enumerate() {
        let gain = if i < last && cfg.activation == Activation::Relu {
            2.0
        } else {
            1.0
        };
        let limit = (3.0 * gain / layer.fan_in as f64).sqrt();
        for w in &mut theta[layer.offset..layer.offset + layer.weight_len()] {
            *w = rng.gen_range(-limit..limit);
        }
    }
    let split = ModelSplit {
        backbone_len: theta.len(),
        num_classes,
        embed_dim: cfg.embed_dim,
    };
    Ok((ParamVector::new(theta)?, split))
}

/// Gaussian class proxies with standard deviation `1 / sqrt(embed_dim)`.
pub fn init_head(num_classes: usize, embed_dim: usize, stream: &RngStream) -> Result<ParamVector> {
    if num_classes == 0 || embed_dim == 0 {
        return Err(Error::invalid("head needs at least one class and one dimension"));
    }
    sample_gaussian_vector(num_classes * embed_dim, 1.0 / (embed_dim as f64).sqrt(), stream)
}

struct Forward {
    /// Layer inputs: `acts[0]` is the batch input, `acts[l]` the output of
    /// hidden layer `l - 1`.
    acts: Vec<Array2<f64>>,
    /// Pre-activations of every hidden layer.
    pres: Vec<Array2<f64>>,
    /// Raw backbone output before optional normalization.
    raw: Array2<f64>,
    /// Per-row norms of `raw` (only with normalization).
    norms: Option<Array1<f64>>,
    embedding: Array2<f64>,
}

fn weights<'a>(theta: &'a [f64], layer: &Layer) -> ArrayView2<'a, f64> {
    ArrayView2::from_shape(
        (layer.fan_out, layer.fan_in),
        &theta[layer.offset..layer.offset + layer.weight_len()],
    )
    .expect("layer slice matches its shape")
}

fn forward(theta: &[f64], cfg: &MlpConfig, inputs: &Array2<f64>) -> Result<Forward> {
    cfg.validate()?;
    if theta.len() != cfg.backbone_len() {
        return Err(Error::invalid(format!(
            "backbone has {} parameters, architecture needs {}",
            theta.len(),
            cfg.backbone_len()
        )));
    }
    if inputs.ncols() != cfg.input_dim {
        return Err(Error::invalid(format!(
            "input has {} columns, model expects {}",
            inputs.ncols(),
            cfg.input_dim
        )));
    }
    let layers = cfg.layers();
    let last = layers.len() - 1;
    let mut acts = vec![inputs.to_owned()];
    let mut pres = Vec::with_capacity(last);
    let mut raw = None;
    for (i, layer) in layers.iter().enumerate() {
        let w = weights(theta, layer);
        let mut h = acts[i].dot(&w.t());
        if layer.bias {
            let b = &theta[layer.offset + layer.weight_len()..layer.offset + layer.len()];
            let b = ArrayView2::from_shape((1, layer.fan_out), b).expect("bias shape");
            h += &b;
        }
        if i == last {
            raw = Some(h);
        } else {
            let a = h.mapv(|x| cfg.activation.apply(x));
            pres.push(h);
            acts.push(a);
        }
    }
    let raw = raw.expect("at least one layer");
    let (embedding, norms) = if cfg.l2_normalize_embedding {
        let norms: Array1<f64> = raw
            .rows()
            .into_iter()
            .map(|r| r.dot(&r).sqrt())
            .collect();
        let mut z = raw.clone();
        for (mut row, &n) in z.rows_mut().into_iter().zip(norms.iter()) {
            if n > 0.0 {
                row /= n;
            }
        }
        (z, Some(norms))
    } else {
        (raw.clone(), None)
    };
    Ok(Forward {
        acts,
        pres,
        raw,
        norms,
        embedding,
    })
}

/// Embeds each input row. With normalization enabled every nonzero row has
/// unit L2 norm; an all-zero raw embedding stays zero.
pub fn embed(theta: &ParamVector, cfg: &MlpConfig, inputs: &Array2<f64>) -> Result<Array2<f64>> {
    Ok(forward(theta.as_slice(), cfg, inputs)?.embedding)
}

#[derive(Debug, Clone)]
pub struct LossAndGrads {
    pub loss: f64,
    pub g_theta: ParamVector,
    pub g_omega: ParamVector,
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut p = logits.clone();
    for mut row in p.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    p
}

/// Mean softmax cross-entropy of `<omega, f(theta, x)>` over the batch, and
/// its exact gradients with respect to `theta` and `omega`.
pub fn forward_loss_and_grads(
    theta: &ParamVector,
    omega: &ParamVector,
    cfg: &MlpConfig,
    batch: &Batch,
) -> Result<LossAndGrads> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let d = cfg.embed_dim;
    if omega.is_empty() || omega.len() % d != 0 {
        return Err(Error::invalid(format!(
            "head length {} is not a positive multiple of embed_dim {d}",
            omega.len()
        )));
    }
    let num_classes = omega.len() / d;
    if let Some(&bad) = batch.labels.iter().find(|&&y| y >= num_classes) {
        return Err(Error::invalid(format!(
            "label {bad} outside head with {num_classes} classes"
        )));
    }

    let theta_s = theta.as_slice();
    let fwd = forward(theta_s, cfg, &batch.inputs)?;
    let head = ArrayView2::from_shape((num_classes, d), omega.as_slice()).expect("head shape");
    let z = &fwd.embedding;
    let logits = z.dot(&head.t());
    let n = batch.len() as f64;

    let mut loss = 0.0;
    for (row, &y) in logits.rows().into_iter().zip(&batch.labels) {
        let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        loss += lse - row[y];
    }
    loss /= n;

    let mut dlogits = softmax_rows(&logits);
    for (i, &y) in batch.labels.iter().enumerate() {
        dlogits[[i, y]] -= 1.0;
    }
    dlogits /= n;

    let g_omega = dlogits.t().dot(z);
    let dz = dlogits.dot(&head);

    let mut dh = match &fwd.norms {
        None => dz,
        Some(norms) => {
            let mut du = dz;
            for ((mut g, zr), &norm) in du.rows_mut().into_iter().zip(z.rows()).zip(norms.iter()) {
                if norm > 0.0 {
                    let proj = zr.dot(&g);
                    g.zip_mut_with(&zr, |gi, &zi| *gi = (*gi - zi * proj) / norm);
                } else {
                    g.fill(0.0);
                }
            }
            du
        }
    };
    debug_assert_eq!(dh.dim(), fwd.raw.dim());

    let layers = cfg.layers();
    let mut g_theta = vec![0.0; theta_s.len()];
    for (i, layer) in layers.iter().enumerate().rev() {
        let a = &fwd.acts[i];
        let gw = dh.t().dot(a);
        g_theta[layer.offset..layer.offset + layer.weight_len()]
            .copy_from_slice(gw.as_slice().expect("standard layout"));
        if layer.bias {
            let gb = dh.sum_axis(Axis(0));
            g_theta[layer.offset + layer.weight_len()..layer.offset + layer.len()]
                .copy_from_slice(gb.as_slice().expect("contiguous"));
        }
        if i > 0 {
            let w = weights(theta_s, layer);
            let mut da = dh.dot(&w);
            let pre = &fwd.pres[i - 1];
            da.zip_mut_with(pre, |g, &p| *g *= cfg.activation.derivative(p));
            dh = da;
        }
    }

    Ok(LossAndGrads {
        loss,
        g_theta: ParamVector::new(g_theta)?,
        g_omega: ParamVector::new(g_omega.into_raw_vec_and_offset().0)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn linear_identity(dim: usize) -> (MlpConfig, ParamVector) {
        let cfg = MlpConfig::new(dim, vec![], dim);
        let mut theta = vec![0.0; dim * dim];
        for i in 0..dim {
            theta[i * dim + i] = 1.0;
        }
        (cfg, ParamVector::new(theta).unwrap())
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(MlpConfig::new(4, vec![], 4).backbone_len(), 16);
        assert_eq!(MlpConfig::new(4, vec![8], 2).backbone_len(), 58);
        let (theta, split) =
            build_model(&MlpConfig::new(4, vec![8], 2), 10, &RngStream::new(0, 0)).unwrap();
        assert_eq!(theta.len(), 58);
        assert_eq!(split.head_len(), 20);
        assert_eq!(split.total_len(), 78);
    }

    #[test]
    fn invalid_config() {
        assert!(MlpConfig::new(0, vec![], 2).validate().is_err());
        assert!(MlpConfig::new(2, vec![0], 2).validate().is_err());
        assert!(MlpConfig::new(2, vec![], 0).validate().is_err());
    }

    #[test]
    fn build_is_deterministic_and_biases_zero() {
        let cfg = MlpConfig::new(4, vec![8], 2);
        let (a, _) = build_model(&cfg, 3, &RngStream::new(5, 1)).unwrap();
        let (b, _) = build_model(&cfg, 3, &RngStream::new(5, 1)).unwrap();
        assert_eq!(a, b);
        // hidden bias occupies [32, 40)
        assert!(a.as_slice()[32..40].iter().all(|&x| x == 0.0));
        let limit = (6.0f64 / 4.0).sqrt();
        assert!(a.as_slice()[..32].iter().all(|x| x.abs() <= limit));
    }

    #[test]
    fn identity_embedding() {
        let (cfg, theta) = linear_identity(2);
        let z = embed(&theta, &cfg, &array![[1.0, 0.0]]).unwrap();
        assert_eq!(z, array![[1.0, 0.0]]);
    }

    #[test]
    fn normalized_embedding_has_unit_norm() {
        let mut cfg = MlpConfig::new(3, vec![5], 4);
        cfg.l2_normalize_embedding = true;
        let (theta, _) = build_model(&cfg, 2, &RngStream::new(1, 1)).unwrap();
        let x = array![[0.3, -1.0, 2.0], [5.0, 0.1, 0.0]];
        let z = embed(&theta, &cfg, &x).unwrap();
        for r in z.rows() {
            assert!((r.dot(&r).sqrt() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_relu_net_embeds_to_zero() {
        let cfg = MlpConfig::new(3, vec![4], 2);
        let theta = ParamVector::zeros(cfg.backbone_len());
        let z = embed(&theta, &cfg, &array![[1.0, 2.0, 3.0]]).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embed_dimension_errors() {
        let cfg = MlpConfig::new(3, vec![4], 2);
        let theta = ParamVector::zeros(cfg.backbone_len());
        assert!(embed(&theta, &cfg, &array![[1.0, 2.0]]).is_err());
        assert!(embed(&ParamVector::zeros(3), &cfg, &array![[1.0, 2.0, 3.0]]).is_err());
    }

    #[test]
    fn uniform_logits_give_log_c() {
        let cfg = MlpConfig::new(3, vec![4], 2);
        let (theta, _) = build_model(&cfg, 5, &RngStream::new(2, 0)).unwrap();
        let omega = ParamVector::zeros(5 * 2);
        let batch = Batch::new(array![[1.0, 0.0, 2.0], [0.5, 0.5, 0.5]], vec![0, 4]).unwrap();
        let out = forward_loss_and_grads(&theta, &omega, &cfg, &batch).unwrap();
        assert!((out.loss - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn hand_computed_loss() {
        let (cfg, theta) = linear_identity(2);
        let omega = ParamVector::new(vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let batch = Batch::new(array![[1.0, 0.0]], vec![0]).unwrap();
        let out = forward_loss_and_grads(&theta, &omega, &cfg, &batch).unwrap();
        // logits (1, 0): -log(e / (e + 1)) = ln(1 + e^-1)
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((out.loss - expected).abs() < 1e-15);
        assert!((out.loss - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn loss_errors() {
        let (cfg, theta) = linear_identity(2);
        let omega = ParamVector::zeros(4);
        let empty = Batch::new(Array2::zeros((0, 2)), vec![]).unwrap();
        assert!(forward_loss_and_grads(&theta, &omega, &cfg, &empty).is_err());
        let bad_label = Batch::new(array![[1.0, 0.0]], vec![2]).unwrap();
        assert!(forward_loss_and_grads(&theta, &omega, &cfg, &bad_label).is_err());
        let one = Batch::new(array![[1.0, 0.0]], vec![0]).unwrap();
        assert!(forward_loss_and_grads(&theta, &ParamVector::zeros(3), &cfg, &one).is_err());
        assert!(Batch::new(array![[1.0, 0.0]], vec![0, 1]).is_err());
    }

    #[test]
    fn loss_invariant_to_batch_order() {
        let cfg = MlpConfig::new(3, vec![6], 4);
        let (theta, split) = build_model(&cfg, 3, &RngStream::new(3, 0)).unwrap();
        let omega = init_head(split.num_classes, 4, &RngStream::new(3, 1)).unwrap();
        let x = array![[0.1, 0.2, 0.3], [1.0, -1.0, 0.5], [0.0, 2.0, -0.3]];
        let a = Batch::new(x.clone(), vec![0, 1, 2]).unwrap();
        let perm = array![[0.0, 2.0, -0.3], [0.1, 0.2, 0.3], [1.0, -1.0, 0.5]];
        let b = Batch::new(perm, vec![2, 0, 1]).unwrap();
        let la = forward_loss_and_grads(&theta, &omega, &cfg, &a).unwrap();
        let lb = forward_loss_and_grads(&theta, &omega, &cfg, &b).unwrap();
        assert!((la.loss - lb.loss).abs() < 1e-12);
        for (x, y) in la.g_theta.as_slice().iter().zip(lb.g_theta.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn normalization_cancels_input_scale_for_linear_backbone() {
        let mut cfg = MlpConfig::new(3, vec![], 3);
        cfg.l2_normalize_embedding = true;
        let (theta, _) = build_model(&cfg, 2, &RngStream::new(9, 0)).unwrap();
        let x = array![[0.4, -0.2, 1.1]];
        let z1 = embed(&theta, &cfg, &x).unwrap();
        let z2 = embed(&theta, &cfg, &(&x * 7.5)).unwrap();
        for (a, b) in z1.iter().zip(z2.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let p = softmax_rows(&array![[1000.0, 0.0, -1000.0], [0.1, 0.2, 0.3]]);
        for r in p.rows() {
            assert!((r.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn head_init_contract() {
        let h = init_head(3, 4, &RngStream::new(0, 3)).unwrap();
        assert_eq!(h.len(), 12);
        assert_eq!(h, init_head(3, 4, &RngStream::new(0, 3)).unwrap());
        assert!(init_head(0, 4, &RngStream::new(0, 3)).is_err());

        let big = init_head(250_000, 4, &RngStream::new(11, 0)).unwrap();
        let n = big.len() as f64;
        let mean = big.as_slice().iter().sum::<f64>() / n;
        let sd = (big.as_slice().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((sd - 0.5).abs() < 0.005, "std {sd}");
    }

    #[test]
    fn digest_tracks_architecture() {
        let a = MlpConfig::new(4, vec![8], 2);
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.l2_normalize_embedding = true;
        assert_ne!(a.digest(), b.digest());
    }
}
