//! Round orchestration for DP-FedAvg and DP-FedEmb.
//!
//! Every round samples users, groups them into virtual clients, runs local
//! momentum SGD on each client in parallel, clips each client's delta,
//! aggregates with noise, and applies a momentum server step. Deltas are
//! "new minus old", so the server adds them.

use std::collections::HashMap;
use std::time::Instant;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::accounting::{
    default_orders, rdp_subsampled_gaussian_step, rdp_to_dp, tree_depth, PrivacyReport,
};
use crate::checkpoint::Checkpoint;
use crate::data::{sample_round, to_batch, Example, UserDataset, VirtualClient};
use crate::error::{Error, Result};
use crate::eval::{pairwise_scores, EmbeddingSet, Metric, ScoreSummary};
use crate::mechanism::{
    gaussian_aggregate, unclipped_fraction, AdaptiveClipState, Mechanism, NoiseConfig,
    TreeAggregator,
};
use crate::model::{build_model, embed, forward_loss_and_grads, init_head, Batch, MlpConfig, ModelSplit};
use crate::param::{ParamVector, RngStream, StreamPurpose, TrainableMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Backbone and global head trained and privatized jointly.
    FedAvg,
    /// Only the backbone is privatized; each virtual client trains a fresh
    /// head over its own classes and discards it.
    FedEmb,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientOptConfig {
    pub mode: Mode,
    pub local_steps: usize,
    pub batch_size: usize,
    pub lr_backbone: f64,
    /// Ignored in `FedAvg` mode, which uses `lr_backbone` for everything.
    pub lr_head: f64,
    pub momentum: f64,
    /// Frozen backbone entries; `None` trains everything.
    pub mask: Option<TrainableMask>,
}

impl ClientOptConfig {
    pub fn validate(&self, backbone_len: usize) -> Result<()> {
        if self.local_steps == 0 || self.batch_size == 0 {
            return Err(Error::invalid("local_steps and batch_size must be >= 1"));
        }
        for (name, v) in [
            ("lr_backbone", self.lr_backbone),
            ("lr_head", self.lr_head),
            ("client momentum", self.momentum),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if let Some(m) = &self.mask {
            if m.len() != backbone_len {
                return Err(Error::invalid(format!(
                    "mask covers {} entries, backbone has {backbone_len}",
                    m.len()
                )));
            }
        }
        Ok(())
    }

    fn head_lr(&self) -> f64 {
        match self.mode {
            Mode::FedAvg => self.lr_backbone,
            Mode::FedEmb => self.lr_head,
        }
    }
}

/// Server momentum SGD on pseudo-gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerOptState {
    pub lr: f64,
    pub momentum: f64,
    pub velocity: ParamVector,
}

impl ServerOptState {
    pub fn new(lr: f64, momentum: f64, len: usize) -> Self {
        Self {
            lr,
            momentum,
            velocity: ParamVector::zeros(len),
        }
    }

    /// `v <- mu v + delta; theta <- theta + lr v`.
    pub fn step(&mut self, theta: &ParamVector, delta: &ParamVector) -> Result<ParamVector> {
        self.velocity = delta.add_scaled(&self.velocity, self.momentum)?;
        theta.add_scaled(&self.velocity, self.lr)
    }
}

#[derive(Debug, Clone)]
pub struct ClientUpdate {
    /// Delta clipped to the round's clip norm.
    pub delta: ParamVector,
    /// Norm before clipping.
    pub raw_norm: f64,
    /// Mean minibatch loss over the local steps.
    pub mean_loss: f64,
}

/// Precomputed minibatches walked cyclically by the local steps.
struct LocalBatches {
    batches: Vec<Batch>,
}

impl LocalBatches {
    fn new(examples: &[Example], batch_size: usize, label_map: Option<&HashMap<usize, usize>>) -> Result<Self> {
        let batches = examples
            .chunks(batch_size.min(examples.len()).max(1))
            .map(|c| to_batch(c, label_map))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { batches })
    }

    fn get(&self, step: usize) -> &Batch {
        &self.batches[step % self.batches.len()]
    }
}

struct LocalResult {
    theta: ParamVector,
    head: ParamVector,
    mean_loss: f64,
}

fn momentum_step(
    params: &mut [f64],
    velocity: &mut [f64],
    grad: &[f64],
    lr: f64,
    momentum: f64,
    mask: Option<&TrainableMask>,
) {
    for i in 0..params.len() {
        if mask.is_some_and(|m| m.is_frozen(i)) {
            continue;
        }
        velocity[i] = momentum * velocity[i] + grad[i];
        params[i] -= lr * velocity[i];
    }
}

fn local_train(
    theta0: &ParamVector,
    head0: &ParamVector,
    model: &MlpConfig,
    cfg: &ClientOptConfig,
    batches: &LocalBatches,
) -> Result<LocalResult> {
    let mut theta = theta0.as_slice().to_vec();
    let mut head = head0.as_slice().to_vec();
    let mut v_theta = vec![0.0; theta.len()];
    let mut v_head = vec![0.0; head.len()];
    let mut loss_sum = 0.0;
    for k in 0..cfg.local_steps {
        let out = forward_loss_and_grads(
            &ParamVector::new(theta.clone())?,
            &ParamVector::new(head.clone())?,
            model,
            batches.get(k),
        )?;
        loss_sum += out.loss;
        momentum_step(&mut theta, &mut v_theta, out.g_theta.as_slice(), cfg.lr_backbone, cfg.momentum, cfg.mask.as_ref());
        momentum_step(&mut head, &mut v_head, out.g_omega.as_slice(), cfg.head_lr(), cfg.momentum, None);
    }
    Ok(LocalResult {
        theta: ParamVector::new(theta)?,
        head: ParamVector::new(head)?,
        mean_loss: loss_sum / cfg.local_steps as f64,
    })
}

fn finish(delta: ParamVector, clip_norm: f64, mean_loss: f64) -> Result<ClientUpdate> {
    let raw_norm = delta.l2_norm();
    Ok(ClientUpdate {
        delta: delta.clip_to_norm(clip_norm)?,
        raw_norm,
        mean_loss,
    })
}

/// Dense local class index for every class present in `vc`, in ascending
/// class order.
pub fn local_label_map(vc: &VirtualClient) -> HashMap<usize, usize> {
    vc.classes().into_iter().enumerate().map(|(i, c)| (c, i)).collect()
}

/// One virtual client's local training.
///
/// `FedEmb`: `params` is the backbone; a local head over the client's
/// classes is drawn from `stream` and dropped afterwards; the clipped
/// backbone delta is returned. `FedAvg`: `params` is backbone followed by
/// the global head, and the joint delta is clipped.
pub fn client_update(
    params: &ParamVector,
    split: &ModelSplit,
    vc: &VirtualClient,
    model: &MlpConfig,
    cfg: &ClientOptConfig,
    clip_norm: f64,
    stream: &RngStream,
) -> Result<ClientUpdate> {
    if vc.examples.is_empty() {
        return Err(Error::invalid("virtual client has no examples"));
    }
    match cfg.mode {
        Mode::FedEmb => {
            let labels = local_label_map(vc);
            let head = init_head(labels.len(), model.embed_dim, stream)?;
            client_update_with_head(params, &head, &labels, vc, model, cfg, clip_norm)
        }
        Mode::FedAvg => {
            if params.len() != split.total_len() {
                return Err(Error::invalid(format!(
                    "fedavg parameters have length {}, expected {}",
                    params.len(),
                    split.total_len()
                )));
            }
            let (theta, head) = params.split_at(split.backbone_len)?;
            let batches = LocalBatches::new(&vc.examples, cfg.batch_size, None)?;
            let out = local_train(&theta, &head, model, cfg, &batches)?;
            let delta = out.theta.concat(&out.head).sub(params)?;
            finish(delta, clip_norm, out.mean_loss)
        }
    }
}

/// `FedEmb` local training from an explicit head initialization and local
/// label mapping.
pub fn client_update_with_head(
    theta: &ParamVector,
    head: &ParamVector,
    labels: &HashMap<usize, usize>,
    vc: &VirtualClient,
    model: &MlpConfig,
    cfg: &ClientOptConfig,
    clip_norm: f64,
) -> Result<ClientUpdate> {
    if vc.examples.is_empty() {
        return Err(Error::invalid("virtual client has no examples"));
    }
    let batches = LocalBatches::new(&vc.examples, cfg.batch_size, Some(labels))?;
    let out = local_train(theta, head, model, cfg, &batches)?;
    finish(out.theta.sub(theta)?, clip_norm, out.mean_loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveClipConfig {
    pub target_quantile: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerConfig {
    pub model: MlpConfig,
    pub client: ClientOptConfig,
    pub server_lr: f64,
    pub server_momentum: f64,
    pub users_per_round: usize,
    pub users_per_vc: usize,
    pub examples_cap: usize,
    pub noise_multiplier: f64,
    /// Initial clip norm; `+inf` disables clipping (only without noise).
    pub clip_norm: f64,
    pub mechanism: Mechanism,
    /// Adapts the clip norm while `noise_multiplier == 0`.
    pub adaptive_clip: Option<AdaptiveClipConfig>,
    pub rounds: u64,
    pub delta: f64,
    pub seed: u64,
    /// Evaluate every this many rounds (0 = only when asked).
    pub eval_every: u64,
    pub eval_far: f64,
    pub eval_metric: Metric,
}

impl TrainerConfig {
    pub fn validate(&self, num_users: usize) -> Result<()> {
        self.model.validate()?;
        self.client.validate(self.model.backbone_len())?;
        if self.users_per_round > num_users {
            return Err(Error::invalid(format!(
                "users_per_round {} exceeds {num_users} available users",
                self.users_per_round
            )));
        }
        if self.users_per_vc == 0 || self.examples_cap == 0 {
            return Err(Error::invalid("users_per_vc and examples_cap must be >= 1"));
        }
        if !(self.server_lr >= 0.0) || !(self.server_momentum >= 0.0) {
            return Err(Error::invalid("server learning rate and momentum must be >= 0"));
        }
        self.noise().validate()?;
        if let Some(a) = &self.adaptive_clip {
            AdaptiveClipState::new(
                if self.clip_norm.is_finite() { self.clip_norm } else { 1.0 },
                a.target_quantile,
                a.learning_rate,
            )?;
            if !self.clip_norm.is_finite() {
                return Err(Error::invalid("adaptive clipping needs a finite initial clip norm"));
            }
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::invalid(format!("delta must be in (0, 1), got {}", self.delta)));
        }
        if !(self.eval_far > 0.0 && self.eval_far <= 1.0) {
            return Err(Error::invalid(format!("eval FAR must be in (0, 1], got {}", self.eval_far)));
        }
        Ok(())
    }

    fn noise(&self) -> NoiseConfig {
        NoiseConfig {
            noise_multiplier: self.noise_multiplier,
            clip_norm: self.clip_norm,
            mechanism: self.mechanism,
        }
    }
}

/// Per-round record. `loss` and `clip_fraction` are simulation diagnostics
/// computed from unnoised client statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    /// 1-based count of completed rounds.
    pub round: u64,
    pub loss: f64,
    pub clip_fraction: f64,
    pub sigma: f64,
    pub gamma: f64,
    pub recall_at_far: Option<f64>,
    pub eps_add_remove: f64,
    pub rho: Option<f64>,
    pub num_virtual_clients: usize,
    pub wall_ms: u64,
}

pub const ROUND_CSV_HEADER: &str = "round,loss,clip_fraction,sigma,gamma,recall_at_far,eps_add_remove,rho";

impl RoundLog {
    pub fn csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        format!(
            "{},{},{},{},{},{},{},{}",
            self.round,
            self.loss,
            self.clip_fraction,
            self.sigma,
            self.gamma,
            opt(self.recall_at_far),
            self.eps_add_remove,
            opt(self.rho)
        )
    }
}

/// Held-out inputs for recall@FAR evaluation.
#[derive(Debug, Clone)]
pub struct EvalData {
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
}

impl EvalData {
    pub fn from_users(users: &[UserDataset]) -> Result<Self> {
        let examples: Vec<Example> = users.iter().flat_map(|u| u.examples.iter().cloned()).collect();
        let batch = to_batch(&examples, None)?;
        Ok(Self {
            inputs: batch.inputs,
            labels: batch.labels,
        })
    }

    pub fn embed(&self, theta: &ParamVector, model: &MlpConfig) -> Result<EmbeddingSet> {
        EmbeddingSet::new(embed(theta, model, &self.inputs)?, self.labels.clone())
    }

    pub fn recall_at_far(&self, theta: &ParamVector, model: &MlpConfig, far: f64, metric: Metric) -> Result<f64> {
        let es = self.embed(theta, model)?;
        let (pos, neg) = pairwise_scores(&es, metric);
        Ok(ScoreSummary::new(pos, neg).recall_at(far)?.recall)
    }
}

/// Mutable training state plus the data it runs on.
pub struct Trainer<'a> {
    cfg: TrainerConfig,
    users: &'a [UserDataset],
    split: ModelSplit,
    /// Backbone (`FedEmb`) or backbone followed by head (`FedAvg`).
    params: ParamVector,
    server: ServerOptState,
    clip_norm: f64,
    round: u64,
    tree: Option<TreeAggregator>,
    step_rdp: Vec<f64>,
    orders: Vec<f64>,
}

impl<'a> Trainer<'a> {
    /// Fresh state, optionally warm-started or resumed from a checkpoint.
    ///
    /// A checkpoint carrying a velocity is treated as a resume point (round
    /// counter, velocity and clip norm restored); otherwise only its
    /// parameters are used.
    pub fn new(cfg: TrainerConfig, users: &'a [UserDataset], init: Option<&Checkpoint>) -> Result<Self> {
        cfg.validate(users.len())?;
        let num_classes = crate::data::num_classes(users);
        let (mut backbone, split) = build_model(
            &cfg.model,
            num_classes,
            &RngStream::derive(cfg.seed, StreamPurpose::Init, 0, 0),
        )?;
        let mut head = match cfg.client.mode {
            Mode::FedAvg => Some(init_head(
                num_classes.max(1),
                cfg.model.embed_dim,
                &RngStream::derive(cfg.seed, StreamPurpose::Init, 0, 1),
            )?),
            Mode::FedEmb => None,
        };
        let mut round = 0;
        let mut clip_norm = cfg.clip_norm;
        let mut velocity = None;
        if let Some(ck) = init {
            if ck.cfg_digest != cfg.model.digest() {
                return Err(Error::Checkpoint("model architecture differs from checkpoint".into()));
            }
            if ck.backbone.len() != backbone.len() {
                return Err(Error::Checkpoint(format!(
                    "checkpoint backbone has {} entries, model needs {}",
                    ck.backbone.len(),
                    backbone.len()
                )));
            }
            backbone = ck.backbone.clone();
            if let (Some(h), Some(ckh)) = (head.as_mut(), ck.head.as_ref()) {
                if ckh.len() != h.len() {
                    return Err(Error::Checkpoint(format!(
                        "checkpoint head has {} entries, expected {}",
                        ckh.len(),
                        h.len()
                    )));
                }
                *h = ckh.clone();
            }
            if let Some(v) = &ck.velocity {
                round = ck.round;
                clip_norm = ck.clip_norm;
                velocity = Some(v.clone());
            }
        }
        let params = match head {
            Some(h) => backbone.concat(&h),
            None => backbone,
        };
        let mut server = ServerOptState::new(cfg.server_lr, cfg.server_momentum, params.len());
        if let Some(v) = velocity {
            if v.len() != params.len() {
                return Err(Error::Checkpoint("checkpoint velocity does not match the mode's parameters".into()));
            }
            server.velocity = v;
        }
        let tree = match cfg.mechanism {
            Mechanism::Tree => Some(TreeAggregator::resume(
                cfg.rounds.max(round),
                params.len(),
                cfg.seed,
                if cfg.users_per_round > 0 { round } else { 0 },
            )?),
            Mechanism::Gaussian => None,
        };
        let orders = default_orders();
        let q = if users.is_empty() {
            0.0
        } else {
            cfg.users_per_round as f64 / users.len() as f64
        };
        let step_rdp = rdp_subsampled_gaussian_step(q, cfg.noise_multiplier, &orders)?;
        Ok(Self {
            cfg,
            users,
            split,
            params,
            server,
            clip_norm,
            round,
            tree,
            step_rdp,
            orders,
        })
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.cfg
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn split(&self) -> &ModelSplit {
        &self.split
    }

    pub fn clip_norm(&self) -> f64 {
        self.clip_norm
    }

    /// Privatized parameters: backbone, plus the head in `FedAvg` mode.
    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn backbone(&self) -> ParamVector {
        ParamVector::new(self.params.as_slice()[..self.split.backbone_len].to_vec())
            .expect("finite parameters")
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let (backbone, head) = match self.cfg.client.mode {
            Mode::FedEmb => (self.params.clone(), None),
            Mode::FedAvg => {
                let (b, h) = self.params.split_at(self.split.backbone_len).expect("split within length");
                (b, Some(h))
            }
        };
        Checkpoint {
            cfg_digest: self.cfg.model.digest(),
            round: self.round,
            backbone,
            head,
            clip_norm: self.clip_norm,
            velocity: Some(self.server.velocity.clone()),
        }
    }

    pub fn sampling_rate(&self) -> f64 {
        if self.users.is_empty() {
            0.0
        } else {
            self.cfg.users_per_round as f64 / self.users.len() as f64
        }
    }

    fn eps_after(&self, rounds: u64) -> Result<f64> {
        let curve: Vec<f64> = self
            .step_rdp
            .iter()
            .map(|&r| if rounds == 0 { 0.0 } else { r * rounds as f64 })
            .collect();
        Ok(rdp_to_dp(&self.orders, &curve, rounds, self.cfg.delta)?.epsilon)
    }

    pub fn privacy_report(&self) -> Result<PrivacyReport> {
        crate::accounting::privacy_report(
            self.cfg.mechanism,
            self.sampling_rate(),
            self.cfg.noise_multiplier,
            self.round,
            self.cfg.rounds.max(self.round),
            self.cfg.delta,
        )
    }

    /// Runs the next round.
    pub fn run_round(&mut self) -> Result<RoundLog> {
        let started = Instant::now();
        let t = self.round;
        let sample = sample_round(
            self.users,
            self.cfg.users_per_round,
            self.cfg.users_per_vc,
            self.cfg.examples_cap,
            self.cfg.seed,
            t,
        )?;
        let gamma = self.clip_norm;
        let noise = NoiseConfig {
            clip_norm: gamma,
            ..self.cfg.noise()
        };

        let (delta, loss, clip_fraction) = if sample.virtual_clients.is_empty() {
            (ParamVector::zeros(self.params.len()), 0.0, 0.0)
        } else {
            let updates: Vec<ClientUpdate> = sample
                .virtual_clients
                .par_iter()
                .enumerate()
                .map(|(i, vc)| {
                    client_update(
                        &self.params,
                        &self.split,
                        vc,
                        &self.cfg.model,
                        &self.cfg.client,
                        gamma,
                        &RngStream::derive(self.cfg.seed, StreamPurpose::HeadInit, t, i as u64),
                    )
                })
                .collect::<Result<_>>()?;
            let norms: Vec<f64> = updates.iter().map(|u| u.raw_norm).collect();
            let loss = updates.iter().map(|u| u.mean_loss).sum::<f64>() / updates.len() as f64;
            let clip_fraction = unclipped_fraction(&norms, gamma);
            let deltas: Vec<ParamVector> = updates.into_iter().map(|u| u.delta).collect();
            let delta = match self.tree.as_mut() {
                Some(tree) => tree.server_delta(tree.last_step() + 1, &deltas, &noise)?,
                None => gaussian_aggregate(
                    &deltas,
                    &noise,
                    &RngStream::derive(self.cfg.seed, StreamPurpose::Noise, t, 0),
                )?,
            };
            if let Some(a) = &self.cfg.adaptive_clip {
                if self.cfg.noise_multiplier == 0.0 {
                    self.clip_norm = AdaptiveClipState::new(gamma, a.target_quantile, a.learning_rate)?
                        .step(clip_fraction)?
                        .clip_norm;
                }
            }
            (delta, loss, clip_fraction)
        };

        self.params = self.server.step(&self.params, &delta)?;
        self.round += 1;
        let rho = match self.cfg.mechanism {
            Mechanism::Tree if self.cfg.noise_multiplier > 0.0 => Some(
                tree_depth(self.round) as f64 / (2.0 * self.cfg.noise_multiplier.powi(2)),
            ),
            Mechanism::Tree => Some(f64::INFINITY),
            Mechanism::Gaussian => None,
        };
        Ok(RoundLog {
            round: self.round,
            loss,
            clip_fraction,
            sigma: self.cfg.noise_multiplier,
            gamma,
            recall_at_far: None,
            eps_add_remove: self.eps_after(self.round)?,
            rho,
            num_virtual_clients: sample.virtual_clients.len(),
            wall_ms: started.elapsed().as_millis() as u64,
        })
    }

    pub fn evaluate(&self, eval: &EvalData) -> Result<f64> {
        eval.recall_at_far(&self.backbone(), &self.cfg.model, self.cfg.eval_far, self.cfg.eval_metric)
    }
}

/// Result of a complete run.
#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub backbone: ParamVector,
    pub head: Option<ParamVector>,
    pub logs: Vec<RoundLog>,
    pub privacy: PrivacyReport,
    pub final_recall: Option<f64>,
}

/// Runs rounds until `cfg.rounds`, calling `on_round` after each one.
///
/// `threads` bounds the worker pool for client updates; results do not
/// depend on it.
pub fn run_training<F>(
    cfg: TrainerConfig,
    users: &[UserDataset],
    eval: Option<&EvalData>,
    init: Option<&Checkpoint>,
    threads: Option<usize>,
    mut on_round: F,
) -> Result<TrainingOutcome>
where
    F: FnMut(&RoundLog, &Trainer<'_>) -> Result<()>,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| Error::InvalidState(format!("thread pool: {e}")))?;
    let mut trainer = Trainer::new(cfg, users, init)?;
    let total = trainer.config().rounds;
    let mut logs = Vec::new();
    while trainer.round() < total {
        let mut log = pool.install(|| trainer.run_round())?;
        if let Some(eval) = eval {
            let every = trainer.config().eval_every;
            if (every > 0 && log.round % every == 0) || log.round == total {
                log.recall_at_far = Some(pool.install(|| trainer.evaluate(eval))?);
            }
        }
        on_round(&log, &trainer)?;
        logs.push(log);
    }
    let final_recall = match (logs.last(), eval) {
        (Some(l), _) if l.recall_at_far.is_some() => l.recall_at_far,
        (_, Some(e)) => Some(trainer.evaluate(e)?),
        _ => None,
    };
    let head = match trainer.config().client.mode {
        Mode::FedAvg => Some(trainer.params().split_at(trainer.split().backbone_len)?.1),
        Mode::FedEmb => None,
    };
    Ok(TrainingOutcome {
        backbone: trainer.backbone(),
        head,
        privacy: trainer.privacy_report()?,
        logs,
        final_recall,
    })
}
