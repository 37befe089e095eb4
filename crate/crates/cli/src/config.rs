//! Experiment configuration (TOML).

use std::path::{Path, PathBuf};

use fedemb_core::data::SyntheticParams;
use fedemb_core::eval::Metric;
use fedemb_core::mechanism::Mechanism;
use fedemb_core::model::{Activation, MlpConfig};
use fedemb_core::trainer::{AdaptiveClipConfig, ClientOptConfig, Mode, TrainerConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Relative paths resolve against the output root.
    pub output_dir: PathBuf,
    pub mode: Mode,
    pub rounds: u64,
    #[serde(default = "defaults::delta")]
    pub delta: f64,
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub federated: FederatedSection,
    #[serde(default)]
    pub client: ClientSection,
    #[serde(default)]
    pub server: ServerSection,
    #[serde(default)]
    pub privacy: PrivacySection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub checkpoint: CheckpointSection,
}

/// Either `csv` or `synthetic`, not both.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub csv: Option<PathBuf>,
    pub synthetic: Option<SyntheticSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSection {
    pub num_users: usize,
    #[serde(default = "defaults::one")]
    pub classes_per_user: usize,
    pub examples_per_class: usize,
    pub input_dim: usize,
    pub noise_std: f64,
    /// Defaults to the experiment seed.
    pub seed: Option<u64>,
}

impl SyntheticSection {
    pub fn params(&self) -> SyntheticParams {
        SyntheticParams {
            num_users: self.num_users,
            classes_per_user: self.classes_per_user,
            examples_per_class: self.examples_per_class,
            input_dim: self.input_dim,
            noise_std: self.noise_std,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default)]
    pub hidden_dims: Vec<usize>,
    #[serde(default = "defaults::embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "defaults::activation")]
    pub activation: Activation,
    #[serde(default)]
    pub l2_normalize_embedding: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            hidden_dims: Vec::new(),
            embed_dim: defaults::embed_dim(),
            activation: defaults::activation(),
            l2_normalize_embedding: false,
        }
    }
}

impl ModelSection {
    pub fn mlp(&self, input_dim: usize) -> MlpConfig {
        MlpConfig {
            input_dim,
            hidden_dims: self.hidden_dims.clone(),
            embed_dim: self.embed_dim,
            activation: self.activation,
            l2_normalize_embedding: self.l2_normalize_embedding,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederatedSection {
    /// Defaults to `vcs_per_round * users_per_vc`.
    pub users_per_round: Option<usize>,
    #[serde(default = "defaults::users_per_vc")]
    pub users_per_vc: usize,
    #[serde(default = "defaults::vcs_per_round")]
    pub vcs_per_round: usize,
    #[serde(default = "defaults::examples_cap")]
    pub examples_cap: usize,
}

impl Default for FederatedSection {
    fn default() -> Self {
        Self {
            users_per_round: None,
            users_per_vc: defaults::users_per_vc(),
            vcs_per_round: defaults::vcs_per_round(),
            examples_cap: defaults::examples_cap(),
        }
    }
}

impl FederatedSection {
    pub fn users_per_round(&self) -> usize {
        self.users_per_round.unwrap_or(self.vcs_per_round * self.users_per_vc)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientSection {
    #[serde(default = "defaults::local_steps")]
    pub local_steps: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::client_lr")]
    pub lr: f64,
    /// Head learning rate as a multiple of `lr`; ignored by fedavg.
    #[serde(default = "defaults::head_lr_scale")]
    pub head_lr_scale: f64,
    #[serde(default = "defaults::momentum")]
    pub momentum: f64,
    /// Half-open backbone index ranges `[start, end)` kept frozen.
    #[serde(default)]
    pub frozen_ranges: Vec<[usize; 2]>,
}

impl Default for ClientSection {
    fn default() -> Self {
        Self {
            local_steps: defaults::local_steps(),
            batch_size: defaults::batch_size(),
            lr: defaults::client_lr(),
            head_lr_scale: defaults::head_lr_scale(),
            momentum: defaults::momentum(),
            frozen_ranges: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerSection {
    #[serde(default = "defaults::one_f")]
    pub lr: f64,
    #[serde(default = "defaults::momentum")]
    pub momentum: f64,
}

impl Default for ServerSection {
    fn default() -> Self {
        Self {
            lr: 1.0,
            momentum: defaults::momentum(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivacySection {
    #[serde(default)]
    pub noise_multiplier: f64,
    /// `inf` disables clipping (zero noise only).
    #[serde(default = "defaults::clip_norm")]
    pub clip_norm: f64,
    #[serde(default = "defaults::mechanism")]
    pub mechanism: Mechanism,
    pub adaptive_clip: Option<AdaptiveClipConfig>,
}

impl Default for PrivacySection {
    fn default() -> Self {
        Self {
            noise_multiplier: 0.0,
            clip_norm: defaults::clip_norm(),
            mechanism: defaults::mechanism(),
            adaptive_clip: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Evaluate every this many rounds; the last round is always evaluated.
    #[serde(default)]
    pub every: u64,
    #[serde(default = "defaults::far")]
    pub far: f64,
    #[serde(default = "defaults::metric")]
    pub metric: Metric,
    /// Held-out identities generated alongside synthetic training data.
    pub num_identities: Option<usize>,
    /// Held-out dataset file; takes precedence over `num_identities`.
    pub csv: Option<PathBuf>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            every: 0,
            far: defaults::far(),
            metric: defaults::metric(),
            num_identities: None,
            csv: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointSection {
    /// Write a checkpoint every this many rounds (0 = only at the end).
    #[serde(default)]
    pub every: u64,
    /// Parameters to start from instead of the seeded initialization.
    pub warm_start: Option<PathBuf>,
}

mod defaults {
    use super::*;

    pub fn delta() -> f64 {
        1e-7
    }
    pub fn one() -> usize {
        1
    }
    pub fn one_f() -> f64 {
        1.0
    }
    pub fn embed_dim() -> usize {
        32
    }
    pub fn activation() -> Activation {
        Activation::Relu
    }
    pub fn users_per_vc() -> usize {
        32
    }
    pub fn vcs_per_round() -> usize {
        64
    }
    pub fn examples_cap() -> usize {
        2048
    }
    pub fn local_steps() -> usize {
        64
    }
    pub fn batch_size() -> usize {
        32
    }
    pub fn client_lr() -> f64 {
        0.002
    }
    pub fn head_lr_scale() -> f64 {
        100.0
    }
    pub fn momentum() -> f64 {
        0.9
    }
    pub fn clip_norm() -> f64 {
        0.6
    }
    pub fn mechanism() -> Mechanism {
        Mechanism::Gaussian
    }
    pub fn far() -> f64 {
        1e-3
    }
    pub fn metric() -> Metric {
        Metric::Cosine
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn digest(&self) -> String {
        Sha256::digest(self.to_toml().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Field-level checks that need no data.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |field: &str, msg: String| Err(CliError::Config(format!("{field}: {msg}")));
        match (&self.data.csv, &self.data.synthetic) {
            (Some(_), Some(_)) | (None, None) => {
                return bad("data", "set exactly one of `csv` or `synthetic`".into())
            }
            (None, Some(s)) => {
                if s.num_users == 0 || s.examples_per_class == 0 || s.input_dim == 0 || s.classes_per_user == 0 {
                    return bad("data.synthetic", "counts must be >= 1".into());
                }
                if !(s.noise_std >= 0.0) || !s.noise_std.is_finite() {
                    return bad("data.synthetic.noise_std", format!("must be >= 0, got {}", s.noise_std));
                }
            }
            _ => {}
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad("delta", format!("must be in (0, 1), got {}", self.delta));
        }
        if self.model.embed_dim == 0 || self.model.hidden_dims.contains(&0) {
            return bad("model", "dimensions must be >= 1".into());
        }
        let f = &self.federated;
        if f.users_per_vc == 0 || f.examples_cap == 0 {
            return bad("federated", "users_per_vc and examples_cap must be >= 1".into());
        }
        let c = &self.client;
        if c.local_steps == 0 || c.batch_size == 0 {
            return bad("client", "local_steps and batch_size must be >= 1".into());
        }
        for (field, v) in [
            ("client.lr", c.lr),
            ("client.head_lr_scale", c.head_lr_scale),
            ("client.momentum", c.momentum),
            ("server.lr", self.server.lr),
            ("server.momentum", self.server.momentum),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(field, format!("must be finite and >= 0, got {v}"));
            }
        }
        if let Some(r) = c.frozen_ranges.iter().find(|r| r[0] > r[1]) {
            return bad("client.frozen_ranges", format!("range {r:?} is reversed"));
        }
        let p = &self.privacy;
        if !(p.noise_multiplier >= 0.0) || !p.noise_multiplier.is_finite() {
            return bad("privacy.noise_multiplier", format!("must be >= 0, got {}", p.noise_multiplier));
        }
        if !(p.clip_norm > 0.0) {
            return bad("privacy.clip_norm", format!("must be > 0, got {}", p.clip_norm));
        }
        if p.clip_norm.is_infinite() && (p.noise_multiplier > 0.0 || p.adaptive_clip.is_some()) {
            return bad(
                "privacy.clip_norm",
                "must be finite with noise or adaptive clipping".into(),
            );
        }
        if let Some(a) = &p.adaptive_clip {
            if !(0.0..=1.0).contains(&a.target_quantile) || !(a.learning_rate > 0.0) {
                return bad(
                    "privacy.adaptive_clip",
                    "target_quantile must be in [0, 1] and learning_rate > 0".into(),
                );
            }
        }
        if !(self.eval.far > 0.0 && self.eval.far <= 1.0) {
            return bad("eval.far", format!("must be in (0, 1], got {}", self.eval.far));
        }
        if self.eval.num_identities == Some(0) {
            return bad("eval.num_identities", "must be >= 1".into());
        }
        if self.output_dir.as_os_str().is_empty() {
            return bad("output_dir", "must not be empty".into());
        }
        Ok(())
    }

    pub fn synthetic_seed(&self) -> u64 {
        self.data.synthetic.as_ref().and_then(|s| s.seed).unwrap_or(self.seed)
    }

    /// Trainer settings for data with `input_dim` features.
    pub fn trainer_config(&self, input_dim: usize) -> Result<TrainerConfig, CliError> {
        let model = self.model.mlp(input_dim);
        let mask = if self.client.frozen_ranges.is_empty() {
            None
        } else {
            let ranges: Vec<_> = self.client.frozen_ranges.iter().map(|r| r[0]..r[1]).collect();
            Some(
                fedemb_core::TrainableMask::with_frozen_ranges(model.backbone_len(), &ranges)
                    .map_err(|e| CliError::Config(format!("client.frozen_ranges: {e}")))?,
            )
        };
        Ok(TrainerConfig {
            client: ClientOptConfig {
                mode: self.mode,
                local_steps: self.client.local_steps,
                batch_size: self.client.batch_size,
                lr_backbone: self.client.lr,
                lr_head: self.client.lr * self.client.head_lr_scale,
                momentum: self.client.momentum,
                mask,
            },
            model,
            server_lr: self.server.lr,
            server_momentum: self.server.momentum,
            users_per_round: self.federated.users_per_round(),
            users_per_vc: self.federated.users_per_vc,
            examples_cap: self.federated.examples_cap,
            noise_multiplier: self.privacy.noise_multiplier,
            clip_norm: self.privacy.clip_norm,
            mechanism: self.privacy.mechanism,
            adaptive_clip: self.privacy.adaptive_clip,
            rounds: self.rounds,
            delta: self.delta,
            seed: self.seed,
            eval_every: self.eval.every,
            eval_far: self.eval.far,
            eval_metric: self.eval.metric,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 3
output_dir = "run"
mode = "fedemb"
rounds = 5

[data.synthetic]
num_users = 64
examples_per_class = 4
input_dim = 8
noise_std = 0.1
"#;

    #[test]
    fn defaults_follow_federated_setting() {
        let c = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(c.federated.users_per_vc, 32);
        assert_eq!(c.federated.vcs_per_round, 64);
        assert_eq!(c.federated.examples_cap, 2048);
        assert_eq!(c.client.batch_size, 32);
        assert_eq!(c.client.head_lr_scale, 100.0);
        assert_eq!(c.client.momentum, 0.9);
        assert_eq!(c.server.momentum, 0.9);
        assert_eq!(c.federated.users_per_round(), 2048);
        let t = c.trainer_config(8).unwrap();
        assert!((t.client.lr_head - 0.2).abs() < 1e-15);
    }

    #[test]
    fn round_trips_through_toml() {
        let c = ExperimentConfig::from_toml(MINIMAL).unwrap();
        let again = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(c, again);
        assert_eq!(c.digest(), again.digest());
        assert_eq!(c.digest().len(), 64);
    }

    #[test]
    fn field_level_errors() {
        let cases = [
            ("rounds = 5", "rounds = -1", "rounds"),
            ("noise_std = 0.1", "noise_std = -0.1", "noise_std"),
            ("mode = \"fedemb\"", "mode = \"fedsgd\"", "mode"),
            ("rounds = 5", "rounds = 5\nbogus = 1", "bogus"),
            ("rounds = 5", "rounds = 5\n[privacy]\nnoise_multiplier = 1.0\nclip_norm = -1.0", "privacy.clip_norm"),
            ("rounds = 5", "rounds = 5\n[eval]\nfar = 2.0", "eval.far"),
            ("rounds = 5", "rounds = 5\n[client]\nlr = -0.1", "client.lr"),
        ];
        for (from, to, field) in cases {
            let text = MINIMAL.replace(from, to);
            match ExperimentConfig::from_toml(&text) {
                Err(CliError::Config(msg)) => assert!(msg.contains(field), "{msg}"),
                other => panic!("{to}: {other:?}"),
            }
        }
    }
}
