use crate::error::{Error, Result};
use crate::graph::ShiftKind;
use crate::numeric::Activation;
use crate::permutation::{GsMode, GumbelSinkhorn};

/// The four compared learners.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Algorithm {
    Gcn,
    GsGcn,
    Gat,
    GsGat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackboneKind {
    Gcn,
    Gat,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [Algorithm::Gcn, Algorithm::GsGcn, Algorithm::Gat, Algorithm::GsGat];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Gcn => "GCN",
            Algorithm::GsGcn => "GS-GCN",
            Algorithm::Gat => "GAT",
            Algorithm::GsGat => "GS-GAT",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s.trim()))
    }

    pub fn uses_gs(self) -> bool {
        matches!(self, Algorithm::GsGcn | Algorithm::GsGat)
    }

    pub fn backbone(self) -> BackboneKind {
        match self {
            Algorithm::Gcn | Algorithm::GsGcn => BackboneKind::Gcn,
            Algorithm::Gat | Algorithm::GsGat => BackboneKind::Gat,
        }
    }

    /// The algorithm with the same backbone and the other GS setting.
    pub fn counterpart(self) -> Algorithm {
        match self {
            Algorithm::Gcn => Algorithm::GsGcn,
            Algorithm::GsGcn => Algorithm::Gcn,
            Algorithm::Gat => Algorithm::GsGat,
            Algorithm::GsGat => Algorithm::Gat,
        }
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            Algorithm::Gcn => 0,
            Algorithm::GsGcn => 1,
            Algorithm::Gat => 2,
            Algorithm::GsGat => 3,
        }
    }

    pub(crate) fn from_tag(t: u8) -> Option<Self> {
        Algorithm::ALL.into_iter().find(|a| a.tag() == t)
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub feature_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub layers: usize,
    pub activation: Activation,
    pub scaled_attention: bool,
    pub gcn_order: usize,
    pub gcn_shift: ShiftKind,
    /// |B|, neighbors per agent.
    pub neighbors: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            feature_dim: 64,
            heads: 4,
            head_dim: 16,
            layers: 2,
            activation: Activation::Relu,
            scaled_attention: true,
            gcn_order: 2,
            gcn_shift: ShiftKind::RandomWalk,
            neighbors: 3,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.heads == 0 || self.head_dim == 0 || self.layers == 0 {
            return Err(Error::Validation(
                "feature dim, heads, head dim and layers must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossMode {
    /// mean of `(td + lambda * |gs|)^2`
    PaperLiteral,
    /// mean of `td^2 + lambda * |gs|^2`
    Decomposed,
}

impl LossMode {
    pub fn name(self) -> &'static str {
        match self {
            LossMode::PaperLiteral => "paper-literal",
            LossMode::Decomposed => "decomposed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "paper-literal" => Some(LossMode::PaperLiteral),
            "decomposed" => Some(LossMode::Decomposed),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub gamma: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gs_weight: f64,
    /// Reject `alpha + beta != 1`.
    pub normalize_blend: bool,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub target_sync_period: u64,
    /// Total episodes, warmup included.
    pub episodes: usize,
    /// First (1-based) episode in which updates happen.
    pub train_start_episode: usize,
    pub epsilon_start: f64,
    pub epsilon_floor: f64,
    pub epsilon_decay: f64,
    pub epsilon_decay_start: usize,
    pub loss_mode: LossMode,
    pub seed: u64,
    pub gs: GumbelSinkhorn,
    pub gs_mode: GsMode,
    pub network: NetworkConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: 0.95,
            alpha: 0.7,
            beta: 0.3,
            gs_weight: 1.0,
            normalize_blend: true,
            learning_rate: 0.001,
            momentum: 0.0,
            batch_size: 32,
            buffer_capacity: 5000,
            target_sync_period: 200,
            episodes: 511,
            train_start_episode: 44,
            epsilon_start: 0.9,
            epsilon_floor: 0.02,
            epsilon_decay: 0.05,
            epsilon_decay_start: 60,
            loss_mode: LossMode::Decomposed,
            seed: 0,
            gs: GumbelSinkhorn::default(),
            gs_mode: GsMode::Soft,
            network: NetworkConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if !(0.0..1.0).contains(&self.gamma) {
            return bad(format!("gamma {} must lie in [0, 1)", self.gamma));
        }
        if !(self.alpha >= 0.0) || !(self.beta >= 0.0) {
            return bad(format!("alpha {} and beta {} must be >= 0", self.alpha, self.beta));
        }
        if self.normalize_blend && (self.alpha + self.beta - 1.0).abs() > 1e-12 {
            return bad(format!("alpha + beta = {} must equal 1", self.alpha + self.beta));
        }
        if !(self.gs_weight >= 0.0) {
            return bad(format!("gs weight {} must be >= 0", self.gs_weight));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning rate {} must be >= 0", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} must lie in [0, 1)", self.momentum));
        }
        if self.batch_size == 0 || self.buffer_capacity < self.batch_size {
            return bad("batch size must be positive and fit in the buffer".into());
        }
        if self.target_sync_period == 0 {
            return bad("target sync period must be positive".into());
        }
        if self.episodes == 0 || self.train_start_episode == 0 {
            return bad("episodes and train start are 1-based and positive".into());
        }
        let eps_ok = |e: f64| (0.0..=1.0).contains(&e);
        if !eps_ok(self.epsilon_start) || !eps_ok(self.epsilon_floor) || self.epsilon_floor > self.epsilon_start {
            return bad("epsilon floor must not exceed epsilon start, both in [0, 1]".into());
        }
        if !(self.epsilon_decay >= 0.0) {
            return bad("epsilon decay must be >= 0".into());
        }
        self.gs.validate()?;
        self.network.validate()
    }

    /// `(alpha, beta, lambda)` actually used by `algorithm`: plain
    /// learners run with the GS pathway off.
    pub fn blend_for(&self, algorithm: Algorithm) -> (f64, f64, f64) {
        if algorithm.uses_gs() {
            (self.alpha, self.beta, self.gs_weight)
        } else {
            (1.0, 0.0, 0.0)
        }
    }
}

/// Exploration rate for a 1-based episode.
pub fn epsilon_at(episode: usize, c: &TrainConfig) -> f64 {
    if episode <= c.epsilon_decay_start {
        return c.epsilon_start;
    }
    let decayed = c.epsilon_start - c.epsilon_decay * (episode - c.epsilon_decay_start) as f64;
    decayed.max(c.epsilon_floor)
}
