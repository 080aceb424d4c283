//! Tracker and training configuration, plus the flat `key = value` config
//! file format. Keys are exactly the struct field names; unknown keys are
//! errors.

use std::fmt::Write as _;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected 'key = value', got '{text}'")]
    BadLine { line: usize, text: String },
    #[error("line {line}: unknown key '{key}'")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: cannot parse value '{value}' for key '{key}'")]
    BadValue {
        line: usize,
        key: String,
        value: String,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Architecture and inference settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackerConfig {
    /// Points per frame after resampling (N).
    pub points: usize,
    /// Foreground memory tokens (K).
    pub tokens: usize,
    /// Feature width (D).
    pub feature_dim: usize,
    /// Layers in the memory updater stack.
    pub mu_layers: usize,
    /// Layers in the memory-based feature refiner stack.
    pub mfr_layers: usize,
    /// Attention heads per layer.
    pub heads: usize,
    /// Neighbors for edge aggregation.
    pub neighbors: usize,
    /// Targetness threshold splitting foreground from background.
    pub mask_threshold: f64,
    /// Below this max targetness the previous box is reused.
    pub confidence_floor: f64,
    /// Horizontal search margin around the previous box, meters.
    pub search_margin_xy: f64,
    /// Vertical search margin, meters.
    pub search_margin_z: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            points: 1024,
            tokens: 32,
            feature_dim: 128,
            mu_layers: 3,
            mfr_layers: 2,
            heads: 4,
            neighbors: 16,
            mask_threshold: 0.5,
            confidence_floor: 0.2,
            search_margin_xy: 2.0,
            search_margin_z: 1.0,
        }
    }
}

impl TrackerConfig {
    /// Full-size settings (the defaults).
    pub fn standard() -> Self {
        Self::default()
    }

    /// Shrunk model that trains in minutes on a laptop.
    pub fn desk() -> Self {
        Self {
            points: 256,
            tokens: 8,
            feature_dim: 32,
            mu_layers: 2,
            mfr_layers: 1,
            heads: 4,
            neighbors: 8,
            ..Self::default()
        }
    }

    /// Tiny model for finite-difference checks of the whole objective.
    pub fn micro() -> Self {
        Self {
            points: 16,
            tokens: 2,
            feature_dim: 4,
            mu_layers: 1,
            mfr_layers: 1,
            heads: 2,
            neighbors: 3,
            ..Self::default()
        }
    }

    /// Seed count after the three 2× downsampling stages.
    pub fn seeds(&self) -> usize {
        let n1 = self.points.div_ceil(2);
        let n2 = n1.div_ceil(2);
        n2.div_ceil(2)
    }

    /// Encoder stage widths; the final stage emits `feature_dim` channels.
    pub fn encoder_widths(&self) -> [usize; 3] {
        [
            (self.feature_dim / 2).max(1),
            self.feature_dim,
            self.feature_dim,
        ]
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.points == 0
            || self.tokens == 0
            || self.feature_dim == 0
            || self.mu_layers == 0
            || self.mfr_layers == 0
            || self.heads == 0
            || self.neighbors == 0
        {
            return Err(ConfigError::Invalid("all sizes must be positive".into()));
        }
        if self.feature_dim % self.heads != 0 {
            return Err(ConfigError::Invalid(format!(
                "feature_dim {} must be divisible by heads {}",
                self.feature_dim, self.heads
            )));
        }
        if self.points < self.neighbors + 1 {
            return Err(ConfigError::Invalid(format!(
                "points {} must exceed neighbors {}",
                self.points, self.neighbors
            )));
        }
        if !(0.0..1.0).contains(&self.mask_threshold) || self.mask_threshold <= 0.0 {
            return Err(ConfigError::Invalid(
                "mask_threshold must lie in (0, 1)".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.confidence_floor) || self.confidence_floor <= 0.0 {
            return Err(ConfigError::Invalid(
                "confidence_floor must lie in (0, 1)".into(),
            ));
        }
        if self.search_margin_xy <= 0.0 || self.search_margin_z <= 0.0 {
            return Err(ConfigError::Invalid(
                "search margins must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Optimization schedule and loss settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Consecutive frames per training sample.
    pub window: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Learning-rate multiplier applied every `decay_every` epochs.
    pub decay_factor: f64,
    pub decay_every: usize,
    /// Reliable-match distance threshold for temporal consistency, meters.
    pub tau_dist: f64,
    /// Softmax temperature of the cyclic walk.
    pub tau_cycle: f64,
    pub lambda_m: f64,
    pub lambda_c: f64,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub seed: u64,
    /// Temporal consistency loss toggle.
    pub use_tc: bool,
    /// Memory cycle consistency loss toggle.
    pub use_mcc: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            window: 8,
            batch_size: 4,
            learning_rate: 1e-3,
            decay_factor: 0.2,
            decay_every: 15,
            tau_dist: 0.3,
            tau_cycle: 0.1,
            lambda_m: 1.0,
            lambda_c: 1.0,
            epochs: 4,
            steps_per_epoch: 50,
            seed: 7,
            use_tc: true,
            use_mcc: true,
        }
    }
}

impl TrainConfig {
    /// Learning rate for a 0-based epoch index.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.decay_factor.powi((epoch / self.decay_every) as i32)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.window < 2 {
            return Err(ConfigError::Invalid("window must be at least 2".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.steps_per_epoch == 0 {
            return Err(ConfigError::Invalid("counts must be positive".into()));
        }
        if self.learning_rate <= 0.0 || self.decay_factor <= 0.0 {
            return Err(ConfigError::Invalid("rates must be positive".into()));
        }
        if self.decay_every == 0 {
            return Err(ConfigError::Invalid("decay_every must be positive".into()));
        }
        if self.tau_dist < 0.0 || self.tau_cycle <= 0.0 {
            return Err(ConfigError::Invalid(
                "tau_dist must be >= 0 and tau_cycle > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Both configs parsed from one flat file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FullConfig {
    pub tracker: TrackerConfig,
    pub train: TrainConfig,
}

macro_rules! set_field {
    ($cfg:expr, $field:ident, $value:expr, $line:expr, $key:expr) => {
        $cfg.$field = $value.parse().map_err(|_| ConfigError::BadValue {
            line: $line,
            key: $key.to_string(),
            value: $value.to_string(),
        })?
    };
}

/// Parse `key = value` lines on top of defaults. `#` starts a comment.
pub fn parse_config(text: &str) -> Result<FullConfig, ConfigError> {
    parse_config_over(text, FullConfig::default())
}

/// Parse `key = value` lines on top of an existing config.
pub fn parse_config_over(text: &str, mut cfg: FullConfig) -> Result<FullConfig, ConfigError> {
    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let stripped = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if stripped.is_empty() {
            continue;
        }
        let (key, value) = stripped.split_once('=').ok_or_else(|| ConfigError::BadLine {
            line,
            text: raw.to_string(),
        })?;
        let key = key.trim();
        let value = value.trim();
        match key {
            "points" => set_field!(cfg.tracker, points, value, line, key),
            "tokens" => set_field!(cfg.tracker, tokens, value, line, key),
            "feature_dim" => set_field!(cfg.tracker, feature_dim, value, line, key),
            "mu_layers" => set_field!(cfg.tracker, mu_layers, value, line, key),
            "mfr_layers" => set_field!(cfg.tracker, mfr_layers, value, line, key),
            "heads" => set_field!(cfg.tracker, heads, value, line, key),
            "neighbors" => set_field!(cfg.tracker, neighbors, value, line, key),
            "mask_threshold" => set_field!(cfg.tracker, mask_threshold, value, line, key),
            "confidence_floor" => set_field!(cfg.tracker, confidence_floor, value, line, key),
            "search_margin_xy" => set_field!(cfg.tracker, search_margin_xy, value, line, key),
            "search_margin_z" => set_field!(cfg.tracker, search_margin_z, value, line, key),
            "window" => set_field!(cfg.train, window, value, line, key),
            "batch_size" => set_field!(cfg.train, batch_size, value, line, key),
            "learning_rate" => set_field!(cfg.train, learning_rate, value, line, key),
            "decay_factor" => set_field!(cfg.train, decay_factor, value, line, key),
            "decay_every" => set_field!(cfg.train, decay_every, value, line, key),
            "tau_dist" => set_field!(cfg.train, tau_dist, value, line, key),
            "tau_cycle" => set_field!(cfg.train, tau_cycle, value, line, key),
            "lambda_m" => set_field!(cfg.train, lambda_m, value, line, key),
            "lambda_c" => set_field!(cfg.train, lambda_c, value, line, key),
            "epochs" => set_field!(cfg.train, epochs, value, line, key),
            "steps_per_epoch" => set_field!(cfg.train, steps_per_epoch, value, line, key),
            "seed" => set_field!(cfg.train, seed, value, line, key),
            "use_tc" => set_field!(cfg.train, use_tc, value, line, key),
            "use_mcc" => set_field!(cfg.train, use_mcc, value, line, key),
            _ => {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: key.to_string(),
                })
            }
        }
    }
    cfg.tracker.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}

/// Render a config as the same `key = value` text that `parse_config`
/// accepts. Used for checkpoint snapshots.
pub fn format_config(cfg: &FullConfig) -> String {
    let mut s = String::new();
    let t = &cfg.tracker;
    let n = &cfg.train;
    let _ = writeln!(s, "points = {}", t.points);
    let _ = writeln!(s, "tokens = {}", t.tokens);
    let _ = writeln!(s, "feature_dim = {}", t.feature_dim);
    let _ = writeln!(s, "mu_layers = {}", t.mu_layers);
    let _ = writeln!(s, "mfr_layers = {}", t.mfr_layers);
    let _ = writeln!(s, "heads = {}", t.heads);
    let _ = writeln!(s, "neighbors = {}", t.neighbors);
    let _ = writeln!(s, "mask_threshold = {}", t.mask_threshold);
    let _ = writeln!(s, "confidence_floor = {}", t.confidence_floor);
    let _ = writeln!(s, "search_margin_xy = {}", t.search_margin_xy);
    let _ = writeln!(s, "search_margin_z = {}", t.search_margin_z);
    let _ = writeln!(s, "window = {}", n.window);
    let _ = writeln!(s, "batch_size = {}", n.batch_size);
    let _ = writeln!(s, "learning_rate = {}", n.learning_rate);
    let _ = writeln!(s, "decay_factor = {}", n.decay_factor);
    let _ = writeln!(s, "decay_every = {}", n.decay_every);
    let _ = writeln!(s, "tau_dist = {}", n.tau_dist);
    let _ = writeln!(s, "tau_cycle = {}", n.tau_cycle);
    let _ = writeln!(s, "lambda_m = {}", n.lambda_m);
    let _ = writeln!(s, "lambda_c = {}", n.lambda_c);
    let _ = writeln!(s, "epochs = {}", n.epochs);
    let _ = writeln!(s, "steps_per_epoch = {}", n.steps_per_epoch);
    let _ = writeln!(s, "seed = {}", n.seed);
    let _ = writeln!(s, "use_tc = {}", n.use_tc);
    let _ = writeln!(s, "use_mcc = {}", n.use_mcc);
    s
}
