//! Flat `key = value` run configuration shared by every command.
//!
//! Parsing is strict: unknown keys and duplicate keys are errors, and every
//! config value round-trips through parse -> emit -> parse unchanged.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Full,
    NoAa,
    NoMim,
}

impl TrainMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Full => "full",
            TrainMode::NoAa => "no_aa",
            TrainMode::NoMim => "no_mim",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(TrainMode::Full),
            "no_aa" => Ok(TrainMode::NoAa),
            "no_mim" => Ok(TrainMode::NoMim),
            other => Err(Error::Config(format!(
                "mode must be full|no_aa|no_mim, got `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn as_str(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Config(format!(
                "precision must be f32|f64, got `{other}`"
            ))),
        }
    }
}

/// Union of generation, model, training, and evaluation settings plus
/// optional default paths. One file drives a whole run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // synthetic data
    pub num_speakers: usize,
    pub utterances_per_speaker: usize,
    pub identity_dim: usize,
    pub channels: usize,
    pub frames: usize,
    pub aging_strength: f64,
    pub noise_std: f64,
    pub age_lo: f64,
    pub age_hi: f64,

    // model
    pub enc_hidden: usize,
    pub embed_dim: usize,
    pub attn_hidden: usize,

    // training
    pub mode: TrainMode,
    pub lambda_age: f64,
    pub lambda_mi: f64,
    pub lambda0: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub lr_decay: f64,
    pub lr_floor: f64,
    pub est_lr: f64,
    pub est_weight_decay: f64,
    pub est_beta1: f64,
    pub est_beta2: f64,
    pub est_eps: f64,
    pub theta_steps_per_phi: usize,
    pub precision: Precision,
    pub mi_holdout: usize,
    pub seed: u64,

    // evaluation
    pub p_target: f64,
    pub c_fa: f64,
    pub c_miss: f64,
    pub trial_match_group: bool,

    // optional default paths (command-line flags take precedence)
    pub data_dir: Option<String>,
    pub out_dir: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            num_speakers: 200,
            utterances_per_speaker: 10,
            identity_dim: 16,
            channels: 24,
            frames: 50,
            aging_strength: 0.6,
            noise_std: 0.5,
            age_lo: 15.0,
            age_hi: 80.0,

            enc_hidden: 64,
            embed_dim: 256,
            attn_hidden: 64,

            mode: TrainMode::Full,
            lambda_age: 0.1,
            lambda_mi: 1e-4,
            lambda0: std::f64::consts::E,
            batch_size: 64,
            epochs: 30,
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            warmup_epochs: 6,
            lr_decay: 0.9,
            lr_floor: 5e-5,
            est_lr: 1e-5,
            est_weight_decay: 1e-4,
            est_beta1: 0.9,
            est_beta2: 0.999,
            est_eps: 1e-8,
            theta_steps_per_phi: 1,
            precision: Precision::F32,
            mi_holdout: 256,
            seed: 7,

            p_target: 0.01,
            c_fa: 1.0,
            c_miss: 1.0,
            trial_match_group: true,

            data_dir: None,
            out_dir: None,
        }
    }
}

macro_rules! config_keys {
    ($($key:ident : $kind:ident),+ $(,)?) => {
        const KEYS: &[&str] = &[$(stringify!($key)),+];

        impl RunConfig {
            fn set_key(&mut self, key: &str, raw: &str) -> Result<()> {
                match key {
                    $(stringify!($key) => {
                        self.$key = parse_value!($kind, key, raw)?;
                        Ok(())
                    })+
                    _ => Err(Error::Config(format!("unknown config key `{key}`"))),
                }
            }

            fn emit_key(&self, key: &str) -> Option<String> {
                match key {
                    $(stringify!($key) => emit_value!($kind, &self.$key),)+
                    _ => None,
                }
            }
        }
    };
}

macro_rules! parse_value {
    (usize, $key:expr, $raw:expr) => {
        $raw.parse::<usize>()
            .map_err(|_| Error::Config(format!("key `{}`: expected integer, got `{}`", $key, $raw)))
    };
    (u64, $key:expr, $raw:expr) => {
        $raw.parse::<u64>()
            .map_err(|_| Error::Config(format!("key `{}`: expected integer, got `{}`", $key, $raw)))
    };
    (f64, $key:expr, $raw:expr) => {
        $raw.parse::<f64>()
            .map_err(|_| Error::Config(format!("key `{}`: expected number, got `{}`", $key, $raw)))
    };
    (bool, $key:expr, $raw:expr) => {
        match $raw {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(Error::Config(format!(
                "key `{}`: expected true|false, got `{}`",
                $key, $raw
            ))),
        }
    };
    (mode, $key:expr, $raw:expr) => {
        TrainMode::parse($raw)
    };
    (precision, $key:expr, $raw:expr) => {
        Precision::parse($raw)
    };
    (opt_string, $key:expr, $raw:expr) => {
        Ok::<_, Error>(Some($raw.to_string()))
    };
}

macro_rules! emit_value {
    (usize, $v:expr) => {
        Some(format!("{}", $v))
    };
    (u64, $v:expr) => {
        Some(format!("{}", $v))
    };
    (f64, $v:expr) => {
        Some(format!("{}", $v))
    };
    (bool, $v:expr) => {
        Some(format!("{}", $v))
    };
    (mode, $v:expr) => {
        Some($v.as_str().to_string())
    };
    (precision, $v:expr) => {
        Some($v.as_str().to_string())
    };
    (opt_string, $v:expr) => {
        $v.as_ref().map(|s: &String| s.clone())
    };
}

config_keys! {
    num_speakers: usize,
    utterances_per_speaker: usize,
    identity_dim: usize,
    channels: usize,
    frames: usize,
    aging_strength: f64,
    noise_std: f64,
    age_lo: f64,
    age_hi: f64,
    enc_hidden: usize,
    embed_dim: usize,
    attn_hidden: usize,
    mode: mode,
    lambda_age: f64,
    lambda_mi: f64,
    lambda0: f64,
    batch_size: usize,
    epochs: usize,
    lr0: f64,
    momentum: f64,
    weight_decay: f64,
    warmup_epochs: usize,
    lr_decay: f64,
    lr_floor: f64,
    est_lr: f64,
    est_weight_decay: f64,
    est_beta1: f64,
    est_beta2: f64,
    est_eps: f64,
    theta_steps_per_phi: usize,
    precision: precision,
    mi_holdout: usize,
    seed: u64,
    p_target: f64,
    c_fa: f64,
    c_miss: f64,
    trial_match_group: bool,
    data_dir: opt_string,
    out_dir: opt_string,
}

impl RunConfig {
    /// Parse a config file body, starting from defaults. `#` starts a
    /// comment; duplicate or unknown keys are rejected.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut seen: Vec<String> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = match line.find('#') {
                Some(p) => &line[..p],
                None => line,
            };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            if seen.iter().any(|k| k == key) {
                return Err(Error::Config(format!("duplicate config key `{key}`")));
            }
            cfg.set_key(key, value)?;
            seen.push(key.to_string());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        RunConfig::parse(&text)
    }

    /// Apply one `key = value` override on top of an existing config, the
    /// way command-line `--set` flags do. The caller re-validates once all
    /// overrides are in.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        self.set_key(key.trim(), value.trim())
    }

    /// Canonical text form; `parse(emit(c))` reproduces `c` and emit is a
    /// fixpoint of parse -> emit.
    pub fn emit(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            if let Some(v) = self.emit_key(key) {
                out.push_str(key);
                out.push_str(" = ");
                out.push_str(&v);
                out.push('\n');
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.num_speakers < 2 {
            return fail("num_speakers must be >= 2".into());
        }
        if self.utterances_per_speaker < 2 {
            return fail("utterances_per_speaker must be >= 2".into());
        }
        if self.identity_dim == 0 || self.channels == 0 {
            return fail("identity_dim and channels must be positive".into());
        }
        if self.frames < 2 {
            return fail("frames must be >= 2 (pooling std needs two frames)".into());
        }
        if self.aging_strength < 0.0 {
            return fail("aging_strength must be >= 0".into());
        }
        if self.noise_std <= 0.0 {
            return fail("noise_std must be > 0".into());
        }
        if self.age_lo >= self.age_hi {
            return fail("age_lo must be < age_hi".into());
        }
        if self.age_lo < 0.0 {
            return fail("age_lo must be >= 0".into());
        }
        if self.enc_hidden == 0 || self.embed_dim == 0 || self.attn_hidden == 0 {
            return fail("model widths must be positive".into());
        }
        if self.lambda_age < 0.0 || self.lambda_mi < 0.0 {
            return fail("lambda_age and lambda_mi must be >= 0".into());
        }
        if self.lambda0 < 1.0 {
            return fail("lambda0 must be >= 1 (keeps the age-gap weight nonnegative)".into());
        }
        if self.batch_size < 2 {
            return fail("batch_size must be >= 2".into());
        }
        if self.epochs == 0 {
            return fail("epochs must be >= 1".into());
        }
        if self.lr_floor >= self.lr0 {
            return fail("lr_floor must be < lr0".into());
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return fail("lr_decay must be in (0, 1]".into());
        }
        if self.lr0 <= 0.0 || self.est_lr <= 0.0 {
            return fail("learning rates must be > 0".into());
        }
        if !(0.0..1.0).contains(&self.est_beta1) || !(0.0..1.0).contains(&self.est_beta2) {
            return fail("adam betas must be in [0, 1)".into());
        }
        if self.est_eps <= 0.0 {
            return fail("est_eps must be > 0".into());
        }
        if self.theta_steps_per_phi == 0 {
            return fail("theta_steps_per_phi must be >= 1".into());
        }
        if self.mi_holdout < 2 {
            return fail("mi_holdout must be >= 2".into());
        }
        if !(self.p_target > 0.0 && self.p_target < 1.0) {
            return fail("p_target must be in (0, 1)".into());
        }
        if self.c_fa <= 0.0 || self.c_miss <= 0.0 {
            return fail("detection costs must be > 0".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical emitted form; stored in checkpoints.
    pub fn digest(&self) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(self.emit().as_bytes());
        h.finalize().into()
    }
}
