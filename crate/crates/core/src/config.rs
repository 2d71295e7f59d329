//! Training and run configuration, read from flat JSON objects.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::crr::RefineMode;
use crate::ctr::CrossLabels;
use crate::error::{Result, RtcError};

fn config_error(path: impl Into<String>, msg: impl Into<String>) -> RtcError {
    RtcError::Config {
        path: path.into(),
        msg: msg.into(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Weight of the contrast term.
    pub alpha: f64,
    /// Weight of the compensatory term.
    pub beta: f64,
    pub top_k: usize,
    pub temperature: f64,
    pub theta_conf: f64,
    pub theta_fg: f64,
    pub theta_bg: f64,
    pub lr: f64,
    pub poly_power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs_total: usize,
    pub epochs_warmup: usize,
    /// Side of the random crop taken from each training image.
    pub crop_size: usize,
    pub view1_size: usize,
    pub view2_size: usize,
    pub seed: u64,
    /// Classification-only epochs that initialise the encoder before the main schedule.
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 1.0,
            top_k: 8,
            temperature: 0.1,
            theta_conf: 0.5,
            theta_fg: 0.55,
            theta_bg: 0.35,
            lr: 0.02,
            poly_power: 0.9,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 4,
            epochs_total: 10,
            epochs_warmup: 3,
            crop_size: 56,
            view1_size: 64,
            view2_size: 32,
            seed: 0,
            pretrain_epochs: 15,
            pretrain_lr: 0.03,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("temperature", self.temperature),
            ("lr", self.lr),
            ("poly_power", self.poly_power),
            ("pretrain_lr", self.pretrain_lr),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(config_error(name, "must be a positive number"));
            }
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(config_error(name, "must be a non-negative number"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(config_error("momentum", "must lie in [0, 1)"));
        }
        if !(self.theta_bg > 0.0 && self.theta_bg < self.theta_fg && self.theta_fg < 1.0) {
            return Err(config_error("theta_fg", "need 0 < theta_bg < theta_fg < 1"));
        }
        if !(0.0..=1.0).contains(&self.theta_conf) {
            return Err(config_error("theta_conf", "must lie in [0, 1]"));
        }
        if self.top_k == 0 {
            return Err(config_error("top_k", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(config_error("batch_size", "must be at least 1"));
        }
        if self.epochs_total == 0 {
            return Err(config_error("epochs_total", "must be at least 1"));
        }
        if self.epochs_warmup >= self.epochs_total {
            return Err(config_error("epochs_warmup", "must be below epochs_total"));
        }
        for (name, v) in [("view1_size", self.view1_size), ("view2_size", self.view2_size)] {
            if v == 0 || v % 8 != 0 {
                return Err(config_error(name, "must be a positive multiple of 8"));
            }
        }
        if self.view2_size > self.view1_size {
            return Err(config_error("view2_size", "must not exceed view1_size"));
        }
        if self.crop_size == 0 {
            return Err(config_error("crop_size", "must be positive"));
        }
        Ok(())
    }
}

/// Which loss terms and refinement path a run uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Switches {
    pub refine: RefineMode,
    pub ctr: bool,
    pub comloss: bool,
    /// Prototypes from the same view's features.
    pub self_view_prototypes: bool,
    pub detach_com_target: bool,
    /// Compare max-normalised maps in the compensatory loss instead of raw magnitudes.
    pub normalized_com: bool,
    pub detach_affinity: bool,
    pub cross_labels: CrossLabels,
}

impl Switches {
    pub fn full() -> Self {
        Self {
            refine: RefineMode::CrossRepresentation,
            ctr: true,
            comloss: true,
            self_view_prototypes: false,
            detach_com_target: true,
            normalized_com: true,
            detach_affinity: false,
            cross_labels: CrossLabels::Other,
        }
    }
}

/// Ablation presets, in the order of the expected improvement.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Baseline,
    Crr,
    CrrCtr,
    Full,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Self::Baseline, Self::Crr, Self::CrrCtr, Self::Full];

    pub fn name(self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::Crr => "crr",
            Self::CrrCtr => "crr_ctr",
            Self::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s)
    }

    /// `(enable_crr, enable_ctr, enable_comloss)`.
    pub fn flags(self) -> (bool, bool, bool) {
        match self {
            Self::Baseline => (false, false, false),
            Self::Crr => (true, false, false),
            Self::CrrCtr => (true, true, false),
            Self::Full => (true, true, true),
        }
    }
}

/// Everything in a run besides the optimisation hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunOptions {
    /// Dataset directory or manifest; when absent the dataset is generated in memory.
    pub data: Option<String>,
    pub out_dir: String,
    pub classes: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub data_seed: u64,
    pub enable_crr: bool,
    pub enable_ctr: bool,
    pub enable_comloss: bool,
    pub str_mode: bool,
    pub pcm_mode: bool,
    pub detach_com_target: bool,
    pub normalized_com: bool,
    pub detach_affinity: bool,
    pub cross_labels: CrossLabels,
    pub ablation_seeds: Vec<u64>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            data: None,
            out_dir: "runs".into(),
            classes: 4,
            n_train: 200,
            n_val: 50,
            data_seed: 1,
            enable_crr: true,
            enable_ctr: true,
            enable_comloss: true,
            str_mode: false,
            pcm_mode: false,
            detach_com_target: true,
            normalized_com: true,
            detach_affinity: false,
            cross_labels: CrossLabels::Other,
            ablation_seeds: vec![0, 1, 2],
        }
    }
}

/// One flat JSON object holding [`TrainConfig`] and [`RunOptions`] keys side by side.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    #[serde(flatten)]
    pub run: RunOptions,
}

fn keys_of<T: Serialize>(value: &T) -> Vec<String> {
    match serde_json::to_value(value).expect("config serializes") {
        serde_json::Value::Object(m) => m.keys().cloned().collect(),
        _ => unreachable!("config structs serialize to objects"),
    }
}

fn located(e: serde_path_to_error::Error<serde_json::Error>) -> RtcError {
    let path = e.path().to_string();
    config_error(path, e.into_inner().to_string())
}

impl RunConfig {
    /// Parses a flat JSON object. Unknown keys and type errors report the offending field.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| config_error("<root>", e.to_string()))?;
        let serde_json::Value::Object(obj) = value else {
            return Err(config_error("<root>", "expected a JSON object"));
        };
        let train_keys = keys_of(&TrainConfig::default());
        let run_keys = keys_of(&RunOptions::default());
        let (mut train, mut run) = (serde_json::Map::new(), serde_json::Map::new());
        for (k, v) in obj {
            if train_keys.contains(&k) {
                train.insert(k, v);
            } else if run_keys.contains(&k) {
                run.insert(k, v);
            } else {
                return Err(config_error(k, "unknown field"));
            }
        }
        let cfg = Self {
            train: serde_path_to_error::deserialize(serde_json::Value::Object(train)).map_err(located)?,
            run: serde_path_to_error::deserialize(serde_json::Value::Object(run)).map_err(located)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|e| config_error(path.display().to_string(), e.to_string()))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !(2..=8).contains(&self.run.classes) {
            return Err(config_error("classes", "must be in 2..=8"));
        }
        if self.run.n_train == 0 {
            return Err(config_error("n_train", "must be at least 1"));
        }
        if self.run.n_val == 0 {
            return Err(config_error("n_val", "must be at least 1"));
        }
        if self.run.str_mode && !self.run.enable_ctr {
            return Err(config_error("str_mode", "requires enable_ctr"));
        }
        if self.run.pcm_mode && !self.run.enable_crr {
            return Err(config_error(
                "pcm_mode",
                "replaces the CRR path and requires enable_crr",
            ));
        }
        if self.run.ablation_seeds.is_empty() {
            return Err(config_error("ablation_seeds", "must list at least one seed"));
        }
        Ok(())
    }

    pub fn apply_preset(&mut self, preset: Preset) {
        let (crr, ctr, com) = preset.flags();
        self.run.enable_crr = crr;
        self.run.enable_ctr = ctr;
        self.run.enable_comloss = com;
        if !ctr {
            self.run.str_mode = false;
        }
        if !crr {
            self.run.pcm_mode = false;
        }
    }

    pub fn switches(&self) -> Switches {
        let refine = match (self.run.enable_crr, self.run.pcm_mode) {
            (false, _) => RefineMode::Off,
            (true, false) => RefineMode::CrossRepresentation,
            (true, true) => RefineMode::Pcm,
        };
        Switches {
            refine,
            ctr: self.run.enable_ctr,
            comloss: self.run.enable_comloss,
            self_view_prototypes: self.run.str_mode,
            detach_com_target: self.run.detach_com_target,
            normalized_com: self.run.normalized_com,
            detach_affinity: self.run.detach_affinity,
            cross_labels: self.run.cross_labels,
        }
    }
}
