//! Flat `key = value` training configuration.
//!
//! Blank lines and `#` comments are ignored. Keys are dotted paths such as
//! `optim.lr0`; ranges are written `lo,hi` and operation lists `a,b`.
//! Precedence, lowest first: defaults, the file, `ABD_SEED`, `--override`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use abd_core::augmentation::{StrongConfig, StrongOp};
use abd_core::displacement::Strategy;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, Result, TrainError};

/// Environment variable that replaces the master seed.
pub const SEED_ENV: &str = "ABD_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { lr0: 0.01, momentum: 0.9, weight_decay: 1e-4, poly_power: 0.9 }
    }
}

/// Which parts of the pipeline are switched on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    /// Strong augmentation of the second view; when off both views are the weak view.
    pub input_perturbation: bool,
    pub abd_r: bool,
    pub abd_i: bool,
}

impl Ablation {
    pub const FULL: Ablation = Ablation { input_perturbation: true, abd_r: true, abd_i: true };
    pub const BASE: Ablation = Ablation { input_perturbation: false, abd_r: false, abd_i: false };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSettings {
    pub base_width: usize,
    pub depth: usize,
    /// Initialisation seed of the first network (the second uses `+1`).
    /// Defaults to the master seed.
    pub init_seed: Option<u64>,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self { base_width: 16, depth: 3, init_seed: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub labeled_ratio: f64,
    pub b_l: usize,
    pub b_u: usize,
    pub t_total: u64,
    pub eval_interval: u64,
    pub k_patches: usize,
    pub top_n: usize,
    pub strategy: Strategy,
    pub optim: OptimConfig,
    pub ablation: Ablation,
    pub strong: StrongConfig,
    pub model: ModelSettings,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs/abd"),
            labeled_ratio: 0.1,
            b_l: 4,
            b_u: 4,
            t_total: 2000,
            eval_interval: 200,
            k_patches: 16,
            top_n: 4,
            strategy: Strategy::Reliable,
            optim: OptimConfig::default(),
            ablation: Ablation::FULL,
            strong: StrongConfig::default(),
            model: ModelSettings::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| TrainError::Config(format!("{key}: cannot parse '{value}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "1" | "on" | "yes" => Ok(true),
        "false" | "0" | "off" | "no" => Ok(false),
        _ => Err(TrainError::Config(format!("{key}: expected a boolean, got '{value}'"))),
    }
}

fn parse_range(key: &str, value: &str) -> Result<(f64, f64)> {
    match value.split(',').map(str::trim).collect::<Vec<_>>()[..] {
        [lo, hi] => Ok((parse(key, lo)?, parse(key, hi)?)),
        _ => Err(TrainError::Config(format!("{key}: expected 'lo,hi', got '{value}'"))),
    }
}

fn parse_ops(key: &str, value: &str) -> Result<Vec<StrongOp>> {
    if value.is_empty() || value == "none" {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|s| s.parse().map_err(|e: abd_core::CoreError| TrainError::Config(format!("{key}: {e}"))))
        .collect()
}

impl TrainConfig {
    /// Sets one key. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = parse(key, v)?,
            "data_dir" => self.data_dir = PathBuf::from(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "labeled_ratio" => self.labeled_ratio = parse(key, v)?,
            "b_l" => self.b_l = parse(key, v)?,
            "b_u" => self.b_u = parse(key, v)?,
            "t_total" => self.t_total = parse(key, v)?,
            "eval_interval" => self.eval_interval = parse(key, v)?,
            "k_patches" => self.k_patches = parse(key, v)?,
            "top_n" => self.top_n = parse(key, v)?,
            "strategy" => {
                self.strategy = v.parse().map_err(|e: abd_core::CoreError| TrainError::Config(format!("{key}: {e}")))?
            }
            "optim.lr0" => self.optim.lr0 = parse(key, v)?,
            "optim.momentum" => self.optim.momentum = parse(key, v)?,
            "optim.weight_decay" => self.optim.weight_decay = parse(key, v)?,
            "optim.poly_power" => self.optim.poly_power = parse(key, v)?,
            "ablation.input_perturbation" => self.ablation.input_perturbation = parse_bool(key, v)?,
            "ablation.abd_r" => self.ablation.abd_r = parse_bool(key, v)?,
            "ablation.abd_i" => self.ablation.abd_i = parse_bool(key, v)?,
            "aug.strong.ops" => self.strong.ops = parse_ops(key, v)?,
            "aug.strong.cutout_area" => self.strong.cutout_area = parse_range(key, v)?,
            "aug.strong.jitter_range" => self.strong.jitter_range = parse_range(key, v)?,
            "aug.strong.blur_sigma" => self.strong.blur_sigma = parse_range(key, v)?,
            "aug.strong.fill" => self.strong.fill = parse(key, v)?,
            "model.base_width" => self.model.base_width = parse(key, v)?,
            "model.depth" => self.model.depth = parse(key, v)?,
            "model.init_seed" => self.model.init_seed = if v == "auto" { None } else { Some(parse(key, v)?) },
            other => return Err(TrainError::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| TrainError::Config(format!("line {}: expected 'key = value', got '{line}'", n + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(TrainError::Config(format!("line {}: duplicate key '{k}'", n + 1)));
            }
            self.set(k, v).map_err(|e| match e {
                TrainError::Config(m) => TrainError::Config(format!("line {}: {m}", n + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv.split_once('=').ok_or_else(|| TrainError::Config(format!("override '{kv}' is not key=value")))?;
        self.set(k, v)
    }

    /// Defaults, then `path`, then `ABD_SEED`, then `overrides`; validated.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(io_err(p))?;
            cfg.apply_text(&text)?;
        }
        if let Ok(seed) = std::env::var(SEED_ENV) {
            cfg.seed = parse(SEED_ENV, seed.trim())?;
        }
        for kv in overrides {
            cfg.apply_override(kv)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(TrainError::Config(m));
        let side = (self.k_patches as f64).sqrt().round() as usize;
        if self.k_patches == 0 || side * side != self.k_patches {
            return fail(format!("k_patches = {} is not a positive perfect square", self.k_patches));
        }
        if self.top_n == 0 || self.top_n > self.k_patches {
            return fail(format!("top_n = {} must lie in 1..={}", self.top_n, self.k_patches));
        }
        if !(self.labeled_ratio > 0.0 && self.labeled_ratio <= 1.0) {
            return fail(format!("labeled_ratio = {} must lie in (0, 1]", self.labeled_ratio));
        }
        if self.b_l == 0 || self.b_u == 0 {
            return fail("batch sizes b_l and b_u must be positive".into());
        }
        if self.t_total == 0 || self.eval_interval == 0 {
            return fail("t_total and eval_interval must be positive".into());
        }
        let o = &self.optim;
        if !(o.lr0 > 0.0 && o.lr0.is_finite()) {
            return fail(format!("optim.lr0 = {} must be positive", o.lr0));
        }
        if !(0.0..1.0).contains(&o.momentum) || !(o.weight_decay >= 0.0) || !(o.poly_power >= 0.0) {
            return fail("optim: need 0 <= momentum < 1, weight_decay >= 0, poly_power >= 0".into());
        }
        if self.model.base_width == 0 {
            return fail("model.base_width must be positive".into());
        }
        self.strong.validate().map_err(|e| TrainError::Config(e.to_string()))
    }

    pub fn init_seed(&self) -> u64 {
        self.model.init_seed.unwrap_or(self.seed)
    }

    /// Canonical text form; [`TrainConfig::from_text`] reads it back unchanged.
    pub fn render(&self) -> String {
        let ops: Vec<String> = self.strong.ops.iter().map(|o| o.to_string()).collect();
        let range = |(lo, hi): (f64, f64)| format!("{lo},{hi}");
        let mut s = String::new();
        let mut line = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        line("seed", self.seed.to_string());
        line("data_dir", self.data_dir.display().to_string());
        line("out_dir", self.out_dir.display().to_string());
        line("labeled_ratio", self.labeled_ratio.to_string());
        line("b_l", self.b_l.to_string());
        line("b_u", self.b_u.to_string());
        line("t_total", self.t_total.to_string());
        line("eval_interval", self.eval_interval.to_string());
        line("k_patches", self.k_patches.to_string());
        line("top_n", self.top_n.to_string());
        line("strategy", self.strategy.to_string());
        line("optim.lr0", self.optim.lr0.to_string());
        line("optim.momentum", self.optim.momentum.to_string());
        line("optim.weight_decay", self.optim.weight_decay.to_string());
        line("optim.poly_power", self.optim.poly_power.to_string());
        line("ablation.input_perturbation", self.ablation.input_perturbation.to_string());
        line("ablation.abd_r", self.ablation.abd_r.to_string());
        line("ablation.abd_i", self.ablation.abd_i.to_string());
        line("aug.strong.ops", if ops.is_empty() { "none".into() } else { ops.join(",") });
        line("aug.strong.cutout_area", range(self.strong.cutout_area));
        line("aug.strong.jitter_range", range(self.strong.jitter_range));
        line("aug.strong.blur_sigma", range(self.strong.blur_sigma));
        line("aug.strong.fill", self.strong.fill.to_string());
        line("model.base_width", self.model.base_width.to_string());
        line("model.depth", self.model.depth.to_string());
        line("model.init_seed", self.model.init_seed.map_or_else(|| "auto".into(), |s| s.to_string()));
        s
    }

    /// SHA-256 of everything that affects training, hex encoded. The output
    /// directory is left out so a run can be moved.
    pub fn hash(&self) -> String {
        let text: String = self.render().lines().filter(|l| !l.starts_with("out_dir ")).map(|l| format!("{l}\n")).collect();
        Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}
