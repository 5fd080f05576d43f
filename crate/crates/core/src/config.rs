//! Pipeline configuration and its flat `key = value` text form.
//!
//! ```text
//! # comment
//! match.epsilon = 0.7
//! instance.recipe = chest
//! stages.instance = false
//! ```
//!
//! Later assignments override earlier ones; command-line `--set key=value`
//! pairs are applied after the file.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::coarse::OptimizerConfig;
use crate::error::{Error, Result};
use crate::instance::{InstanceObjectiveConfig, IntensityTerm, Parameterization};
use crate::transform::DEFAULT_SVF_STEPS;

/// Which stages run; matching and evaluation always do.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Stages {
    pub affine: bool,
    pub coarse: bool,
    pub instance: bool,
}

impl Default for Stages {
    fn default() -> Self {
        Stages {
            affine: true,
            coarse: true,
            instance: true,
        }
    }
}

/// Weight and intensity presets for the instance stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Recipe {
    /// λ₁ = 1, λ₂ = 100, NCC.
    Head,
    /// λ₁ = 1, λ₂ = 50, NCC.
    Chest,
    /// λ₁ = 0.01, λ₂ = 10, LNCC.
    Abdomen,
}

impl Recipe {
    pub fn apply(self, cfg: &mut InstanceObjectiveConfig) {
        let (sim, reg, intensity) = match self {
            Recipe::Head => (1.0, 100.0, IntensityTerm::Ncc),
            Recipe::Chest => (1.0, 50.0, IntensityTerm::Ncc),
            Recipe::Abdomen => (0.01, 10.0, IntensityTerm::Lncc { window: 9 }),
        };
        cfg.lambda_sim = sim;
        cfg.lambda_reg = reg;
        cfg.intensity = intensity;
    }
}

impl FromStr for Recipe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "head" => Ok(Recipe::Head),
            "chest" => Ok(Recipe::Chest),
            "abdomen" => Ok(Recipe::Abdomen),
            _ => Err(Error::Config(format!("unknown recipe `{s}` (head, chest, abdomen)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PipelineConfig {
    pub match_step: usize,
    pub match_iterations: usize,
    pub match_epsilon: f64,
    pub coarse_stride: usize,
    pub coarse: OptimizerConfig,
    pub instance: InstanceObjectiveConfig,
    pub stages: Stages,
    /// Image voxels per feature voxel along each axis.
    pub feature_scale: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            match_step: 2,
            match_iterations: 5,
            match_epsilon: 0.7,
            coarse_stride: 4,
            coarse: OptimizerConfig::default(),
            instance: InstanceObjectiveConfig::default(),
            stages: Stages::default(),
            feature_scale: 1.0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

impl PipelineConfig {
    /// Every recognised key, in documentation order.
    pub const KEYS: &'static [&'static str] = &[
        "match.step",
        "match.iterations",
        "match.epsilon",
        "stages.affine",
        "stages.coarse",
        "stages.instance",
        "coarse.stride",
        "coarse.lambda",
        "coarse.step_size",
        "coarse.iterations",
        "coarse.tol",
        "instance.recipe",
        "instance.lambda_sim",
        "instance.lambda_reg",
        "instance.intensity",
        "instance.lncc_window",
        "instance.diffeomorphic",
        "instance.svf_steps",
        "instance.step_size",
        "instance.iterations",
        "instance.tol",
        "features.scale",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let inst = &mut self.instance;
        match key.trim() {
            "match.step" => self.match_step = parse(key, v)?,
            "match.iterations" => self.match_iterations = parse(key, v)?,
            "match.epsilon" => self.match_epsilon = parse(key, v)?,
            "stages.affine" => self.stages.affine = parse(key, v)?,
            "stages.coarse" => self.stages.coarse = parse(key, v)?,
            "stages.instance" => self.stages.instance = parse(key, v)?,
            "coarse.stride" => self.coarse_stride = parse(key, v)?,
            "coarse.lambda" => self.coarse.reg_weight = parse(key, v)?,
            "coarse.step_size" => self.coarse.step_size = parse(key, v)?,
            "coarse.iterations" => self.coarse.iterations = parse(key, v)?,
            "coarse.tol" => self.coarse.convergence_tol = parse(key, v)?,
            "instance.recipe" => v.parse::<Recipe>()?.apply(inst),
            "instance.lambda_sim" => inst.lambda_sim = parse(key, v)?,
            "instance.lambda_reg" => inst.lambda_reg = parse(key, v)?,
            "instance.intensity" => {
                inst.intensity = match v {
                    "none" => IntensityTerm::None,
                    "ncc" => IntensityTerm::Ncc,
                    "lncc" => IntensityTerm::Lncc {
                        window: match inst.intensity {
                            IntensityTerm::Lncc { window } => window,
                            _ => 9,
                        },
                    },
                    _ => return Err(Error::Config(format!("`{key}`: expected none, ncc or lncc"))),
                }
            }
            "instance.lncc_window" => inst.intensity = IntensityTerm::Lncc { window: parse(key, v)? },
            "instance.diffeomorphic" => {
                inst.parameterization = if parse(key, v)? {
                    Parameterization::svf()
                } else {
                    Parameterization::Displacement
                }
            }
            "instance.svf_steps" => {
                inst.parameterization = Parameterization::Svf { steps: parse(key, v)? }
            }
            "instance.step_size" => inst.step_size = parse(key, v)?,
            "instance.iterations" => inst.iterations = parse(key, v)?,
            "instance.tol" => inst.convergence_tol = parse(key, v)?,
            "features.scale" => self.feature_scale = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Applies the assignments in `text` on top of `self`. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split_once('#').map_or(line, |(head, _)| head).trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{pair}` is not key=value")))?;
        self.set(k, v)
    }

    /// Defaults, then the optional file, then overrides; validated.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            cfg.apply_text(&text)?;
        }
        for o in overrides {
            cfg.apply_override(o)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.match_step < 1 {
            return Err(Error::Config("match.step must be >= 1".into()));
        }
        if self.match_iterations < 1 {
            return Err(Error::Config("match.iterations must be >= 1".into()));
        }
        if !(-1.0..=1.0).contains(&self.match_epsilon) {
            return Err(Error::Config("match.epsilon must lie in [-1, 1]".into()));
        }
        if self.coarse_stride < 1 {
            return Err(Error::Config("coarse.stride must be >= 1".into()));
        }
        if !(self.coarse.reg_weight >= 0.0) {
            return Err(Error::Config("coarse.lambda must be >= 0".into()));
        }
        if !(self.coarse.step_size > 0.0) || self.coarse.iterations < 1 || !(self.coarse.convergence_tol >= 0.0) {
            return Err(Error::Config("coarse optimizer settings out of range".into()));
        }
        if !(self.feature_scale > 0.0 && self.feature_scale.is_finite()) {
            return Err(Error::Config("features.scale must be > 0".into()));
        }
        self.instance.validate()
    }

    /// The configuration in the text form accepted by [`PipelineConfig::apply_text`].
    pub fn to_text(&self) -> String {
        let i = &self.instance;
        let (intensity, window) = match i.intensity {
            IntensityTerm::None => ("none", None),
            IntensityTerm::Ncc => ("ncc", None),
            IntensityTerm::Lncc { window } => ("lncc", Some(window)),
        };
        let (diffeo, steps) = match i.parameterization {
            Parameterization::Displacement => (false, DEFAULT_SVF_STEPS),
            Parameterization::Svf { steps } => (true, steps),
        };
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        kv("match.step", self.match_step.to_string());
        kv("match.iterations", self.match_iterations.to_string());
        kv("match.epsilon", self.match_epsilon.to_string());
        kv("stages.affine", self.stages.affine.to_string());
        kv("stages.coarse", self.stages.coarse.to_string());
        kv("stages.instance", self.stages.instance.to_string());
        kv("coarse.stride", self.coarse_stride.to_string());
        kv("coarse.lambda", self.coarse.reg_weight.to_string());
        kv("coarse.step_size", self.coarse.step_size.to_string());
        kv("coarse.iterations", self.coarse.iterations.to_string());
        kv("coarse.tol", self.coarse.convergence_tol.to_string());
        kv("instance.lambda_sim", i.lambda_sim.to_string());
        kv("instance.lambda_reg", i.lambda_reg.to_string());
        kv("instance.intensity", intensity.to_string());
        if let Some(w) = window {
            kv("instance.lncc_window", w.to_string());
        }
        if diffeo {
            kv("instance.svf_steps", steps.to_string());
        } else {
            kv("instance.diffeomorphic", "false".into());
        }
        kv("instance.step_size", i.step_size.to_string());
        kv("instance.iterations", i.iterations.to_string());
        kv("instance.tol", i.convergence_tol.to_string());
        kv("features.scale", self.feature_scale.to_string());
        s
    }
}
