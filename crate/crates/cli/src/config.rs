//! Flat `key = value` run configuration.
//!
//! Files hold one `key = value` pair per line; `#` starts a comment. Every
//! key has a default, unknown or repeated keys are errors, and flags override
//! file values. [`RunConfig::to_text`] writes every key in a fixed order, so
//! the resolved file reproduces the run exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use transfer_lab::attack::{AttackConfig, DiConfig, Init, Norm};
use transfer_lab::eval::EvalConfig;
use transfer_lab::losses::{LossKind, LossSpec};
use transfer_lab::models::{Arch, TrainConfig};

use crate::error::{CliError, Result};

/// File name of the resolved configuration written next to every output.
pub const RESOLVED_NAME: &str = "config.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Train,
    Attack,
    Suite,
}

impl Command {
    fn as_str(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Attack => "attack",
            Command::Suite => "suite",
        }
    }
}

impl FromStr for Command {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Command::Train),
            "attack" => Ok(Command::Attack),
            "suite" => Ok(Command::Suite),
            _ => Err(format!("unknown command '{s}' (valid: train, attack, suite)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Single,
    EnsembleEasy,
    EnsembleHard,
    RankSweep,
    StepSweep,
    Trends,
    Uap,
}

impl Suite {
    pub const ALL: [Suite; 7] = [
        Suite::Single,
        Suite::EnsembleEasy,
        Suite::EnsembleHard,
        Suite::RankSweep,
        Suite::StepSweep,
        Suite::Trends,
        Suite::Uap,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Suite::Single => "single",
            Suite::EnsembleEasy => "ensemble-easy",
            Suite::EnsembleHard => "ensemble-hard",
            Suite::RankSweep => "ranksweep",
            Suite::StepSweep => "stepsweep",
            Suite::Trends => "trends",
            Suite::Uap => "uap",
        }
    }
}

impl FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Suite::ALL.into_iter().find(|v| v.as_str() == s).ok_or_else(|| {
            let names: Vec<&str> = Suite::ALL.iter().map(|v| v.as_str()).collect();
            format!("unknown suite '{s}' (valid: {})", names.join(", "))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Cifar10,
    Mnist,
}

impl FromStr for DatasetKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "cifar10" => Ok(DatasetKind::Cifar10),
            "mnist" => Ok(DatasetKind::Mnist),
            _ => Err(format!("unknown dataset '{s}' (valid: cifar10, mnist)")),
        }
    }
}

impl DatasetKind {
    fn as_str(self) -> &'static str {
        match self {
            DatasetKind::Cifar10 => "cifar10",
            DatasetKind::Mnist => "mnist",
        }
    }
}

/// Every setting of a run. `eps`, `alpha` and `alphas` are in /255 units.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    pub suite: Suite,

    pub dataset: DatasetKind,
    pub data: PathBuf,
    pub models: PathBuf,
    pub out: PathBuf,
    /// Cap on training images; 0 keeps all.
    pub train_limit: usize,
    /// Cap on test images; 0 keeps all.
    pub test_limit: usize,

    pub arch: Arch,
    /// Training seed, and the base seed of targets and attack randomness.
    pub seed: u64,
    /// Seed suffix of the weight files loaded as source and target models.
    pub model_seed: u64,
    /// Seed suffix of the second-seed siblings used by the easy ensemble rule.
    pub sibling_seed: u64,

    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f32,
    pub sgd_momentum: f32,
    pub weight_decay: f32,
    pub flip: bool,

    pub source: Vec<String>,
    pub targets: Vec<String>,
    pub loss: LossKind,
    pub losses: Vec<LossKind>,
    pub trend_losses: Vec<LossKind>,
    pub eps: f32,
    pub alpha: f32,
    pub iters: usize,
    pub checkpoints: Vec<usize>,
    pub mi: bool,
    pub mu: f32,
    pub ti: bool,
    pub ti_size: usize,
    pub di: bool,
    pub di_prob: f64,
    pub di_low: usize,
    pub di_high: usize,
    pub norm: Norm,
    pub unbounded: bool,
    pub init_gaussian: bool,
    pub init_sigma: f32,
    pub cw_k: f32,
    pub lambda: f32,
    pub gamma: f32,
    pub xi: f32,

    pub n_images: usize,
    pub trend_images: usize,
    /// Images each universal perturbation is scored on; 0 uses the whole
    /// test set.
    pub uap_images: usize,
    pub jobs: usize,
    pub min_accuracy: f64,
    pub white_box: bool,
    pub ranks: Vec<usize>,
    pub alphas: Vec<f32>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: Command::Suite,
            suite: Suite::Single,
            dataset: DatasetKind::Cifar10,
            data: PathBuf::from("./cifar"),
            models: PathBuf::from("./models"),
            out: PathBuf::from("./out"),
            train_limit: 0,
            test_limit: 0,
            arch: Arch::MiniVgg,
            seed: 0,
            model_seed: 0,
            sibling_seed: 1,
            epochs: 30,
            batch_size: 128,
            learning_rate: 0.05,
            decay_epochs: vec![20, 25],
            decay_factor: 0.1,
            sgd_momentum: 0.9,
            weight_decay: 5e-4,
            flip: true,
            source: vec!["mini_res".into()],
            targets: vec!["mini_vgg".into(), "mini_dense".into(), "mini_incep".into()],
            loss: LossKind::Logit,
            losses: vec![LossKind::Ce, LossKind::Logit],
            trend_losses: LossKind::ALL.to_vec(),
            eps: 16.0,
            alpha: 2.0,
            iters: 300,
            checkpoints: vec![20, 100, 300],
            mi: true,
            mu: 1.0,
            ti: true,
            ti_size: 5,
            di: true,
            di_prob: 0.7,
            di_low: 29,
            di_high: 32,
            norm: Norm::Linf,
            unbounded: false,
            init_gaussian: false,
            init_sigma: 0.1,
            cw_k: 0.0,
            lambda: 0.01,
            gamma: 0.007,
            xi: 1e-5,
            n_images: 200,
            trend_images: 100,
            uap_images: 0,
            jobs: 1,
            min_accuracy: 0.60,
            white_box: false,
            ranks: vec![2, 5, 10],
            alphas: vec![1.0, 2.0, 4.0],
        }
    }
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_one<T: FromStr>(value: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| format!("invalid value '{value}': {e}"))
}

fn parse_list<T: FromStr>(value: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse_one(v.trim())).collect()
}

fn parse_bool(value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(format!("invalid boolean '{value}' (use true or false)")),
    }
}

fn parse_names(value: &str) -> std::result::Result<Vec<String>, String> {
    let names: Vec<String> = value
        .split(',')
        .map(|v| v.trim().to_string())
        .filter(|v| !v.is_empty())
        .collect();
    if let Some(bad) = names
        .iter()
        .find(|n| n.chars().any(|c| c.is_whitespace() || c == '#' || c == '+'))
    {
        return Err(format!("invalid model name '{bad}'"));
    }
    Ok(names)
}

fn parse_init(value: &str) -> std::result::Result<bool, String> {
    match value {
        "zero" => Ok(false),
        "gaussian" => Ok(true),
        _ => Err(format!("unknown init '{value}' (valid: zero, gaussian)")),
    }
}

impl RunConfig {
    /// Every key in canonical order.
    pub fn keys() -> Vec<&'static str> {
        Self::default().entries().into_iter().map(|(k, _)| k).collect()
    }

    /// `(key, value)` pairs in canonical order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("command", self.command.as_str().into()),
            ("suite", self.suite.as_str().into()),
            ("dataset", self.dataset.as_str().into()),
            ("data", self.data.display().to_string()),
            ("models", self.models.display().to_string()),
            ("out", self.out.display().to_string()),
            ("train_limit", self.train_limit.to_string()),
            ("test_limit", self.test_limit.to_string()),
            ("arch", self.arch.as_str().into()),
            ("seed", self.seed.to_string()),
            ("model_seed", self.model_seed.to_string()),
            ("sibling_seed", self.sibling_seed.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("decay_epochs", join(&self.decay_epochs)),
            ("decay_factor", self.decay_factor.to_string()),
            ("sgd_momentum", self.sgd_momentum.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("flip", self.flip.to_string()),
            ("source", self.source.join(",")),
            ("targets", self.targets.join(",")),
            ("loss", self.loss.to_string()),
            ("losses", join(&self.losses)),
            ("trend_losses", join(&self.trend_losses)),
            ("eps", self.eps.to_string()),
            ("alpha", self.alpha.to_string()),
            ("iters", self.iters.to_string()),
            ("checkpoints", join(&self.checkpoints)),
            ("mi", self.mi.to_string()),
            ("mu", self.mu.to_string()),
            ("ti", self.ti.to_string()),
            ("ti_size", self.ti_size.to_string()),
            ("di", self.di.to_string()),
            ("di_prob", self.di_prob.to_string()),
            ("di_low", self.di_low.to_string()),
            ("di_high", self.di_high.to_string()),
            ("norm", self.norm.to_string()),
            ("unbounded", self.unbounded.to_string()),
            ("init", if self.init_gaussian { "gaussian" } else { "zero" }.into()),
            ("init_sigma", self.init_sigma.to_string()),
            ("cw_k", self.cw_k.to_string()),
            ("lambda", self.lambda.to_string()),
            ("gamma", self.gamma.to_string()),
            ("xi", self.xi.to_string()),
            ("n_images", self.n_images.to_string()),
            ("trend_images", self.trend_images.to_string()),
            ("uap_images", self.uap_images.to_string()),
            ("jobs", self.jobs.to_string()),
            ("min_accuracy", self.min_accuracy.to_string()),
            ("white_box", self.white_box.to_string()),
            ("ranks", join(&self.ranks)),
            ("alphas", join(&self.alphas)),
        ]
    }

    /// Set one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let v = value.trim();
        match key {
            "command" => self.command = parse_one(v)?,
            "suite" => self.suite = parse_one(v)?,
            "dataset" => self.dataset = parse_one(v)?,
            "data" => self.data = PathBuf::from(v),
            "models" => self.models = PathBuf::from(v),
            "out" => self.out = PathBuf::from(v),
            "train_limit" => self.train_limit = parse_one(v)?,
            "test_limit" => self.test_limit = parse_one(v)?,
            "arch" => self.arch = parse_one(v)?,
            "seed" => self.seed = parse_one(v)?,
            "model_seed" => self.model_seed = parse_one(v)?,
            "sibling_seed" => self.sibling_seed = parse_one(v)?,
            "epochs" => self.epochs = parse_one(v)?,
            "batch_size" => self.batch_size = parse_one(v)?,
            "learning_rate" => self.learning_rate = parse_one(v)?,
            "decay_epochs" => self.decay_epochs = parse_list(v)?,
            "decay_factor" => self.decay_factor = parse_one(v)?,
            "sgd_momentum" => self.sgd_momentum = parse_one(v)?,
            "weight_decay" => self.weight_decay = parse_one(v)?,
            "flip" => self.flip = parse_bool(v)?,
            "source" => self.source = parse_names(v)?,
            "targets" => self.targets = parse_names(v)?,
            "loss" => self.loss = parse_one(v)?,
            "losses" => self.losses = parse_list(v)?,
            "trend_losses" => self.trend_losses = parse_list(v)?,
            "eps" => self.eps = parse_one(v)?,
            "alpha" => self.alpha = parse_one(v)?,
            "iters" => self.iters = parse_one(v)?,
            "checkpoints" => self.checkpoints = parse_list(v)?,
            "mi" => self.mi = parse_bool(v)?,
            "mu" => self.mu = parse_one(v)?,
            "ti" => self.ti = parse_bool(v)?,
            "ti_size" => self.ti_size = parse_one(v)?,
            "di" => self.di = parse_bool(v)?,
            "di_prob" => self.di_prob = parse_one(v)?,
            "di_low" => self.di_low = parse_one(v)?,
            "di_high" => self.di_high = parse_one(v)?,
            "norm" => self.norm = parse_one(v)?,
            "unbounded" => self.unbounded = parse_bool(v)?,
            "init" => self.init_gaussian = parse_init(v)?,
            "init_sigma" => self.init_sigma = parse_one(v)?,
            "cw_k" => self.cw_k = parse_one(v)?,
            "lambda" => self.lambda = parse_one(v)?,
            "gamma" => self.gamma = parse_one(v)?,
            "xi" => self.xi = parse_one(v)?,
            "n_images" => self.n_images = parse_one(v)?,
            "trend_images" => self.trend_images = parse_one(v)?,
            "uap_images" => self.uap_images = parse_one(v)?,
            "jobs" => self.jobs = parse_one(v)?,
            "min_accuracy" => self.min_accuracy = parse_one(v)?,
            "white_box" => self.white_box = parse_bool(v)?,
            "ranks" => self.ranks = parse_list(v)?,
            "alphas" => self.alphas = parse_list(v)?,
            _ => return Err(format!("unknown key '{key}'")),
        }
        Ok(())
    }

    /// Apply `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = format!("{origin}:{}", n + 1);
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::config(&at, "expected `key = value`"))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(CliError::config(&at, format!("key '{key}' given twice")));
            }
            self.set(key, value).map_err(|m| CliError::config(&at, m))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text, "config")?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| transfer_lab::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut cfg = Self::default();
        cfg.apply_text(&text, &path.display().to_string())?;
        Ok(cfg)
    }

    /// Apply a flag override.
    pub fn set_flag(&mut self, key: &str, value: &str) -> Result<()> {
        self.set(key, value)
            .map_err(|m| CliError::config(&format!("--{key}"), m))
    }

    /// Canonical text with every key, parseable by [`RunConfig::parse`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            writeln!(s, "{k} = {v}").expect("writing to a string");
        }
        s
    }

    pub fn write_resolved(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| transfer_lab::Error::Io {
                path: parent.to_path_buf(),
                source: e,
            })?;
        }
        fs::write(path, self.to_text()).map_err(|e| {
            transfer_lab::Error::Io {
                path: path.to_path_buf(),
                source: e,
            }
            .into()
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            decay_epochs: self.decay_epochs.clone(),
            decay_factor: self.decay_factor,
            momentum: self.sgd_momentum,
            weight_decay: self.weight_decay,
            flip: self.flip,
            seed: self.seed,
        }
    }

    pub fn loss_spec(&self, kind: LossKind) -> LossSpec {
        LossSpec {
            kind,
            cw_confidence: self.cw_k,
            lambda: self.lambda,
            gamma: self.gamma,
            xi: self.xi,
        }
    }

    pub fn attack_config(&self) -> AttackConfig {
        AttackConfig {
            loss: self.loss_spec(self.loss),
            epsilon: self.eps / 255.0,
            alpha: self.alpha / 255.0,
            iterations: self.iters,
            checkpoints: self.checkpoints.clone(),
            momentum: self.mi.then_some(self.mu),
            ti_kernel: self.ti.then_some(self.ti_size),
            di: self.di.then_some(DiConfig {
                prob: self.di_prob,
                low: self.di_low,
                high: self.di_high,
            }),
            norm: self.norm,
            unbounded: self.unbounded,
            init: if self.init_gaussian {
                Init::Gaussian { sigma: self.init_sigma }
            } else {
                Init::Zero
            },
            seed: self.seed,
        }
    }

    /// Evaluation settings over `losses` and `n_images`.
    pub fn eval_config(&self, losses: &[LossKind], n_images: usize) -> EvalConfig {
        EvalConfig {
            attack: self.attack_config(),
            losses: losses.iter().map(|&k| self.loss_spec(k)).collect(),
            n_images,
            seed: self.seed,
            jobs: self.jobs,
            min_accuracy: self.min_accuracy,
            white_box: self.white_box,
        }
    }
}
