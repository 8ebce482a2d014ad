//! Training configuration in a flat `key = value` format.
//!
//! ```text
//! # lowrank recovery, Riemannian SGD with sqrt-detach gates
//! task = lowrank-recover
//! mode = sqrt-detach
//! precond = riemannian
//! max_steps = 500
//! ```
//!
//! Every key has a default; unknown keys are rejected. When `lr_experts` is
//! not given it resolves to 3e-3 for SGD and 1e-3 for AdamW. The echo
//! produced by [`TrainConfig::to_text`] parses back to an identical config.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::grad::LossKind;
use crate::layer::{ForwardMode, InitScales, LayerShape};
use crate::optim::{AdamWConfig, OptimizerKind, ParamGroup, Schedule};
use crate::precond::{PrecondConfig, DEFAULT_DAMPING_REL, DEFAULT_GATE_FLOOR};

/// Environment variable consulted when `outdir` is not set.
pub const OUTDIR_ENV: &str = "MOELORA_OUTDIR";
pub const DEFAULT_LR_SGD: f64 = 3e-3;
pub const DEFAULT_LR_ADAMW: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    LowRankRecover,
    TeacherStudent,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::LowRankRecover => "lowrank-recover",
            TaskKind::TeacherStudent => "teacher-student",
        }
    }

    pub fn loss(self) -> LossKind {
        match self {
            TaskKind::LowRankRecover => LossKind::MseMatrix,
            TaskKind::TeacherStudent => LossKind::MseToken,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrecondKind {
    None,
    Riemannian,
}

impl PrecondKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PrecondKind::None => "none",
            PrecondKind::Riemannian => "riemannian",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerFamily {
    Sgd,
    AdamW,
}

impl OptimizerFamily {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerFamily::Sgd => "sgd",
            OptimizerFamily::AdamW => "adamw",
        }
    }

    pub fn default_lr(self) -> f64 {
        match self {
            OptimizerFamily::Sgd => DEFAULT_LR_SGD,
            OptimizerFamily::AdamW => DEFAULT_LR_ADAMW,
        }
    }
}

macro_rules! keyword_enum {
    ($t:ty, $name:literal, [$($v:path),+]) => {
        impl FromStr for $t {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                $(if s == <$t>::as_str($v) { return Ok($v); })+
                let allowed: Vec<&str> = vec![$(<$t>::as_str($v)),+];
                Err(Error::Config(format!(
                    "{}: expected one of {}, got {s:?}",
                    $name,
                    allowed.join(" | ")
                )))
            }
        }
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

keyword_enum!(
    TaskKind,
    "task",
    [TaskKind::LowRankRecover, TaskKind::TeacherStudent]
);
keyword_enum!(
    PrecondKind,
    "precond",
    [PrecondKind::None, PrecondKind::Riemannian]
);
keyword_enum!(
    OptimizerFamily,
    "optimizer",
    [OptimizerFamily::Sgd, OptimizerFamily::AdamW]
);

/// Description of one config key.
#[derive(Debug, Clone, Copy)]
pub struct KeySpec {
    pub name: &'static str,
    pub help: &'static str,
}

const fn key(name: &'static str, help: &'static str) -> KeySpec {
    KeySpec { name, help }
}

/// All accepted keys, in echo order.
pub const KEYS: &[KeySpec] = &[
    key("task", "lowrank-recover | teacher-student"),
    key("m", "output dimension"),
    key("n", "input dimension"),
    key("experts", "number of experts N"),
    key("top_k", "experts selected per token k"),
    key("rank", "LoRA rank r"),
    key("alpha", "LoRA alpha (scaling s = alpha / rank)"),
    key(
        "planted_rank",
        "rank of the planted perturbation (lowrank-recover)",
    ),
    key(
        "probe_tokens",
        "tokens mean-pooled into the routing probe (lowrank-recover)",
    ),
    key("tokens", "training tokens (teacher-student)"),
    key("eval_tokens", "held-out tokens (teacher-student)"),
    key("batch_size", "tokens per step (teacher-student)"),
    key("mode", "standard | sqrt-detach"),
    key("precond", "none | riemannian"),
    key(
        "ideal_rescale",
        "divide preconditioned gradients by the gate (matrix objective only)",
    ),
    key("optimizer", "sgd | adamw"),
    key("lr_experts", "initial expert learning rate"),
    key("lr_router", "initial router learning rate"),
    key("schedule", "linear | constant"),
    key("warmup_steps", "linear warm-up steps"),
    key("max_steps", "training steps"),
    key("eval_every", "evaluation interval in steps"),
    key("clip_router", "router gradient norm cap (0 disables)"),
    key("beta1", "AdamW first-moment decay"),
    key("beta2", "AdamW second-moment decay"),
    key("eps", "AdamW epsilon"),
    key("weight_decay", "AdamW decoupled weight decay"),
    key("damping_rel", "relative damping of the r x r Gram inverses"),
    key("gate_floor", "gate floor of the ideal rescale"),
    key("init_sigma", "std of expert A and B at init"),
    key("router_sigma", "std of router weights at init"),
    key("seed", "base seed"),
    key("seeds", "number of consecutive seeds for compare and sweep"),
    key("outdir", "output directory"),
    key(
        "wall_clock",
        "record wall-clock ms (makes CSVs run-dependent)",
    ),
];

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub task: TaskKind,
    pub m: usize,
    pub n: usize,
    pub experts: usize,
    pub top_k: usize,
    pub rank: usize,
    pub alpha: f64,
    pub planted_rank: usize,
    pub probe_tokens: usize,
    pub tokens: usize,
    pub eval_tokens: usize,
    pub batch_size: usize,
    pub mode: ForwardMode,
    pub precond: PrecondKind,
    pub ideal_rescale: bool,
    pub optimizer: OptimizerFamily,
    pub lr_experts: f64,
    pub lr_router: f64,
    pub schedule: Schedule,
    pub warmup_steps: usize,
    pub max_steps: usize,
    pub eval_every: usize,
    pub clip_router: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub damping_rel: f64,
    pub gate_floor: f64,
    pub init_sigma: f64,
    pub router_sigma: f64,
    pub seed: u64,
    pub seeds: usize,
    pub outdir: PathBuf,
    pub wall_clock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamWConfig::default();
        Self {
            task: TaskKind::LowRankRecover,
            m: 64,
            n: 64,
            experts: 20,
            top_k: 10,
            rank: 4,
            alpha: 16.0,
            planted_rank: 8,
            probe_tokens: 16,
            tokens: 512,
            eval_tokens: 256,
            batch_size: 64,
            mode: ForwardMode::Standard,
            precond: PrecondKind::None,
            ideal_rescale: false,
            optimizer: OptimizerFamily::Sgd,
            lr_experts: DEFAULT_LR_SGD,
            lr_router: ParamGroup::router_default().lr0,
            schedule: Schedule::LinearDecay,
            warmup_steps: 0,
            max_steps: 500,
            eval_every: 50,
            clip_router: ParamGroup::router_default().max_grad_norm.unwrap_or(0.0),
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            weight_decay: adam.weight_decay,
            damping_rel: DEFAULT_DAMPING_REL,
            gate_floor: DEFAULT_GATE_FLOOR,
            init_sigma: crate::layer::DEFAULT_EXPERT_SIGMA,
            router_sigma: crate::layer::DEFAULT_ROUTER_SIGMA,
            seed: 0,
            seeds: 10,
            outdir: PathBuf::from("out"),
            wall_clock: false,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key}: expected true or false, got {value:?}"
        ))),
    }
}

/// Splits config text into `(key, value)` pairs, checking key names.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {}: expected key = value",
                lineno + 1
            )));
        };
        let (k, v) = (k.trim(), v.trim());
        check_key(k)?;
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

pub fn check_key(k: &str) -> Result<()> {
    if KEYS.iter().any(|s| s.name == k) {
        Ok(())
    } else {
        Err(Error::Config(format!("unknown key {k:?}")))
    }
}

impl TrainConfig {
    /// Builds a config from defaults plus `pairs` (later pairs win), then
    /// resolves `lr_experts` and validates.
    pub fn from_pairs<K: AsRef<str>, V: AsRef<str>>(pairs: &[(K, V)]) -> Result<Self> {
        let mut cfg = Self::default();
        let mut lr_set = false;
        for (k, v) in pairs {
            let k = k.as_ref();
            lr_set |= k == "lr_experts";
            cfg.set(k, v.as_ref())?;
        }
        if !lr_set {
            cfg.lr_experts = cfg.optimizer.default_lr();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_pairs(&parse_pairs(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Sets one key without validation.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "task" => self.task = v.parse()?,
            "m" => self.m = parse_value(key, v)?,
            "n" => self.n = parse_value(key, v)?,
            "experts" => self.experts = parse_value(key, v)?,
            "top_k" => self.top_k = parse_value(key, v)?,
            "rank" => self.rank = parse_value(key, v)?,
            "alpha" => self.alpha = parse_value(key, v)?,
            "planted_rank" => self.planted_rank = parse_value(key, v)?,
            "probe_tokens" => self.probe_tokens = parse_value(key, v)?,
            "tokens" => self.tokens = parse_value(key, v)?,
            "eval_tokens" => self.eval_tokens = parse_value(key, v)?,
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "mode" => self.mode = v.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            "precond" => self.precond = v.parse()?,
            "ideal_rescale" => self.ideal_rescale = parse_bool(key, v)?,
            "optimizer" => self.optimizer = v.parse()?,
            "lr_experts" => self.lr_experts = parse_value(key, v)?,
            "lr_router" => self.lr_router = parse_value(key, v)?,
            "schedule" => {
                self.schedule = v.parse().map_err(|e: Error| Error::Config(e.to_string()))?
            }
            "warmup_steps" => self.warmup_steps = parse_value(key, v)?,
            "max_steps" => self.max_steps = parse_value(key, v)?,
            "eval_every" => self.eval_every = parse_value(key, v)?,
            "clip_router" => self.clip_router = parse_value(key, v)?,
            "beta1" => self.beta1 = parse_value(key, v)?,
            "beta2" => self.beta2 = parse_value(key, v)?,
            "eps" => self.eps = parse_value(key, v)?,
            "weight_decay" => self.weight_decay = parse_value(key, v)?,
            "damping_rel" => self.damping_rel = parse_value(key, v)?,
            "gate_floor" => self.gate_floor = parse_value(key, v)?,
            "init_sigma" => self.init_sigma = parse_value(key, v)?,
            "router_sigma" => self.router_sigma = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            "seeds" => self.seeds = parse_value(key, v)?,
            "outdir" => self.outdir = PathBuf::from(v),
            "wall_clock" => self.wall_clock = parse_bool(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Current value of `key` in config syntax.
    pub fn get(&self, key: &str) -> Result<String> {
        Ok(match key {
            "task" => self.task.to_string(),
            "m" => self.m.to_string(),
            "n" => self.n.to_string(),
            "experts" => self.experts.to_string(),
            "top_k" => self.top_k.to_string(),
            "rank" => self.rank.to_string(),
            "alpha" => self.alpha.to_string(),
            "planted_rank" => self.planted_rank.to_string(),
            "probe_tokens" => self.probe_tokens.to_string(),
            "tokens" => self.tokens.to_string(),
            "eval_tokens" => self.eval_tokens.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "mode" => self.mode.to_string(),
            "precond" => self.precond.to_string(),
            "ideal_rescale" => self.ideal_rescale.to_string(),
            "optimizer" => self.optimizer.to_string(),
            "lr_experts" => self.lr_experts.to_string(),
            "lr_router" => self.lr_router.to_string(),
            "schedule" => self.schedule.as_str().to_string(),
            "warmup_steps" => self.warmup_steps.to_string(),
            "max_steps" => self.max_steps.to_string(),
            "eval_every" => self.eval_every.to_string(),
            "clip_router" => self.clip_router.to_string(),
            "beta1" => self.beta1.to_string(),
            "beta2" => self.beta2.to_string(),
            "eps" => self.eps.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "damping_rel" => self.damping_rel.to_string(),
            "gate_floor" => self.gate_floor.to_string(),
            "init_sigma" => self.init_sigma.to_string(),
            "router_sigma" => self.router_sigma.to_string(),
            "seed" => self.seed.to_string(),
            "seeds" => self.seeds.to_string(),
            "outdir" => self.outdir.display().to_string(),
            "wall_clock" => self.wall_clock.to_string(),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        })
    }

    /// Resolved config as config text.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# resolved configuration\n");
        for k in KEYS {
            let v = self.get(k.name).expect("every listed key is readable");
            out.push_str(&format!("{} = {}\n", k.name, v));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.top_k > self.experts {
            return fail(format!(
                "top_k = {} exceeds experts = {}",
                self.top_k, self.experts
            ));
        }
        self.layer_shape()?;
        if self.planted_rank > self.m.min(self.n) || self.planted_rank > self.experts * self.rank {
            return fail(format!(
                "planted_rank = {} must be <= min(m, n) and <= experts * rank",
                self.planted_rank
            ));
        }
        if self.probe_tokens == 0 || self.tokens == 0 || self.eval_tokens == 0 {
            return fail("probe_tokens, tokens and eval_tokens must be positive".into());
        }
        if self.batch_size == 0 || self.batch_size > self.tokens {
            return fail(format!(
                "batch_size = {} must be in 1..=tokens",
                self.batch_size
            ));
        }
        if self.eval_every == 0 || self.seeds == 0 {
            return fail("eval_every and seeds must be positive".into());
        }
        for (name, v) in [
            ("lr_experts", self.lr_experts),
            ("lr_router", self.lr_router),
            ("clip_router", self.clip_router),
            ("weight_decay", self.weight_decay),
            ("damping_rel", self.damping_rel),
            ("init_sigma", self.init_sigma),
            ("router_sigma", self.router_sigma),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return fail(format!("{name} = {v} must be finite and non-negative"));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("beta1 and beta2 must lie in [0, 1)".into());
        }
        if !(self.eps > 0.0 && self.gate_floor > 0.0) {
            return fail("eps and gate_floor must be positive".into());
        }
        if self.ideal_rescale {
            if self.precond != PrecondKind::Riemannian {
                return fail("ideal_rescale requires precond = riemannian".into());
            }
            if self.mode != ForwardMode::Standard {
                return fail("ideal_rescale requires mode = standard".into());
            }
            if self.task != TaskKind::LowRankRecover {
                return fail(
                    "ideal_rescale needs the matrix objective (task = lowrank-recover)".into(),
                );
            }
        }
        Ok(())
    }

    pub fn layer_shape(&self) -> Result<LayerShape> {
        LayerShape::new(
            self.m,
            self.n,
            self.experts,
            self.top_k,
            self.rank,
            self.alpha,
        )
        .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn init_scales(&self) -> InitScales {
        InitScales {
            expert_sigma: self.init_sigma,
            router_sigma: self.router_sigma,
            base_sigma: None,
        }
    }

    pub fn precond_config(&self) -> PrecondConfig {
        PrecondConfig {
            enabled: self.precond == PrecondKind::Riemannian,
            damping_rel: self.damping_rel,
            ideal_gate_rescale: self.ideal_rescale,
            gate_floor: self.gate_floor,
        }
    }

    pub fn optimizer_kind(&self) -> OptimizerKind {
        match self.optimizer {
            OptimizerFamily::Sgd => OptimizerKind::Sgd,
            OptimizerFamily::AdamW => OptimizerKind::AdamW(AdamWConfig {
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
                weight_decay: self.weight_decay,
            }),
        }
    }

    pub fn expert_group(&self) -> ParamGroup {
        ParamGroup {
            lr0: self.lr_experts,
            schedule: self.schedule,
            ..ParamGroup::experts_default()
        }
    }

    pub fn router_group(&self) -> ParamGroup {
        ParamGroup {
            lr0: self.lr_router,
            schedule: self.schedule,
            max_grad_norm: (self.clip_router > 0.0).then_some(self.clip_router),
            ..ParamGroup::router_default()
        }
    }

    /// Canonical arm name: `SGD`, `sqrt-SGD`, `RSGD`, `gRSGD` and the AdamW
    /// counterparts; the ideal rescale appends `-ideal` to the `g` arm.
    pub fn arm_name(&self) -> String {
        let base = match self.optimizer {
            OptimizerFamily::Sgd => "SGD",
            OptimizerFamily::AdamW => "AdamW",
        };
        match (self.precond, self.mode, self.ideal_rescale) {
            (PrecondKind::None, ForwardMode::Standard, _) => base.to_string(),
            (PrecondKind::None, ForwardMode::SqrtDetach, _) => format!("sqrt-{base}"),
            (PrecondKind::Riemannian, ForwardMode::Standard, false) => format!("R{base}"),
            (PrecondKind::Riemannian, ForwardMode::Standard, true) => format!("gR{base}-ideal"),
            (PrecondKind::Riemannian, ForwardMode::SqrtDetach, _) => format!("gR{base}"),
        }
    }

    /// The four arms of the ablation: plain, sqrt-detach, Riemannian and
    /// Riemannian with sqrt-detach, all sharing the rest of `self`.
    pub fn four_arms(&self) -> [TrainConfig; 4] {
        let arm = |precond, mode| TrainConfig {
            precond,
            mode,
            ideal_rescale: false,
            ..self.clone()
        };
        [
            arm(PrecondKind::None, ForwardMode::Standard),
            arm(PrecondKind::None, ForwardMode::SqrtDetach),
            arm(PrecondKind::Riemannian, ForwardMode::Standard),
            arm(PrecondKind::Riemannian, ForwardMode::SqrtDetach),
        ]
    }

    /// `seed, seed + 1, …` (`seeds` values).
    pub fn seed_list(&self) -> Vec<u64> {
        (0..self.seeds as u64).map(|i| self.seed + i).collect()
    }
}
