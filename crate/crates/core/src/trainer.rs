//! Training loop: a warm-up epoch on random pairs, then per-step coupling,
//! loss, Adam update and EMA update. Also owns the run directory layout
//! (config echo, metrics.csv, checkpoints, run.json).

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coupling::{
    batch_ot_coupling, mac_full_coupling, mac_topk_coupling, random_coupling, sinkhorn_ot_coupling, CouplingBatch,
    ScoreMode, SinkhornParams, Strategy,
};
use crate::distributions::GaussianMixture;
use crate::error::{Error, Result};
use crate::metrics::coupling_cost_stats;
use crate::net::{read_params, write_params, AdamState, Architecture, EmaParams, VectorFieldNet};
use crate::objectives::{fm_loss, shortcut_loss, LossBreakdown, OneStepTime, ShortcutDraw, ShortcutParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Fm,
    Shortcut,
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Fm => "fm",
            Objective::Shortcut => "shortcut",
        })
    }
}

impl FromStr for Objective {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "fm" => Ok(Objective::Fm),
            "shortcut" => Ok(Objective::Shortcut),
            _ => Err(format!("unknown objective `{s}` (expected auto | fm | shortcut)")),
        }
    }
}

/// Everything that determines a run. Parsed from flat `key = value` text.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub coupling: Strategy,
    /// `None` picks shortcut for the MAC strategies and fm otherwise.
    pub objective: Option<Objective>,
    /// `None` scores with `d = 1` under the shortcut objective, `d = 0` otherwise.
    pub score_mode: Option<ScoreMode>,
    pub batch_size: usize,
    pub k: f64,
    pub r: f64,
    pub lambda: f64,
    pub m: f64,
    pub lr: f64,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub seed: u64,
    pub d_grid: Vec<f64>,
    pub ema_decay: f64,
    pub sinkhorn: SinkhornParams,
    pub one_step_t: OneStepTime,
    pub mac_full_weighting: bool,
    pub hidden: Vec<usize>,
    pub features: usize,
    pub source: GaussianMixture,
    pub target: GaussianMixture,
    pub record_wallclock: bool,
    /// Checkpoint every this many epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
    pub eval_samples: usize,
    pub eval_projections: usize,
    pub eval_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            coupling: Strategy::Random,
            objective: None,
            score_mode: None,
            batch_size: 256,
            k: 0.3,
            r: 0.4,
            lambda: 0.02,
            m: 1.0 / 8.0,
            lr: AdamState::DEFAULT_LR,
            epochs: 20,
            steps_per_epoch: 500,
            seed: 0,
            d_grid: vec![0.125, 0.25, 0.5, 1.0],
            ema_decay: EmaParams::DEFAULT_DECAY,
            sinkhorn: SinkhornParams::default(),
            one_step_t: OneStepTime::Sampled,
            mac_full_weighting: false,
            hidden: vec![128, 128, 128],
            features: 8,
            source: GaussianMixture::four_corners(),
            target: GaussianMixture::two_modes(),
            record_wallclock: false,
            checkpoint_every: 1,
            eval_samples: 4096,
            eval_projections: 256,
            eval_seed: 20_240_917,
        }
    }
}

/// Recognised config keys, in echo order.
pub const CONFIG_KEYS: &[&str] = &[
    "coupling",
    "objective",
    "score_mode",
    "batch_size",
    "k",
    "r",
    "lambda",
    "m",
    "lr",
    "epochs",
    "steps_per_epoch",
    "seed",
    "d_grid",
    "ema_decay",
    "sinkhorn_reg",
    "sinkhorn_tol",
    "sinkhorn_iters",
    "one_step_t",
    "mac_full_weighting",
    "hidden",
    "features",
    "source_means",
    "source_weights",
    "target_means",
    "target_weights",
    "record_wallclock",
    "checkpoint_every",
    "eval_samples",
    "eval_projections",
    "eval_seed",
];

fn bad(key: &str, reason: impl Into<String>) -> Error {
    Error::config(key, reason)
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| bad(key, format!("cannot parse `{v}`")))
}

/// Accepts decimals and `a/b` fractions.
fn parse_real(key: &str, v: &str) -> Result<f64> {
    let x = match v.split_once('/') {
        Some((a, b)) => parse_num::<f64>(key, a.trim())? / parse_num::<f64>(key, b.trim())?,
        None => parse_num::<f64>(key, v)?,
    };
    if !x.is_finite() {
        return Err(bad(key, format!("`{v}` is not finite")));
    }
    Ok(x)
}

fn parse_list<T>(key: &str, v: &str, item: impl Fn(&str, &str) -> Result<T>) -> Result<Vec<T>> {
    let out: Vec<T> = v.split(',').map(|s| item(key, s.trim())).collect::<Result<_>>()?;
    if out.is_empty() {
        return Err(bad(key, "empty list"));
    }
    Ok(out)
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(bad(key, format!("expected true or false, got `{v}`"))),
    }
}

/// `x,y; x,y; ...`
fn parse_means(key: &str, v: &str) -> Result<Vec<Vec<f64>>> {
    v.split(';').map(|p| parse_list(key, p.trim(), parse_real)).collect()
}

fn join<T: fmt::Display>(xs: &[T], sep: &str) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(sep)
}

fn means_str(g: &GaussianMixture) -> String {
    g.means().iter().map(|m| join(m, ",")).collect::<Vec<_>>().join("; ")
}

fn score_mode_str(m: ScoreMode) -> &'static str {
    match m {
        ScoreMode::Endpoint => "endpoint",
        ScoreMode::D1 => "d1",
    }
}

impl TrainConfig {
    /// Parse `key = value` lines; `#` starts a comment. Unknown or repeated
    /// keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("line {}", lineno + 1).as_str(), format!("expected key = value, got `{line}`")))?;
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if pairs.insert(k.clone(), v).is_some() {
                return Err(bad(&k, "given more than once"));
            }
        }
        Self::from_pairs(&pairs)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = Self::default();
        let mut mixture = [None, None, None, None];
        for (k, v) in pairs {
            match k.as_str() {
                "source_means" => mixture[0] = Some(v.as_str()),
                "source_weights" => mixture[1] = Some(v.as_str()),
                "target_means" => mixture[2] = Some(v.as_str()),
                "target_weights" => mixture[3] = Some(v.as_str()),
                _ => cfg.set(k, v)?,
            }
        }
        if mixture[0].is_some() || mixture[1].is_some() {
            cfg.source = build_mixture("source", mixture[0], mixture[1], &cfg.source)?;
        }
        if mixture[2].is_some() || mixture[3].is_some() {
            cfg.target = build_mixture("target", mixture[2], mixture[3], &cfg.target)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Set one scalar key.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "coupling" => self.coupling = v.parse().map_err(|e: String| bad(key, e))?,
            "objective" => {
                self.objective = match v {
                    "auto" => None,
                    _ => Some(v.parse().map_err(|e: String| bad(key, e))?),
                }
            }
            "score_mode" => {
                self.score_mode = match v {
                    "auto" => None,
                    "endpoint" => Some(ScoreMode::Endpoint),
                    "d1" => Some(ScoreMode::D1),
                    _ => return Err(bad(key, format!("unknown score mode `{v}` (expected auto | endpoint | d1)"))),
                }
            }
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "k" => self.k = parse_real(key, v)?,
            "r" => self.r = parse_real(key, v)?,
            "lambda" => self.lambda = parse_real(key, v)?,
            "m" => self.m = parse_real(key, v)?,
            "lr" => self.lr = parse_real(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "steps_per_epoch" => self.steps_per_epoch = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "d_grid" => self.d_grid = parse_list(key, v, parse_real)?,
            "ema_decay" => self.ema_decay = parse_real(key, v)?,
            "sinkhorn_reg" => self.sinkhorn.reg = parse_real(key, v)?,
            "sinkhorn_tol" => self.sinkhorn.tol = parse_real(key, v)?,
            "sinkhorn_iters" => self.sinkhorn.max_iters = parse_num(key, v)?,
            "one_step_t" => self.one_step_t = v.parse().map_err(|e: String| bad(key, e))?,
            "mac_full_weighting" => self.mac_full_weighting = parse_bool(key, v)?,
            "hidden" => self.hidden = parse_list(key, v, parse_num)?,
            "features" => self.features = parse_num(key, v)?,
            "record_wallclock" => self.record_wallclock = parse_bool(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse_num(key, v)?,
            "eval_samples" => self.eval_samples = parse_num(key, v)?,
            "eval_projections" => self.eval_projections = parse_num(key, v)?,
            "eval_seed" => self.eval_seed = parse_num(key, v)?,
            "source_means" | "source_weights" | "target_means" | "target_weights" => {
                let mut pairs: BTreeMap<String, String> = self.to_pairs().into_iter().collect();
                pairs.insert(key.to_string(), v.to_string());
                *self = Self::from_pairs(&pairs)?;
            }
            _ => return Err(bad(key, "unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(bad("batch_size", "must be positive"));
        }
        if !(self.k > 0.0 && self.k <= 1.0) {
            return Err(bad("k", format!("must lie in (0, 1], got {}", self.k)));
        }
        if !(self.r > 0.0 && self.r <= 1.0) && self.r != 0.0 {
            return Err(bad("r", format!("must lie in [0, 1], got {}", self.r)));
        }
        if self.lambda < 0.0 {
            return Err(bad("lambda", "must be nonnegative"));
        }
        if !(0.0..=1.0).contains(&self.m) {
            return Err(bad("m", format!("must lie in [0, 1], got {}", self.m)));
        }
        if self.lr <= 0.0 {
            return Err(bad("lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(bad("ema_decay", "must lie in [0, 1)"));
        }
        if self.sinkhorn.reg <= 0.0 {
            return Err(bad("sinkhorn_reg", "must be positive"));
        }
        if self.sinkhorn.tol <= 0.0 {
            return Err(bad("sinkhorn_tol", "must be positive"));
        }
        if self.sinkhorn.max_iters == 0 {
            return Err(bad("sinkhorn_iters", "must be positive"));
        }
        if self.hidden.contains(&0) {
            return Err(bad("hidden", "layer widths must be positive"));
        }
        if self.source.dim() != self.target.dim() {
            return Err(bad("target_means", "source and target dimensions differ"));
        }
        if self.eval_samples == 0 {
            return Err(bad("eval_samples", "must be positive"));
        }
        if self.eval_projections == 0 {
            return Err(bad("eval_projections", "must be positive"));
        }
        self.shortcut_params().validate().map_err(|e| bad("d_grid", e.to_string()))?;
        Ok(())
    }

    pub fn objective(&self) -> Objective {
        self.objective.unwrap_or(if self.coupling.is_model_aligned() {
            Objective::Shortcut
        } else {
            Objective::Fm
        })
    }

    pub fn score_mode(&self) -> ScoreMode {
        self.score_mode.unwrap_or(match self.objective() {
            Objective::Shortcut => ScoreMode::D1,
            Objective::Fm => ScoreMode::Endpoint,
        })
    }

    pub fn shortcut_params(&self) -> ShortcutParams {
        ShortcutParams {
            m: self.m,
            grid: self.d_grid.clone(),
            one_step_t: self.one_step_t,
        }
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            data_dim: self.source.dim(),
            features: self.features,
            hidden: self.hidden.clone(),
        }
    }

    /// Every key with its effective value; `auto` choices are resolved.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut out = Vec::with_capacity(CONFIG_KEYS.len());
        for &key in CONFIG_KEYS {
            let v = match key {
                "coupling" => self.coupling.to_string(),
                "objective" => self.objective().to_string(),
                "score_mode" => score_mode_str(self.score_mode()).to_string(),
                "batch_size" => self.batch_size.to_string(),
                "k" => self.k.to_string(),
                "r" => self.r.to_string(),
                "lambda" => self.lambda.to_string(),
                "m" => self.m.to_string(),
                "lr" => self.lr.to_string(),
                "epochs" => self.epochs.to_string(),
                "steps_per_epoch" => self.steps_per_epoch.to_string(),
                "seed" => self.seed.to_string(),
                "d_grid" => join(&self.d_grid, ","),
                "ema_decay" => self.ema_decay.to_string(),
                "sinkhorn_reg" => self.sinkhorn.reg.to_string(),
                "sinkhorn_tol" => self.sinkhorn.tol.to_string(),
                "sinkhorn_iters" => self.sinkhorn.max_iters.to_string(),
                "one_step_t" => self.one_step_t.to_string(),
                "mac_full_weighting" => self.mac_full_weighting.to_string(),
                "hidden" => join(&self.hidden, ","),
                "features" => self.features.to_string(),
                "source_means" => means_str(&self.source),
                "source_weights" => join(self.source.weights(), ","),
                "target_means" => means_str(&self.target),
                "target_weights" => join(self.target.weights(), ","),
                "record_wallclock" => self.record_wallclock.to_string(),
                "checkpoint_every" => self.checkpoint_every.to_string(),
                "eval_samples" => self.eval_samples.to_string(),
                "eval_projections" => self.eval_projections.to_string(),
                "eval_seed" => self.eval_seed.to_string(),
                _ => unreachable!("key list and echo out of sync: {key}"),
            };
            out.push((key.to_string(), v));
        }
        out
    }

    /// Config text that parses back to an equivalent config.
    pub fn to_text(&self) -> String {
        self.to_pairs().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

fn build_mixture(prefix: &str, means: Option<&str>, weights: Option<&str>, current: &GaussianMixture) -> Result<GaussianMixture> {
    let means_key = format!("{prefix}_means");
    let weights_key = format!("{prefix}_weights");
    let means = match means {
        Some(v) => parse_means(&means_key, v)?,
        None => current.means().to_vec(),
    };
    let g = match weights {
        Some(v) => {
            let w = parse_list(&weights_key, v, parse_real)?;
            if w.len() != means.len() {
                return Err(bad(&weights_key, format!("{} weights for {} means", w.len(), means.len())));
            }
            GaussianMixture::new(w.into_iter().zip(means).collect())
        }
        None => GaussianMixture::uniform(means),
    };
    g.map_err(|e| bad(&means_key, e.to_string()))
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub coupling: Strategy,
    pub loss: LossBreakdown,
    /// Mean `|x1 - x0|^2` of the step's pairs.
    pub coupling_cost: f64,
    pub wallclock: f64,
}

pub const METRICS_HEADER: &str =
    "step,epoch,coupling,total,fm_term,sc_term,one_step_term,selected_fraction,coupling_cost,wallclock";

impl StepRecord {
    pub fn csv_line(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.epoch,
            self.coupling,
            l.total,
            l.fm_term,
            l.sc_term,
            l.one_step_term,
            l.selected_fraction,
            self.coupling_cost,
            self.wallclock
        )
    }
}

/// Mutable state of a run.
#[derive(Debug, Clone)]
pub struct RunState {
    pub net: VectorFieldNet,
    pub adam: AdamState,
    pub ema: EmaParams,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Completed epochs; the warm-up is epoch 0.
    pub epoch: u64,
    pub warmup_done: bool,
    pub rng: ChaCha8Rng,
    pub log: Vec<StepRecord>,
    pub sinkhorn_calls: u64,
    pub sinkhorn_fallbacks: u64,
}

impl RunState {
    pub fn new(cfg: &TrainConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let net = VectorFieldNet::new(cfg.architecture(), &mut rng);
        let adam = AdamState::new(net.params(), cfg.lr);
        let ema = EmaParams::new(&net, cfg.ema_decay);
        Self {
            net,
            adam,
            ema,
            step: 0,
            epoch: 0,
            warmup_done: false,
            rng,
            log: Vec::new(),
            sinkhorn_calls: 0,
            sinkhorn_fallbacks: 0,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    step: u64,
    epoch: u64,
    warmup_done: bool,
    adam_step: u64,
    rng_seed: Vec<u8>,
    rng_stream: u64,
    rng_word_pos: String,
    sinkhorn_calls: u64,
    sinkhorn_fallbacks: u64,
}

fn write_net(path: &Path, net: &VectorFieldNet) -> Result<()> {
    net.save(path)
}

fn write_params_file(path: &Path, arch: &Architecture, params: &crate::net::Params) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_params(&mut w, arch, params)?;
    w.flush()?;
    Ok(())
}

fn read_params_file(path: &Path) -> Result<(Architecture, crate::net::Params)> {
    let mut r = std::io::BufReader::new(File::open(path)?);
    read_params(&mut r)
}

impl RunState {
    /// Write net, EMA, Adam moments and counters into `dir`.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let arch = self.net.arch().clone();
        write_net(&dir.join("net.bin"), &self.net)?;
        write_net(&dir.join("ema.bin"), self.ema.model())?;
        write_params_file(&dir.join("adam_m.bin"), &arch, &self.adam.first)?;
        write_params_file(&dir.join("adam_v.bin"), &arch, &self.adam.second)?;
        let meta = CheckpointMeta {
            step: self.step,
            epoch: self.epoch,
            warmup_done: self.warmup_done,
            adam_step: self.adam.step,
            rng_seed: self.rng.get_seed().to_vec(),
            rng_stream: self.rng.get_stream(),
            rng_word_pos: self.rng.get_word_pos().to_string(),
            sinkhorn_calls: self.sinkhorn_calls,
            sinkhorn_fallbacks: self.sinkhorn_fallbacks,
        };
        fs::write(dir.join("state.json"), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    /// Restore a checkpoint written by [`RunState::save_checkpoint`]. The log
    /// starts empty.
    pub fn load_checkpoint(dir: &Path, cfg: &TrainConfig) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_str(&fs::read_to_string(dir.join("state.json"))?)?;
        let net = VectorFieldNet::load(&dir.join("net.bin"))?;
        if net.arch() != &cfg.architecture() {
            return Err(Error::Checkpoint("architecture differs from config".into()));
        }
        let ema = EmaParams::from_shadow(VectorFieldNet::load(&dir.join("ema.bin"))?, cfg.ema_decay);
        let mut adam = AdamState::new(net.params(), cfg.lr);
        adam.first = read_params_file(&dir.join("adam_m.bin"))?.1;
        adam.second = read_params_file(&dir.join("adam_v.bin"))?.1;
        adam.step = meta.adam_step;
        let seed: [u8; 32] = meta
            .rng_seed
            .as_slice()
            .try_into()
            .map_err(|_| Error::Checkpoint("rng seed must be 32 bytes".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(meta.rng_stream);
        rng.set_word_pos(
            meta.rng_word_pos
                .parse()
                .map_err(|_| Error::Checkpoint("bad rng word position".into()))?,
        );
        Ok(Self {
            net,
            adam,
            ema,
            step: meta.step,
            epoch: meta.epoch,
            warmup_done: meta.warmup_done,
            rng,
            log: Vec::new(),
            sinkhorn_calls: meta.sinkhorn_calls,
            sinkhorn_fallbacks: meta.sinkhorn_fallbacks,
        })
    }
}

/// Summary written to `run.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMeta {
    pub status: String,
    pub error: Option<String>,
    pub seed: u64,
    pub coupling: Strategy,
    pub objective: Objective,
    pub steps: u64,
    pub epochs_completed: u64,
    pub sinkhorn_calls: u64,
    pub sinkhorn_fallbacks: u64,
    pub final_loss: Option<LossBreakdown>,
    pub config: BTreeMap<String, String>,
}

struct RunDir {
    dir: PathBuf,
    metrics: BufWriter<File>,
}

/// A configured run: state plus the objects derived from the config.
pub struct Trainer {
    pub config: TrainConfig,
    pub state: RunState,
    shortcut: ShortcutParams,
    out: Option<RunDir>,
    started: Instant,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let state = RunState::new(&config);
        Ok(Self::with_state(config, state))
    }

    pub fn with_state(config: TrainConfig, state: RunState) -> Self {
        let shortcut = config.shortcut_params();
        Self {
            config,
            state,
            shortcut,
            out: None,
            started: Instant::now(),
        }
    }

    /// Resume from a checkpoint directory.
    pub fn resume(config: TrainConfig, checkpoint: &Path) -> Result<Self> {
        config.validate()?;
        let state = RunState::load_checkpoint(checkpoint, &config)?;
        Ok(Self::with_state(config, state))
    }

    /// Write outputs under `dir`, which must not already hold a run unless
    /// `force` is set.
    pub fn with_output(mut self, dir: &Path, force: bool) -> Result<Self> {
        prepare_run_dir(dir, force)?;
        fs::write(dir.join("config.txt"), self.config.to_text())?;
        let mut metrics = BufWriter::new(File::create(dir.join("metrics.csv"))?);
        writeln!(metrics, "{METRICS_HEADER}")?;
        self.out = Some(RunDir {
            dir: dir.to_path_buf(),
            metrics,
        });
        Ok(self)
    }

    pub fn output_dir(&self) -> Option<&Path> {
        self.out.as_ref().map(|o| o.dir.as_path())
    }

    /// One epoch of random pairs, whatever the configured strategy.
    pub fn warmup_epoch(&mut self) -> Result<()> {
        if self.state.step != 0 || self.state.warmup_done {
            return Err(Error::param("warmup", "warm-up must be the first epoch"));
        }
        for _ in 0..self.config.steps_per_epoch {
            self.step_with(Strategy::Random)?;
        }
        self.state.warmup_done = true;
        self.finish_epoch()
    }

    /// One optimizer step with the configured strategy.
    pub fn train_step(&mut self) -> Result<()> {
        if !self.state.warmup_done && self.config.coupling.is_model_aligned() {
            return Err(Error::param("coupling", "model-aligned couplings need the warm-up epoch first"));
        }
        self.step_with(self.config.coupling)
    }

    pub fn train_epoch(&mut self) -> Result<()> {
        for _ in 0..self.config.steps_per_epoch {
            self.train_step()?;
        }
        self.finish_epoch()
    }

    /// Warm-up (if not done) and the remaining epochs, then `run.json`.
    pub fn run(&mut self) -> Result<()> {
        let result = self.run_inner();
        self.write_run_meta(result.as_ref().err())?;
        result
    }

    fn run_inner(&mut self) -> Result<()> {
        if !self.state.warmup_done {
            self.warmup_epoch()?;
        }
        while self.state.epoch < self.config.epochs as u64 + 1 {
            self.train_epoch()?;
        }
        Ok(())
    }

    fn finish_epoch(&mut self) -> Result<()> {
        self.state.epoch += 1;
        let last = self.state.epoch == self.config.epochs as u64 + 1;
        let every = self.config.checkpoint_every as u64;
        if let Some(out) = &mut self.out {
            out.metrics.flush()?;
            let completed = self.state.epoch - 1;
            if last || (every > 0 && completed.is_multiple_of(every)) {
                let dir = out.dir.join("checkpoints").join(format!("epoch_{completed:03}"));
                self.state.save_checkpoint(&dir)?;
            }
        }
        Ok(())
    }

    fn build_coupling(&mut self, strategy: Strategy) -> Result<CouplingBatch> {
        let st = &mut self.state;
        let (batch, sinkhorn) = draw_coupling(&self.config, strategy, st.ema.model(), &mut st.rng)?;
        if let Some(fell_back) = sinkhorn {
            st.sinkhorn_calls += 1;
            st.sinkhorn_fallbacks += fell_back as u64;
        }
        Ok(batch)
    }

    fn step_with(&mut self, strategy: Strategy) -> Result<()> {
        let batch = self.build_coupling(strategy)?;
        let b = batch.len();
        let t: Vec<f64> = (0..b).map(|_| self.state.rng.random::<f64>()).collect();
        let st = &mut self.state;
        let (loss, grads) = match self.config.objective() {
            Objective::Fm => fm_loss(&mut st.net, &batch, &t)?,
            Objective::Shortcut => {
                let draw = ShortcutDraw::sample(t.clone(), &self.shortcut, &mut st.rng);
                shortcut_loss(&mut st.net, st.ema.model(), &batch, &draw, &self.shortcut)?
            }
        };
        if !loss.total.is_finite() {
            let step = st.step;
            if let Some(out) = &self.out {
                dump_batch(&out.dir.join("nonfinite_batch.csv"), &batch, &t)?;
            }
            return Err(Error::NonFinite { what: "loss", step });
        }
        st.adam.step(st.net.params_mut(), &grads)?;
        st.ema.update(&st.net);
        st.step += 1;
        let record = StepRecord {
            step: st.step,
            epoch: st.epoch,
            coupling: strategy,
            loss,
            coupling_cost: coupling_cost_stats(&batch).mean,
            wallclock: if self.config.record_wallclock {
                self.started.elapsed().as_secs_f64()
            } else {
                0.0
            },
        };
        if let Some(out) = &mut self.out {
            writeln!(out.metrics, "{}", record.csv_line())?;
        }
        st.log.push(record);
        Ok(())
    }

    pub fn run_meta(&self, error: Option<&Error>) -> RunMeta {
        RunMeta {
            status: if error.is_some() { "aborted" } else { "completed" }.to_string(),
            error: error.map(|e| e.to_string()),
            seed: self.config.seed,
            coupling: self.config.coupling,
            objective: self.config.objective(),
            steps: self.state.step,
            epochs_completed: self.state.epoch,
            sinkhorn_calls: self.state.sinkhorn_calls,
            sinkhorn_fallbacks: self.state.sinkhorn_fallbacks,
            final_loss: self.state.log.last().map(|r| r.loss),
            config: self.config.to_pairs().into_iter().collect(),
        }
    }

    fn write_run_meta(&mut self, error: Option<&Error>) -> Result<()> {
        let meta = self.run_meta(error);
        if let Some(out) = &mut self.out {
            out.metrics.flush()?;
            fs::write(out.dir.join("run.json"), serde_json::to_string_pretty(&meta)?)?;
        }
        Ok(())
    }
}

/// Draw a batch from each mixture and pair it with `strategy`, scoring with
/// `ema` where the strategy needs a model. The second value is `Some(fell
/// back)` when Sinkhorn ran.
pub fn draw_coupling<R: Rng + ?Sized>(
    cfg: &TrainConfig,
    strategy: Strategy,
    ema: &VectorFieldNet,
    rng: &mut R,
) -> Result<(CouplingBatch, Option<bool>)> {
    let b = cfg.batch_size;
    let x0 = cfg.source.sample(b, rng);
    let x1 = cfg.target.sample(b, rng);
    let r = match cfg.objective() {
        Objective::Shortcut => cfg.r,
        Objective::Fm => 0.0,
    };
    let mode = cfg.score_mode();
    Ok(match strategy {
        Strategy::Random => (random_coupling(x0, x1)?, None),
        Strategy::BatchOt => (batch_ot_coupling(x0, x1)?, None),
        Strategy::SinkhornOt => {
            let pc = sinkhorn_ot_coupling(x0, x1, cfg.sinkhorn, rng)?;
            (pc.coupling, Some(pc.fell_back))
        }
        Strategy::MacTopk => (mac_topk_coupling(ema, x0, x1, cfg.k, cfg.lambda, r, mode)?, None),
        Strategy::MacFull => {
            let pc = mac_full_coupling(ema, x0, x1, cfg.sinkhorn, mode, rng)?;
            let mut batch = pc.coupling;
            if cfg.mac_full_weighting {
                let errors = batch.pair_error.clone().expect("mac_full scores its pairs");
                batch.apply_selection(errors, cfg.k, cfg.lambda, r)?;
            }
            (batch, Some(pc.fell_back))
        }
    })
}

fn prepare_run_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let occupied = fs::read_dir(dir)?.next().is_some();
        if occupied && !force {
            return Err(Error::config(
                "out",
                format!("{} already exists and is not empty (use --force to overwrite)", dir.display()),
            ));
        }
        if occupied {
            for name in ["metrics.csv", "run.json", "config.txt", "eval.csv", "nonfinite_batch.csv"] {
                let p = dir.join(name);
                if p.exists() {
                    fs::remove_file(p)?;
                }
            }
            let ckpt = dir.join("checkpoints");
            if ckpt.exists() {
                fs::remove_dir_all(ckpt)?;
            }
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn dump_batch(path: &Path, batch: &CouplingBatch, t: &[f64]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let dim = batch.x0.dim();
    let cols: Vec<String> = (0..dim)
        .map(|k| format!("x0_{k}"))
        .chain((0..dim).map(|k| format!("x1_{k}")))
        .collect();
    writeln!(w, "pair,{},t,weight", cols.join(","))?;
    for i in 0..batch.len() {
        let vals: Vec<String> = batch.x0.row(i).iter().chain(batch.x1.row(i).iter()).map(|v| v.to_string()).collect();
        writeln!(w, "{i},{},{},{}", vals.join(","), t[i], batch.weight[i])?;
    }
    w.flush()?;
    Ok(())
}

/// Run a whole training job, optionally writing a run directory.
pub fn train(config: &TrainConfig, out: Option<&Path>, force: bool) -> Result<Trainer> {
    let mut trainer = Trainer::new(config.clone())?;
    if let Some(dir) = out {
        trainer = trainer.with_output(dir, force)?;
    }
    trainer.run()?;
    Ok(trainer)
}

/// Latest checkpoint directory of a run, by epoch number.
pub fn latest_checkpoint(run: &Path) -> Result<PathBuf> {
    let mut best: Option<PathBuf> = None;
    for entry in fs::read_dir(run.join("checkpoints"))? {
        let p = entry?.path();
        if p.is_dir() && best.as_ref().is_none_or(|b| p.file_name() > b.file_name()) {
            best = Some(p);
        }
    }
    best.ok_or_else(|| Error::Checkpoint(format!("no checkpoints under {}", run.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(coupling: Strategy) -> TrainConfig {
        TrainConfig {
            coupling,
            batch_size: 16,
            hidden: vec![16, 16],
            features: 2,
            epochs: 1,
            steps_per_epoch: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn defaults_echo_and_parse_back() {
        let cfg = TrainConfig::default();
        assert_eq!((cfg.k, cfg.r, cfg.lambda, cfg.m, cfg.lr), (0.3, 0.4, 0.02, 0.125, 5e-4));
        assert_eq!(cfg.batch_size, 256);
        let back = TrainConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back.to_pairs(), cfg.to_pairs());
        assert_eq!(back.source, cfg.source);
    }

    #[test]
    fn parse_handles_comments_fractions_and_mixtures() {
        let cfg = TrainConfig::parse(
            "# comment\ncoupling = mac_topk\nm = 1/4   # inline\nd_grid = 1/2, 1\n\
             target_means = -2,0; 2,0; 0,3\ntarget_weights = 0.5,0.25,0.25\n",
        )
        .unwrap();
        assert_eq!(cfg.coupling, Strategy::MacTopk);
        assert_eq!(cfg.m, 0.25);
        assert_eq!(cfg.d_grid, vec![0.5, 1.0]);
        assert_eq!(cfg.target.n_components(), 3);
        assert_eq!(cfg.target.weights(), &[0.5, 0.25, 0.25]);
        assert_eq!(cfg.objective(), Objective::Shortcut);
        assert_eq!(cfg.score_mode(), ScoreMode::D1);
    }

    fn config_key(err: Error) -> String {
        match err {
            Error::Config { key, .. } => key,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn bad_configs_name_the_key() {
        assert_eq!(config_key(TrainConfig::parse("coupling = nearest").unwrap_err()), "coupling");
        assert_eq!(config_key(TrainConfig::parse("colupling = random").unwrap_err()), "colupling");
        assert_eq!(config_key(TrainConfig::parse("k = 0").unwrap_err()), "k");
        assert_eq!(config_key(TrainConfig::parse("k = 1.5").unwrap_err()), "k");
        assert_eq!(config_key(TrainConfig::parse("lambda = -1").unwrap_err()), "lambda");
        assert_eq!(config_key(TrainConfig::parse("d_grid = 0.3").unwrap_err()), "d_grid");
        assert_eq!(config_key(TrainConfig::parse("seed = 1\nseed = 2").unwrap_err()), "seed");
        assert_eq!(config_key(TrainConfig::parse("target_weights = 1").unwrap_err()), "target_weights");
        assert_eq!(config_key(TrainConfig::parse("source_means = 0,0,0").unwrap_err()), "target_means");
        assert!(TrainConfig::parse("just words").is_err());
    }

    #[test]
    fn warmup_logs_random_couplings() {
        let mut t = Trainer::new(tiny(Strategy::MacTopk)).unwrap();
        assert!(t.train_step().is_err());
        t.warmup_epoch().unwrap();
        assert_eq!(t.state.log.len(), 3);
        assert!(t.state.log.iter().all(|r| r.coupling == Strategy::Random && r.epoch == 0));
        assert!(t.warmup_epoch().is_err());
        t.train_step().unwrap();
        let last = t.state.log.last().unwrap();
        assert_eq!(last.coupling, Strategy::MacTopk);
        assert_eq!(last.loss.selected_fraction, 4.0 / 16.0);
    }

    #[test]
    fn zero_steps_per_epoch_only_advances_epoch() {
        let mut cfg = tiny(Strategy::Random);
        cfg.steps_per_epoch = 0;
        let mut t = Trainer::new(cfg).unwrap();
        let before = t.state.net.clone();
        t.warmup_epoch().unwrap();
        assert_eq!(t.state.epoch, 1);
        assert_eq!(t.state.step, 0);
        assert_eq!(t.state.net, before);
    }

    #[test]
    fn one_epoch_one_step_gives_two_log_rows() {
        let mut cfg = tiny(Strategy::BatchOt);
        cfg.steps_per_epoch = 1;
        let t = train(&cfg, None, false).unwrap();
        let steps: Vec<u64> = t.state.log.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![1, 2]);
        assert_eq!(t.state.log[0].coupling, Strategy::Random);
        assert_eq!(t.state.log[1].coupling, Strategy::BatchOt);
    }

    #[test]
    fn every_strategy_runs_and_selected_fraction_is_exact() {
        for s in Strategy::ALL {
            let mut cfg = tiny(s);
            cfg.k = 0.3;
            let t = train(&cfg, None, false).unwrap();
            assert_eq!(t.state.step, 6);
            let expected = if s == Strategy::MacTopk { 4.0 / 16.0 } else { 0.0 };
            for r in &t.state.log[3..] {
                assert_eq!(r.loss.selected_fraction, expected, "{s}");
            }
        }
    }

    #[test]
    fn run_directory_layout_and_overwrite_guard() {
        let dir = tempfile::tempdir().unwrap();
        let run = dir.path().join("run");
        let mut cfg = tiny(Strategy::MacFull);
        cfg.epochs = 2;
        train(&cfg, Some(&run), false).unwrap();
        for f in ["config.txt", "metrics.csv", "run.json"] {
            assert!(run.join(f).exists(), "{f}");
        }
        for e in 0..=2 {
            assert!(run.join(format!("checkpoints/epoch_{e:03}/state.json")).exists());
        }
        let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
        assert_eq!(metrics.lines().count(), 1 + 9);
        assert_eq!(metrics.lines().next().unwrap(), METRICS_HEADER);
        let meta: RunMeta = serde_json::from_str(&fs::read_to_string(run.join("run.json")).unwrap()).unwrap();
        assert_eq!(meta.status, "completed");
        assert_eq!(meta.sinkhorn_calls, 6);
        assert_eq!(meta.config["k"], "0.3");
        assert!(train(&cfg, Some(&run), false).is_err());
        train(&cfg, Some(&run), true).unwrap();
        assert_eq!(fs::read_to_string(run.join("metrics.csv")).unwrap(), metrics);
        assert_eq!(latest_checkpoint(&run).unwrap(), run.join("checkpoints/epoch_002"));
    }

    #[test]
    fn checkpoint_resume_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(Strategy::MacTopk);
        cfg.epochs = 3;
        let full = train(&cfg, Some(&dir.path().join("a")), false).unwrap();

        let ckpt = dir.path().join("a/checkpoints/epoch_001");
        let mut resumed = Trainer::resume(cfg.clone(), &ckpt).unwrap();
        assert_eq!(resumed.state.step, 6);
        resumed.run().unwrap();
        assert_eq!(resumed.state.net, full.state.net);
        assert_eq!(resumed.state.ema.model(), full.state.ema.model());
        assert_eq!(resumed.state.adam, full.state.adam);
        assert_eq!(resumed.state.log, full.state.log[6..]);
    }

    #[test]
    fn nonfinite_loss_aborts_with_dump() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(Strategy::Random);
        cfg.lr = 1e300;
        cfg.steps_per_epoch = 50;
        let mut t = Trainer::new(cfg).unwrap().with_output(dir.path(), false).unwrap();
        let err = t.run().unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. } | Error::NonFiniteGradient), "{err:?}");
        let meta: RunMeta = serde_json::from_str(&fs::read_to_string(dir.path().join("run.json")).unwrap()).unwrap();
        assert_eq!(meta.status, "aborted");
    }
}
