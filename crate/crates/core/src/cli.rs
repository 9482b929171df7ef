//! Command-line front end: `train`, `sample`, `eval`, `compare` and `sweep`.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::coupling::CouplingBatch;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, write_eval_csv, EvalProtocol, EvalRow};
use crate::net::VectorFieldNet;
use crate::sampler::Integrator;
use crate::trainer::{draw_coupling, latest_checkpoint, train, Objective, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "macflow", version, about = "Flow matching with model-aligned couplings on 2-D mixtures")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model and write a run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Run directory; defaults to runs/<coupling>_seed<N>.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Dump a sampling trajectory of a trained run as CSV.
    Sample {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = 1)]
        steps: usize,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Evaluate runs at several step counts; writes <run>/eval.csv.
    Eval {
        #[arg(long, num_args = 1.., required = true)]
        run: Vec<PathBuf>,
        /// Comma-separated step counts, e.g. 1,4,128.
        #[arg(long)]
        steps: String,
        #[arg(long)]
        force: bool,
    },
    /// One-step samples and coupling segments of several runs as SVG.
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Generated points per panel.
        #[arg(long, default_value_t = 1000)]
        points: usize,
        /// Coupling segments per panel.
        #[arg(long, default_value_t = 128)]
        pairs: usize,
        #[arg(long)]
        force: bool,
    },
    /// Train and evaluate one run per value of a config key.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long)]
        values: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "1,4,128")]
        steps: String,
        #[arg(long)]
        force: bool,
    },
}

/// Exit code for an error: 2 for configuration problems, 3 for numerical
/// aborts, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. } | Error::InvalidParameter { .. } | Error::InvalidMixture(_) => EXIT_CONFIG,
        Error::NonFinite { .. } | Error::NonFiniteGradient => EXIT_NUMERIC,
        _ => EXIT_FAILURE,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            seed,
            out,
            force,
        } => {
            let dir = cmd_train(&config, seed, out.as_deref(), force)?;
            println!("{}", dir.display());
        }
        Command::Sample {
            run,
            steps,
            n,
            out,
            force,
        } => cmd_sample(&run, steps, n, &out, force)?,
        Command::Eval { run, steps, force } => {
            let steps = parse_steps(&steps)?;
            for r in cmd_eval(&run, &steps, force)? {
                println!("{} {} steps={} w2={:.4}", r.model, r.strategy, r.n_steps, r.w2);
            }
        }
        Command::Compare {
            runs,
            out,
            points,
            pairs,
            force,
        } => cmd_compare(&runs, &out, points, pairs, force)?,
        Command::Sweep {
            config,
            param,
            values,
            out,
            steps,
            force,
        } => {
            let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
            let steps = parse_steps(&steps)?;
            let path = cmd_sweep(&config, &param, &values, &out, &steps, force)?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

/// `"1,4,128"` to step counts.
pub fn parse_steps(list: &str) -> Result<Vec<usize>> {
    let items: Vec<&str> = list.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if items.is_empty() {
        return Err(Error::config("steps", "empty step list"));
    }
    items
        .into_iter()
        .map(|s| match s.parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::config("steps", format!("`{s}` is not a positive step count"))),
        })
        .collect()
}

fn refuse_existing(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::config(
            "out",
            format!("{} already exists (use --force to overwrite)", path.display()),
        ));
    }
    Ok(())
}

pub fn cmd_train(config: &Path, seed: Option<u64>, out: Option<&Path>, force: bool) -> Result<PathBuf> {
    let mut cfg = TrainConfig::from_file(config)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    let dir = match out {
        Some(d) => d.to_path_buf(),
        None => PathBuf::from("runs").join(format!("{}_seed{}", cfg.coupling, cfg.seed)),
    };
    train(&cfg, Some(&dir), force)?;
    Ok(dir)
}

/// A finished run loaded back from disk.
pub struct LoadedRun {
    pub name: String,
    pub dir: PathBuf,
    pub config: TrainConfig,
    /// EMA parameters of the latest checkpoint.
    pub ema: VectorFieldNet,
}

impl LoadedRun {
    pub fn open(dir: &Path) -> Result<Self> {
        let config = TrainConfig::from_file(&dir.join("config.txt"))?;
        let ema = VectorFieldNet::load(&latest_checkpoint(dir)?.join("ema.bin"))?;
        let name = dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        Ok(Self {
            name,
            dir: dir.to_path_buf(),
            config,
            ema,
        })
    }

    pub fn integrator(&self) -> Integrator {
        match self.config.objective() {
            Objective::Fm => Integrator::Euler,
            Objective::Shortcut => Integrator::Shortcut(self.config.d_grid.clone()),
        }
    }

    pub fn protocol(&self) -> EvalProtocol {
        EvalProtocol {
            samples: self.config.eval_samples,
            projections: self.config.eval_projections,
            seed: self.config.eval_seed,
        }
    }

    /// Mean pair cost over the last epoch of `metrics.csv`.
    pub fn final_coupling_cost(&self) -> Result<f64> {
        let text = fs::read_to_string(self.dir.join("metrics.csv"))?;
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().unwrap_or("").split(',').collect();
        let col = |name: &str| {
            header
                .iter()
                .position(|h| *h == name)
                .ok_or_else(|| Error::Checkpoint(format!("metrics.csv has no `{name}` column")))
        };
        let (epoch_col, cost_col) = (col("epoch")?, col("coupling_cost")?);
        let rows: Vec<(u64, f64)> = lines
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                let parse_err = || Error::Checkpoint(format!("bad metrics row `{l}`"));
                Ok((
                    f.get(epoch_col).and_then(|v| v.parse().ok()).ok_or_else(parse_err)?,
                    f.get(cost_col).and_then(|v| v.parse().ok()).ok_or_else(parse_err)?,
                ))
            })
            .collect::<Result<_>>()?;
        let last = rows.iter().map(|r| r.0).max().ok_or(Error::Empty("metrics.csv"))?;
        let costs: Vec<f64> = rows.iter().filter(|r| r.0 == last).map(|r| r.1).collect();
        Ok(costs.iter().sum::<f64>() / costs.len() as f64)
    }

    pub fn eval_rows(&self, steps: &[usize]) -> Result<Vec<EvalRow>> {
        let points = evaluate(
            &self.ema,
            &self.integrator(),
            &self.config.source,
            &self.config.target,
            steps,
            &self.protocol(),
        )?;
        let cost = self.final_coupling_cost()?;
        Ok(points
            .into_iter()
            .map(|p| EvalRow {
                model: self.name.clone(),
                strategy: self.config.coupling.to_string(),
                n_steps: p.n_steps,
                w2: p.w2,
                straightness: p.straightness,
                coupling_cost_mean: cost,
            })
            .collect())
    }
}

pub fn cmd_sample(run: &Path, steps: usize, n: usize, out: &Path, force: bool) -> Result<()> {
    refuse_existing(out, force)?;
    if n == 0 {
        return Err(Error::config("n", "need at least one sample"));
    }
    let run = LoadedRun::open(run)?;
    let mut rng = ChaCha8Rng::seed_from_u64(run.config.eval_seed);
    let x0 = run.config.source.sample(n, &mut rng);
    let traj = run.integrator().sample(&run.ema, &x0, steps)?;
    let mut w = BufWriter::new(File::create(out)?);
    traj.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn cmd_eval(runs: &[PathBuf], steps: &[usize], force: bool) -> Result<Vec<EvalRow>> {
    if steps.is_empty() {
        return Err(Error::config("steps", "empty step list"));
    }
    let mut all = Vec::new();
    for dir in runs {
        let path = dir.join("eval.csv");
        refuse_existing(&path, force)?;
        let run = LoadedRun::open(dir)?;
        let rows = run.eval_rows(steps)?;
        write_eval_csv(BufWriter::new(File::create(&path)?), &rows)?;
        all.extend(rows);
    }
    Ok(all)
}

/// Sweep rows: the swept key and value followed by the eval columns.
pub fn cmd_sweep(config: &Path, param: &str, values: &[String], out: &Path, steps: &[usize], force: bool) -> Result<PathBuf> {
    if values.is_empty() {
        return Err(Error::config("values", "empty value list"));
    }
    let base = TrainConfig::from_file(config)?;
    let mut configs = Vec::with_capacity(values.len());
    for v in values {
        let mut cfg = base.clone();
        cfg.set(param, v)?;
        cfg.validate()?;
        configs.push(cfg);
    }
    let sweep_csv = out.join("sweep.csv");
    refuse_existing(&sweep_csv, force)?;
    fs::create_dir_all(out)?;
    let mut text = format!("param,value,{}\n", crate::metrics::EVAL_HEADER);
    for (v, cfg) in values.iter().zip(&configs) {
        let dir = out.join(format!("{param}_{v}"));
        train(cfg, Some(&dir), force)?;
        for r in cmd_eval(std::slice::from_ref(&dir), steps, force)? {
            let s = r.straightness.map(|s| s.to_string()).unwrap_or_default();
            writeln!(
                text,
                "{param},{v},{},{},{},{},{},{}",
                r.model, r.strategy, r.n_steps, r.w2, s, r.coupling_cost_mean
            )
            .expect("writing to a String");
        }
    }
    fs::write(&sweep_csv, text)?;
    Ok(sweep_csv)
}

/// Points and segments of one figure panel, in data coordinates.
pub struct Panel {
    pub title: String,
    /// `(fill colour, points)` layers, drawn in order.
    pub layers: Vec<(&'static str, Vec<[f64; 2]>)>,
    /// `(stroke colour, [x0, y0, x1, y1])`.
    pub segments: Vec<(&'static str, [f64; 4])>,
}

const PANEL_PX: f64 = 320.0;
const PAD_PX: f64 = 24.0;

fn bounds(panels: &[Panel]) -> [f64; 4] {
    let mut b = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
    let mut grow = |x: f64, y: f64| {
        b[0] = b[0].min(x);
        b[1] = b[1].min(y);
        b[2] = b[2].max(x);
        b[3] = b[3].max(y);
    };
    for p in panels {
        for (_, pts) in &p.layers {
            for q in pts {
                grow(q[0], q[1]);
            }
        }
        for (_, s) in &p.segments {
            grow(s[0], s[1]);
            grow(s[2], s[3]);
        }
    }
    if !b[0].is_finite() {
        return [-1.0, -1.0, 1.0, 1.0];
    }
    // square box around the data, rounded out to whole units
    let cx = 0.5 * (b[0] + b[2]);
    let cy = 0.5 * (b[1] + b[3]);
    let half = (0.5 * (b[2] - b[0]).max(b[3] - b[1])).ceil() + 1.0;
    [cx - half, cy - half, cx + half, cy + half]
}

/// Side-by-side panels. Marks are written in data coordinates inside a
/// group whose transform maps the shared data box onto the panel.
pub fn render_svg(panels: &[Panel]) -> String {
    let [x_min, y_min, x_max, y_max] = bounds(panels);
    let scale = (PANEL_PX - 2.0 * PAD_PX) / (x_max - x_min).max(y_max - y_min);
    let width = PANEL_PX * panels.len().max(1) as f64;
    let height = PANEL_PX + 20.0;
    let radius = 1.5 / scale;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
    for (k, panel) in panels.iter().enumerate() {
        let left = k as f64 * PANEL_PX;
        let _ = writeln!(s, r#"<g class="panel" data-index="{k}">"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="16" text-anchor="middle">{}</text>"#,
            left + PANEL_PX / 2.0,
            xml_escape(&panel.title)
        );
        let _ = writeln!(
            s,
            r##"<rect x="{}" y="{}" width="{}" height="{}" fill="none" stroke="#999"/>"##,
            left + PAD_PX,
            20.0 + PAD_PX,
            PANEL_PX - 2.0 * PAD_PX,
            PANEL_PX - 2.0 * PAD_PX
        );
        let tx = left + PAD_PX - x_min * scale;
        let ty = 20.0 + PAD_PX + y_max * scale;
        let _ = writeln!(
            s,
            r#"<g class="data" transform="translate({tx} {ty}) scale({scale} {neg})">"#,
            neg = -scale
        );
        // axes through the origin when it is inside the box
        if x_min < 0.0 && x_max > 0.0 {
            let _ = writeln!(
                s,
                r##"<line x1="0" y1="{y_min}" x2="0" y2="{y_max}" stroke="#ddd" vector-effect="non-scaling-stroke"/>"##
            );
        }
        if y_min < 0.0 && y_max > 0.0 {
            let _ = writeln!(
                s,
                r##"<line x1="{x_min}" y1="0" x2="{x_max}" y2="0" stroke="#ddd" vector-effect="non-scaling-stroke"/>"##
            );
        }
        for (colour, seg) in &panel.segments {
            let _ = writeln!(
                s,
                r#"<line class="pair" x1="{}" y1="{}" x2="{}" y2="{}" stroke="{colour}" stroke-opacity="0.6" vector-effect="non-scaling-stroke"/>"#,
                seg[0], seg[1], seg[2], seg[3]
            );
        }
        for (colour, pts) in &panel.layers {
            for p in pts {
                let _ = writeln!(
                    s,
                    r#"<circle cx="{}" cy="{}" r="{radius}" fill="{colour}" fill-opacity="0.5"/>"#,
                    p[0], p[1]
                );
            }
        }
        let _ = writeln!(s, "</g>\n</g>");
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn rows2(x: &ndarray::Array2<f64>) -> Vec<[f64; 2]> {
    x.rows().into_iter().map(|r| [r[0], r[1]]).collect()
}

pub const TARGET_COLOUR: &str = "#9e9e9e";
pub const SAMPLE_COLOUR: &str = "#d62728";
pub const SOURCE_COLOUR: &str = "#1f77b4";
pub const PAIR_COLOUR: &str = "#555555";
pub const SELECTED_COLOUR: &str = "#d62728";

/// `samples.svg`, `couplings.svg` and `couplings.csv` under `out`.
pub fn cmd_compare(runs: &[PathBuf], out: &Path, points: usize, pairs: usize, force: bool) -> Result<()> {
    if points == 0 || pairs == 0 {
        return Err(Error::config("points", "points and pairs must be positive"));
    }
    let names = ["samples.svg", "couplings.svg", "couplings.csv"];
    for n in names {
        refuse_existing(&out.join(n), force)?;
    }
    let loaded: Vec<LoadedRun> = runs.iter().map(|d| LoadedRun::open(d)).collect::<Result<_>>()?;
    for r in &loaded {
        if r.config.source.dim() != 2 {
            return Err(Error::config("source_means", format!("{} is not 2-D; only 2-D runs can be plotted", r.name)));
        }
    }
    let mut sample_panels = Vec::new();
    let mut pair_panels = Vec::new();
    let mut csv = String::from("run,strategy,pair,selected,x0_0,x0_1,x1_0,x1_1\n");
    for run in &loaded {
        let cfg = &run.config;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.eval_seed);
        let x0 = cfg.source.sample(points, &mut rng);
        let x1 = cfg.target.sample(points, &mut rng);
        let gen = run.integrator().sample(&run.ema, &x0, 1)?;
        sample_panels.push(Panel {
            title: format!("{} (1 step)", run.name),
            layers: vec![(TARGET_COLOUR, rows2(x1.as_array())), (SAMPLE_COLOUR, rows2(gen.end()))],
            segments: Vec::new(),
        });

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.eval_seed ^ 0xc0_0b1e);
        let (batch, _) = draw_coupling(cfg, cfg.coupling, &run.ema, &mut rng)?;
        let shown = pairs.min(batch.len());
        let segments = coupling_segments(&batch, shown);
        for (i, (colour, s)) in segments.iter().enumerate() {
            let selected = *colour == SELECTED_COLOUR;
            writeln!(csv, "{},{},{i},{selected},{},{},{},{}", run.name, cfg.coupling, s[0], s[1], s[2], s[3])
                .expect("writing to a String");
        }
        pair_panels.push(Panel {
            title: format!("{} couplings", run.name),
            layers: vec![
                (SOURCE_COLOUR, rows2(&batch.x0.as_array().slice(ndarray::s![..shown, ..]).to_owned())),
                (TARGET_COLOUR, rows2(&batch.x1.as_array().slice(ndarray::s![..shown, ..]).to_owned())),
            ],
            segments,
        });
    }
    fs::create_dir_all(out)?;
    fs::write(out.join("samples.svg"), render_svg(&sample_panels))?;
    fs::write(out.join("couplings.svg"), render_svg(&pair_panels))?;
    fs::write(out.join("couplings.csv"), csv)?;
    Ok(())
}

fn coupling_segments(batch: &CouplingBatch, shown: usize) -> Vec<(&'static str, [f64; 4])> {
    (0..shown)
        .map(|i| {
            let (a, b) = (batch.x0.row(i), batch.x1.row(i));
            let colour = if batch.selected[i] { SELECTED_COLOUR } else { PAIR_COLOUR };
            (colour, [a[0], a[1], b[0], b[1]])
        })
        .collect()
}
