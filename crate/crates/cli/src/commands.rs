//! Subcommand implementations. Each one works inside a run directory that
//! holds a copy of the resolved config next to its artifacts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use wglasdi::data::{self, DataSource, Dataset};
use wglasdi::rom::{self, default_n_ts, Heatmap, RomModel, SpeedupRecord};
use wglasdi::trainer::{self, TrainState, Trainer};

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};

pub const CONFIG_FILE: &str = "config.json";
pub const DATASET_FILE: &str = "dataset.bin";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const MODEL_FILE: &str = "model.bin";
pub const REFERENCES_FILE: &str = "references.bin";

pub struct Run {
    pub config: ExperimentConfig,
    pub dir: PathBuf,
    pub force: bool,
}

impl Run {
    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn guard(&self, name: &str) -> Result<PathBuf> {
        let p = self.path(name);
        if p.exists() && !self.force {
            return Err(CliError::Exists(p.display().to_string()));
        }
        Ok(p)
    }

    /// Creates the run directory and stores the config there. An existing
    /// config that differs is only replaced with `--force`.
    pub fn prepare(&self) -> Result<()> {
        fs::create_dir_all(&self.dir).map_err(|e| CliError::io(&self.dir, e))?;
        let p = self.path(CONFIG_FILE);
        let text = self.config.to_json();
        if p.exists() && !self.force {
            let old = fs::read_to_string(&p).map_err(|e| CliError::io(&p, e))?;
            let same = ExperimentConfig::from_json(&old)
                .map(|c| c == self.config)
                .unwrap_or(false);
            if !same {
                return Err(CliError::Exists(format!(
                    "{} with a different config",
                    p.display()
                )));
            }
            return Ok(());
        }
        write(&p, &text)
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn require(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        return Err(CliError::Config(format!(
            "missing {what} {}",
            path.display()
        )));
    }
    Ok(())
}

pub fn generate(run: &Run) -> Result<Dataset> {
    run.prepare()?;
    let out = run.guard(DATASET_FILE)?;
    let cfg = &run.config;
    let indices = cfg.initial_samples.resolve(&cfg.params)?;
    let ds = cfg.source().assemble(&indices, cfg.train.execution)?;
    data::save_dataset(&out, &ds)?;
    println!("generated {} trajectories -> {}", ds.len(), out.display());
    Ok(ds)
}

fn check_source(expected: &DataSource, found: &DataSource, what: &str) -> Result<()> {
    if expected != found {
        return Err(CliError::Config(format!(
            "{what} was generated with different problem, grid, time, parameter or noise settings than the config"
        )));
    }
    Ok(())
}

fn write_training_artifacts(run: &Run, t: &Trainer) -> Result<()> {
    t.save_checkpoint(&run.path(CHECKPOINT_FILE))?;
    data::save_model(&run.path(MODEL_FILE), &t.model()?)?;
    write(&run.path("loss.csv"), &trainer::loss_csv(&t.state.history))?;
    write(&run.path("trace.csv"), &trainer::trace_csv(&t.state.trace))
}

fn drive(run: &Run, mut t: Trainer) -> Result<Trainer> {
    let every = run.config.checkpoint_every.unwrap_or(usize::MAX);
    let target = t.config.epochs;
    while t.state.epoch < target {
        let next = t.state.epoch.saturating_add(every).min(target);
        t.run_to(next)?;
        if next < target {
            t.save_checkpoint(&run.path(&format!("checkpoint-{next}.bin")))?;
        }
    }
    write_training_artifacts(run, &t)?;
    Ok(t)
}

/// Trains from the run's dataset, or continues from `resume`.
pub fn train(run: &Run, dataset: Option<&Path>, resume: Option<&Path>) -> Result<Trainer> {
    run.prepare()?;
    let cfg = &run.config;
    let t = if let Some(ckpt) = resume {
        require(ckpt, "checkpoint")?;
        let t = Trainer::resume(ckpt)?;
        check_source(&cfg.source(), &t.source, "checkpoint")?;
        println!("resuming at epoch {}", t.state.epoch);
        t
    } else {
        run.guard(MODEL_FILE)?;
        let path = dataset
            .map(Path::to_path_buf)
            .unwrap_or_else(|| run.path(DATASET_FILE));
        require(&path, "dataset")?;
        let ds = data::load_dataset(&path)?;
        check_source(&cfg.source(), &DataSource::from_dataset(&ds), "dataset")?;
        let state = TrainState::init(
            &cfg.net,
            cfg.library,
            ds.len(),
            cfg.train.seed,
            cfg.train.adam,
        );
        Trainer::new(cfg.source(), ds, state, cfg.train.clone())?
    };
    let t = drive(run, t)?;
    println!(
        "trained {} epochs on {} samples, final loss {:.6e}",
        t.state.epoch,
        t.dataset.len(),
        t.final_loss().unwrap_or(f64::NAN)
    );
    Ok(t)
}

fn load_model(run: &Run, path: Option<&Path>) -> Result<RomModel> {
    let p = path
        .map(Path::to_path_buf)
        .unwrap_or_else(|| run.path(MODEL_FILE));
    require(&p, "model")?;
    let model = data::load_model(&p)?;
    let cfg = &run.config;
    if model.grid != cfg.grid || model.time != cfg.time || model.problem != cfg.problem {
        return Err(CliError::Config(format!(
            "model {} does not match the config's problem, grid or time settings",
            p.display()
        )));
    }
    Ok(model)
}

/// Clean reference trajectories for `indices`, cached in the run directory.
fn references(run: &Run, indices: &[usize]) -> Result<Vec<wglasdi::ndarray::Array2<f64>>> {
    let cfg = &run.config;
    let src = DataSource {
        noise_level: 0.0,
        ..cfg.source()
    };
    let path = run.path(REFERENCES_FILE);
    let mut cache = match data::load_dataset(&path) {
        Ok(ds) if DataSource::from_dataset(&ds) == src => ds,
        _ => src.empty_dataset(Vec::new()),
    };
    let missing: Vec<usize> = indices
        .iter()
        .copied()
        .filter(|&i| cache.find(i).is_none())
        .collect();
    if !missing.is_empty() {
        let fresh = src.assemble(&missing, cfg.train.execution)?;
        cache.entries.extend(fresh.entries);
        data::save_dataset(&path, &cache)?;
    }
    Ok(indices
        .iter()
        .map(|&i| cache.find(i).expect("cached").clean.clone())
        .collect())
}

#[derive(Debug, Serialize)]
pub struct PointError {
    pub index: usize,
    pub mu: Vec<f64>,
    pub e_max: f64,
    pub trained: bool,
}

#[derive(Debug, Serialize)]
pub struct Summary {
    pub max_e_max: f64,
    pub mean_e_max: f64,
    pub points: Vec<PointError>,
    pub speedup: Vec<SpeedupRecord>,
}

const CORNER: &str = "mu1\\mu2";

fn error_heatmap(run: &Run, model: &RomModel) -> Result<(Heatmap, Vec<usize>)> {
    let cfg = &run.config;
    let grid = cfg.test_grid();
    let idx = grid.flat_indices(&cfg.params)?;
    let refs = references(run, &idx)?;
    let h = rom::heatmap(model, &cfg.params, &grid, &refs, cfg.train.execution)?;
    Ok((h, idx))
}

pub fn evaluate(run: &Run, model_path: Option<&Path>) -> Result<Summary> {
    run.prepare()?;
    let cfg = &run.config;
    let model = load_model(run, model_path)?;
    let (h, idx) = error_heatmap(run, &model)?;
    write(&run.path("heatmap.csv"), &h.to_csv(CORNER))?;

    let trained = |mu: &[f64]| model.mus.iter().any(|m| m.as_slice() == mu);
    let points = idx
        .iter()
        .zip(h.values.iter())
        .map(|(&i, &e)| {
            let mu = cfg.params.point(i)?;
            Ok(PointError {
                index: i,
                trained: trained(&mu),
                mu,
                e_max: e,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let speedup = cfg
        .speedup_points()
        .iter()
        .map(|mu| rom::measure_speedup(&model, mu, cfg.evaluation.speedup_repeats))
        .collect::<wglasdi::Result<Vec<_>>>()?;
    write(&run.path("speedup.csv"), &rom::speedup_csv(&speedup))?;
    let summary = Summary {
        max_e_max: h.max(),
        mean_e_max: h.mean(),
        points,
        speedup,
    };
    write(
        &run.path("summary.json"),
        &serde_json::to_string_pretty(&summary).expect("summary serialises"),
    )?;
    println!(
        "max e_max {:.4e}, mean e_max {:.4e} over {} points",
        summary.max_e_max,
        summary.mean_e_max,
        summary.points.len()
    );
    for s in &summary.speedup {
        println!("speedup at {:?}: {:.1}x", s.mu, s.speedup());
    }
    Ok(summary)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum HeatmapKind {
    /// Maximum relative error against FOM references.
    Error,
    /// Residual error indicator, no FOM solves.
    Indicator,
}

pub fn heatmap(run: &Run, model_path: Option<&Path>, kind: HeatmapKind) -> Result<Heatmap> {
    run.prepare()?;
    let cfg = &run.config;
    let model = load_model(run, model_path)?;
    let (h, name) = match kind {
        HeatmapKind::Error => (error_heatmap(run, &model)?.0, "heatmap.csv"),
        HeatmapKind::Indicator => {
            let grid = cfg.test_grid();
            let n_ts = cfg
                .train
                .n_ts
                .unwrap_or_else(|| default_n_ts(cfg.time.steps));
            let vals = grid
                .flat_indices(&cfg.params)?
                .iter()
                .map(|&i| Ok(model.error_indicator(&cfg.params.point(i)?, n_ts)?))
                .collect::<Result<Vec<f64>>>()?;
            let h = Heatmap {
                axis1: grid
                    .axis1
                    .iter()
                    .map(|&i| cfg.params.axes[0].value(i))
                    .collect(),
                axis2: grid
                    .axis2
                    .iter()
                    .map(|&j| cfg.params.axes[1].value(j))
                    .collect(),
                values: wglasdi::ndarray::Array2::from_shape_vec(
                    (grid.axis1.len(), grid.axis2.len()),
                    vals,
                )
                .expect("grid shape"),
            };
            (h, "indicator.csv")
        }
    };
    let p = run.path(name);
    write(&p, &h.to_csv(CORNER))?;
    println!(
        "max {:.4e}, mean {:.4e} -> {}",
        h.max(),
        h.mean(),
        p.display()
    );
    Ok(h)
}

/// ROM prediction at `mu` from the parameterised initial condition. Rows are
/// time steps: `t` followed by the decoded state.
pub fn predict(
    run: &Run,
    model_path: Option<&Path>,
    mu: &[f64],
    output: Option<&Path>,
) -> Result<PathBuf> {
    run.prepare()?;
    let model = load_model(run, model_path)?;
    run.config.problem.check_mu(mu)?;
    let pred = model.predict_ic(mu)?;
    let mut s = String::from("t");
    for j in 0..pred.ncols() {
        write!(s, ",u{j}").unwrap();
    }
    s.push('\n');
    for (n, row) in pred.rows().into_iter().enumerate() {
        write!(s, "{}", model.time.t(n)).unwrap();
        for v in row {
            write!(s, ",{v}").unwrap();
        }
        s.push('\n');
    }
    let p = output
        .map(Path::to_path_buf)
        .unwrap_or_else(|| run.path("prediction.csv"));
    write(&p, &s)?;
    println!(
        "predicted {} steps at mu={mu:?} -> {}",
        pred.nrows() - 1,
        p.display()
    );
    Ok(p)
}
