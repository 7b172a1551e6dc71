//! Experiment configuration and the built-in presets.

use std::path::Path;

use serde::{Deserialize, Serialize};
use wglasdi::data::{DataSource, ParamSpace};
use wglasdi::fom::{FomProblem, Grid, ProblemKind, TimeGrid};
use wglasdi::latentdi::{LibrarySpec, TestFunctionConfig};
use wglasdi::net::NetSpec;
use wglasdi::rom::TestGrid;
use wglasdi::trainer::{LossMode, TrainConfig};

use crate::error::{CliError, Result};

pub const CONFIG_VERSION: u32 = 1;

/// Which grid points seed the training set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub enum InitialSamples {
    Corners,
    /// `n` evenly spaced indices per axis.
    Uniform(usize),
    Indices(Vec<usize>),
}

impl InitialSamples {
    pub fn resolve(&self, space: &ParamSpace) -> Result<Vec<usize>> {
        Ok(match self {
            InitialSamples::Corners => space.corners(),
            InitialSamples::Uniform(n) => space.uniform_subgrid(*n)?,
            InitialSamples::Indices(v) => v.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Sub-lattice used by `evaluate`/`heatmap`; the whole grid if absent.
    #[serde(default)]
    pub test_grid: Option<TestGrid>,
    /// Parameter points timed for the speedup report; the box centre if empty.
    #[serde(default)]
    pub speedup_points: Vec<Vec<f64>>,
    #[serde(default = "three")]
    pub speedup_repeats: usize,
}

fn three() -> usize {
    3
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            test_grid: None,
            speedup_points: Vec::new(),
            speedup_repeats: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    /// Root seed for noise, initialisation and candidate subsampling. It
    /// overrides `train.seed`.
    pub seed: u64,
    pub problem: FomProblem,
    pub grid: Grid,
    pub time: TimeGrid,
    pub params: ParamSpace,
    pub noise_level: f64,
    pub initial_samples: InitialSamples,
    pub net: NetSpec,
    pub library: LibrarySpec,
    pub train: TrainConfig,
    #[serde(default)]
    pub evaluation: EvalConfig,
    /// Also save `checkpoint-<epoch>.bin` every this many epochs during
    /// `train`.
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(CliError::Config(format!(
                "config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.problem.validate()?;
        self.problem.check_grid(&self.grid)?;
        self.params.validate()?;
        if self.params.axes.len() != 2 {
            return Err(CliError::Config(format!(
                "parameter space needs 2 axes, found {}",
                self.params.axes.len()
            )));
        }
        for (axis, b) in self.params.axes.iter().zip(&self.problem.bounds) {
            if axis.lower < b[0] || axis.upper > b[1] {
                return Err(CliError::Config(format!(
                    "parameter axis {} [{}, {}] leaves the admissible box [{}, {}]",
                    axis.name, axis.lower, axis.upper, b[0], b[1]
                )));
            }
        }
        if self.noise_level.is_nan() || self.noise_level < 0.0 {
            return Err(CliError::Config(format!(
                "noise level {}",
                self.noise_level
            )));
        }
        self.library.validate()?;
        self.train.validate()?;
        if self.net.input_width() != self.grid.n_dof() {
            return Err(CliError::Config(format!(
                "network input width {} does not match the {} grid unknowns",
                self.net.input_width(),
                self.grid.n_dof()
            )));
        }
        let initial = self.initial_samples.resolve(&self.params)?;
        for &i in &initial {
            self.params.point(i)?;
        }
        if initial.is_empty() || self.train.budget < initial.len() {
            return Err(CliError::Config(format!(
                "budget {} with {} initial samples",
                self.train.budget,
                initial.len()
            )));
        }
        if let Some(g) = &self.evaluation.test_grid {
            g.flat_indices(&self.params)?;
        }
        for mu in &self.evaluation.speedup_points {
            self.problem.check_mu(mu)?;
        }
        if self.checkpoint_every == Some(0) {
            return Err(CliError::Config("checkpoint_every must be positive".into()));
        }
        Ok(())
    }

    /// Applies the root seed everywhere randomness is drawn.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn source(&self) -> DataSource {
        DataSource {
            problem: self.problem.clone(),
            grid: self.grid.clone(),
            time: self.time,
            space: self.params.clone(),
            noise_level: self.noise_level,
            seed: self.seed,
        }
    }

    pub fn test_grid(&self) -> TestGrid {
        self.evaluation
            .test_grid
            .clone()
            .unwrap_or_else(|| TestGrid::full(&self.params))
    }

    pub fn speedup_points(&self) -> Vec<Vec<f64>> {
        if self.evaluation.speedup_points.is_empty() {
            vec![self
                .problem
                .bounds
                .iter()
                .map(|b| 0.5 * (b[0] + b[1]))
                .collect()]
        } else {
            self.evaluation.speedup_points.clone()
        }
    }
}

pub const PRESETS: &[&str] = &[
    "burgers1d-full",
    "burgers1d-desk",
    "burgers2d-full",
    "burgers2d-desk",
    "advection-full",
    "advection-desk",
];

struct Recipe {
    problem: FomProblem,
    grid: Grid,
    time: TimeGrid,
    points: usize,
    initial: InitialSamples,
    hidden: usize,
    latent: usize,
    degree: usize,
    train: TrainConfig,
}

pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let r = match name {
        "burgers1d-full" => Recipe {
            problem: FomProblem::burgers1d(),
            grid: Grid::line(-3.0, 3.0, 1001)?,
            time: TimeGrid::new(1.0, 1000)?,
            points: 21,
            initial: InitialSamples::Uniform(4),
            hidden: 100,
            latent: 5,
            degree: 1,
            train: TrainConfig {
                epochs: 20_000,
                update_every: 2000,
                budget: 16,
                ..TrainConfig::default()
            },
        },
        "burgers1d-desk" => Recipe {
            problem: FomProblem::burgers1d(),
            grid: Grid::line(-3.0, 3.0, 201)?,
            time: TimeGrid::new(1.0, 100)?,
            points: 9,
            initial: InitialSamples::Corners,
            hidden: 100,
            latent: 5,
            degree: 1,
            train: TrainConfig {
                epochs: 5000,
                update_every: 800,
                budget: 9,
                test_functions: TestFunctionConfig {
                    support_steps: Some(30),
                    stride: Some(5),
                    ..TestFunctionConfig::default()
                },
                ..TrainConfig::default()
            },
        },
        "burgers2d-full" => Recipe {
            problem: FomProblem::burgers2d(10_000.0),
            grid: Grid::square(-3.0, 3.0, 60, 2)?,
            time: TimeGrid::new(1.0, 200)?,
            points: 21,
            initial: InitialSamples::Uniform(5),
            hidden: 100,
            latent: 5,
            degree: 2,
            train: TrainConfig {
                epochs: 100_000,
                update_every: 10_000,
                budget: 25,
                ..TrainConfig::default()
            },
        },
        "burgers2d-desk" => Recipe {
            problem: FomProblem::burgers2d(10_000.0),
            grid: Grid::square(-3.0, 3.0, 24, 2)?,
            time: TimeGrid::new(1.0, 100)?,
            points: 5,
            initial: InitialSamples::Corners,
            hidden: 50,
            latent: 5,
            degree: 2,
            train: TrainConfig {
                epochs: 2000,
                update_every: 600,
                budget: 6,
                ..TrainConfig::default()
            },
        },
        "advection-full" => Recipe {
            problem: FomProblem::radial_advection(),
            grid: Grid::square(-1.0, 1.0, 96, 1)?,
            time: TimeGrid::new(3.0, 300)?,
            points: 21,
            initial: InitialSamples::Uniform(4),
            hidden: 100,
            latent: 3,
            degree: 1,
            train: TrainConfig {
                beta3: 1e-4,
                epochs: 100_000,
                update_every: 10_000,
                budget: 16,
                ..TrainConfig::default()
            },
        },
        "advection-desk" => Recipe {
            problem: FomProblem::radial_advection(),
            grid: Grid::square(-1.0, 1.0, 48, 1)?,
            time: TimeGrid::new(3.0, 300)?,
            points: 5,
            initial: InitialSamples::Corners,
            hidden: 50,
            latent: 3,
            degree: 1,
            train: TrainConfig {
                beta3: 1e-4,
                epochs: 2000,
                update_every: 600,
                budget: 6,
                ..TrainConfig::default()
            },
        },
        other => {
            return Err(CliError::Config(format!(
                "unknown preset {other:?} (available: {})",
                PRESETS.join(", ")
            )))
        }
    };
    let mut train = TrainConfig {
        mode: LossMode::WeakTypeI,
        ..r.train
    };
    train.seed = 0;
    let params = ParamSpace::for_problem(&r.problem, r.points)?;
    let cfg = ExperimentConfig {
        version: CONFIG_VERSION,
        seed: 0,
        net: NetSpec::new(vec![r.grid.n_dof(), r.hidden, r.latent])?,
        problem: r.problem,
        grid: r.grid,
        time: r.time,
        params,
        noise_level: 0.1,
        initial_samples: r.initial,
        library: LibrarySpec::new(r.degree)?,
        train,
        evaluation: EvalConfig::default(),
        checkpoint_every: None,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Switches a config to the strong-form loss with the coefficient penalty
/// off, i.e. a plain gLaSDI run. The 2D Burgers presets also drop the
/// autoencoder term there.
pub fn strong_variant(mut cfg: ExperimentConfig) -> ExperimentConfig {
    cfg.train.mode = LossMode::Strong;
    cfg.train.beta3 = 0.0;
    if cfg.problem.kind == ProblemKind::Burgers2D {
        cfg.train.beta1 = 0.0;
    }
    cfg
}
