//! Joint training of the autoencoder and the per-parameter ODE coefficients,
//! and the greedy sampling loop.
//!
//! The composite loss of `N_mu` trajectories is
//!
//! ```text
//! L = L_ae + beta1 L_zdot + beta2 L_udot + beta3 (1/N_mu) sum_i |Xi_i|_F^2
//! ```
//!
//! where every term is a mean over trajectories and, within a trajectory,
//! over snapshots (strong form) or test-function windows (weak form).
//! Gradients are exact reverse-mode derivatives with activation masks frozen
//! at the current forward pass.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{self, derive_seed, DataSource, Dataset, DatasetEntry, CHECKPOINT_MAGIC};
use crate::interp::ParamMetric;
use crate::latentdi::{
    central_difference, check_coeffs, LibrarySpec, TestFunctionConfig, TestFunctionSet,
};
use crate::net::{AdamConfig, AdamState, Mlp, MlpGrad, NetSpec};
use crate::par::{self, Execution};
use crate::rom::{default_n_ts, mlp_from_flat, RomModel};
use crate::{Error, Result};

/// Loss magnitude treated as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossMode {
    #[serde(rename = "strong")]
    Strong,
    #[serde(rename = "weakTypeI")]
    WeakTypeI,
    #[serde(rename = "weakTypeII")]
    WeakTypeII,
}

impl LossMode {
    pub fn is_weak(self) -> bool {
        self != LossMode::Strong
    }

    pub fn name(self) -> &'static str {
        match self {
            LossMode::Strong => "strong",
            LossMode::WeakTypeI => "weakTypeI",
            LossMode::WeakTypeII => "weakTypeII",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
    pub mode: LossMode,
    pub epochs: usize,
    /// Greedy sampling cadence `N_up` in epochs.
    pub update_every: usize,
    /// Total number of training samples to reach.
    pub budget: usize,
    /// Evaluate at most this many randomly chosen candidates per event.
    pub candidate_limit: Option<usize>,
    /// Stop sampling once the largest indicator falls below this value.
    pub indicator_threshold: Option<f64>,
    pub k: usize,
    /// Steps used by the residual indicator; defaults to `min(50, N_t)`.
    pub n_ts: Option<usize>,
    pub seed: u64,
    pub adam: AdamConfig,
    pub test_functions: TestFunctionConfig,
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta1: 1.0,
            beta2: 1.0,
            beta3: 1e-5,
            mode: LossMode::WeakTypeI,
            epochs: 5000,
            update_every: 500,
            budget: 4,
            candidate_limit: None,
            indicator_threshold: None,
            k: 4,
            n_ts: None,
            seed: 0,
            adam: AdamConfig::default(),
            test_functions: TestFunctionConfig::default(),
            execution: Execution::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, b) in [
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("beta3", self.beta3),
        ] {
            if !(b >= 0.0) || !b.is_finite() {
                return Err(Error::Config(format!(
                    "{name} = {b} must be finite and >= 0"
                )));
            }
        }
        if self.update_every == 0 {
            return Err(Error::Config("update_every must be >= 1".into()));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be >= 1".into()));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {}", self.adam.lr)));
        }
        Ok(())
    }
}

/// Unweighted loss terms; `total` carries the weights.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub ae: f64,
    pub zdot: f64,
    pub udot: f64,
    pub xi: f64,
}

impl LossParts {
    fn add(&mut self, o: &LossParts) {
        self.total += o.total;
        self.ae += o.ae;
        self.zdot += o.zdot;
        self.udot += o.udot;
        self.xi += o.xi;
    }

    fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("autoencoder loss", self.ae),
            ("latent dynamics loss", self.zdot),
            ("physical dynamics loss", self.udot),
            ("coefficient penalty", self.xi),
            ("total loss", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub encoder: MlpGrad,
    pub decoder: MlpGrad,
    pub xi: Vec<Array2<f64>>,
}

impl Gradient {
    pub fn is_finite(&self) -> bool {
        self.encoder.is_finite()
            && self.decoder.is_finite()
            && self.xi.iter().all(|x| x.iter().all(|v| v.is_finite()))
    }

    /// Flat view in the optimizer's block order.
    pub fn blocks(&self) -> Vec<&[f64]> {
        let mut out = self.encoder.blocks();
        out.extend(self.decoder.blocks());
        out.extend(
            self.xi
                .iter()
                .map(|x| x.as_slice().expect("standard layout")),
        );
        out
    }
}

/// Per-trajectory data prepared for the chosen loss: the snapshots and
/// either finite-difference rates (strong) or `-int u phi' dt` (weak).
#[derive(Debug, Clone)]
struct Prepared {
    u: Array2<f64>,
    target: Array2<f64>,
}

/// The loss over a fixed set of training trajectories.
#[derive(Debug, Clone)]
pub struct LossProblem {
    pub library: LibrarySpec,
    pub mode: LossMode,
    pub betas: [f64; 3],
    pub tests: TestFunctionSet,
    pub execution: Execution,
    dt: f64,
    prepared: Vec<Prepared>,
}

impl LossProblem {
    pub fn new(
        library: LibrarySpec,
        config: &TrainConfig,
        time: &crate::fom::TimeGrid,
        data: &[ArrayView2<'_, f64>],
    ) -> Result<Self> {
        library.validate()?;
        let mut p = Self {
            library,
            mode: config.mode,
            betas: [config.beta1, config.beta2, config.beta3],
            tests: config.test_functions.build(time)?,
            execution: config.execution,
            dt: time.dt,
            prepared: Vec::with_capacity(data.len()),
        };
        for u in data {
            p.push(*u)?;
        }
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.prepared.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prepared.is_empty()
    }

    pub fn push(&mut self, u: ArrayView2<'_, f64>) -> Result<()> {
        if u.nrows() != self.tests.n_snapshots() {
            return Err(Error::shape(
                "trajectory snapshots",
                self.tests.n_snapshots(),
                u.nrows(),
            ));
        }
        let target = if self.mode.is_weak() {
            -self.tests.quadrature(true).dot(&u)
        } else {
            central_difference(u, self.dt)?
        };
        self.prepared.push(Prepared {
            u: u.to_owned(),
            target,
        });
        Ok(())
    }

    pub fn loss(&self, encoder: &Mlp, decoder: &Mlp, xi: &[Array2<f64>]) -> Result<LossParts> {
        Ok(self.evaluate(encoder, decoder, xi, false)?.0)
    }

    pub fn loss_and_grad(
        &self,
        encoder: &Mlp,
        decoder: &Mlp,
        xi: &[Array2<f64>],
    ) -> Result<(LossParts, Gradient)> {
        let (parts, grad) = self.evaluate(encoder, decoder, xi, true)?;
        Ok((parts, grad.expect("gradient requested")))
    }

    fn evaluate(
        &self,
        encoder: &Mlp,
        decoder: &Mlp,
        xi: &[Array2<f64>],
        want_grad: bool,
    ) -> Result<(LossParts, Option<Gradient>)> {
        if self.prepared.is_empty() {
            return Err(Error::Domain("loss over an empty training set".into()));
        }
        if xi.len() != self.prepared.len() {
            return Err(Error::shape(
                "coefficient matrices",
                self.prepared.len(),
                xi.len(),
            ));
        }
        let nz = encoder.output_width();
        if decoder.input_width() != nz {
            return Err(Error::shape("decoder input", nz, decoder.input_width()));
        }
        for x in xi {
            check_coeffs(&self.library, x.view(), nz)?;
        }
        let w = 1.0 / self.prepared.len() as f64;
        let per = par::map_range(self.execution, self.prepared.len(), |i| {
            self.trajectory(
                encoder,
                decoder,
                xi[i].view(),
                &self.prepared[i],
                w,
                want_grad,
            )
        });
        let mut parts = LossParts::default();
        let mut grad = want_grad.then(|| Gradient {
            encoder: encoder.zero_grad(),
            decoder: decoder.zero_grad(),
            xi: Vec::with_capacity(xi.len()),
        });
        for r in per {
            let (p, g) = r?;
            parts.add(&p);
            if let (Some(acc), Some((ge, gd, gx))) = (grad.as_mut(), g) {
                acc.encoder.add_assign(&ge);
                acc.decoder.add_assign(&gd);
                acc.xi.push(gx);
            }
        }
        Ok((parts, grad))
    }

    /// Loss of one trajectory (already scaled by `w = 1/N_mu`) and its
    /// gradient contributions.
    #[allow(clippy::type_complexity)]
    fn trajectory(
        &self,
        enc: &Mlp,
        dec: &Mlp,
        xi: ArrayView2<'_, f64>,
        p: &Prepared,
        w: f64,
        want_grad: bool,
    ) -> Result<(LossParts, Option<(MlpGrad, MlpGrad, Array2<f64>)>)> {
        let [b1, b2, b3] = self.betas;
        let u = p.u.view();
        let s = u.nrows() as f64;
        let et = enc.forward(u)?;
        let z = et.output.view();
        let dt = dec.forward(z)?;
        let r_ae = &dt.output - &u;
        let ae = sumsq(&r_ae) / s;
        let theta = self.library.eval_batch(z);
        let f = theta.dot(&xi);
        let xin = xi.iter().map(|v| v * v).sum::<f64>();

        let mut ge = enc.zero_grad();
        let mut gd = dec.zero_grad();
        let mut g_uhat = r_ae * (2.0 * w / s);
        let mut g_z = Array2::zeros(z.raw_dim());
        let g_f: Array2<f64>;
        let (zdot, udot);

        match self.mode {
            LossMode::Strong => {
                let tz = enc.jvp(&et, p.target.view())?;
                let td = dec.jvp(&dt, f.view())?;
                let rz = &tz.output - &f;
                let ru = &p.target - &td.output;
                zdot = sumsq(&rz) / s;
                udot = sumsq(&ru) / s;
                if !want_grad {
                    return Ok((self.parts(w, ae, zdot, udot, xin), None));
                }
                let g_rz = rz * (2.0 * b1 * w / s);
                let g_ru = ru * (2.0 * b2 * w / s);
                enc.jvp_backward(&et, &tz, g_rz.clone(), &mut ge, false);
                let gt = dec
                    .jvp_backward(&dt, &td, -g_ru, &mut gd, true)
                    .expect("tangent gradient");
                g_f = gt - g_rz;
            }
            LossMode::WeakTypeI => {
                let phi = self.tests.quadrature(false);
                let k = self.tests.len() as f64;
                let centers = self.tests.centers();
                let z_rhs = phi.dot(&f);
                let et_c = et.select_rows(&centers);
                let dt_c = dt.select_rows(&centers);
                let tz = enc.jvp(&et_c, p.target.view())?;
                let td = dec.jvp(&dt_c, z_rhs.view())?;
                let rz = &tz.output - &z_rhs;
                let ru = &p.target - &td.output;
                zdot = sumsq(&rz) / k;
                udot = sumsq(&ru) / k;
                if !want_grad {
                    return Ok((self.parts(w, ae, zdot, udot, xin), None));
                }
                let g_rz = rz * (2.0 * b1 * w / k);
                let g_ru = ru * (2.0 * b2 * w / k);
                enc.jvp_backward(&et_c, &tz, g_rz.clone(), &mut ge, false);
                let gt = dec
                    .jvp_backward(&dt_c, &td, -g_ru, &mut gd, true)
                    .expect("tangent gradient");
                g_f = phi.t().dot(&(gt - g_rz));
            }
            LossMode::WeakTypeII => {
                let phi = self.tests.quadrature(false);
                let dphi = self.tests.quadrature(true);
                let k = self.tests.len() as f64;
                let rz = -dphi.dot(&z) - phi.dot(&f);
                let ru = &p.target + &dphi.dot(&dt.output);
                zdot = sumsq(&rz) / k;
                udot = sumsq(&ru) / k;
                if !want_grad {
                    return Ok((self.parts(w, ae, zdot, udot, xin), None));
                }
                let g_rz = rz * (2.0 * b1 * w / k);
                let g_ru = ru * (2.0 * b2 * w / k);
                g_z -= &dphi.t().dot(&g_rz);
                g_f = -phi.t().dot(&g_rz);
                g_uhat += &dphi.t().dot(&g_ru);
            }
        }

        let mut g_xi = theta.t().dot(&g_f);
        g_xi.scaled_add(2.0 * b3 * w, &xi);
        g_z += &self.library.backprop(z, g_f.dot(&xi.t()).view());
        g_z += &dec
            .backward(&dt, g_uhat, &mut gd, true)
            .expect("input gradient");
        enc.backward(&et, g_z, &mut ge, false);
        Ok((self.parts(w, ae, zdot, udot, xin), Some((ge, gd, g_xi))))
    }

    fn parts(&self, w: f64, ae: f64, zdot: f64, udot: f64, xi: f64) -> LossParts {
        let [b1, b2, b3] = self.betas;
        LossParts {
            total: w * (ae + b1 * zdot + b2 * udot + b3 * xi),
            ae: w * ae,
            zdot: w * zdot,
            udot: w * udot,
            xi: w * xi,
        }
    }
}

fn sumsq(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    #[serde(flatten)]
    pub parts: LossParts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEvent {
    pub event: usize,
    pub epoch: usize,
    pub index: usize,
    pub mu: Vec<f64>,
    /// Largest indicator value over the candidates (the selected one).
    pub indicator: f64,
}

/// Trainable parameters plus optimizer state and bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub library: LibrarySpec,
    pub xi: Vec<Array2<f64>>,
    pub adam: AdamState,
    pub epoch: usize,
    pub history: Vec<LossRecord>,
    pub trace: Vec<SampleEvent>,
    /// Set once the indicator threshold stops sampling.
    pub sampling_done: bool,
}

impl TrainState {
    /// Fresh networks (`encoder` spec and its mirror image) and zero
    /// coefficients for `n_samples` trajectories.
    pub fn init(
        encoder: &NetSpec,
        library: LibrarySpec,
        n_samples: usize,
        seed: u64,
        adam: AdamConfig,
    ) -> Self {
        let nz = encoder.output_width();
        Self {
            encoder: Mlp::init(encoder, derive_seed(seed, u64::MAX)),
            decoder: Mlp::init(&encoder.reversed(), derive_seed(seed, u64::MAX - 1)),
            library,
            xi: vec![Array2::zeros((library.n_terms(nz), nz)); n_samples],
            adam: AdamState::new(adam),
            epoch: 0,
            history: Vec::new(),
            trace: Vec::new(),
            sampling_done: false,
        }
    }
}

/// Drives training on a dataset drawn from a [`DataSource`], adding greedy
/// samples every `update_every` epochs until the budget is reached.
pub struct Trainer {
    pub source: DataSource,
    pub config: TrainConfig,
    pub dataset: Dataset,
    pub state: TrainState,
    problem: LossProblem,
}

impl Trainer {
    pub fn new(
        source: DataSource,
        dataset: Dataset,
        state: TrainState,
        config: TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        if dataset.is_empty() {
            return Err(Error::Domain(
                "training needs at least one trajectory".into(),
            ));
        }
        if config.budget < dataset.len() {
            return Err(Error::Config(format!(
                "budget {} is below the initial sample count {}",
                config.budget,
                dataset.len()
            )));
        }
        if state.xi.len() != dataset.len() {
            return Err(Error::shape(
                "coefficient matrices",
                dataset.len(),
                state.xi.len(),
            ));
        }
        let nu = source.grid.n_dof();
        if state.encoder.input_width() != nu || state.decoder.output_width() != nu {
            return Err(Error::Config(format!(
                "network widths {}/{} do not match the {nu} grid unknowns",
                state.encoder.input_width(),
                state.decoder.output_width()
            )));
        }
        let views: Vec<_> = dataset.entries.iter().map(|e| e.noisy.view()).collect();
        let problem = LossProblem::new(state.library, &config, &source.time, &views)?;
        Ok(Self {
            source,
            config,
            dataset,
            state,
            problem,
        })
    }

    pub fn loss_problem(&self) -> &LossProblem {
        &self.problem
    }

    pub fn train_indices(&self) -> Vec<usize> {
        self.dataset.indices()
    }

    /// One Adam step on the full batch. Returns the loss at the parameters
    /// before the step.
    pub fn step(&mut self) -> Result<LossRecord> {
        let epoch = self.state.epoch;
        let (parts, grad) =
            self.problem
                .loss_and_grad(&self.state.encoder, &self.state.decoder, &self.state.xi)?;
        if let Some(term) = parts.first_non_finite() {
            return Err(Error::NonFinite {
                term: term.into(),
                epoch,
            });
        }
        if parts.total > DIVERGENCE_LIMIT {
            return Err(Error::Diverged {
                loss: parts.total,
                epoch,
            });
        }
        if !grad.is_finite() {
            return Err(Error::NonFinite {
                term: "gradient".into(),
                epoch,
            });
        }
        let st = &mut self.state;
        let mut params: Vec<&mut [f64]> = st.encoder.blocks_mut();
        params.extend(st.decoder.blocks_mut());
        params.extend(
            st.xi
                .iter_mut()
                .map(|x| x.as_slice_mut().expect("standard layout")),
        );
        st.adam.update(&mut params, &grad.blocks())?;
        st.epoch += 1;
        let rec = LossRecord { epoch, parts };
        st.history.push(rec);
        Ok(rec)
    }

    /// Trains until `epoch` (capped at the configured total), sampling on
    /// schedule.
    pub fn run_to(&mut self, epoch: usize) -> Result<()> {
        let target = epoch.min(self.config.epochs);
        while self.state.epoch < target {
            self.step()?;
            let e = self.state.epoch;
            if e.is_multiple_of(self.config.update_every) && e < self.config.epochs {
                self.sample()?;
            }
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_to(self.config.epochs)
    }

    /// The current model as a deployable [`RomModel`].
    pub fn model(&self) -> Result<RomModel> {
        Ok(RomModel {
            encoder: self.state.encoder.clone(),
            decoder: self.state.decoder.clone(),
            library: self.state.library,
            mus: self.dataset.entries.iter().map(|e| e.mu.clone()).collect(),
            coeffs: self.state.xi.clone(),
            time: self.source.time,
            grid: self.source.grid.clone(),
            problem: self.source.problem.clone(),
            k: self.config.k,
            metric: ParamMetric::from_bounds(&self.source.space.bounds())?,
        })
    }

    pub fn candidates(&self) -> Vec<usize> {
        let taken: BTreeSet<usize> = self.dataset.indices().into_iter().collect();
        let mut all: Vec<usize> = (0..self.source.space.len())
            .filter(|i| !taken.contains(i))
            .collect();
        if let Some(limit) = self.config.candidate_limit {
            if limit < all.len() {
                let seed = derive_seed(
                    self.config.seed ^ 0x6772_6565_6479,
                    self.state.trace.len() as u64,
                );
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut pick = sample(&mut rng, all.len(), limit).into_vec();
                pick.sort_unstable();
                all = pick.into_iter().map(|p| all[p]).collect();
            }
        }
        all
    }

    /// Residual indicator of the current model at each candidate. A rollout
    /// that blows up scores `+inf`.
    pub fn indicators(&self, candidates: &[usize]) -> Result<Vec<f64>> {
        let model = self.model()?;
        let n_ts = self
            .config
            .n_ts
            .unwrap_or_else(|| default_n_ts(self.source.time.steps));
        par::map(self.config.execution, candidates, |&i| {
            let mu = self.source.space.point(i)?;
            match model.error_indicator(&mu, n_ts) {
                Err(Error::Instability { .. }) => Ok(f64::INFINITY),
                r => r,
            }
        })
        .into_iter()
        .collect()
    }

    /// One greedy event: adds the candidate with the largest indicator, with
    /// coefficients interpolated from the current samples. Returns `None`
    /// when nothing was added.
    pub fn sample(&mut self) -> Result<Option<SampleEvent>> {
        if self.state.sampling_done || self.dataset.len() >= self.config.budget {
            return Ok(None);
        }
        let cands = self.candidates();
        if cands.is_empty() {
            return Ok(None);
        }
        let ind = self.indicators(&cands)?;
        let (best, &value) = ind
            .iter()
            .enumerate()
            .fold((0, &f64::NEG_INFINITY), |acc, (i, v)| {
                if *v > *acc.1 {
                    (i, v)
                } else {
                    acc
                }
            });
        if let Some(th) = self.config.indicator_threshold {
            if value < th {
                self.state.sampling_done = true;
                return Ok(None);
            }
        }
        let index = cands[best];
        let entry = self.source.entry(index).map_err(|e| Error::GreedySample {
            mu: self.source.space.point(index).unwrap_or_default(),
            source: Box::new(e),
        })?;
        let xi0 = self.model()?.coeffs_at(&entry.mu)?;
        let event = SampleEvent {
            event: self.state.trace.len(),
            epoch: self.state.epoch,
            index,
            mu: entry.mu.clone(),
            indicator: value,
        };
        self.add_sample(entry, xi0)?;
        self.state.trace.push(event.clone());
        Ok(Some(event))
    }

    fn add_sample(&mut self, entry: DatasetEntry, xi0: Array2<f64>) -> Result<()> {
        self.problem.push(entry.noisy.view())?;
        self.state.xi.push(xi0);
        self.dataset.entries.push(entry);
        Ok(())
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.state.history.last().map(|r| r.parts.total)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let st = &self.state;
        let header = CheckpointHeader {
            config: self.config.clone(),
            source: self.source.clone(),
            encoder: st.encoder.spec(),
            decoder: st.decoder.spec(),
            library: st.library,
            train_indices: self.dataset.indices(),
            epoch: st.epoch,
            adam_config: st.adam.config,
            adam_step: st.adam.step,
            adam_blocks: st.adam.first.iter().map(Vec::len).collect(),
            history: st.history.clone(),
            trace: st.trace.clone(),
            sampling_done: st.sampling_done,
        };
        let mut payload = Vec::new();
        for b in st.encoder.blocks().into_iter().chain(st.decoder.blocks()) {
            payload.extend_from_slice(b);
        }
        for x in &st.xi {
            payload.extend(x.iter());
        }
        for b in st.adam.first.iter().chain(&st.adam.second) {
            payload.extend_from_slice(b);
        }
        data::write_container(path, CHECKPOINT_MAGIC, &header, &payload)
    }

    /// Restores a trainer from a checkpoint. Training trajectories are
    /// regenerated from the stored source, which is deterministic.
    pub fn resume(path: &Path) -> Result<Self> {
        let (h, payload): (CheckpointHeader, Vec<f64>) =
            data::read_container(path, CHECKPOINT_MAGIC)?;
        let mut rest = &payload[..];
        let encoder = mlp_from_flat(&h.encoder, &mut rest)?;
        let decoder = mlp_from_flat(&h.decoder, &mut rest)?;
        let nz = encoder.output_width();
        let nl = h.library.n_terms(nz);
        let mut xi = Vec::with_capacity(h.train_indices.len());
        for _ in &h.train_indices {
            xi.push(Array2::from_shape_vec((nl, nz), take_vec(&mut rest, nl * nz)?).unwrap());
        }
        let first = h
            .adam_blocks
            .iter()
            .map(|&n| take_vec(&mut rest, n))
            .collect::<Result<Vec<_>>>()?;
        let second = h
            .adam_blocks
            .iter()
            .map(|&n| take_vec(&mut rest, n))
            .collect::<Result<Vec<_>>>()?;
        if !rest.is_empty() {
            return Err(Error::Format(format!(
                "{} unused checkpoint values",
                rest.len()
            )));
        }
        let state = TrainState {
            encoder,
            decoder,
            library: h.library,
            xi,
            adam: AdamState {
                config: h.adam_config,
                step: h.adam_step,
                first,
                second,
            },
            epoch: h.epoch,
            history: h.history,
            trace: h.trace,
            sampling_done: h.sampling_done,
        };
        let dataset = h.source.assemble(&h.train_indices, h.config.execution)?;
        Trainer::new(h.source, dataset, state, h.config)
    }
}

fn take_vec(rest: &mut &[f64], n: usize) -> Result<Vec<f64>> {
    if rest.len() < n {
        return Err(Error::Format("checkpoint payload truncated".into()));
    }
    let (a, b) = rest.split_at(n);
    *rest = b;
    Ok(a.to_vec())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    config: TrainConfig,
    source: DataSource,
    encoder: NetSpec,
    decoder: NetSpec,
    library: LibrarySpec,
    train_indices: Vec<usize>,
    epoch: usize,
    adam_config: AdamConfig,
    adam_step: u64,
    adam_blocks: Vec<usize>,
    history: Vec<LossRecord>,
    trace: Vec<SampleEvent>,
    sampling_done: bool,
}

/// Trains on `dataset` without sampling.
pub fn train(
    source: DataSource,
    dataset: Dataset,
    encoder: &NetSpec,
    library: LibrarySpec,
    config: TrainConfig,
) -> Result<Trainer> {
    let config = TrainConfig {
        budget: dataset.len(),
        ..config
    };
    greedy_loop(source, dataset, encoder, library, config)
}

/// Trains with greedy sampling from the initial `dataset` up to the
/// configured budget.
pub fn greedy_loop(
    source: DataSource,
    dataset: Dataset,
    encoder: &NetSpec,
    library: LibrarySpec,
    config: TrainConfig,
) -> Result<Trainer> {
    let state = TrainState::init(encoder, library, dataset.len(), config.seed, config.adam);
    let mut t = Trainer::new(source, dataset, state, config)?;
    t.run()?;
    Ok(t)
}

pub fn loss_csv(history: &[LossRecord]) -> String {
    let mut s = String::from("epoch,total,ae,zdot,udot,xi\n");
    for r in history {
        let p = r.parts;
        writeln!(
            s,
            "{},{},{},{},{},{}",
            r.epoch, p.total, p.ae, p.zdot, p.udot, p.xi
        )
        .unwrap();
    }
    s
}

pub fn trace_csv(trace: &[SampleEvent]) -> String {
    let mut s = String::from("event,epoch,index,mu1,mu2,indicator\n");
    for e in trace {
        writeln!(
            s,
            "{},{},{},{},{},{}",
            e.event,
            e.epoch,
            e.index,
            e.mu.first().copied().unwrap_or(f64::NAN),
            e.mu.get(1).copied().unwrap_or(f64::NAN),
            e.indicator
        )
        .unwrap();
    }
    s
}
