//! Reduced-order inference: latent RK4 rollout, decoding, the residual error
//! indicator and error metrics.

use std::fmt::Write as _;
use std::time::Instant;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::ParamSpace;
use crate::fom::{FomProblem, Grid, TimeGrid};
use crate::interp::{interp_coeffs, ParamMetric};
use crate::latentdi::{check_coeffs, LibrarySpec};
use crate::net::{Mlp, NetSpec};
use crate::par::{self, Execution};
use crate::{Error, Result};

/// Latent norm above which a rollout is declared unstable.
pub const BLOWUP_NORM: f64 = 1e6;

/// A trained reduced-order model: autoencoder, one ODE coefficient matrix per
/// training parameter, and the settings needed to interpolate and integrate.
#[derive(Debug, Clone, PartialEq)]
pub struct RomModel {
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub library: LibrarySpec,
    pub mus: Vec<Vec<f64>>,
    pub coeffs: Vec<Array2<f64>>,
    pub time: TimeGrid,
    pub grid: Grid,
    pub problem: FomProblem,
    pub k: usize,
    pub metric: ParamMetric,
}

impl RomModel {
    pub fn latent_dim(&self) -> usize {
        self.encoder.output_width()
    }

    pub fn validate(&self) -> Result<()> {
        let nz = self.latent_dim();
        if self.decoder.input_width() != nz {
            return Err(Error::shape(
                "decoder input",
                nz,
                self.decoder.input_width(),
            ));
        }
        let nu = self.grid.n_dof();
        if self.encoder.input_width() != nu {
            return Err(Error::shape(
                "encoder input",
                nu,
                self.encoder.input_width(),
            ));
        }
        if self.decoder.output_width() != nu {
            return Err(Error::shape(
                "decoder output",
                nu,
                self.decoder.output_width(),
            ));
        }
        if self.mus.len() != self.coeffs.len() {
            return Err(Error::shape(
                "coefficient matrices",
                self.mus.len(),
                self.coeffs.len(),
            ));
        }
        for xi in &self.coeffs {
            check_coeffs(&self.library, xi.view(), nz)?;
        }
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        Ok(())
    }

    /// Coefficients at `mu`, interpolated from at most `k` neighbours.
    pub fn coeffs_at(&self, mu: &[f64]) -> Result<Array2<f64>> {
        let k = self.k.min(self.mus.len());
        interp_coeffs(&self.metric, mu, &self.mus, &self.coeffs, k)
    }

    /// RK4 integration of `dz/dt = Theta(z) Xi` on the model's time grid.
    pub fn rollout(&self, mu: &[f64], z0: &[f64], xi: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        check_coeffs(&self.library, xi, z0.len())?;
        let lib = self.library;
        let nz = z0.len();
        let mut theta = Vec::with_capacity(lib.n_terms(nz));
        let mut rate = |z: &[f64], out: &mut [f64]| {
            lib.eval_into(z, &mut theta);
            for (j, o) in out.iter_mut().enumerate() {
                *o = theta.iter().enumerate().map(|(i, t)| t * xi[[i, j]]).sum();
            }
        };
        let dt = self.time.dt;
        let mut z = Array2::zeros((self.time.n_snapshots(), nz));
        z.row_mut(0).assign(&ndarray::ArrayView1::from(z0));
        let mut cur = z0.to_vec();
        let (mut k1, mut k2, mut k3, mut k4) =
            (vec![0.0; nz], vec![0.0; nz], vec![0.0; nz], vec![0.0; nz]);
        let mut stage = vec![0.0; nz];
        for n in 1..=self.time.steps {
            rate(&cur, &mut k1);
            axpy(&mut stage, &cur, &k1, 0.5 * dt);
            rate(&stage, &mut k2);
            axpy(&mut stage, &cur, &k2, 0.5 * dt);
            rate(&stage, &mut k3);
            axpy(&mut stage, &cur, &k3, dt);
            rate(&stage, &mut k4);
            for i in 0..nz {
                cur[i] += (k1[i] + k2[i] * 2.0 + k3[i] * 2.0 + k4[i]) * (dt / 6.0);
            }
            let norm = cur.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm <= BLOWUP_NORM) {
                return Err(Error::Instability {
                    mu: mu.to_vec(),
                    step: n,
                });
            }
            z.row_mut(n).assign(&ndarray::ArrayView1::from(&cur[..]));
        }
        Ok(z)
    }

    /// Latent trajectory at `mu` starting from the encoded field `u0`.
    pub fn predict_latent(&self, mu: &[f64], u0: &[f64]) -> Result<Array2<f64>> {
        let z0 = self.encoder.eval_one(ndarray::ArrayView1::from(u0))?;
        let xi = self.coeffs_at(mu)?;
        self.rollout(mu, z0.as_slice().unwrap(), xi.view())
    }

    /// Predicted snapshot matrix at `mu` from the initial field `u0`.
    pub fn predict(&self, mu: &[f64], u0: &[f64]) -> Result<Array2<f64>> {
        let z = self.predict_latent(mu, u0)?;
        self.decoder.eval(z.view())
    }

    /// Prediction from the problem's own (noise-free) initial condition.
    pub fn predict_ic(&self, mu: &[f64]) -> Result<Array2<f64>> {
        let u0 = self.problem.initial_condition(mu, &self.grid)?;
        self.predict(mu, &u0)
    }

    /// Mean backward-Euler residual norm of the prediction over `n_ts`
    /// evenly spaced steps. Only the needed snapshots are decoded.
    pub fn error_indicator(&self, mu: &[f64], n_ts: usize) -> Result<f64> {
        let steps = indicator_steps(self.time.steps, n_ts)?;
        let u0 = self.problem.initial_condition(mu, &self.grid)?;
        let z = self.predict_latent(mu, &u0)?;
        let mut rows = Vec::with_capacity(2 * steps.len());
        for &n in &steps {
            rows.push(n - 1);
            rows.push(n);
        }
        let u = self.decoder.eval(z.select(Axis(0), &rows).view())?;
        let mut total = 0.0;
        for j in 0..steps.len() {
            let prev = u.row(2 * j).to_vec();
            let cur = u.row(2 * j + 1).to_vec();
            let r = self
                .problem
                .residual_step(&cur, &prev, self.time.dt, &self.grid)?;
            total += r.iter().map(|v| v * v).sum::<f64>().sqrt();
        }
        Ok(total / steps.len() as f64)
    }

    /// Flattens the model into a JSON-able header and an f64 payload.
    pub fn to_parts(&self) -> (ModelHeader, Vec<f64>) {
        let mut payload = Vec::new();
        for b in self
            .encoder
            .blocks()
            .into_iter()
            .chain(self.decoder.blocks())
        {
            payload.extend_from_slice(b);
        }
        for xi in &self.coeffs {
            payload.extend(xi.iter());
        }
        let header = ModelHeader {
            encoder: self.encoder.spec(),
            decoder: self.decoder.spec(),
            library: self.library,
            mus: self.mus.clone(),
            time: self.time,
            grid: self.grid.clone(),
            problem: self.problem.clone(),
            k: self.k,
            metric: self.metric.clone(),
        };
        (header, payload)
    }

    pub fn from_parts(header: ModelHeader, payload: &[f64]) -> Result<Self> {
        let mut rest = payload;
        let encoder = mlp_from_flat(&header.encoder, &mut rest)?;
        let decoder = mlp_from_flat(&header.decoder, &mut rest)?;
        let nz = encoder.output_width();
        let nl = header.library.n_terms(nz);
        let mut coeffs = Vec::with_capacity(header.mus.len());
        for _ in &header.mus {
            let vals = take(&mut rest, nl * nz)?;
            coeffs.push(Array2::from_shape_vec((nl, nz), vals.to_vec()).unwrap());
        }
        if !rest.is_empty() {
            return Err(Error::Format(format!(
                "{} unused payload values",
                rest.len()
            )));
        }
        let model = RomModel {
            encoder,
            decoder,
            library: header.library,
            mus: header.mus,
            coeffs,
            time: header.time,
            grid: header.grid,
            problem: header.problem,
            k: header.k,
            metric: header.metric,
        };
        model
            .validate()
            .map_err(|e| Error::Format(format!("inconsistent model file: {e}")))?;
        Ok(model)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelHeader {
    pub encoder: NetSpec,
    pub decoder: NetSpec,
    pub library: LibrarySpec,
    pub mus: Vec<Vec<f64>>,
    pub time: TimeGrid,
    pub grid: Grid,
    pub problem: FomProblem,
    pub k: usize,
    pub metric: ParamMetric,
}

fn take<'a>(rest: &mut &'a [f64], n: usize) -> Result<&'a [f64]> {
    if rest.len() < n {
        return Err(Error::Format(format!(
            "payload too short: need {n} more values, have {}",
            rest.len()
        )));
    }
    let (head, tail) = rest.split_at(n);
    *rest = tail;
    Ok(head)
}

/// Rebuilds a network from its spec and a flat slice of `[W, b]` blocks,
/// advancing `rest`.
pub(crate) fn mlp_from_flat(spec: &NetSpec, rest: &mut &[f64]) -> Result<Mlp> {
    let mut net = Mlp::init(spec, 0);
    for block in net.blocks_mut() {
        let n = block.len();
        block.copy_from_slice(take(rest, n)?);
    }
    Ok(net)
}

/// Step indices `n_j = round(j N_t / N_ts)`, `j = 1..=N_ts`.
pub fn indicator_steps(steps: usize, n_ts: usize) -> Result<Vec<usize>> {
    if n_ts == 0 || n_ts > steps {
        return Err(Error::Config(format!(
            "indicator needs 1 <= N_ts <= N_t, got N_ts={n_ts}, N_t={steps}"
        )));
    }
    let mut out: Vec<usize> = (1..=n_ts)
        .map(|j| ((j * steps) as f64 / n_ts as f64).round() as usize)
        .collect();
    out.dedup();
    Ok(out)
}

pub fn default_n_ts(steps: usize) -> usize {
    steps.min(50)
}

/// `max_n |u_n - u_hat_n| / |u_n|` over all snapshots.
pub fn max_relative_error(truth: ArrayView2<'_, f64>, pred: ArrayView2<'_, f64>) -> Result<f64> {
    if truth.dim() != pred.dim() {
        return Err(Error::shape("prediction rows", truth.nrows(), pred.nrows()));
    }
    let mut worst: f64 = 0.0;
    for (n, (u, v)) in truth.rows().into_iter().zip(pred.rows()).enumerate() {
        let norm = u.dot(&u).sqrt();
        if norm == 0.0 {
            return Err(Error::ZeroNorm(n));
        }
        let diff = (&u - &v).mapv(|x| x * x).sum().sqrt();
        worst = worst.max(diff / norm);
    }
    Ok(worst)
}

/// Rectangular sub-lattice of a two-axis parameter grid, given as per-axis
/// index lists.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestGrid {
    pub axis1: Vec<usize>,
    pub axis2: Vec<usize>,
}

impl TestGrid {
    /// Every point of `space`.
    pub fn full(space: &ParamSpace) -> Self {
        Self {
            axis1: (0..space.axes[0].points).collect(),
            axis2: (0..space.axes[1].points).collect(),
        }
    }

    /// Flat indices in row-major (axis 1 outer) order.
    pub fn flat_indices(&self, space: &ParamSpace) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(self.axis1.len() * self.axis2.len());
        for &i in &self.axis1 {
            for &j in &self.axis2 {
                out.push(space.flat_index(&[i, j])?);
            }
        }
        Ok(out)
    }
}

/// `e_max` over a test grid, with axis values for labelling.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub axis1: Vec<f64>,
    pub axis2: Vec<f64>,
    pub values: Array2<f64>,
}

impl Heatmap {
    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.values.mean().unwrap_or(f64::NAN)
    }

    /// Header row of axis-2 values, then one row per axis-1 value.
    pub fn to_csv(&self, corner: &str) -> String {
        let mut s = String::from(corner);
        for v in &self.axis2 {
            write!(s, ",{v}").unwrap();
        }
        s.push('\n');
        for (a, row) in self.axis1.iter().zip(self.values.rows()) {
            write!(s, "{a}").unwrap();
            for v in row {
                write!(s, ",{v}").unwrap();
            }
            s.push('\n');
        }
        s
    }
}

/// Evaluates `e_max` of the model against clean reference snapshots, one per
/// test-grid point in [`TestGrid::flat_indices`] order.
pub fn heatmap(
    model: &RomModel,
    space: &ParamSpace,
    grid: &TestGrid,
    references: &[Array2<f64>],
    exec: Execution,
) -> Result<Heatmap> {
    let idx = grid.flat_indices(space)?;
    if idx.len() != references.len() {
        return Err(Error::shape(
            "heatmap references",
            idx.len(),
            references.len(),
        ));
    }
    let items: Vec<(usize, &Array2<f64>)> = idx.iter().copied().zip(references).collect();
    let errs = par::map(exec, &items, |&(i, truth)| {
        let mu = space.point(i)?;
        let pred = model.predict_ic(&mu)?;
        max_relative_error(truth.view(), pred.view())
    })
    .into_iter()
    .collect::<Result<Vec<f64>>>()?;
    Ok(Heatmap {
        axis1: grid.axis1.iter().map(|&i| space.axes[0].value(i)).collect(),
        axis2: grid.axis2.iter().map(|&j| space.axes[1].value(j)).collect(),
        values: Array2::from_shape_vec((grid.axis1.len(), grid.axis2.len()), errs).unwrap(),
    })
}

/// Wall-clock comparison of one FOM solve against one ROM prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedupRecord {
    pub mu: Vec<f64>,
    pub fom_seconds: f64,
    pub rom_seconds: f64,
}

impl SpeedupRecord {
    pub fn speedup(&self) -> f64 {
        self.fom_seconds / self.rom_seconds
    }
}

/// Times FOM and ROM at `mu`, taking the best of `repeats` runs of each.
pub fn measure_speedup(model: &RomModel, mu: &[f64], repeats: usize) -> Result<SpeedupRecord> {
    let fom = best_time(repeats, || {
        std::hint::black_box(model.problem.solve(mu, &model.grid, &model.time)?);
        Ok(())
    })?;
    let rom = best_time(repeats, || {
        std::hint::black_box(model.predict_ic(mu)?);
        Ok(())
    })?;
    Ok(SpeedupRecord {
        mu: mu.to_vec(),
        fom_seconds: fom,
        rom_seconds: rom,
    })
}

/// Fastest of `repeats` timed calls after one untimed warm-up call.
fn best_time(repeats: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    f()?;
    let mut best = f64::INFINITY;
    for _ in 0..repeats.max(1) {
        let t = Instant::now();
        f()?;
        best = best.min(t.elapsed().as_secs_f64());
    }
    Ok(best)
}

/// `out = x + a * y`
fn axpy(out: &mut [f64], x: &[f64], y: &[f64], a: f64) {
    for ((o, x), y) in out.iter_mut().zip(x).zip(y) {
        *o = x + y * a;
    }
}

pub fn speedup_csv(records: &[SpeedupRecord]) -> String {
    let mut s = String::from("mu1,mu2,fom_seconds,rom_seconds,speedup\n");
    for r in records {
        let m1 = r.mu.first().copied().unwrap_or(f64::NAN);
        let m2 = r.mu.get(1).copied().unwrap_or(f64::NAN);
        writeln!(
            s,
            "{m1},{m2},{},{},{}",
            r.fom_seconds,
            r.rom_seconds,
            r.speedup()
        )
        .unwrap();
    }
    s
}
