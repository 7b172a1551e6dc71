//! Parameter grids, noise injection, dataset assembly and file formats.
//!
//! Dataset files are little-endian binary:
//!
//! ```text
//! "WGLD" | u16 version | u32 N_mu | u32 N_t+1 | u32 N_u
//! clean payloads  (N_mu x (N_t+1) x N_u f64, row-major)
//! noisy payloads  (same layout)
//! ```
//!
//! with a JSON sidecar (`<file>.json`) carrying grids, parameters, seeds and
//! the format version. Models and training checkpoints use a generic
//! container: magic, u16 version, u64 header length, JSON header, u64 value
//! count, f64 payload.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::fom::{FomProblem, Grid, TimeGrid, Trajectory};
use crate::par::{self, Execution};
use crate::{Error, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"WGLD";
pub const DATASET_VERSION: u16 = 1;
pub const MODEL_MAGIC: &[u8; 4] = b"WGLM";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"WGLC";
pub const CONTAINER_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamAxis {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
    pub points: usize,
}

impl ParamAxis {
    pub fn value(&self, i: usize) -> f64 {
        if i + 1 == self.points {
            self.upper
        } else {
            self.lower + (self.upper - self.lower) * i as f64 / (self.points - 1) as f64
        }
    }

    pub fn values(&self) -> Vec<f64> {
        (0..self.points).map(|i| self.value(i)).collect()
    }
}

/// Tensor grid over the parameter box. Flat indices run with the last axis
/// fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamSpace {
    pub axes: Vec<ParamAxis>,
}

impl ParamSpace {
    pub fn new(axes: Vec<ParamAxis>) -> Result<Self> {
        let space = Self { axes };
        space.validate()?;
        Ok(space)
    }

    pub fn validate(&self) -> Result<()> {
        if self.axes.is_empty() {
            return Err(Error::Config("parameter space without axes".into()));
        }
        for a in &self.axes {
            if !(a.lower < a.upper) || a.points < 2 {
                return Err(Error::Config(format!(
                    "parameter axis {} = [{}, {}] with {} points",
                    a.name, a.lower, a.upper, a.points
                )));
            }
        }
        Ok(())
    }

    /// The problem's default box sampled with `points` per axis.
    pub fn for_problem(problem: &FomProblem, points: usize) -> Result<Self> {
        let names = problem.kind.param_names();
        Self::new(
            problem
                .bounds
                .iter()
                .zip(names)
                .map(|(b, n)| ParamAxis {
                    name: n.to_string(),
                    lower: b[0],
                    upper: b[1],
                    points,
                })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.points).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn bounds(&self) -> Vec<[f64; 2]> {
        self.axes.iter().map(|a| [a.lower, a.upper]).collect()
    }

    pub fn multi_index(&self, index: usize) -> Result<Vec<usize>> {
        if index >= self.len() {
            return Err(Error::Domain(format!(
                "grid index {index} out of range ({} points)",
                self.len()
            )));
        }
        let mut rest = index;
        let mut out = vec![0; self.axes.len()];
        for (k, a) in self.axes.iter().enumerate().rev() {
            out[k] = rest % a.points;
            rest /= a.points;
        }
        Ok(out)
    }

    pub fn flat_index(&self, multi: &[usize]) -> Result<usize> {
        if multi.len() != self.axes.len() {
            return Err(Error::shape("multi-index", self.axes.len(), multi.len()));
        }
        let mut idx = 0;
        for (a, &i) in self.axes.iter().zip(multi) {
            if i >= a.points {
                return Err(Error::Domain(format!("axis index {i} >= {}", a.points)));
            }
            idx = idx * a.points + i;
        }
        Ok(idx)
    }

    pub fn point(&self, index: usize) -> Result<Vec<f64>> {
        Ok(self
            .multi_index(index)?
            .iter()
            .zip(&self.axes)
            .map(|(&i, a)| a.value(i))
            .collect())
    }

    /// Flat indices of the box corners, in flat-index order.
    pub fn corners(&self) -> Vec<usize> {
        let d = self.axes.len();
        let mut out: Vec<usize> = (0..1usize << d)
            .map(|mask| {
                let multi: Vec<usize> = self
                    .axes
                    .iter()
                    .enumerate()
                    .map(|(k, a)| {
                        if mask >> (d - 1 - k) & 1 == 1 {
                            a.points - 1
                        } else {
                            0
                        }
                    })
                    .collect();
                self.flat_index(&multi).expect("corner inside grid")
            })
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Flat indices of the sub-lattice picking `per_axis` evenly spaced
    /// points on every axis (endpoints included).
    pub fn uniform_subgrid(&self, per_axis: usize) -> Result<Vec<usize>> {
        if per_axis < 2 {
            return Err(Error::Config(
                "uniform subgrid needs >= 2 points per axis".into(),
            ));
        }
        let picks: Vec<Vec<usize>> = self
            .axes
            .iter()
            .map(|a| {
                (0..per_axis)
                    .map(|k| ((k * (a.points - 1)) as f64 / (per_axis - 1) as f64).round() as usize)
                    .collect()
            })
            .collect();
        let mut out = Vec::new();
        let mut cursor = vec![0usize; self.axes.len()];
        loop {
            let multi: Vec<usize> = cursor.iter().zip(&picks).map(|(&c, p)| p[c]).collect();
            out.push(self.flat_index(&multi)?);
            let mut k = self.axes.len();
            loop {
                if k == 0 {
                    out.dedup();
                    return Ok(out);
                }
                k -= 1;
                cursor[k] += 1;
                if cursor[k] < per_axis {
                    break;
                }
                cursor[k] = 0;
            }
        }
    }
}

/// Mixes a root seed with a stream id (SplitMix64 finaliser).
pub fn derive_seed(root: u64, stream: u64) -> u64 {
    let mut z = root ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Additive Gaussian white noise with standard deviation
/// `level * RMS(values)`, the RMS taken over every entry of the snapshot
/// matrix.
pub fn noise_sigma(values: &Array2<f64>, level: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let ms = values.iter().map(|v| v * v).sum::<f64>() / values.len() as f64;
    level * ms.sqrt()
}

pub fn add_noise_values(values: &Array2<f64>, level: f64, seed: u64) -> Result<Array2<f64>> {
    if !(level >= 0.0) || !level.is_finite() {
        return Err(Error::Domain(format!("noise level {level}")));
    }
    let sigma = noise_sigma(values, level);
    if sigma == 0.0 {
        return Ok(values.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Domain(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(values.mapv(|v| v + normal.sample(&mut rng)))
}

pub fn add_noise(traj: &Trajectory, level: f64, seed: u64) -> Result<Trajectory> {
    Ok(Trajectory {
        values: add_noise_values(&traj.values, level, seed)?,
        ..traj.clone()
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetEntry {
    /// Flat index in the parameter grid.
    pub index: usize,
    pub mu: Vec<f64>,
    pub clean: Array2<f64>,
    pub noisy: Array2<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub problem: FomProblem,
    pub grid: Grid,
    pub time: TimeGrid,
    pub space: ParamSpace,
    pub noise_level: f64,
    pub seed: u64,
    pub entries: Vec<DatasetEntry>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.index).collect()
    }

    pub fn find(&self, index: usize) -> Option<&DatasetEntry> {
        self.entries.iter().find(|e| e.index == index)
    }

    pub fn trajectory(&self, i: usize, noisy: bool) -> Trajectory {
        let e = &self.entries[i];
        Trajectory {
            mu: e.mu.clone(),
            values: if noisy {
                e.noisy.clone()
            } else {
                e.clean.clone()
            },
            grid: self.grid.clone(),
            time: self.time,
        }
    }
}

/// Everything needed to produce dataset entries on demand: the FOM setup,
/// the parameter grid, the noise level and the root seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSource {
    pub problem: FomProblem,
    pub grid: Grid,
    pub time: TimeGrid,
    pub space: ParamSpace,
    pub noise_level: f64,
    pub seed: u64,
}

impl DataSource {
    pub fn entry_seed(&self, index: usize) -> u64 {
        derive_seed(self.seed, index as u64)
    }

    /// Solves the FOM at grid point `index` and adds frozen noise.
    pub fn entry(&self, index: usize) -> Result<DatasetEntry> {
        let mu = self.space.point(index)?;
        let traj = self.problem.solve(&mu, &self.grid, &self.time)?;
        let seed = self.entry_seed(index);
        let noisy = add_noise_values(&traj.values, self.noise_level, seed)?;
        Ok(DatasetEntry {
            index,
            mu,
            clean: traj.values,
            noisy,
            seed,
        })
    }

    pub fn assemble(&self, indices: &[usize], exec: Execution) -> Result<Dataset> {
        let mut seen = indices.to_vec();
        seen.sort_unstable();
        if let Some(w) = seen.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Domain(format!("duplicate grid index {}", w[0])));
        }
        for &i in indices {
            self.space.multi_index(i)?;
        }
        let entries = par::map(exec, indices, |&i| self.entry(i))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        Ok(self.empty_dataset(entries))
    }

    pub fn empty_dataset(&self, entries: Vec<DatasetEntry>) -> Dataset {
        Dataset {
            problem: self.problem.clone(),
            grid: self.grid.clone(),
            time: self.time,
            space: self.space.clone(),
            noise_level: self.noise_level,
            seed: self.seed,
            entries,
        }
    }

    pub fn from_dataset(ds: &Dataset) -> Self {
        Self {
            problem: ds.problem.clone(),
            grid: ds.grid.clone(),
            time: ds.time,
            space: ds.space.clone(),
            noise_level: ds.noise_level,
            seed: ds.seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EntryMeta {
    index: usize,
    mu: Vec<f64>,
    seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetMeta {
    format_version: u16,
    problem: FomProblem,
    grid: Grid,
    time: TimeGrid,
    space: ParamSpace,
    noise_level: f64,
    seed: u64,
    entries: Vec<EntryMeta>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let n_snap = ds.time.n_snapshots();
    let n_u = ds.grid.n_dof();
    let mut buf = Vec::with_capacity(18 + 16 * ds.len() * n_snap * n_u);
    buf.extend_from_slice(DATASET_MAGIC);
    buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    for v in [ds.len(), n_snap, n_u] {
        let v =
            u32::try_from(v).map_err(|_| Error::Format(format!("dimension {v} exceeds u32")))?;
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for e in &ds.entries {
        if e.clean.dim() != (n_snap, n_u) || e.noisy.dim() != (n_snap, n_u) {
            return Err(Error::Format(format!(
                "entry {} has the wrong shape",
                e.index
            )));
        }
    }
    for payload in [true, false] {
        for e in &ds.entries {
            let a = if payload { &e.clean } else { &e.noisy };
            for v in a.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    fs::write(path, &buf)?;
    let meta = DatasetMeta {
        format_version: DATASET_VERSION,
        problem: ds.problem.clone(),
        grid: ds.grid.clone(),
        time: ds.time,
        space: ds.space.clone(),
        noise_level: ds.noise_level,
        seed: ds.seed,
        entries: ds
            .entries
            .iter()
            .map(|e| EntryMeta {
                index: e.index,
                mu: e.mu.clone(),
                seed: e.seed,
            })
            .collect(),
    };
    fs::write(sidecar_path(path), serde_json::to_vec_pretty(&meta)?)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Format(format!(
                    "truncated file: wanted {n} bytes at offset {}, have {}",
                    self.pos,
                    self.bytes.len()
                ))
            })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Format("payload size overflow".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn expect_magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != magic {
            return Err(Error::Format(format!(
                "bad magic bytes {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(magic)
            )));
        }
        Ok(())
    }
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
    };
    cur.expect_magic(DATASET_MAGIC)?;
    let version = cur.u16()?;
    if version != DATASET_VERSION {
        return Err(Error::Format(format!(
            "dataset version {version}, this build reads {DATASET_VERSION}"
        )));
    }
    let n_mu = cur.u32()? as usize;
    let n_snap = cur.u32()? as usize;
    let n_u = cur.u32()? as usize;
    let mut clean = Vec::with_capacity(n_mu);
    for _ in 0..n_mu {
        clean.push(Array2::from_shape_vec((n_snap, n_u), cur.f64s(n_snap * n_u)?).unwrap());
    }
    let mut noisy = Vec::with_capacity(n_mu);
    for _ in 0..n_mu {
        noisy.push(Array2::from_shape_vec((n_snap, n_u), cur.f64s(n_snap * n_u)?).unwrap());
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after payload",
            bytes.len() - cur.pos
        )));
    }
    let meta: DatasetMeta = serde_json::from_slice(&fs::read(sidecar_path(path))?)
        .map_err(|e| Error::Format(format!("dataset metadata: {e}")))?;
    if meta.format_version != version {
        return Err(Error::Format(format!(
            "metadata version {} does not match payload version {version}",
            meta.format_version
        )));
    }
    if meta.entries.len() != n_mu || meta.time.n_snapshots() != n_snap || meta.grid.n_dof() != n_u {
        return Err(Error::Format(
            "metadata does not match payload dimensions".into(),
        ));
    }
    let entries = meta
        .entries
        .into_iter()
        .zip(clean.into_iter().zip(noisy))
        .map(|(m, (c, n))| DatasetEntry {
            index: m.index,
            mu: m.mu,
            clean: c,
            noisy: n,
            seed: m.seed,
        })
        .collect();
    Ok(Dataset {
        problem: meta.problem,
        grid: meta.grid,
        time: meta.time,
        space: meta.space,
        noise_level: meta.noise_level,
        seed: meta.seed,
        entries,
    })
}

/// Writes a JSON header plus a flat f64 payload under a 4-byte magic.
pub fn write_container<H: Serialize>(
    path: &Path,
    magic: &[u8; 4],
    header: &H,
    payload: &[f64],
) -> Result<()> {
    let json = serde_json::to_vec(header)?;
    let mut f = fs::File::create(path)?;
    let mut buf = Vec::with_capacity(22 + json.len() + 8 * payload.len());
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    buf.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    for v in payload {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_container<H: DeserializeOwned>(path: &Path, magic: &[u8; 4]) -> Result<(H, Vec<f64>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
    };
    cur.expect_magic(magic)?;
    let version = cur.u16()?;
    if version != CONTAINER_VERSION {
        return Err(Error::Format(format!(
            "container version {version}, this build reads {CONTAINER_VERSION}"
        )));
    }
    let len = usize::try_from(cur.u64()?).map_err(|_| Error::Format("header too large".into()))?;
    let header: H = serde_json::from_slice(cur.take(len)?)
        .map_err(|e| Error::Format(format!("container header: {e}")))?;
    let count =
        usize::try_from(cur.u64()?).map_err(|_| Error::Format("payload too large".into()))?;
    let payload = cur.f64s(count)?;
    if cur.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after payload".into()));
    }
    Ok((header, payload))
}

pub fn save_model(path: &Path, model: &crate::rom::RomModel) -> Result<()> {
    let (header, payload) = model.to_parts();
    write_container(path, MODEL_MAGIC, &header, &payload)
}

pub fn load_model(path: &Path) -> Result<crate::rom::RomModel> {
    let (header, payload) = read_container(path, MODEL_MAGIC)?;
    crate::rom::RomModel::from_parts(header, &payload)
}
