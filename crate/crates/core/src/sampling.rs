//! Seeded Gaussian sample grids for the nested estimator.
//!
//! Each outer sample `j` owns its own ChaCha stream keyed by
//! `(master seed, pool, j)`, so the normals do not depend on scheduling and
//! the first `M₁` samples of an `M₀`-grid coincide with an `M₁`-grid drawn
//! from the same seed.
//!
//! Displacements are stored relative to the evaluation point and indexed by
//! elapsed time: level `i` means `i·Δt` after `t`, so level 0 is zero.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::BaselineModel;

/// Samples per parallel work unit. Fixed so results do not depend on the
/// number of workers.
pub(crate) const CHUNK: usize = 1024;

/// Upper bound on stored path partial sums (doubles).
const MAX_PATH_STORAGE: usize = 1 << 27;

/// Uniform subdivision `t_i = t + i·Δt`, `Δt = (T − t)/N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    t_start: f64,
    t_end: f64,
    n_steps: usize,
    dt: f64,
}

impl TimeGrid {
    pub fn new(t: f64, horizon: f64, n_steps: usize) -> Result<Self> {
        if !(t.is_finite() && horizon.is_finite() && t < horizon) {
            return Err(Error::arg(format!("need t < T, got t = {t}, T = {horizon}")));
        }
        if n_steps == 0 {
            return Err(Error::arg("number of time steps must be at least 1"));
        }
        Ok(Self {
            t_start: t,
            t_end: horizon,
            n_steps,
            dt: (horizon - t) / n_steps as f64,
        })
    }

    pub fn t_start(&self) -> f64 {
        self.t_start
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Absolute time of node `i`; the last node is exactly `T`.
    pub fn node(&self, i: usize) -> f64 {
        if i == self.n_steps {
            self.t_end
        } else {
            self.t_start + i as f64 * self.dt
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|i| self.node(i)).collect()
    }

    /// Time elapsed between the start and node `i`.
    pub fn elapsed(&self, i: usize) -> f64 {
        if i == self.n_steps {
            self.t_end - self.t_start
        } else {
            i as f64 * self.dt
        }
    }
}

/// How the displacements at different levels relate for a fixed sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMode {
    /// One normal `W(j)` scaled by `√t_i` at every level.
    #[default]
    Scaled,
    /// Independent Gaussian increments (Brownian paths).
    Path,
}

/// Where the inner averages draw their samples from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InnerPool {
    /// The first `M₁` outer samples.
    #[default]
    Shared,
    /// A separate stream of `M₁` samples.
    Independent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SamplingOptions {
    pub mode: SamplingMode,
    pub inner_pool: InnerPool,
}

const OUTER_POOL: u64 = 0;
const INNER_POOL: u64 = 1;

fn pool_key(seed: u64, pool: u64) -> [u8; 32] {
    // splitmix64 expansion of (seed, pool)
    let mut state = seed ^ pool.wrapping_mul(0xD1B5_4A32_D192_ED03);
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
        chunk.copy_from_slice(&z.to_le_bytes());
    }
    key
}

/// Fills `out` with standard normals from the stream `(key, index)`.
fn fill_normals(key: &[u8; 32], index: u64, out: &mut [f64]) {
    let mut rng = ChaCha8Rng::from_seed(*key);
    rng.set_stream(index);
    for v in out.iter_mut() {
        *v = StandardNormal.sample(&mut rng);
    }
}

/// One pool of samples (outer or independent inner).
#[derive(Debug, Clone)]
struct Pool {
    /// `count × d` standardized terminal normals `W(j)`.
    normals: Vec<f64>,
    /// Scaled mode: `σ·W(j)` for the first `m1` samples (`m1 × d`).
    /// Path mode: `σ·S_i(j)` for `i = 0..=N`, laid out `[i][j][k]`.
    scaled: Vec<f64>,
}

/// The normals and displacements of one estimator run.
#[derive(Debug, Clone)]
pub struct SampleGrid {
    grid: TimeGrid,
    d: usize,
    drift: Vec<f64>,
    vol: Vec<f64>,
    m0: usize,
    m1: usize,
    seed: u64,
    options: SamplingOptions,
    outer: Pool,
    inner: Option<Pool>,
}

impl SampleGrid {
    /// Draws `M₀` normals (and the `M₁` inner pool) for `model` on `grid`.
    pub fn draw(
        model: &BaselineModel,
        grid: &TimeGrid,
        m0: usize,
        m1: usize,
        seed: u64,
        options: SamplingOptions,
    ) -> Result<Self> {
        if m1 == 0 {
            return Err(Error::arg("M1 must be at least 1"));
        }
        if m0 < m1 {
            return Err(Error::arg(format!("need M0 >= M1, got M0 = {m0}, M1 = {m1}")));
        }
        if (grid.t_end() - model.horizon()).abs() > 1e-12 * model.horizon().max(1.0) {
            return Err(Error::arg("time grid does not end at the model horizon"));
        }
        let d = model.dim();
        let n = grid.n_steps();
        if options.mode == SamplingMode::Path && m1 * (n + 1) * d > MAX_PATH_STORAGE {
            return Err(Error::arg(format!(
                "path mode would store {} doubles; reduce M1, N or d",
                m1 * (n + 1) * d
            )));
        }
        let mut this = Self {
            grid: grid.clone(),
            d,
            drift: model.drift().to_vec(),
            vol: model.vol().to_vec(),
            m0,
            m1,
            seed,
            options,
            outer: Pool {
                normals: Vec::new(),
                scaled: Vec::new(),
            },
            inner: None,
        };
        this.outer = this.build_pool(OUTER_POOL, m0);
        if options.inner_pool == InnerPool::Independent {
            this.inner = Some(this.build_pool(INNER_POOL, m1));
        }
        Ok(this)
    }

    fn build_pool(&self, pool: u64, count: usize) -> Pool {
        let d = self.d;
        let n = self.grid.n_steps();
        let key = pool_key(self.seed, pool);
        let mut normals = vec![0.0; count * d];
        match self.options.mode {
            SamplingMode::Scaled => {
                normals
                    .par_chunks_mut(CHUNK * d)
                    .enumerate()
                    .for_each(|(c, block)| {
                        for (r, row) in block.chunks_exact_mut(d).enumerate() {
                            fill_normals(&key, (c * CHUNK + r) as u64, row);
                        }
                    });
                let mut scaled = vec![0.0; self.m1 * d];
                for (w, out) in normals.chunks_exact(d).zip(scaled.chunks_exact_mut(d)) {
                    self.mat_vec(w, out);
                }
                Pool { normals, scaled }
            }
            SamplingMode::Path => {
                let inv_sqrt_n = 1.0 / (n as f64).sqrt();
                let m1 = self.m1;
                let mut sums = vec![0.0; m1 * (n + 1) * d];
                normals
                    .par_chunks_mut(CHUNK * d)
                    .enumerate()
                    .for_each(|(c, block)| {
                        let mut incr = vec![0.0; n * d];
                        for (r, row) in block.chunks_exact_mut(d).enumerate() {
                            fill_normals(&key, (c * CHUNK + r) as u64, &mut incr);
                            row.fill(0.0);
                            for step in incr.chunks_exact(d) {
                                for (acc, z) in row.iter_mut().zip(step) {
                                    *acc += z;
                                }
                            }
                            for v in row.iter_mut() {
                                *v *= inv_sqrt_n;
                            }
                        }
                    });
                // partial sums for the inner/outer pool, regenerated per sample
                let mut incr = vec![0.0; n * d];
                let mut running = vec![0.0; d];
                let mut tmp = vec![0.0; d];
                for j in 0..m1 {
                    fill_normals(&key, j as u64, &mut incr);
                    running.fill(0.0);
                    for i in 0..=n {
                        self.mat_vec(&running, &mut tmp);
                        let at = (i * m1 + j) * d;
                        sums[at..at + d].copy_from_slice(&tmp);
                        if i < n {
                            for (acc, z) in running.iter_mut().zip(&incr[i * d..(i + 1) * d]) {
                                *acc += z;
                            }
                        }
                    }
                }
                Pool { normals, scaled: sums }
            }
        }
    }

    fn mat_vec(&self, w: &[f64], out: &mut [f64]) {
        let d = self.d;
        for (k, o) in out.iter_mut().enumerate() {
            *o = self.vol[k * d..(k + 1) * d]
                .iter()
                .zip(w)
                .map(|(s, z)| s * z)
                .sum();
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn m0(&self) -> usize {
        self.m0
    }

    pub fn m1(&self) -> usize {
        self.m1
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn options(&self) -> SamplingOptions {
        self.options
    }

    /// Standardized normal `W(j)` of the outer pool.
    pub fn normal(&self, j: usize) -> &[f64] {
        &self.outer.normals[j * self.d..(j + 1) * self.d]
    }

    /// The full `M₀ × d` normal block, row-major.
    pub fn normals(&self) -> &[f64] {
        &self.outer.normals
    }

    /// Writes `𝒳_N(j)`, the displacement over the whole remaining horizon.
    pub fn terminal_displacement(&self, j: usize, out: &mut [f64]) {
        let tau = self.grid.elapsed(self.grid.n_steps());
        self.mat_vec(self.normal(j), out);
        let sq = tau.sqrt();
        for (o, b) in out.iter_mut().zip(&self.drift) {
            *o = b * tau + *o * sq;
        }
    }

    /// Writes `𝒳_i(j)` for any outer sample `j < M₀`.
    pub fn displacement(&self, i: usize, j: usize, out: &mut [f64]) {
        assert!(i <= self.grid.n_steps() && j < self.m0, "index out of range");
        let e = self.grid.elapsed(i);
        match self.options.mode {
            SamplingMode::Scaled => {
                self.mat_vec(self.normal(j), out);
                let sq = e.sqrt();
                for (o, b) in out.iter_mut().zip(&self.drift) {
                    *o = b * e + *o * sq;
                }
            }
            SamplingMode::Path if j < self.m1 => {
                self.pool_level(&self.outer, i, out, j..j + 1);
            }
            SamplingMode::Path => {
                let d = self.d;
                let n = self.grid.n_steps();
                let mut incr = vec![0.0; n * d];
                fill_normals(&pool_key(self.seed, OUTER_POOL), j as u64, &mut incr);
                let mut running = vec![0.0; d];
                for step in incr.chunks_exact(d).take(i) {
                    for (acc, z) in running.iter_mut().zip(step) {
                        *acc += z;
                    }
                }
                self.mat_vec(&running, out);
                let sq = self.grid.dt().sqrt();
                for (o, b) in out.iter_mut().zip(&self.drift) {
                    *o = b * e + *o * sq;
                }
            }
        }
    }

    /// Level-`i` displacements of the first `M₁` outer samples (`M₁ × d`).
    pub fn outer_level(&self, i: usize, out: &mut [f64]) {
        self.pool_level(&self.outer, i, out, 0..self.m1);
    }

    /// Level-`i` displacements of the inner pool (`M₁ × d`).
    pub fn inner_level(&self, i: usize, out: &mut [f64]) {
        let pool = self.inner.as_ref().unwrap_or(&self.outer);
        self.pool_level(pool, i, out, 0..self.m1);
    }

    fn pool_level(&self, pool: &Pool, i: usize, out: &mut [f64], rows: std::ops::Range<usize>) {
        let d = self.d;
        let e = self.grid.elapsed(i);
        assert_eq!(out.len(), rows.len() * d);
        let (src, scale) = match self.options.mode {
            SamplingMode::Scaled => (&pool.scaled[rows.start * d..rows.end * d], e.sqrt()),
            SamplingMode::Path => {
                let at = i * self.m1 * d;
                (
                    &pool.scaled[at + rows.start * d..at + rows.end * d],
                    self.grid.dt().sqrt(),
                )
            }
        };
        for (o_row, s_row) in out.chunks_exact_mut(d).zip(src.chunks_exact(d)) {
            for ((o, s), b) in o_row.iter_mut().zip(s_row).zip(&self.drift) {
                *o = b * e + s * scale;
            }
        }
    }

    /// Writes the outer normal block in the binary audit format.
    pub fn dump_normals(&self, path: &Path) -> Result<()> {
        NormalBlock {
            d: self.d,
            m0: self.m0,
            seed: self.seed,
            data: self.outer.normals.clone(),
        }
        .write(path)
    }
}

/// Normal block dump: `b"KSNB"`, version `u32`, `d`, `M₀`, seed as `u64`,
/// then `M₀·d` row-major `f64`, all little-endian.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalBlock {
    pub d: usize,
    pub m0: usize,
    pub seed: u64,
    pub data: Vec<f64>,
}

pub const NORMALS_MAGIC: [u8; 4] = *b"KSNB";
pub const NORMALS_VERSION: u32 = 1;

impl NormalBlock {
    pub fn write(&self, path: &Path) -> Result<()> {
        let io = |e| Error::io(path, e);
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        w.write_all(&NORMALS_MAGIC).map_err(io)?;
        w.write_all(&NORMALS_VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(self.d as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&(self.m0 as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&self.seed.to_le_bytes()).map_err(io)?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let io = |e| Error::io(path, e);
        let mut r = BufReader::new(File::open(path).map_err(io)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if magic != NORMALS_MAGIC {
            return Err(Error::Validation(format!("{}: not a normal block", path.display())));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(io)?;
        let version = u32::from_le_bytes(b4);
        if version != NORMALS_VERSION {
            return Err(Error::Validation(format!("unsupported normal block version {version}")));
        }
        let mut b8 = [0u8; 8];
        let mut next = |r: &mut BufReader<File>| -> Result<u64> {
            r.read_exact(&mut b8).map_err(io)?;
            Ok(u64::from_le_bytes(b8))
        };
        let d = next(&mut r)? as usize;
        let m0 = next(&mut r)? as usize;
        let seed = next(&mut r)?;
        let len = d
            .checked_mul(m0)
            .ok_or_else(|| Error::Validation("normal block header overflows".into()))?;
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            r.read_exact(&mut b8).map_err(io)?;
            data.push(f64::from_le_bytes(b8));
        }
        Ok(Self { d, m0, seed, data })
    }
}
