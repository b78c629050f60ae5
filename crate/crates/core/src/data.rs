//! Synthetic steady-diffusion datasets with known ground truth.
//!
//! Three sample modes:
//! * `FixedSource`: regular grid, random coefficient field, fixed sine
//!   source, solution from a 5-point finite-difference solve (CG).
//! * `RandomSource`: as above with a random smooth source shipped as a
//!   second input channel.
//! * `ManufacturedDistorted`: smoothly distorted mesh; the solution field is
//!   drawn analytically and the matching source `f = -div(a grad u)` is
//!   computed in closed form, so the triple is exact on any mesh.

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::mesh::Mesh;
use crate::rng::{rng_substream, CatoRng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

pub const MANIFEST_NAME: &str = "manifest.json";
pub const PC_MAGIC: &[u8; 4] = b"CATP";

// ---------------------------------------------------------------------------
// Analytic fields
// ---------------------------------------------------------------------------

/// Truncated random Fourier sum `g(x, y) = sum amp * cos(pi kx x + px) *
/// cos(pi ky y + py)`; value, gradient and Laplacian in closed form.
#[derive(Clone, Debug)]
pub struct FourierField {
    modes: Vec<(f64, f64, f64, f64, f64)>, // (kx, ky, amp, px, py)
}

impl FourierField {
    pub fn random(rng: &mut CatoRng, max_mode: usize, decay: f64) -> Self {
        let mut modes = Vec::new();
        for kx in 0..=max_mode {
            for ky in 0..=max_mode {
                if kx == 0 && ky == 0 {
                    continue;
                }
                let amp: f64 = rng.sample::<f64, _>(StandardNormal)
                    / (1.0 + (kx * kx + ky * ky) as f64).powf(decay);
                let px = rng.gen_range(0.0..std::f64::consts::TAU);
                let py = rng.gen_range(0.0..std::f64::consts::TAU);
                modes.push((kx as f64, ky as f64, amp, px, py));
            }
        }
        FourierField { modes }
    }

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        let pi = std::f64::consts::PI;
        self.modes
            .iter()
            .map(|&(kx, ky, a, px, py)| a * (pi * kx * x + px).cos() * (pi * ky * y + py).cos())
            .sum()
    }

    pub fn grad(&self, x: f64, y: f64) -> (f64, f64) {
        let pi = std::f64::consts::PI;
        let mut gx = 0.0;
        let mut gy = 0.0;
        for &(kx, ky, a, px, py) in &self.modes {
            let cx = (pi * kx * x + px).cos();
            let sx = (pi * kx * x + px).sin();
            let cy = (pi * ky * y + py).cos();
            let sy = (pi * ky * y + py).sin();
            gx -= a * pi * kx * sx * cy;
            gy -= a * pi * ky * cx * sy;
        }
        (gx, gy)
    }
}

/// Positive coefficient field `a = 1 + (contrast - 1) * normalized(g)`,
/// normalized over the supplied evaluation points.
#[derive(Clone, Debug)]
pub struct CoeffField {
    field: FourierField,
    offset: f64,
    scale: f64, // a = 1 + scale * (g - offset)
}

impl CoeffField {
    pub fn random(rng: &mut CatoRng, contrast: f64, points: &[(f64, f64)]) -> Result<Self> {
        if contrast < 1.0 {
            return Err(Error::Config(format!("contrast must be >= 1, got {contrast}")));
        }
        let field = FourierField::random(rng, 3, 1.0);
        let vals: Vec<f64> = points.iter().map(|&(x, y)| field.eval(x, y)).collect();
        let gmin = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let gmax = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let scale = if contrast > 1.0 && gmax - gmin > 1e-14 {
            (contrast - 1.0) / (gmax - gmin)
        } else {
            0.0
        };
        Ok(CoeffField { field, offset: gmin, scale })
    }

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        1.0 + self.scale * (self.field.eval(x, y) - self.offset)
    }

    pub fn grad(&self, x: f64, y: f64) -> (f64, f64) {
        let (gx, gy) = self.field.grad(x, y);
        (self.scale * gx, self.scale * gy)
    }
}

/// Smooth random coefficient field sampled on a mesh: values in
/// `[1, contrast]` with both ends attained, deterministic in the seed.
pub fn gen_coefficient<F: Scalar>(seed: u64, h: usize, w: usize, contrast: f64) -> Result<Tensor<F>> {
    let mesh = Mesh::<f64>::regular(h, w)?;
    let points: Vec<(f64, f64)> = mesh.coords.data.chunks(2).map(|p| (p[0], p[1])).collect();
    let mut rng = rng_substream(seed, "coeff", 0);
    let coeff = CoeffField::random(&mut rng, contrast, &points)?;
    let data: Vec<F> = points.iter().map(|&(x, y)| F::c(coeff.eval(x, y))).collect();
    Tensor::new(vec![h, w], data)
}

/// Manufactured solution: a small sine series vanishing on the unit-square
/// boundary, with analytic gradient and Laplacian.
#[derive(Clone, Debug)]
pub struct SineSolution {
    modes: Vec<(f64, f64, f64)>, // (k, l, amp)
}

impl SineSolution {
    pub fn random(rng: &mut CatoRng) -> Self {
        let mut modes = Vec::new();
        for k in 1..=2 {
            for l in 1..=2 {
                let amp: f64 =
                    rng.sample::<f64, _>(StandardNormal) / ((k * k + l * l) as f64);
                modes.push((k as f64, l as f64, amp));
            }
        }
        SineSolution { modes }
    }

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        let pi = std::f64::consts::PI;
        self.modes.iter().map(|&(k, l, a)| a * (pi * k * x).sin() * (pi * l * y).sin()).sum()
    }

    pub fn grad(&self, x: f64, y: f64) -> (f64, f64) {
        let pi = std::f64::consts::PI;
        let mut gx = 0.0;
        let mut gy = 0.0;
        for &(k, l, a) in &self.modes {
            gx += a * pi * k * (pi * k * x).cos() * (pi * l * y).sin();
            gy += a * pi * l * (pi * k * x).sin() * (pi * l * y).cos();
        }
        (gx, gy)
    }

    pub fn laplacian(&self, x: f64, y: f64) -> f64 {
        let pi = std::f64::consts::PI;
        self.modes
            .iter()
            .map(|&(k, l, a)| {
                -a * pi * pi * (k * k + l * l) * (pi * k * x).sin() * (pi * l * y).sin()
            })
            .sum()
    }
}

/// `f = -div(a grad u) = -(grad a . grad u + a lap u)` for analytic `a`, `u`.
pub fn manufactured_source(coeff: &CoeffField, sol: &SineSolution, x: f64, y: f64) -> f64 {
    let (ax, ay) = coeff.grad(x, y);
    let (ux, uy) = sol.grad(x, y);
    -(ax * ux + ay * uy + coeff.eval(x, y) * sol.laplacian(x, y))
}

// ---------------------------------------------------------------------------
// Finite-difference Darcy solve
// ---------------------------------------------------------------------------

/// Solve `-div(a grad u) = f` with zero Dirichlet boundary on the regular
/// grid behind `mesh`, by a flux-form 5-point scheme and conjugate gradients
/// to relative residual `1e-10`.
pub fn solve_darcy<F: Scalar>(a: &Tensor<F>, mesh: &Mesh<F>, f_source: &Tensor<F>) -> Result<Tensor<F>> {
    let (h, w) = (mesh.h, mesh.w);
    if a.shape != [h, w] || f_source.shape != [h, w] {
        return Err(Error::Shape {
            op: "solve_darcy",
            detail: format!("fields {:?}/{:?} vs mesh {h}x{w}", a.shape, f_source.shape),
        });
    }
    if h < 3 || w < 3 {
        return Err(Error::Config("solver needs at least a 3x3 grid".into()));
    }
    // The scheme assumes the regular unit-square layout.
    let reference = Mesh::<F>::regular(h, w)?;
    for (p, q) in mesh.coords.data.iter().zip(&reference.coords.data) {
        if (*p - *q).abs().to_f64_c() > 1e-12 {
            return Err(Error::Config("solve_darcy requires a regular grid".into()));
        }
    }
    if a.data.iter().any(|v| *v <= F::zero()) {
        return Err(Error::Config("coefficient field must be strictly positive".into()));
    }

    let av: Vec<f64> = a.map_f64();
    let fv: Vec<f64> = f_source.map_f64();
    let hx = 1.0 / (w - 1) as f64;
    let hy = 1.0 / (h - 1) as f64;
    let (ih, iw) = (h - 2, w - 2); // interior extent
    let n = ih * iw;
    let idx = |i: usize, j: usize| (i - 1) * iw + (j - 1);

    // Edge coefficients by arithmetic mean.
    let ax = |i: usize, j: usize, jn: usize| 0.5 * (av[i * w + j] + av[i * w + jn]);
    let ay = |i: usize, inn: usize, j: usize| 0.5 * (av[i * w + j] + av[inn * w + j]);

    let matvec = |x: &[f64], out: &mut [f64]| {
        for i in 1..h - 1 {
            for j in 1..w - 1 {
                let c = x[idx(i, j)];
                let east = ax(i, j, j + 1);
                let west = ax(i, j, j - 1);
                let north = ay(i, i + 1, j);
                let south = ay(i, i - 1, j);
                let mut acc = (east + west) / (hx * hx) * c + (north + south) / (hy * hy) * c;
                if j + 1 < w - 1 {
                    acc -= east / (hx * hx) * x[idx(i, j + 1)];
                }
                if j > 1 {
                    acc -= west / (hx * hx) * x[idx(i, j - 1)];
                }
                if i + 1 < h - 1 {
                    acc -= north / (hy * hy) * x[idx(i + 1, j)];
                }
                if i > 1 {
                    acc -= south / (hy * hy) * x[idx(i - 1, j)];
                }
                out[idx(i, j)] = acc;
            }
        }
    };

    let mut b = vec![0.0f64; n];
    for i in 1..h - 1 {
        for j in 1..w - 1 {
            b[idx(i, j)] = fv[i * w + j];
        }
    }
    let bnorm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut u = vec![0.0f64; n];
    if bnorm > 0.0 {
        let mut r = b.clone();
        let mut p = r.clone();
        let mut rs: f64 = r.iter().map(|v| v * v).sum();
        let mut apv = vec![0.0f64; n];
        let cap = 20 * n.max(100);
        let tol = 1e-10 * bnorm;
        let mut converged = rs.sqrt() <= tol;
        let mut it = 0;
        while !converged && it < cap {
            matvec(&p, &mut apv);
            let pap: f64 = p.iter().zip(&apv).map(|(x, y)| x * y).sum();
            if pap <= 0.0 {
                return Err(Error::Solver("lost positive definiteness".into()));
            }
            let alpha = rs / pap;
            for k in 0..n {
                u[k] += alpha * p[k];
                r[k] -= alpha * apv[k];
            }
            let rs_new: f64 = r.iter().map(|v| v * v).sum();
            converged = rs_new.sqrt() <= tol;
            let beta = rs_new / rs;
            rs = rs_new;
            for k in 0..n {
                p[k] = r[k] + beta * p[k];
            }
            it += 1;
        }
        if !converged {
            return Err(Error::Solver(format!(
                "conjugate gradients: residual {:.3e} after {} iterations",
                rs.sqrt() / bnorm,
                it
            )));
        }
    }

    let mut full = vec![F::zero(); h * w];
    for i in 1..h - 1 {
        for j in 1..w - 1 {
            full[i * w + j] = F::c(u[idx(i, j)]);
        }
    }
    Tensor::new(vec![h, w], full)
}

/// Smooth sinusoidal warp of the regular grid; the square boundary is kept
/// fixed and fold-over is rejected by a discrete Jacobian scan.
pub fn distort_mesh<F: Scalar>(h: usize, w: usize, amplitude: f64) -> Result<Mesh<F>> {
    if amplitude < 0.0 {
        return Err(Error::Config("distortion amplitude must be >= 0".into()));
    }
    let pi = std::f64::consts::PI;
    let mut data = Vec::with_capacity(h * w * 2);
    for i in 0..h {
        for j in 0..w {
            let s = j as f64 / (w - 1) as f64;
            let t = i as f64 / (h - 1) as f64;
            let x = s + amplitude * (pi * s).sin() * (2.0 * pi * t).sin();
            let y = t + amplitude * (2.0 * pi * s).sin() * (pi * t).sin();
            data.push(F::c(x));
            data.push(F::c(y));
        }
    }
    let mesh = Mesh::new(h, w, Tensor::new(vec![h * w, 2], data)?)?;
    let min_det = min_jacobian_det(&mesh);
    if min_det <= 0.0 {
        return Err(Error::Config(format!(
            "mesh folds over at amplitude {amplitude} (min det {min_det:.3e})"
        )));
    }
    Ok(mesh)
}

/// Smallest centered-difference Jacobian determinant over interior nodes.
pub fn min_jacobian_det<F: Scalar>(mesh: &Mesh<F>) -> f64 {
    let mut min_det = f64::INFINITY;
    for i in 1..mesh.h - 1 {
        for j in 1..mesh.w - 1 {
            let (xn, yn) = mesh.coord(i + 1, j);
            let (xs, ys) = mesh.coord(i - 1, j);
            let (xe, ye) = mesh.coord(i, j + 1);
            let (xw, yw) = mesh.coord(i, j - 1);
            let a = (xn - xs).to_f64_c();
            let b = (yn - ys).to_f64_c();
            let c = (xe - xw).to_f64_c();
            let d = (ye - yw).to_f64_c();
            // Row index i runs with t, column j with s, so
            // det(d(x,y)/d(s,t)) is proportional to c*b - a*d.
            min_det = min_det.min(c * b - a * d);
        }
    }
    min_det
}

// ---------------------------------------------------------------------------
// Dataset assembly
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataMode {
    /// Coefficient input only; fixed sine source; CG-solved targets.
    FixedSource,
    /// Coefficient and random source inputs; CG-solved targets.
    RandomSource,
    /// Distorted mesh with analytic (manufactured) targets.
    ManufacturedDistorted,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub h: usize,
    pub w: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub contrast: f64,
    pub mode: DataMode,
    pub distortion_amplitude: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            h: 32,
            w: 32,
            n_train: 512,
            n_test: 64,
            contrast: 3.0,
            mode: DataMode::FixedSource,
            distortion_amplitude: 0.08,
        }
    }
}

impl DataConfig {
    pub fn feat_dim(&self) -> usize {
        match self.mode {
            DataMode::FixedSource => 1,
            DataMode::RandomSource | DataMode::ManufacturedDistorted => 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.h < 3 || self.w < 3 {
            return Err(Error::Config("dataset grid must be at least 3x3".into()));
        }
        if self.contrast < 1.0 {
            return Err(Error::Config("contrast must be >= 1".into()));
        }
        Ok(())
    }
}

/// One training example: per-node input channels and the target field.
#[derive(Clone, Debug)]
pub struct Sample<F: Scalar> {
    pub feats: Tensor<F>,  // [N, d_f]
    pub target: Tensor<F>, // [H, W]
}

/// Per-channel normalization statistics of the training inputs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FeatStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatStats {
    pub fn compute<F: Scalar>(samples: &[Sample<F>], d_f: usize) -> Self {
        let mut mean = vec![0.0; d_f];
        let mut sq = vec![0.0; d_f];
        let mut count = 0usize;
        for s in samples {
            for row in s.feats.data.chunks(d_f) {
                for (c, v) in row.iter().enumerate() {
                    let v = v.to_f64_c();
                    mean[c] += v;
                    sq[c] += v * v;
                }
            }
            count += s.feats.data.len() / d_f;
        }
        let n = count.max(1) as f64;
        let std = mean
            .iter()
            .zip(&sq)
            .map(|(m, s)| {
                let mu = m / n;
                ((s / n - mu * mu).max(0.0)).sqrt().max(1e-12)
            })
            .collect();
        mean.iter_mut().for_each(|m| *m /= n);
        FeatStats { mean, std }
    }

    pub fn normalize<F: Scalar>(&self, feats: &Tensor<F>) -> Tensor<F> {
        let d_f = self.mean.len();
        let data = feats
            .data
            .chunks(d_f)
            .flat_map(|row| {
                row.iter()
                    .enumerate()
                    .map(|(c, v)| F::c((v.to_f64_c() - self.mean[c]) / self.std[c]))
            })
            .collect();
        Tensor { shape: feats.shape.clone(), data, grad: None }
    }
}

#[derive(Clone, Debug)]
pub struct Dataset<F: Scalar> {
    pub mesh: Mesh<F>,
    pub train: Vec<Sample<F>>,
    pub test: Vec<Sample<F>>,
    pub feat_dim: usize,
    pub stats: FeatStats,
    pub mode: DataMode,
}

/// The fixed source used by `FixedSource` mode.
pub fn fixed_source<F: Scalar>(mesh: &Mesh<F>) -> Tensor<F> {
    let pi = std::f64::consts::PI;
    mesh.field(|x, y| {
        F::c(2.0 * pi * pi * (pi * x.to_f64_c()).sin() * (pi * y.to_f64_c()).sin())
    })
}

fn generate_sample<F: Scalar>(
    cfg: &DataConfig,
    mesh: &Mesh<F>,
    seed: u64,
    index: u64,
) -> Result<Sample<F>> {
    let (h, w) = (cfg.h, cfg.w);
    let n = h * w;
    let points: Vec<(f64, f64)> =
        mesh.coords.data.chunks(2).map(|p| (p[0].to_f64_c(), p[1].to_f64_c())).collect();
    let mut rng = rng_substream(seed, "sample", index);
    let coeff = CoeffField::random(&mut rng, cfg.contrast, &points)?;
    let a_vals: Vec<f64> = points.iter().map(|&(x, y)| coeff.eval(x, y)).collect();

    match cfg.mode {
        DataMode::FixedSource => {
            let a = Tensor::new(vec![h, w], a_vals.iter().map(|&v| F::c(v)).collect())?;
            let f = fixed_source(mesh);
            let u = solve_darcy(&a, mesh, &f)?;
            let feats = Tensor::new(vec![n, 1], a_vals.iter().map(|&v| F::c(v)).collect())?;
            Ok(Sample { feats, target: u })
        }
        DataMode::RandomSource => {
            let a = Tensor::new(vec![h, w], a_vals.iter().map(|&v| F::c(v)).collect())?;
            let src = FourierField::random(&mut rng, 2, 0.5);
            let f_vals: Vec<f64> =
                points.iter().map(|&(x, y)| 30.0 * src.eval(x, y)).collect();
            let f = Tensor::new(vec![h, w], f_vals.iter().map(|&v| F::c(v)).collect())?;
            let u = solve_darcy(&a, mesh, &f)?;
            let mut feats = Vec::with_capacity(2 * n);
            for k in 0..n {
                feats.push(F::c(a_vals[k]));
                feats.push(F::c(f_vals[k]));
            }
            Ok(Sample { feats: Tensor::new(vec![n, 2], feats)?, target: u })
        }
        DataMode::ManufacturedDistorted => {
            let sol = SineSolution::random(&mut rng);
            let mut feats = Vec::with_capacity(2 * n);
            let mut target = Vec::with_capacity(n);
            for &(x, y) in &points {
                feats.push(F::c(coeff.eval(x, y)));
                feats.push(F::c(manufactured_source(&coeff, &sol, x, y)));
                target.push(F::c(sol.eval(x, y)));
            }
            Ok(Sample {
                feats: Tensor::new(vec![n, 2], feats)?,
                target: Tensor::new(vec![h, w], target)?,
            })
        }
    }
}

/// Build the full dataset in memory, deterministically in `seed`.
pub fn build_dataset<F: Scalar>(cfg: &DataConfig, seed: u64) -> Result<Dataset<F>> {
    cfg.validate()?;
    let mesh = match cfg.mode {
        DataMode::ManufacturedDistorted => distort_mesh(cfg.h, cfg.w, cfg.distortion_amplitude)?,
        _ => Mesh::regular(cfg.h, cfg.w)?,
    };
    let total = cfg.n_train + cfg.n_test;
    let samples: Vec<Result<Sample<F>>> = {
        use rayon::prelude::*;
        (0..total)
            .into_par_iter()
            .map(|i| generate_sample(cfg, &mesh, seed, i as u64))
            .collect()
    };
    let mut all = Vec::with_capacity(total);
    for s in samples {
        all.push(s?);
    }
    let test = all.split_off(cfg.n_train);
    let stats = FeatStats::compute(&all, cfg.feat_dim());
    Ok(Dataset { mesh, train: all, test, feat_dim: cfg.feat_dim(), stats, mode: cfg.mode })
}

// ---------------------------------------------------------------------------
// Disk layout: one tensor file per field per sample plus a JSON manifest.
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub split: String,
    pub index: usize,
    pub feats: String,
    pub target: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub seed: u64,
    pub config: DataConfig,
    pub mesh_file: String,
    pub stats: FeatStats,
    pub entries: Vec<ManifestEntry>,
}

/// Write a dataset directory; the manifest is written last as the
/// completion marker.
pub fn save_dataset<F: Scalar>(dir: &Path, cfg: &DataConfig, seed: u64, ds: &Dataset<F>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mesh_file = "mesh.cato1".to_string();
    checkpoint::save_tensor(&dir.join(&mesh_file), "mesh", &ds.mesh.coords)?;
    let mut entries = Vec::new();
    for (split, samples) in [("train", &ds.train), ("test", &ds.test)] {
        for (i, s) in samples.iter().enumerate() {
            let feats = format!("{split}_{i:04}.feats.cato1");
            let target = format!("{split}_{i:04}.u.cato1");
            checkpoint::save_tensor(&dir.join(&feats), "feats", &s.feats)?;
            checkpoint::save_tensor(&dir.join(&target), "u", &s.target)?;
            entries.push(ManifestEntry { split: split.into(), index: i, feats, target });
        }
    }
    let manifest = Manifest {
        format: "cato-dataset-v1".into(),
        seed,
        config: cfg.clone(),
        mesh_file,
        stats: ds.stats.clone(),
        entries,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(dir.join(MANIFEST_NAME), json)?;
    Ok(())
}

pub fn load_dataset<F: Scalar>(dir: &Path) -> Result<Dataset<F>> {
    let manifest_path = dir.join(MANIFEST_NAME);
    let text = std::fs::read_to_string(&manifest_path)
        .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", manifest_path.display())))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let (_, coords) = checkpoint::load_tensor::<F>(&dir.join(&manifest.mesh_file))?;
    let mesh = Mesh::new(manifest.config.h, manifest.config.w, coords)?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for e in &manifest.entries {
        let (_, feats) = checkpoint::load_tensor::<F>(&dir.join(&e.feats))?;
        let (_, target) = checkpoint::load_tensor::<F>(&dir.join(&e.target))?;
        let sample = Sample { feats, target };
        match e.split.as_str() {
            "train" => train.push(sample),
            "test" => test.push(sample),
            other => return Err(Error::Dataset(format!("unknown split `{other}`"))),
        }
    }
    Ok(Dataset {
        mesh,
        train,
        test,
        feat_dim: manifest.config.feat_dim(),
        stats: manifest.stats,
        mode: manifest.config.mode,
    })
}

// ---------------------------------------------------------------------------
// Point-cloud sample files
// ---------------------------------------------------------------------------

/// Write a `CATP` point-cloud sample: magic, `n`, `d_f`, coords, feats.
pub fn save_pointcloud<F: Scalar>(path: &Path, coords: &Tensor<F>, feats: &Tensor<F>) -> Result<()> {
    if coords.rank() != 2 || coords.shape[1] != 2 {
        return Err(Error::Shape { op: "save_pointcloud", detail: "coords must be [N, 2]".into() });
    }
    let n = coords.shape[0];
    let d_f = if feats.numel() == 0 { 0 } else { feats.shape[1] };
    if d_f > 0 && feats.shape != [n, d_f] {
        return Err(Error::Shape { op: "save_pointcloud", detail: "feats must be [N, d_f]".into() });
    }
    let mut fh = std::io::BufWriter::new(std::fs::File::create(path)?);
    fh.write_all(PC_MAGIC)?;
    fh.write_all(&(n as u64).to_le_bytes())?;
    fh.write_all(&(d_f as u64).to_le_bytes())?;
    for v in &coords.data {
        fh.write_all(&v.to_f64_c().to_le_bytes())?;
    }
    for v in &feats.data {
        fh.write_all(&v.to_f64_c().to_le_bytes())?;
    }
    fh.flush()?;
    Ok(())
}

pub fn load_pointcloud<F: Scalar>(path: &Path) -> Result<(Tensor<F>, Tensor<F>)> {
    let mut fh = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    fh.read_exact(&mut magic)?;
    if &magic != PC_MAGIC {
        return Err(Error::Dataset(format!("bad point-cloud magic {magic:?}")));
    }
    let mut buf = [0u8; 8];
    fh.read_exact(&mut buf)?;
    let n = u64::from_le_bytes(buf) as usize;
    fh.read_exact(&mut buf)?;
    let d_f = u64::from_le_bytes(buf) as usize;
    let mut read_vec = |count: usize| -> Result<Vec<F>> {
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            fh.read_exact(&mut buf)?;
            out.push(F::c(f64::from_le_bytes(buf)));
        }
        Ok(out)
    };
    let coords = Tensor::new(vec![n, 2], read_vec(2 * n)?)?;
    let feats = Tensor::new(vec![n, d_f], read_vec(n * d_f)?)?;
    Ok((coords, feats))
}

/// File names used by the point-cloud variant of a dataset directory.
pub fn pc_file_names(split: &str, index: usize) -> (String, String) {
    (format!("pc_{split}_{index:04}.catp"), format!("pc_{split}_{index:04}.u.cato1"))
}

/// Scatter a grid dataset into point-cloud samples (deterministic node
/// shuffle per sample) and write them alongside the manifest directory.
pub fn save_pointcloud_dataset<F: Scalar>(dir: &Path, seed: u64, ds: &Dataset<F>) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let n = ds.mesh.nodes();
    let mut written = Vec::new();
    for (split, samples) in [("train", &ds.train), ("test", &ds.test)] {
        for (i, s) in samples.iter().enumerate() {
            let mut rng = rng_substream(seed, "pc-shuffle", (i + if split == "test" { 1 << 32 } else { 0 }) as u64);
            let perm = crate::rng::shuffled_indices(&mut rng, n);
            let mut coords = Vec::with_capacity(2 * n);
            let mut feats = Vec::with_capacity(ds.feat_dim * n);
            let mut target = Vec::with_capacity(n);
            for &p in &perm {
                coords.push(ds.mesh.coords.data[2 * p]);
                coords.push(ds.mesh.coords.data[2 * p + 1]);
                for c in 0..ds.feat_dim {
                    feats.push(s.feats.data[p * ds.feat_dim + c]);
                }
                target.push(s.target.data[p]);
            }
            let (pc_name, u_name) = pc_file_names(split, i);
            save_pointcloud(
                &dir.join(&pc_name),
                &Tensor::new(vec![n, 2], coords)?,
                &Tensor::new(vec![n, ds.feat_dim], feats)?,
            )?;
            checkpoint::save_tensor(&dir.join(&u_name), "u", &Tensor::new(vec![n, 1], target)?)?;
            written.push(dir.join(pc_name));
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_contrast_gives_constant_one() {
        let a = gen_coefficient::<f64>(7, 8, 8, 1.0).unwrap();
        assert!(a.data.iter().all(|v| *v == 1.0));
    }

    #[test]
    fn coefficient_is_deterministic_and_in_range() {
        let a = gen_coefficient::<f64>(123, 16, 16, 3.0).unwrap();
        let b = gen_coefficient::<f64>(123, 16, 16, 3.0).unwrap();
        assert_eq!(a.data, b.data);
        let min = a.data.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = a.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!((min - 1.0).abs() < 1e-12);
        assert!((max - 3.0).abs() < 1e-12);
    }

    #[test]
    fn zero_source_gives_zero_solution() {
        let mesh = Mesh::<f64>::regular(9, 9).unwrap();
        let a = gen_coefficient::<f64>(1, 9, 9, 2.0).unwrap();
        let f = Tensor::zeros(vec![9, 9]);
        let u = solve_darcy(&a, &mesh, &f).unwrap();
        assert!(u.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn manufactured_unit_coefficient_solution() {
        // a = 1, f = 2 pi^2 sin(pi x) sin(pi y) -> u = sin sin; the discrete
        // error must shrink with the mesh.
        let pi = std::f64::consts::PI;
        let mut errs = Vec::new();
        for n in [9usize, 17, 33] {
            let mesh = Mesh::<f64>::regular(n, n).unwrap();
            let a = Tensor::full(vec![n, n], 1.0);
            let f = fixed_source(&mesh);
            let u = solve_darcy(&a, &mesh, &f).unwrap();
            let exact = mesh.field(|x, y| (pi * x).sin() * (pi * y).sin());
            let err = u
                .data
                .iter()
                .zip(&exact.data)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            errs.push(err);
        }
        assert!(errs[0] / errs[1] > 3.0, "{errs:?}");
        assert!(errs[1] / errs[2] > 3.0, "{errs:?}");
    }

    #[test]
    fn mirrored_input_mirrors_solution() {
        let (h, w) = (9, 9);
        let mesh = Mesh::<f64>::regular(h, w).unwrap();
        let a = gen_coefficient::<f64>(5, h, w, 2.0).unwrap();
        let f = fixed_source(&mesh);
        let u = solve_darcy(&a, &mesh, &f).unwrap();
        let flip = |t: &Tensor<f64>| {
            let mut d = t.data.clone();
            for i in 0..h {
                for j in 0..w {
                    d[i * w + j] = t.data[i * w + (w - 1 - j)];
                }
            }
            Tensor::new(vec![h, w], d).unwrap()
        };
        let u2 = solve_darcy(&flip(&a), &mesh, &flip(&f)).unwrap();
        for i in 0..h {
            for j in 0..w {
                assert!((u2.data[i * w + j] - u.data[i * w + (w - 1 - j)]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_amplitude_distortion_is_regular() {
        let m = distort_mesh::<f64>(6, 6, 0.0).unwrap();
        let r = Mesh::<f64>::regular(6, 6).unwrap();
        assert_eq!(m.coords.data, r.coords.data);
    }

    #[test]
    fn distortion_keeps_positive_jacobian_until_foldover() {
        let m = distort_mesh::<f64>(17, 17, 0.08).unwrap();
        assert!(min_jacobian_det(&m) > 0.0);
        assert!(distort_mesh::<f64>(17, 17, 0.5).is_err());
    }

    #[test]
    fn manufactured_source_is_consistent_with_finite_differences() {
        // Check f = -div(a grad u) numerically at a few points.
        let mut rng = rng_substream(3, "t", 0);
        let points: Vec<(f64, f64)> = vec![(0.3, 0.4), (0.6, 0.2), (0.5, 0.8)];
        let coeff = CoeffField::random(&mut rng, 2.0, &[(0.1, 0.1), (0.9, 0.8), (0.4, 0.6)]).unwrap();
        let sol = SineSolution::random(&mut rng);
        let h = 1e-5;
        for &(x, y) in &points {
            let flux_x = |x: f64, y: f64| coeff.eval(x, y) * sol.grad(x, y).0;
            let flux_y = |x: f64, y: f64| coeff.eval(x, y) * sol.grad(x, y).1;
            let div = (flux_x(x + h, y) - flux_x(x - h, y)) / (2.0 * h)
                + (flux_y(x, y + h) - flux_y(x, y - h)) / (2.0 * h);
            let f = manufactured_source(&coeff, &sol, x, y);
            assert!((f + div).abs() < 1e-6, "{f} vs {}", -div);
        }
    }

    #[test]
    fn pointcloud_round_trip() {
        let dir = std::env::temp_dir().join("cato_pc_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("s.catp");
        let coords = Tensor::new(vec![3, 2], vec![0.0, 0.1, 0.5, 0.5, 1.0, 0.9]).unwrap();
        let feats = Tensor::new(vec![3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        save_pointcloud(&path, &coords, &feats).unwrap();
        let (c2, f2): (Tensor<f64>, Tensor<f64>) = load_pointcloud(&path).unwrap();
        assert_eq!(c2.data, coords.data);
        assert_eq!(f2.data, feats.data);
        std::fs::remove_dir_all(&dir).ok();
    }
}
