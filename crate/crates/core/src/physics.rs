//! Constitutive laws and synthetic permeability fields.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{format_err, invalid, Result};
use crate::io;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RichardsLaw {
    /// Decay coefficient of `k_r(p) = exp(-a |p|)`.
    pub a: f64,
    pub c_m: f64,
    pub c_f: f64,
}

impl Default for RichardsLaw {
    fn default() -> Self {
        Self {
            a: 0.1,
            c_m: 1.0,
            c_f: 0.0,
        }
    }
}

impl RichardsLaw {
    #[inline]
    pub fn kr(&self, p: f64) -> f64 {
        eval_kr(self, p)
    }
}

#[inline]
pub fn eval_kr(law: &RichardsLaw, p: f64) -> f64 {
    (-law.a * p.abs()).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoPhaseLaw {
    pub phi_m: f64,
    pub phi_f: f64,
    pub mu_w: f64,
    pub mu_n: f64,
}

impl Default for TwoPhaseLaw {
    fn default() -> Self {
        Self {
            phi_m: 1.0,
            phi_f: 1.0,
            mu_w: 1.0,
            mu_n: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mobilities {
    pub wetting: f64,
    pub nonwetting: f64,
    pub total: f64,
    pub frac_flow: f64,
}

/// Quadratic relative permeabilities; `s` is clamped to `[0, 1]`.
pub fn eval_mobilities(law: &TwoPhaseLaw, s: f64) -> Mobilities {
    let s = s.clamp(0.0, 1.0);
    let wetting = s * s / law.mu_w;
    let nonwetting = (1.0 - s) * (1.0 - s) / law.mu_n;
    let total = wetting + nonwetting;
    Mobilities {
        wetting,
        nonwetting,
        total,
        frac_flow: wetting / total,
    }
}

impl TwoPhaseLaw {
    #[inline]
    pub fn total(&self, s: f64) -> f64 {
        eval_mobilities(self, s).total
    }

    #[inline]
    pub fn wetting(&self, s: f64) -> f64 {
        eval_mobilities(self, s).wetting
    }
}

/// `2ab/(a+b)`, zero when either argument is zero.
#[inline]
pub fn harmonic(a: f64, b: f64) -> f64 {
    if a == 0.0 || b == 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum FieldSpec {
    Constant {
        k: f64,
    },
    /// Piecewise constant layers stacked along `axis` ("x": layers change
    /// with x, i.e. vertical stripes; "y": horizontal stripes).
    Layered {
        values: Vec<f64>,
        axis: String,
    },
    /// `exp(mean_log + G)`, `G` a zero-mean Gaussian field with covariance
    /// `variance * exp(-(dx/lx)^2 - (dy/ly)^2)`.
    LogNormal {
        lx: f64,
        ly: f64,
        variance: f64,
        #[serde(default)]
        mean_log: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PermeabilityField {
    pub nx: usize,
    pub ny: usize,
    /// Matrix permeability per fine cell, row-major.
    pub values: Vec<f64>,
    pub k_fracture: f64,
    pub min: f64,
    pub max: f64,
}

impl PermeabilityField {
    pub fn from_values(nx: usize, ny: usize, values: Vec<f64>, k_fracture: f64) -> Result<Self> {
        if values.len() != nx * ny {
            return invalid(format!(
                "permeability has {} values, grid has {}",
                values.len(),
                nx * ny
            ));
        }
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return invalid(format!("permeability must be positive and finite, found {v}"));
        }
        if !(k_fracture.is_finite() && k_fracture > 0.0) {
            return invalid("fracture permeability must be positive");
        }
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(0.0, f64::max);
        Ok(Self {
            nx,
            ny,
            values,
            k_fracture,
            min,
            max,
        })
    }

    pub fn contrast(&self) -> f64 {
        self.max / self.min
    }

    /// Returns a copy with every matrix value multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        Self::from_values(
            self.nx,
            self.ny,
            self.values.iter().map(|v| v * c).collect(),
            self.k_fracture,
        )
        .expect("positive scaling keeps the field valid")
    }
}

pub fn generate_permeability(
    nx: usize,
    ny: usize,
    spec: &FieldSpec,
    k_fracture: f64,
    seed: u64,
) -> Result<PermeabilityField> {
    if nx == 0 || ny == 0 {
        return invalid("permeability grid must be non-empty");
    }
    let values = match spec {
        FieldSpec::Constant { k } => vec![*k; nx * ny],
        FieldSpec::Layered { values, axis } => {
            if values.is_empty() {
                return invalid("layered field needs at least one layer");
            }
            let n = values.len();
            let mut out = Vec::with_capacity(nx * ny);
            for j in 0..ny {
                for i in 0..nx {
                    let layer = match axis.as_str() {
                        "x" => i * n / nx,
                        "y" => j * n / ny,
                        other => return invalid(format!("unknown layer axis {other:?}")),
                    };
                    out.push(values[layer]);
                }
            }
            out
        }
        FieldSpec::LogNormal {
            lx,
            ly,
            variance,
            mean_log,
        } => {
            if !(*lx > 0.0 && *ly > 0.0 && *variance >= 0.0) {
                return invalid("log-normal field needs positive correlation lengths and variance");
            }
            gaussian_field(nx, ny, *lx, *ly, *variance, seed)
                .into_iter()
                .map(|g| (mean_log + g).exp())
                .collect()
        }
    };
    PermeabilityField::from_values(nx, ny, values, k_fracture)
}

/// Gaussian covariance used by the log-normal generator, in grid units of a
/// unit-square domain (cell size `1/nx` by `1/ny`).
pub fn gaussian_covariance(dx: f64, dy: f64, lx: f64, ly: f64, variance: f64) -> f64 {
    variance * (-(dx / lx).powi(2) - (dy / ly).powi(2)).exp()
}

/// Circulant-embedding synthesis on a doubled periodic grid. Coordinates are
/// in units of the domain, so the field is defined on `[0,1]^2`.
fn gaussian_field(nx: usize, ny: usize, lx: f64, ly: f64, variance: f64, seed: u64) -> Vec<f64> {
    let mx = 2 * nx;
    let my = 2 * ny;
    let (hx, hy) = (1.0 / nx as f64, 1.0 / ny as f64);
    let mut spec = vec![Complex64::new(0.0, 0.0); mx * my];
    for j in 0..my {
        let dy = j.min(my - j) as f64 * hy;
        for i in 0..mx {
            let dx = i.min(mx - i) as f64 * hx;
            spec[j * mx + i] = Complex64::new(gaussian_covariance(dx, dy, lx, ly, variance), 0.0);
        }
    }
    let mut planner = FftPlanner::<f64>::new();
    fft2(&mut planner, &mut spec, mx, my, false);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (mx * my) as f64;
    let mut noise: Vec<Complex64> = spec
        .iter()
        .map(|lam| {
            let amp = (lam.re.max(0.0) * scale).sqrt();
            let a: f64 = StandardNormal.sample(&mut rng);
            let b: f64 = StandardNormal.sample(&mut rng);
            Complex64::new(a * amp, b * amp)
        })
        .collect();
    fft2(&mut planner, &mut noise, mx, my, false);
    let mut out = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            out.push(noise[j * mx + i].re);
        }
    }
    out
}

fn fft2(planner: &mut FftPlanner<f64>, data: &mut [Complex64], mx: usize, my: usize, inverse: bool) {
    let row = if inverse {
        planner.plan_fft_inverse(mx)
    } else {
        planner.plan_fft_forward(mx)
    };
    for r in data.chunks_mut(mx) {
        row.process(r);
    }
    let col = if inverse {
        planner.plan_fft_inverse(my)
    } else {
        planner.plan_fft_forward(my)
    };
    let mut buf = vec![Complex64::new(0.0, 0.0); my];
    for i in 0..mx {
        for j in 0..my {
            buf[j] = data[j * mx + i];
        }
        col.process(&mut buf);
        for j in 0..my {
            data[j * mx + i] = buf[j];
        }
    }
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".dims");
    PathBuf::from(s)
}

/// Writes the matrix permeability as little-endian f64 with a `nx ny` sidecar.
pub fn write_permeability(field: &PermeabilityField, path: &Path) -> Result<()> {
    io::write_f64_file(path, &field.values)?;
    std::fs::write(sidecar(path), format!("{} {}\n", field.nx, field.ny))?;
    Ok(())
}

pub fn read_permeability(path: &Path, k_fracture: f64) -> Result<PermeabilityField> {
    let dims_path = sidecar(path);
    let dims = std::fs::read_to_string(&dims_path)?;
    let parts: Vec<usize> = dims
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| format_err(&dims_path, "expected `nx ny`"))?;
    if parts.len() != 2 {
        return Err(format_err(&dims_path, "expected `nx ny`"));
    }
    let values = io::read_f64_file(path)?;
    PermeabilityField::from_values(parts[0], parts[1], values, k_fracture)
}
