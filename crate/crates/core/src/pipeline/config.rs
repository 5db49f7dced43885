use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::coarse_solver::NlPolicy;
use crate::dataset::{Problem, EPS_EXTRACT};
use crate::error::{Error, Result};
use crate::fine_solver::TimeStepping;
use crate::flow::PicardOptions;
use crate::mesh::DomainKind;
use crate::physics::{FieldSpec, RichardsLaw, TwoPhaseLaw};
use crate::surrogate::train::TrainConfig;
use crate::surrogate::ArchConfig;
use crate::upscale::MfOptions;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub problem: Problem,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    pub grid: GridConfig,
    #[serde(default)]
    pub fractures: FractureConfig,
    pub field: FieldConfig,
    pub sources: SourceConfig,
    pub time: TimeStepping,
    #[serde(default)]
    pub richards: RichardsConfig,
    #[serde(default)]
    pub two_phase: TwoPhaseConfig,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub train: TrainSection,
    pub thresholds: NlPolicy,
    #[serde(default)]
    pub upscale: MfOptions,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

fn one() -> f64 {
    1.0
}

fn ring() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub fine_nx: usize,
    pub fine_ny: usize,
    pub coarse_nx: usize,
    pub coarse_ny: usize,
    #[serde(default = "one")]
    pub lx: f64,
    #[serde(default = "one")]
    pub ly: f64,
    /// Oversampling ring of the coarse windows.
    #[serde(default = "ring")]
    pub ring: usize,
}

/// Fracture segments `[x0, y0, x1, y1]`, inline and/or from a file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FractureConfig {
    #[serde(default)]
    pub segments: Vec<[f64; 4]>,
    pub file: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldConfig {
    pub spec: FieldSpec,
    pub k_fracture: f64,
    /// Read the matrix field from a blob instead of generating it.
    pub file: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Well {
    pub i: usize,
    pub j: usize,
    /// Multiplies the run's magnitude `q`.
    pub sign: f64,
}

/// Every run draws one magnitude `q ~ U(q_min, q_max)`; well `k` gets
/// `sign_k * q` per unit area over its coarse cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceConfig {
    pub n_snapshots: usize,
    pub n_test: usize,
    pub q_min: f64,
    pub q_max: f64,
    pub wells: Vec<Well>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RichardsConfig {
    #[serde(default)]
    pub law: RichardsLaw,
    #[serde(default)]
    pub picard: PicardOptions,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwoPhaseConfig {
    #[serde(default)]
    pub law: TwoPhaseLaw,
    /// Uniform initial wetting saturation.
    #[serde(default)]
    pub s0: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetMode {
    #[default]
    Global,
    Local,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    #[serde(default)]
    pub mode: DatasetMode,
    #[serde(default = "stride")]
    pub stride: usize,
    /// Per-kind sample filter on `|ū_i - ū_j|`; kinds missing here use the
    /// selector threshold.
    #[serde(default)]
    pub min_difference: BTreeMap<DomainKind, f64>,
    #[serde(default = "eps_extract")]
    pub eps_extract: f64,
    #[serde(default)]
    pub local: LocalConfig,
}

fn stride() -> usize {
    1
}

fn eps_extract() -> f64 {
    EPS_EXTRACT
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            mode: DatasetMode::Global,
            stride: 1,
            min_difference: BTreeMap::new(),
            eps_extract: EPS_EXTRACT,
            local: LocalConfig::default(),
        }
    }
}

/// Local sampling; missing pressure bounds come from the snapshot runs and
/// a missing `tau` from the time stepping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalConfig {
    #[serde(default = "n_local")]
    pub n_samples: usize,
    pub p_min: Option<f64>,
    pub p_max: Option<f64>,
    pub tau: Option<f64>,
}

fn n_local() -> usize {
    40
}

impl Default for LocalConfig {
    fn default() -> Self {
        Self {
            n_samples: n_local(),
            p_min: None,
            p_max: None,
            tau: None,
        }
    }
}

/// Partial training settings for one kind.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOverride {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub max_seconds: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainSection {
    #[serde(flatten)]
    pub config: TrainConfig,
    #[serde(default)]
    pub arch: ArchConfig,
    #[serde(default)]
    pub kinds: BTreeMap<DomainKind, TrainOverride>,
}

impl TrainSection {
    /// Settings for one kind; the seed is replaced by `seed`.
    pub fn for_kind(&self, kind: DomainKind, seed: u64) -> TrainConfig {
        let mut c = self.config.clone();
        if let Some(o) = self.kinds.get(&kind) {
            if let Some(v) = o.epochs {
                c.epochs = v;
            }
            if let Some(v) = o.batch_size {
                c.batch_size = v;
            }
            if let Some(v) = o.learning_rate {
                c.learning_rate = v;
            }
            if o.max_seconds.is_some() {
                c.max_seconds = o.max_seconds;
            }
        }
        c.seed = seed;
        c
    }
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config; relative file references are resolved against the
    /// config's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = cfg.fractures.file.as_mut() {
            fix(p);
        }
        if let Some(p) = cfg.field.file.as_mut() {
            fix(p);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let g = &self.grid;
        if g.coarse_nx == 0 || g.coarse_ny == 0 || g.fine_nx % g.coarse_nx != 0 || g.fine_ny % g.coarse_ny != 0 {
            return bad(format!(
                "fine grid {}x{} is not a refinement of coarse grid {}x{}",
                g.fine_nx, g.fine_ny, g.coarse_nx, g.coarse_ny
            ));
        }
        let s = &self.sources;
        if s.n_snapshots == 0 {
            return bad("at least one snapshot run is required".into());
        }
        if !(s.q_min <= s.q_max) || !s.q_min.is_finite() || !s.q_max.is_finite() {
            return bad("source magnitudes need q_min <= q_max".into());
        }
        if s.wells.is_empty() {
            return bad("no wells".into());
        }
        for w in &s.wells {
            if w.i >= g.coarse_nx || w.j >= g.coarse_ny {
                return bad(format!("well ({}, {}) lies outside the coarse grid", w.i, w.j));
            }
        }
        if self.problem == Problem::TwoPhase {
            let total: f64 = s.wells.iter().map(|w| w.sign).sum();
            if total.abs() > 1e-12 {
                return bad("two-phase well signs must sum to zero".into());
            }
            if self.dataset.mode == DatasetMode::Local {
                return bad("local datasets are only available for Richards".into());
            }
            if !(0.0..=1.0).contains(&self.two_phase.s0) {
                return bad("initial saturation must lie in [0, 1]".into());
            }
        }
        if !(self.time.tau > 0.0) || self.time.n_steps == 0 {
            return bad("time stepping needs tau > 0 and n_steps > 0".into());
        }
        if self.dataset.stride == 0 {
            return bad("dataset stride must be positive".into());
        }
        self.thresholds.validate().map_err(|e| Error::Config(e.to_string()))?;
        for p in [&self.fractures.file, &self.field.file].into_iter().flatten() {
            if !p.exists() {
                return bad(format!("referenced file {} does not exist", p.display()));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Sample filter of one kind.
    pub fn min_difference(&self, kind: DomainKind) -> f64 {
        self.dataset
            .min_difference
            .get(&kind)
            .or_else(|| self.thresholds.eps.get(&kind))
            .copied()
            .unwrap_or(0.0)
    }
}

/// Independent seed for a named purpose.
pub fn derive_seed(seed: u64, tag: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    h.update(index.to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}
