//! Training samples for the transmissibility surrogates: input images per
//! local domain, extracted targets, splits, normalization and storage.

pub mod extract;
pub mod local;

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{format_err, invalid, Error, Result};
use crate::io;
use crate::mesh::{CoarseGrid, DomainKind, FineGrid, FractureMesh, LocalDomain};
use crate::physics::PermeabilityField;

pub use extract::{extract_nl_transmissibility, CoarseFluxMap, ExtractedTable, EPS_EXTRACT};
pub use local::{build_local_dataset, BilinearProfile, LocalContext, LocalSampling};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Problem {
    Richards,
    #[serde(alias = "two_phase")]
    TwoPhase,
}

impl Problem {
    /// Targets per sample: `T` for Richards, `(T, T^w)` for two-phase.
    pub fn n_outputs(self) -> usize {
        match self {
            Problem::Richards => 1,
            Problem::TwoPhase => 2,
        }
    }

    /// Input roles for one kind. Fine roles come first.
    pub fn roles(self, domain: &LocalDomain) -> Vec<Role> {
        let fine = |name: &str| Role {
            name: name.into(),
            channels: 1,
            rows: domain.fine_rows,
            cols: domain.fine_cols,
            fine: true,
        };
        let window = |name: &str| Role {
            name: name.into(),
            channels: 2,
            rows: domain.window.rows,
            cols: domain.window.cols,
            fine: false,
        };
        let mut roles = vec![fine("log-k"), fine("fracture"), window("pm"), window("pf")];
        if self == Problem::TwoPhase {
            roles.push(window("sm"));
            roles.push(window("sf"));
        }
        roles
    }
}

/// One input image: channel 0 holds values, channel 1 (windows only) the
/// in-domain mask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Role {
    pub name: String,
    pub channels: usize,
    pub rows: usize,
    pub cols: usize,
    /// Fine roles depend only on the domain, not on the state.
    pub fine: bool,
}

impl Role {
    pub fn len(&self) -> usize {
        self.channels * self.rows * self.cols
    }

    pub fn plane(&self) -> usize {
        self.rows * self.cols
    }
}

pub const MIN_SPLIT_SAMPLES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleMeta {
    /// Index into the kind's domain slots.
    pub slot: usize,
    pub snapshot: usize,
    pub step: usize,
}

/// Fully materialized sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub kind: DomainKind,
    pub face: usize,
    pub snapshot: usize,
    pub step: usize,
    /// All roles concatenated in role order.
    pub inputs: Vec<f64>,
    pub targets: Vec<f64>,
}

/// Per-role min-max of the value channel and per-output min-max of targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub input_min: Vec<f64>,
    pub input_max: Vec<f64>,
    pub target_min: Vec<f64>,
    pub target_max: Vec<f64>,
}

#[inline]
fn forward(v: f64, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        (v - lo) / (hi - lo)
    } else {
        v - lo
    }
}

#[inline]
fn backward(x: f64, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        x * (hi - lo) + lo
    } else {
        x + lo
    }
}

impl Normalization {
    /// Normalizes the value channels of concatenated roles `roles` in place.
    /// `first_role` is the index of `roles[0]` in the full role list.
    pub fn apply_inputs(&self, roles: &[Role], first_role: usize, x: &mut [f64]) {
        let mut off = 0;
        for (r, role) in roles.iter().enumerate() {
            let (lo, hi) = (self.input_min[first_role + r], self.input_max[first_role + r]);
            for v in &mut x[off..off + role.plane()] {
                *v = forward(*v, lo, hi);
            }
            off += role.len();
        }
    }

    pub fn invert_inputs(&self, roles: &[Role], first_role: usize, x: &mut [f64]) {
        let mut off = 0;
        for (r, role) in roles.iter().enumerate() {
            let (lo, hi) = (self.input_min[first_role + r], self.input_max[first_role + r]);
            for v in &mut x[off..off + role.plane()] {
                *v = backward(*v, lo, hi);
            }
            off += role.len();
        }
    }

    pub fn apply_targets(&self, y: &mut [f64]) {
        let m = self.target_min.len();
        for (i, v) in y.iter_mut().enumerate() {
            *v = forward(*v, self.target_min[i % m], self.target_max[i % m]);
        }
    }

    pub fn invert_targets(&self, y: &mut [f64]) {
        let m = self.target_min.len();
        for (i, v) in y.iter_mut().enumerate() {
            *v = backward(*v, self.target_min[i % m], self.target_max[i % m]);
        }
    }
}

/// Samples of one domain kind. Inputs are stored unnormalized: fine roles
/// once per domain slot, window roles once per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct KindDataset {
    pub kind: DomainKind,
    pub roles: Vec<Role>,
    pub n_outputs: usize,
    /// Coarse connection identifier (`LocalDomain::face`) of each slot.
    pub faces: Vec<usize>,
    pub static_inputs: Vec<Vec<f64>>,
    pub samples: Vec<SampleMeta>,
    pub dynamic_inputs: Vec<f64>,
    pub targets: Vec<f64>,
    pub splits: Vec<Split>,
    pub norm: Option<Normalization>,
    /// Set when no sample could be produced.
    pub empty_reason: Option<String>,
}

impl KindDataset {
    pub fn new(kind: DomainKind, roles: Vec<Role>, n_outputs: usize) -> Self {
        Self {
            kind,
            roles,
            n_outputs,
            faces: Vec::new(),
            static_inputs: Vec::new(),
            samples: Vec::new(),
            dynamic_inputs: Vec::new(),
            targets: Vec::new(),
            splits: Vec::new(),
            norm: None,
            empty_reason: None,
        }
    }

    pub fn n_fine_roles(&self) -> usize {
        self.roles.iter().take_while(|r| r.fine).count()
    }

    pub fn static_len(&self) -> usize {
        self.roles.iter().filter(|r| r.fine).map(Role::len).sum()
    }

    pub fn dynamic_len(&self) -> usize {
        self.roles.iter().filter(|r| !r.fine).map(Role::len).sum()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dynamic(&self, i: usize) -> &[f64] {
        let d = self.dynamic_len();
        &self.dynamic_inputs[i * d..(i + 1) * d]
    }

    pub fn target(&self, i: usize) -> &[f64] {
        &self.targets[i * self.n_outputs..(i + 1) * self.n_outputs]
    }

    pub fn sample(&self, i: usize) -> Sample {
        let m = self.samples[i];
        let mut inputs = self.static_inputs[m.slot].clone();
        inputs.extend_from_slice(self.dynamic(i));
        Sample {
            kind: self.kind,
            face: self.faces[m.slot],
            snapshot: m.snapshot,
            step: m.step,
            inputs,
            targets: self.target(i).to_vec(),
        }
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    fn push(&mut self, meta: SampleMeta, dynamic: &[f64], targets: &[f64]) {
        self.samples.push(meta);
        self.dynamic_inputs.extend_from_slice(dynamic);
        self.targets.extend_from_slice(targets);
        self.splits.push(Split::Train);
    }

    /// Shuffles, holds out half for testing, splits the rest 80/20 into
    /// train/validation and computes normalization on train+validation.
    pub fn split_and_normalize(&mut self, seed: u64) -> Result<()> {
        let n = self.len();
        if n < MIN_SPLIT_SAMPLES {
            return invalid(format!("{}: {n} samples, need at least {MIN_SPLIT_SAMPLES}", self.kind.name()));
        }
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (self.kind as u64).wrapping_mul(0x9e37_79b9));
        order.shuffle(&mut rng);
        let n_test = n / 2;
        let rest = n - n_test;
        let n_train = ((0.8 * rest as f64).round() as usize).clamp(1, rest - 1);
        for (pos, &i) in order.iter().enumerate() {
            self.splits[i] = if pos < n_test {
                Split::Test
            } else if pos < n_test + n_train {
                Split::Train
            } else {
                Split::Val
            };
        }
        self.norm = Some(self.fit_normalization());
        Ok(())
    }

    fn fit_normalization(&self) -> Normalization {
        let nr = self.roles.len();
        let mut lo = vec![f64::INFINITY; nr];
        let mut hi = vec![f64::NEG_INFINITY; nr];
        let mut tlo = vec![f64::INFINITY; self.n_outputs];
        let mut thi = vec![f64::NEG_INFINITY; self.n_outputs];
        let n_fine = self.n_fine_roles();
        let mut seen_slot = vec![false; self.faces.len()];
        for i in 0..self.len() {
            if self.splits[i] == Split::Test {
                continue;
            }
            let slot = self.samples[i].slot;
            if !seen_slot[slot] {
                seen_slot[slot] = true;
                let x = &self.static_inputs[slot];
                let mut off = 0;
                for r in 0..n_fine {
                    for &v in &x[off..off + self.roles[r].plane()] {
                        lo[r] = lo[r].min(v);
                        hi[r] = hi[r].max(v);
                    }
                    off += self.roles[r].len();
                }
            }
            let x = self.dynamic(i);
            let mut off = 0;
            for r in n_fine..nr {
                for &v in &x[off..off + self.roles[r].plane()] {
                    lo[r] = lo[r].min(v);
                    hi[r] = hi[r].max(v);
                }
                off += self.roles[r].len();
            }
            for (o, &v) in self.target(i).iter().enumerate() {
                tlo[o] = tlo[o].min(v);
                thi[o] = thi[o].max(v);
            }
        }
        Normalization {
            input_min: lo,
            input_max: hi,
            target_min: tlo,
            target_max: thi,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub problem: Problem,
    pub kinds: Vec<KindDataset>,
}

impl Dataset {
    pub fn kind(&self, kind: DomainKind) -> Option<&KindDataset> {
        self.kinds.iter().find(|k| k.kind == kind)
    }

    /// Splits every kind; kinds with too few samples are flagged and left
    /// without normalization.
    pub fn split_and_normalize(&mut self, seed: u64) -> Result<()> {
        for k in &mut self.kinds {
            if k.len() < MIN_SPLIT_SAMPLES {
                log::warn!("{}: only {} samples, no surrogate will be trained", k.kind.name(), k.len());
                let n = k.len();
                k.empty_reason.get_or_insert_with(|| format!("only {n} samples"));
                k.norm = None;
                continue;
            }
            k.split_and_normalize(seed)?;
        }
        Ok(())
    }
}

/// Domain-only inputs: `ln k` and fracture length density (length per cell
/// size) over the domain's fine image.
#[derive(Debug, Clone)]
pub struct StaticFeatures {
    log_k: Vec<f64>,
    fracture: Vec<f64>,
}

impl StaticFeatures {
    pub fn new(fine: &FineGrid, fractures: &FractureMesh, field: &PermeabilityField) -> Self {
        let h = (fine.hx * fine.hy).sqrt();
        let mut fracture = vec![0.0; fine.n_cells()];
        for c in &fractures.cells {
            fracture[c.host] += c.length / h;
        }
        Self {
            log_k: field.values.iter().map(|k| k.ln()).collect(),
            fracture,
        }
    }

    pub fn inputs(&self, domain: &LocalDomain) -> Vec<f64> {
        let mut out = Vec::with_capacity(2 * domain.fine_cells.len());
        out.extend(domain.fine_cells.iter().map(|&c| self.log_k[c]));
        out.extend(domain.fine_cells.iter().map(|&c| self.fracture[c]));
        out
    }
}

/// State-dependent window inputs from coarse node vectors (`p`, optional
/// `s`): per quantity a matrix window and a fracture window, each as value
/// plane then mask plane. Fracture slots without a coarse fracture cell take
/// the matrix value and mask 0.
pub fn window_inputs(domain: &LocalDomain, coarse: &CoarseGrid, p: &[f64], s: Option<&[f64]>, out: &mut Vec<f64>) {
    let nm = coarse.n_cells();
    let w = &domain.window;
    for u in std::iter::once(p).chain(s) {
        out.extend(w.cells.iter().map(|&c| u[c]));
        out.extend_from_slice(&w.mask);
        for &c in &w.cells {
            out.push(match coarse.fracture_in_cell[c] {
                Some(l) => u[nm + l],
                None => u[c],
            });
        }
        for (slot, &c) in w.cells.iter().enumerate() {
            let has = coarse.fracture_in_cell[c].is_some();
            out.push(if has { w.mask[slot] } else { 0.0 });
        }
    }
}

/// Coarse connection index of a local domain.
pub fn connection_of(domain: &LocalDomain, coarse: &CoarseGrid) -> usize {
    let nm = coarse.grid.faces.len();
    match domain.kind {
        DomainKind::MmHorizontal | DomainKind::MmVertical => domain.face,
        DomainKind::Mf => nm + domain.face,
        DomainKind::Ff => nm + coarse.n_fractures() + domain.face,
    }
}

/// Coarse states and extracted tables of one fine run.
#[derive(Debug, Clone)]
pub struct SnapshotSeries {
    pub snapshot: usize,
    /// Initial coarse pressure and saturation node vectors.
    pub p0: Vec<f64>,
    pub s0: Option<Vec<f64>>,
    pub levels: Vec<SeriesLevel>,
}

#[derive(Debug, Clone)]
pub struct SeriesLevel {
    pub step: usize,
    pub p: Vec<f64>,
    pub s: Option<Vec<f64>>,
    pub table: ExtractedTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalSampling {
    /// Use every `stride`-th time level.
    pub stride: usize,
    /// Samples with `|ū_i - ū_j|` at or below this are dropped, per kind.
    pub min_difference: BTreeMap<DomainKind, f64>,
}

impl Default for GlobalSampling {
    fn default() -> Self {
        Self {
            stride: 1,
            min_difference: BTreeMap::new(),
        }
    }
}

/// Builds samples from fine runs. Richards inputs use the coarse state of the
/// same level as the target; two-phase inputs use the previous level, which
/// is what the coarse solver has when it queries the surrogate.
pub fn build_global_dataset(
    problem: Problem,
    coarse: &CoarseGrid,
    domains: &[LocalDomain],
    statics: &StaticFeatures,
    series: &[SnapshotSeries],
    sampling: &GlobalSampling,
) -> Result<Dataset> {
    if series.is_empty() {
        return invalid("no snapshot runs");
    }
    if sampling.stride == 0 {
        return invalid("time stride must be positive");
    }
    let mut kinds = Vec::new();
    for kind in DomainKind::ALL {
        let mine: Vec<&LocalDomain> = domains.iter().filter(|d| d.kind == kind).collect();
        let Some(first) = mine.first() else { continue };
        let mut ds = KindDataset::new(kind, problem.roles(first), problem.n_outputs());
        for d in &mine {
            ds.faces.push(d.face);
            ds.static_inputs.push(statics.inputs(d));
        }
        let min_diff = sampling.min_difference.get(&kind).copied().unwrap_or(0.0);
        let mut dynamic = Vec::with_capacity(ds.dynamic_len());
        for run in series {
            for (n, level) in run.levels.iter().enumerate() {
                if level.step % sampling.stride != sampling.stride - 1 {
                    continue;
                }
                let (p, s) = match problem {
                    Problem::Richards => (&level.p, None),
                    Problem::TwoPhase => {
                        if n == 0 {
                            (&run.p0, run.s0.as_ref())
                        } else {
                            (&run.levels[n - 1].p, run.levels[n - 1].s.as_ref())
                        }
                    }
                };
                if problem == Problem::TwoPhase && s.is_none() {
                    return invalid("two-phase series without saturations");
                }
                let values = level.table.values();
                for (slot, d) in mine.iter().enumerate() {
                    let c = connection_of(d, coarse);
                    let t = values[c];
                    if !t.is_finite() || level.table.dp[c].abs() <= min_diff {
                        continue;
                    }
                    let mut targets = vec![t];
                    if problem == Problem::TwoPhase {
                        let tw = level
                            .table
                            .wetting
                            .as_ref()
                            .ok_or_else(|| Error::InvalidArgument("missing wetting table".into()))?[c];
                        if !tw.is_finite() {
                            continue;
                        }
                        targets.push(tw);
                    }
                    dynamic.clear();
                    window_inputs(d, coarse, p, s.map(|v| v.as_slice()), &mut dynamic);
                    let meta = SampleMeta {
                        slot,
                        snapshot: run.snapshot,
                        step: level.step,
                    };
                    ds.push(meta, &dynamic, &targets);
                }
            }
        }
        if ds.is_empty() {
            ds.empty_reason = Some("no coarse connection passed the difference filter".into());
        }
        kinds.push(ds);
    }
    Ok(Dataset { problem, kinds })
}

const DATASET_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct KindManifest {
    kind: DomainKind,
    roles: Vec<Role>,
    n_outputs: usize,
    faces: Vec<usize>,
    samples: Vec<SampleMeta>,
    splits: Vec<Split>,
    norm: Option<Normalization>,
    empty_reason: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    problem: Problem,
    kinds: Vec<KindManifest>,
}

impl Dataset {
    /// Writes `manifest.json` plus little-endian f64 blobs per kind.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut kinds = Vec::new();
        for k in &self.kinds {
            let name = k.kind.name();
            let statics: Vec<f64> = k.static_inputs.iter().flatten().copied().collect();
            io::write_f64_file(&dir.join(format!("{name}.static.bin")), &statics)?;
            io::write_f64_file(&dir.join(format!("{name}.inputs.bin")), &k.dynamic_inputs)?;
            io::write_f64_file(&dir.join(format!("{name}.targets.bin")), &k.targets)?;
            kinds.push(KindManifest {
                kind: k.kind,
                roles: k.roles.clone(),
                n_outputs: k.n_outputs,
                faces: k.faces.clone(),
                samples: k.samples.clone(),
                splits: k.splits.clone(),
                norm: k.norm.clone(),
                empty_reason: k.empty_reason.clone(),
            });
        }
        let m = Manifest {
            version: DATASET_VERSION,
            problem: self.problem,
            kinds,
        };
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&m)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = String::from_utf8(io::read_existing(&path)?).map_err(|e| format_err(&path, e.to_string()))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| format_err(&path, e.to_string()))?;
        if m.version != DATASET_VERSION {
            return Err(Error::Version {
                found: m.version,
                expected: DATASET_VERSION,
            });
        }
        let mut kinds = Vec::new();
        for km in m.kinds {
            let name = km.kind.name();
            let mut ds = KindDataset::new(km.kind, km.roles, km.n_outputs);
            let statics = io::read_f64_file(&dir.join(format!("{name}.static.bin")))?;
            let sl = ds.static_len();
            if statics.len() != sl * km.faces.len() {
                return Err(format_err(&path, format!("{name}: static blob size mismatch")));
            }
            ds.static_inputs = statics.chunks(sl.max(1)).map(<[f64]>::to_vec).collect();
            ds.static_inputs.truncate(km.faces.len());
            ds.faces = km.faces;
            ds.dynamic_inputs = io::read_f64_file(&dir.join(format!("{name}.inputs.bin")))?;
            ds.targets = io::read_f64_file(&dir.join(format!("{name}.targets.bin")))?;
            let n = km.samples.len();
            if ds.dynamic_inputs.len() != n * ds.dynamic_len()
                || ds.targets.len() != n * ds.n_outputs
                || km.splits.len() != n
            {
                return Err(format_err(&path, format!("{name}: sample blob size mismatch")));
            }
            ds.samples = km.samples;
            ds.splits = km.splits;
            ds.norm = km.norm;
            ds.empty_reason = km.empty_reason;
            kinds.push(ds);
        }
        Ok(Self {
            problem: m.problem,
            kinds,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_coarse_grid, build_fine_grid, enumerate_local_domains, Segment};

    fn toy() -> (CoarseGrid, Vec<LocalDomain>, StaticFeatures) {
        let fine = build_fine_grid(12, 12, 1.0, 1.0).unwrap();
        let (fm, _) = crate::mesh::embed_fractures(&fine, &[Segment::new(0.1, 0.45, 0.9, 0.5)]).unwrap();
        let coarse = build_coarse_grid(&fine, 3, 3, &fm).unwrap();
        let field = PermeabilityField::from_values(12, 12, (0..144).map(|i| 1.0 + i as f64).collect(), 1e3).unwrap();
        let st = StaticFeatures::new(&fine, &fm, &field);
        let domains = enumerate_local_domains(&coarse, 1).unwrap();
        (coarse, domains, st)
    }

    fn series(coarse: &CoarseGrid, steps: usize) -> SnapshotSeries {
        let n = coarse.n_cells() + coarse.n_fractures();
        let nc = coarse.grid.faces.len() + coarse.n_fractures() + coarse.fracture_links.len();
        let levels = (0..steps)
            .map(|step| {
                let p: Vec<f64> = (0..n).map(|i| (i * (step + 1)) as f64).collect();
                let vals: Vec<f64> = (0..nc).map(|c| 1.0 + c as f64 + step as f64).collect();
                let table = ExtractedTable {
                    table: crate::upscale::TransmissibilityTable::from_connection_values(
                        crate::upscale::Provenance::Extracted,
                        coarse,
                        &vals,
                    )
                    .unwrap(),
                    wetting: None,
                    flux: vec![0.0; nc],
                    dp: vec![1.0; nc],
                    skipped: 0,
                };
                SeriesLevel { step, p, s: None, table }
            })
            .collect();
        SnapshotSeries {
            snapshot: 0,
            p0: vec![0.0; n],
            s0: None,
            levels,
        }
    }

    #[test]
    fn kinds_have_uniform_shapes_and_four_roles() {
        let (coarse, domains, st) = toy();
        let ds = build_global_dataset(
            Problem::Richards,
            &coarse,
            &domains,
            &st,
            &[series(&coarse, 4)],
            &GlobalSampling::default(),
        )
        .unwrap();
        assert_eq!(ds.kinds.len(), 4);
        for k in &ds.kinds {
            assert_eq!(k.roles.len(), 4);
            let len = k.static_len() + k.dynamic_len();
            for i in 0..k.len() {
                assert_eq!(k.sample(i).inputs.len(), len);
            }
            assert_eq!(k.len(), 4 * k.faces.len());
        }
    }

    #[test]
    fn split_fractions_and_roundtrip() {
        let (coarse, domains, st) = toy();
        let mut ds = build_global_dataset(
            Problem::Richards,
            &coarse,
            &domains,
            &st,
            &[series(&coarse, 10)],
            &GlobalSampling::default(),
        )
        .unwrap();
        ds.split_and_normalize(7).unwrap();
        let k = ds.kind(DomainKind::MmVertical).unwrap();
        assert_eq!(k.len(), 60);
        assert_eq!(k.indices(Split::Test).len(), 30);
        assert_eq!(k.indices(Split::Train).len(), 24);
        assert_eq!(k.indices(Split::Val).len(), 6);
        let norm = k.norm.as_ref().unwrap();
        let dyn_roles = &k.roles[k.n_fine_roles()..];
        let orig = k.dynamic(3).to_vec();
        let mut x = orig.clone();
        norm.apply_inputs(dyn_roles, k.n_fine_roles(), &mut x);
        norm.invert_inputs(dyn_roles, k.n_fine_roles(), &mut x);
        for (a, b) in x.iter().zip(&orig) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back, ds);
        let mut again = back.clone();
        again.split_and_normalize(7).unwrap();
        assert_eq!(again, ds);
    }

    #[test]
    fn hundred_samples_split_50_40_10() {
        let (coarse, domains, st) = toy();
        let mut ds = build_global_dataset(
            Problem::Richards,
            &coarse,
            &domains,
            &st,
            &[series(&coarse, 50)],
            &GlobalSampling::default(),
        )
        .unwrap();
        let ff = ds.kinds.iter_mut().find(|k| k.kind == DomainKind::Ff).unwrap();
        assert_eq!(ff.len(), 100);
        ff.split_and_normalize(1).unwrap();
        assert_eq!(ff.indices(Split::Test).len(), 50);
        assert_eq!(ff.indices(Split::Train).len(), 40);
        assert_eq!(ff.indices(Split::Val).len(), 10);
        ff.samples.truncate(9);
        ff.splits.truncate(9);
        assert!(ff.split_and_normalize(1).is_err());
        assert!(build_global_dataset(Problem::Richards, &coarse, &domains, &st, &[], &GlobalSampling::default()).is_err());
    }

    #[test]
    fn stride_and_filter_drop_samples() {
        let (coarse, domains, st) = toy();
        let mut sampling = GlobalSampling {
            stride: 2,
            ..Default::default()
        };
        sampling.min_difference.insert(DomainKind::Ff, 10.0);
        let ds = build_global_dataset(Problem::Richards, &coarse, &domains, &st, &[series(&coarse, 10)], &sampling)
            .unwrap();
        assert_eq!(ds.kind(DomainKind::MmHorizontal).unwrap().len(), 5 * 6);
        let ff = ds.kind(DomainKind::Ff).unwrap();
        assert!(ff.is_empty() && ff.empty_reason.is_some());
    }

    #[test]
    fn fracture_window_falls_back_to_matrix_value() {
        let (coarse, domains, _) = toy();
        let n = coarse.n_cells() + coarse.n_fractures();
        let p: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let d = domains.iter().find(|d| d.kind == DomainKind::MmHorizontal).unwrap();
        let mut out = Vec::new();
        window_inputs(d, &coarse, &p, None, &mut out);
        let plane = d.window.rows * d.window.cols;
        assert_eq!(out.len(), 4 * plane);
        for (slot, &c) in d.window.cells.iter().enumerate() {
            match coarse.fracture_in_cell[c] {
                Some(l) => assert_eq!(out[2 * plane + slot], (coarse.n_cells() + l) as f64),
                None => {
                    assert_eq!(out[2 * plane + slot], c as f64);
                    assert_eq!(out[3 * plane + slot], 0.0);
                }
            }
        }
    }
}
