//! Config-driven pipeline: fine snapshots, classic upscaling, datasets,
//! surrogate training, coarse solves and error reports. Every stage reads
//! its inputs from and writes its outputs to the output directory.

mod config;
mod records;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::{
    derive_seed, DatasetConfig, DatasetMode, FieldConfig, FractureConfig, GridConfig, LocalConfig, PipelineConfig,
    RichardsConfig, SourceConfig, TrainOverride, TrainSection, TwoPhaseConfig, Well,
};
pub use records::{Bundle, CoarseRecord, FineRecord, Provenance};

use crate::coarse_solver::{
    relative_error, solve_coarse_richards, solve_coarse_two_phase, ErrorRow, KindPredictor, NlPolicy, RichardsMode,
    SelectorStats, SurrogateSet,
};
use crate::dataset::{
    build_global_dataset, build_local_dataset, extract_nl_transmissibility, CoarseFluxMap, Dataset, ExtractedTable,
    GlobalSampling, LocalContext, LocalSampling, Problem, SeriesLevel, SnapshotSeries, Split, StaticFeatures,
};
use crate::error::{Error, Result};
use crate::fine_solver::{
    coarse_average_nodes, dump_states, solve_richards, solve_two_phase, Quantity, SourceSpec, StateField,
};
use crate::fv::FvGraph;
use crate::mesh::{
    build_coarse_grid, build_fine_grid, embed_fractures, enumerate_local_domains, read_segments, CoarseGrid,
    ConnectivityIndex, DomainKind, FineGrid, FractureMesh, LocalDomain, Segment,
};
use crate::physics::{generate_permeability, read_permeability, PermeabilityField};
use crate::surrogate::train::{evaluate, train, Metrics, TrainReport};
use crate::surrogate::{Model, Topology};
use crate::upscale::{classic_table, Provenance as TableProvenance, TransmissibilityTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    SimulateFine,
    Upscale,
    BuildDataset,
    Train,
    SolveCoarse,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::SimulateFine,
        Stage::Upscale,
        Stage::BuildDataset,
        Stage::Train,
        Stage::SolveCoarse,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::SimulateFine => "simulate-fine",
            Stage::Upscale => "upscale",
            Stage::BuildDataset => "build-dataset",
            Stage::Train => "train",
            Stage::SolveCoarse => "solve-coarse",
            Stage::Report => "report",
        }
    }
}

/// Geometry, field and derived structures shared by the stages.
pub struct Setup {
    pub fine: FineGrid,
    pub fractures: FractureMesh,
    pub ci: ConnectivityIndex,
    pub coarse: CoarseGrid,
    pub fine_graph: FvGraph,
    pub coarse_graph: FvGraph,
    pub field: PermeabilityField,
    pub domains: Vec<LocalDomain>,
    pub map: CoarseFluxMap,
    pub statics: StaticFeatures,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub kind: DomainKind,
    pub n_params: usize,
    pub train: Metrics,
    pub val: Metrics,
    pub test: Metrics,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub seconds: f64,
    pub stopped_on_budget: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelIndex {
    pub trained: Vec<TrainSummary>,
    /// Kinds with a threshold but no model, with the reason.
    pub skipped: BTreeMap<DomainKind, String>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantityErrors {
    pub quantity: String,
    /// Final-step errors per test run, in percent.
    pub up: Vec<f64>,
    pub nl: Vec<f64>,
    pub median_up: f64,
    pub median_nl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub runs: Vec<String>,
    pub quantities: Vec<QuantityErrors>,
    pub stats: SelectorStats,
    pub provenance: Provenance,
}

impl Report {
    pub fn quantity(&self, name: &str) -> Option<&QuantityErrors> {
        self.quantities.iter().find(|q| q.quantity == name)
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{:<10} {:>4} {:>12} {:>12}", "run", "qty", "e_UP_%", "e_NL_%").unwrap();
        for q in &self.quantities {
            for (k, run) in self.runs.iter().enumerate() {
                writeln!(s, "{:<10} {:>4} {:>12.4} {:>12.4}", run, q.quantity, q.up[k], q.nl[k]).unwrap();
            }
            writeln!(s, "{:<10} {:>4} {:>12.4} {:>12.4}", "median", q.quantity, q.median_up, q.median_nl).unwrap();
        }
        writeln!(
            s,
            "selector: {} queries, {} predicted, fallback fraction {:.4}",
            self.stats.queries,
            self.stats.predicted,
            self.stats.fallback_fraction()
        )
        .unwrap();
        s
    }
}

pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Ordered parallel map over `items` on up to `threads` scoped threads.
pub fn par_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let threads = threads.max(1).min(items.len().max(1));
    if threads == 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let out: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                out.lock().unwrap()[i] = Some(r);
            });
        }
    });
    out.into_inner().unwrap().into_iter().map(|r| r.expect("every item ran")).collect()
}

pub struct Pipeline {
    pub cfg: PipelineConfig,
    pub threads: usize,
    hash: String,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, threads: usize) -> Result<Self> {
        cfg.validate()?;
        let hash = cfg.hash();
        Ok(Self {
            cfg,
            threads: threads.max(1),
            hash,
        })
    }

    pub fn out(&self) -> &Path {
        &self.cfg.output
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    fn provenance(&self, stage: Stage) -> Provenance {
        Provenance {
            stage: stage.name().into(),
            config_sha256: self.hash.clone(),
            seed: self.cfg.seed,
            version: env!("CARGO_PKG_VERSION").into(),
        }
    }

    fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.out().join(match stage {
            Stage::SimulateFine => "fine",
            Stage::Upscale => "upscale",
            Stage::BuildDataset => "dataset",
            Stage::Train => "models",
            Stage::SolveCoarse => "coarse",
            Stage::Report => "report",
        })
    }

    fn begin(&self, stage: Stage) -> Result<PathBuf> {
        let dir = self.stage_dir(stage);
        std::fs::create_dir_all(&dir)?;
        let text = serde_json::to_string_pretty(&self.provenance(stage))?;
        std::fs::write(dir.join("provenance.json"), text)?;
        Ok(dir)
    }

    fn require(&self, path: PathBuf, stage: Stage) -> Result<PathBuf> {
        if path.exists() {
            Ok(path)
        } else {
            Err(Error::MissingArtifact {
                path,
                subcommand: stage.name(),
            })
        }
    }

    pub fn setup(&self) -> Result<Setup> {
        let c = &self.cfg;
        let g = &c.grid;
        let fine = build_fine_grid(g.fine_nx, g.fine_ny, g.lx, g.ly)?;
        let mut segments: Vec<Segment> = c
            .fractures
            .segments
            .iter()
            .map(|s| Segment::new(s[0], s[1], s[2], s[3]))
            .collect();
        if let Some(p) = &c.fractures.file {
            segments.extend(read_segments(p)?);
        }
        let (fractures, ci) = embed_fractures(&fine, &segments)?;
        let coarse = build_coarse_grid(&fine, g.coarse_nx, g.coarse_ny, &fractures)?;
        let fine_graph = FvGraph::fine(&fine, &fractures, &ci);
        let coarse_graph = FvGraph::coarse(&coarse);
        let field = match &c.field.file {
            Some(p) => read_permeability(p, c.field.k_fracture)?,
            None => generate_permeability(
                g.fine_nx,
                g.fine_ny,
                &c.field.spec,
                c.field.k_fracture,
                derive_seed(c.seed, "field", 0),
            )?,
        };
        if field.nx != g.fine_nx || field.ny != g.fine_ny {
            return Err(Error::Config("permeability file does not match the fine grid".into()));
        }
        let domains = enumerate_local_domains(&coarse, g.ring)?;
        let map = CoarseFluxMap::new(&coarse, &fractures, &fine_graph);
        let statics = StaticFeatures::new(&fine, &fractures, &field);
        Ok(Setup {
            fine,
            fractures,
            ci,
            coarse,
            fine_graph,
            coarse_graph,
            field,
            domains,
            map,
            statics,
        })
    }

    pub fn snapshot_names(&self) -> Vec<String> {
        (0..self.cfg.sources.n_snapshots).map(|k| format!("snapshot_{k:03}")).collect()
    }

    pub fn test_names(&self) -> Vec<String> {
        (0..self.cfg.sources.n_test).map(|k| format!("test_{k:03}")).collect()
    }

    /// Source magnitude and layout of a named run.
    pub fn sources(&self, name: &str) -> Result<(f64, SourceSpec)> {
        let (tag, idx) = name
            .rsplit_once('_')
            .and_then(|(t, i)| Some((t, i.parse::<u64>().ok()?)))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown run {name}")))?;
        let s = &self.cfg.sources;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, tag, idx));
        let q = if s.q_max > s.q_min {
            rng.gen_range(s.q_min..s.q_max)
        } else {
            s.q_min
        };
        let spec = SourceSpec {
            coarse_nx: self.cfg.grid.coarse_nx,
            coarse_ny: self.cfg.grid.coarse_ny,
            wells: s.wells.iter().map(|w| (w.i, w.j, w.sign * q)).collect(),
        };
        Ok((q, spec))
    }

    fn fine_path(&self, name: &str) -> PathBuf {
        self.stage_dir(Stage::SimulateFine).join(format!("{name}.bin"))
    }

    /// Runs one fine simulation and reduces it to coarse quantities.
    pub fn fine_run(&self, setup: &Setup, name: &str) -> Result<FineRecord> {
        let (q, spec) = self.sources(name)?;
        let g = &setup.fine_graph;
        let source = spec.fine_nodes(&setup.coarse, g)?;
        let eps = self.cfg.dataset.eps_extract;
        let avg = |u: &[f64]| coarse_average_nodes(u, &setup.coarse, &setup.fractures);
        let extract = |u: &[f64], t: &[f64], tw: Option<&[f64]>, cu: &[f64]| {
            extract_nl_transmissibility(&setup.coarse, &setup.coarse_graph, g, &setup.map, u, t, tw, cu, eps)
        };
        let mut rec = FineRecord {
            name: name.into(),
            q,
            p: Vec::new(),
            s: None,
            t_nl: Vec::new(),
            tw_nl: None,
            flux: Vec::new(),
            dp: Vec::new(),
            balance: Vec::new(),
            s_min: Vec::new(),
            s_max: Vec::new(),
            tau_limit: Vec::new(),
            provenance: self.provenance(Stage::SimulateFine),
        };
        let last_state: Vec<StateField>;
        match self.cfg.problem {
            Problem::Richards => {
                let r = &self.cfg.richards;
                let p0 = vec![0.0; g.n_nodes()];
                let steps = solve_richards(g, &setup.field, &r.law, &source, &p0, self.cfg.time, r.picard)?;
                for st in &steps {
                    if !st.converged {
                        log::warn!("{name}: Picard stopped at {} iterations (update {:.2e})", st.iterations, st.last_update);
                    }
                    let cu = avg(&st.p);
                    let ex = extract(&st.p, &st.t, None, &cu);
                    rec.t_nl.push(ex.values());
                    rec.flux.push(ex.flux);
                    rec.dp.push(ex.dp);
                    rec.p.push(cu);
                    rec.balance.push(st.balance_error);
                }
                let last = steps.last().expect("n_steps > 0");
                let (m, f) = StateField::split(&last.p, g.n_matrix, Quantity::Pressure, steps.len());
                last_state = vec![m, f];
            }
            Problem::TwoPhase => {
                let tp = &self.cfg.two_phase;
                let s0 = vec![tp.s0; g.n_nodes()];
                let steps = solve_two_phase(g, &setup.field, &tp.law, &source, &s0, self.cfg.time)?;
                let tau_limit = steps.iter().map(|s| s.tau_limit).fold(f64::INFINITY, f64::min);
                if self.cfg.time.tau > tau_limit {
                    log::warn!(
                        "{name}: tau {:.3e} exceeds the explicit transport bound {:.3e}",
                        self.cfg.time.tau,
                        tau_limit
                    );
                }
                let (mut ss, mut tws) = (Vec::new(), Vec::new());
                for st in &steps {
                    let cu = avg(&st.p);
                    let ex = extract(&st.p, &st.t, Some(&st.tw), &cu);
                    rec.t_nl.push(ex.values());
                    tws.push(ex.wetting.clone().expect("wetting extracted"));
                    rec.flux.push(ex.flux);
                    rec.dp.push(ex.dp);
                    rec.p.push(cu);
                    ss.push(avg(&st.s));
                    rec.balance.push(st.pressure_balance.max(st.saturation_balance));
                    rec.s_min.push(st.s.iter().copied().fold(f64::INFINITY, f64::min));
                    rec.s_max.push(st.s.iter().copied().fold(f64::NEG_INFINITY, f64::max));
                    rec.tau_limit.push(st.tau_limit);
                }
                rec.s = Some(ss);
                rec.tw_nl = Some(tws);
                let last = steps.last().expect("n_steps > 0");
                let (m, f) = StateField::split(&last.p, g.n_matrix, Quantity::Pressure, steps.len());
                let (sm, sf) = StateField::split(&last.s, g.n_matrix, Quantity::Saturation, steps.len());
                last_state = vec![m, f, sm, sf];
            }
        }
        let dir = self.stage_dir(Stage::SimulateFine).join(format!("{name}_final"));
        dump_states(&dir, &setup.fine, &last_state)?;
        Ok(rec)
    }

    /// Fine runs for every snapshot and test source draw. Existing records
    /// from the same config are kept.
    pub fn simulate_fine(&self) -> Result<()> {
        let dir = self.begin(Stage::SimulateFine)?;
        let setup = self.setup()?;
        let mut names = self.snapshot_names();
        names.extend(self.test_names());
        let todo: Vec<String> = names
            .into_iter()
            .filter(|n| match FineRecord::load(&self.fine_path(n)) {
                Ok(r) => r.provenance.config_sha256 != self.hash,
                Err(_) => true,
            })
            .collect();
        log::info!("simulate-fine: {} runs on {} threads", todo.len(), self.threads);
        let results = par_map(&todo, self.threads, |name| {
            let rec = self.fine_run(&setup, name)?;
            rec.save(&self.fine_path(name))?;
            log::info!("simulate-fine: {name} done (q = {:.4e})", rec.q);
            Ok::<_, Error>(())
        });
        results.into_iter().collect::<Result<Vec<()>>>()?;
        std::fs::write(dir.join("runs.txt"), self.snapshot_names().join("\n") + "\n" + &self.test_names().join("\n"))?;
        Ok(())
    }

    pub fn fine_record(&self, name: &str) -> Result<FineRecord> {
        FineRecord::load(&self.require(self.fine_path(name), Stage::SimulateFine)?)
    }

    pub fn upscale(&self) -> Result<TransmissibilityTable> {
        let dir = self.begin(Stage::Upscale)?;
        let s = self.setup()?;
        let table = classic_table(&s.fine, &s.fractures, &s.ci, &s.coarse, &s.field, &self.cfg.upscale)?;
        if !table.flagged.is_empty() {
            log::warn!("upscale: {} degenerate local problems", table.flagged.len());
        }
        table.save(&dir.join("classic.table"))?;
        Ok(table)
    }

    pub fn classic(&self) -> Result<TransmissibilityTable> {
        let path = self.stage_dir(Stage::Upscale).join("classic.table");
        TransmissibilityTable::load(&self.require(path, Stage::Upscale)?)
    }

    /// Coarse series of a fine record, as used by the dataset builder.
    pub fn series(&self, setup: &Setup, index: usize, rec: &FineRecord) -> Result<SnapshotSeries> {
        let n = setup.coarse_graph.n_nodes();
        let mut levels = Vec::with_capacity(rec.n_steps());
        for k in 0..rec.n_steps() {
            levels.push(SeriesLevel {
                step: k,
                p: rec.p[k].clone(),
                s: rec.s.as_ref().map(|s| s[k].clone()),
                table: ExtractedTable {
                    table: TransmissibilityTable::from_connection_values(
                        TableProvenance::Extracted,
                        &setup.coarse,
                        &rec.t_nl[k],
                    )?,
                    wetting: rec.tw_nl.as_ref().map(|t| t[k].clone()),
                    flux: rec.flux[k].clone(),
                    dp: rec.dp[k].clone(),
                    skipped: rec.t_nl[k].iter().filter(|v| v.is_nan()).count(),
                },
            });
        }
        Ok(SnapshotSeries {
            snapshot: index,
            p0: vec![0.0; n],
            s0: rec.s.as_ref().map(|_| vec![self.cfg.two_phase.s0; n]),
            levels,
        })
    }

    fn model_kinds(&self) -> Vec<DomainKind> {
        self.cfg.thresholds.eps.keys().copied().collect()
    }

    pub fn build_dataset(&self) -> Result<Dataset> {
        let dir = self.begin(Stage::BuildDataset)?;
        let setup = self.setup()?;
        let mut records = Vec::new();
        for name in self.snapshot_names() {
            records.push(self.fine_record(&name)?);
        }
        let mut ds = match self.cfg.dataset.mode {
            DatasetMode::Global => {
                let series = records
                    .iter()
                    .enumerate()
                    .map(|(k, r)| self.series(&setup, k, r))
                    .collect::<Result<Vec<_>>>()?;
                let sampling = GlobalSampling {
                    stride: self.cfg.dataset.stride,
                    min_difference: DomainKind::ALL.iter().map(|&k| (k, self.cfg.min_difference(k))).collect(),
                };
                build_global_dataset(self.cfg.problem, &setup.coarse, &setup.domains, &setup.statics, &series, &sampling)?
            }
            DatasetMode::Local => {
                let l = &self.cfg.dataset.local;
                let all = records.iter().flat_map(|r| r.p.iter().flatten().copied());
                let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
                let sampling = LocalSampling {
                    n_samples: l.n_samples,
                    p_min: l.p_min.unwrap_or(lo),
                    p_max: l.p_max.unwrap_or(hi),
                    tau: l.tau.unwrap_or(self.cfg.time.tau),
                    picard: self.cfg.richards.picard,
                    eps: self.cfg.dataset.eps_extract,
                };
                let ctx = LocalContext::new(
                    &setup.fine,
                    &setup.fractures,
                    &setup.coarse,
                    &setup.fine_graph,
                    &setup.map,
                    &setup.field,
                    self.cfg.richards.law,
                );
                build_local_dataset(
                    &ctx,
                    &setup.domains,
                    &setup.statics,
                    &self.model_kinds(),
                    &sampling,
                    derive_seed(self.cfg.seed, "local", 0),
                )?
            }
        };
        ds.split_and_normalize(derive_seed(self.cfg.seed, "split", 0))?;
        ds.save(&dir)?;
        for k in &ds.kinds {
            log::info!("build-dataset: {} has {} samples", k.kind.name(), k.len());
        }
        Ok(ds)
    }

    pub fn dataset(&self) -> Result<Dataset> {
        let dir = self.stage_dir(Stage::BuildDataset);
        self.require(dir.join("manifest.json"), Stage::BuildDataset)?;
        Dataset::load(&dir)
    }

    fn model_path(&self, kind: DomainKind) -> PathBuf {
        self.stage_dir(Stage::Train).join(format!("{}.model", kind.name()))
    }

    /// Trains one model per kind that has a selector threshold and enough
    /// samples.
    pub fn train(&self) -> Result<ModelIndex> {
        let ds = self.dataset()?;
        let dir = self.begin(Stage::Train)?;
        let mut index = ModelIndex {
            trained: Vec::new(),
            skipped: BTreeMap::new(),
            provenance: self.provenance(Stage::Train),
        };
        for kind in self.model_kinds() {
            let path = self.model_path(kind);
            let _ = std::fs::remove_file(&path);
            let Some(kd) = ds.kind(kind) else {
                index.skipped.insert(kind, "no domains of this kind".into());
                continue;
            };
            if kd.norm.is_none() {
                let why = kd.empty_reason.clone().unwrap_or_else(|| "dataset not normalized".into());
                log::warn!("train: skipping {}: {why}", kind.name());
                index.skipped.insert(kind, why);
                continue;
            }
            let k = kind as u64;
            let topology = Topology::standard(kind, &kd.roles, kd.n_outputs, &self.cfg.train.arch);
            let mut model = Model::new(topology, derive_seed(self.cfg.seed, "init", k))?;
            let tc = self.cfg.train.for_kind(kind, derive_seed(self.cfg.seed, "train", k));
            let rep: TrainReport = train(&mut model, kd, &tc)?;
            model.save(&path)?;
            std::fs::write(dir.join(format!("{}.loss.csv", kind.name())), rep.curve_csv())?;
            let summary = TrainSummary {
                kind,
                n_params: model.params.len(),
                train: evaluate(&model, kd, Split::Train)?,
                val: evaluate(&model, kd, Split::Val)?,
                test: evaluate(&model, kd, Split::Test)?,
                best_epoch: rep.best_epoch,
                epochs_run: rep.curve.len(),
                seconds: rep.seconds,
                stopped_on_budget: rep.stopped_on_budget,
            };
            log::info!(
                "train: {} test RMSE {:.3}% ({} epochs, {:.1}s)",
                kind.name(),
                summary.test.rmse_pct,
                summary.epochs_run,
                summary.seconds
            );
            index.trained.push(summary);
        }
        std::fs::write(dir.join("index.json"), serde_json::to_string_pretty(&index)?)?;
        Ok(index)
    }

    pub fn model_index(&self) -> Result<ModelIndex> {
        let path = self.require(self.stage_dir(Stage::Train).join("index.json"), Stage::Train)?;
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    pub fn surrogates(&self, setup: &Setup) -> Result<SurrogateSet> {
        let index = self.model_index()?;
        let mut set = SurrogateSet::default();
        for t in &index.trained {
            let model = Model::load(&self.require(self.model_path(t.kind), Stage::Train)?)?;
            set.kinds
                .insert(t.kind, KindPredictor::new(model, &setup.coarse, &setup.domains, &setup.statics)?);
        }
        Ok(set)
    }

    /// Classic and surrogate coarse solves of one run.
    pub fn coarse_run(
        &self,
        setup: &Setup,
        w: &[f64],
        set: &SurrogateSet,
        policy: &NlPolicy,
        name: &str,
    ) -> Result<CoarseRecord> {
        let (_, spec) = self.sources(name)?;
        let g = &setup.coarse_graph;
        let source = spec.coarse_nodes(&setup.coarse, g)?;
        let time = self.cfg.time;
        let mut rec = CoarseRecord {
            name: name.into(),
            up_p: Vec::new(),
            up_s: None,
            nl_p: Vec::new(),
            nl_s: None,
            per_step: Vec::new(),
            stats: SelectorStats::default(),
            balance: Vec::new(),
            s_min: Vec::new(),
            s_max: Vec::new(),
            tau_limit: Vec::new(),
            provenance: self.provenance(Stage::SolveCoarse),
        };
        match self.cfg.problem {
            Problem::Richards => {
                let r = &self.cfg.richards;
                let p0 = vec![0.0; g.n_nodes()];
                let up = solve_coarse_richards(&setup.coarse, g, w, RichardsMode::Classic, &r.law, &source, &p0, time, r.picard)?;
                let nl = solve_coarse_richards(
                    &setup.coarse,
                    g,
                    w,
                    RichardsMode::Surrogate(set, policy),
                    &r.law,
                    &source,
                    &p0,
                    time,
                    r.picard,
                )?;
                for (a, b) in up.steps.iter().zip(&nl.steps) {
                    rec.up_p.push(a.p.clone());
                    rec.nl_p.push(b.p.clone());
                    rec.balance.push(a.balance_error.max(b.balance_error));
                }
                rec.per_step = nl.per_step;
                rec.stats = nl.stats;
            }
            Problem::TwoPhase => {
                let tp = &self.cfg.two_phase;
                let s0 = vec![tp.s0; g.n_nodes()];
                let up = solve_coarse_two_phase(&setup.coarse, g, w, None, &tp.law, &source, &s0, time)?;
                let nl = solve_coarse_two_phase(&setup.coarse, g, w, Some((set, policy)), &tp.law, &source, &s0, time)?;
                let (mut us, mut ns) = (Vec::new(), Vec::new());
                for (a, b) in up.steps.iter().zip(&nl.steps) {
                    rec.up_p.push(a.p.clone());
                    rec.nl_p.push(b.p.clone());
                    us.push(a.s.clone());
                    ns.push(b.s.clone());
                    rec.balance.push(
                        [a.pressure_balance, a.saturation_balance, b.pressure_balance, b.saturation_balance]
                            .into_iter()
                            .fold(0.0, f64::max),
                    );
                    let all = a.s.iter().chain(&b.s).copied();
                    rec.s_min.push(all.clone().fold(f64::INFINITY, f64::min));
                    rec.s_max.push(all.fold(f64::NEG_INFINITY, f64::max));
                    rec.tau_limit.push(a.tau_limit.min(b.tau_limit));
                }
                rec.up_s = Some(us);
                rec.nl_s = Some(ns);
                rec.per_step = nl.per_step;
                rec.stats = nl.stats;
            }
        }
        Ok(rec)
    }

    fn coarse_path(&self, name: &str) -> PathBuf {
        self.stage_dir(Stage::SolveCoarse).join(format!("{name}.bin"))
    }

    pub fn solve_coarse(&self) -> Result<Vec<CoarseRecord>> {
        let w = self.classic()?.connection_values();
        let setup = self.setup()?;
        let set = self.surrogates(&setup)?;
        let names = self.test_names();
        for n in &names {
            self.require(self.fine_path(n), Stage::SimulateFine)?;
        }
        let dir = self.begin(Stage::SolveCoarse)?;
        let policy = self.cfg.thresholds.clone();
        let results = par_map(&names, self.threads, |name| {
            let rec = self.coarse_run(&setup, &w, &set, &policy, name)?;
            rec.save(&self.coarse_path(name))?;
            let last = rec.nl_p.len();
            let (m, f) = StateField::split(&rec.nl_p[last - 1], setup.coarse.n_cells(), Quantity::Pressure, last);
            let mut fields = vec![m, f];
            if let Some(s) = &rec.nl_s {
                let (sm, sf) = StateField::split(&s[last - 1], setup.coarse.n_cells(), Quantity::Saturation, last);
                fields.extend([sm, sf]);
            }
            dump_states(&dir.join(format!("{name}_final")), &setup.coarse.grid, &fields)?;
            Ok::<_, Error>(rec)
        });
        results.into_iter().collect()
    }

    pub fn coarse_record(&self, name: &str) -> Result<CoarseRecord> {
        CoarseRecord::load(&self.require(self.coarse_path(name), Stage::SolveCoarse)?)
    }

    /// Per-step error rows of one run.
    pub fn error_rows(&self, fine: &FineRecord, coarse: &CoarseRecord) -> Result<Vec<ErrorRow>> {
        let mut rows = Vec::new();
        let mut quantities = vec![("p", &fine.p, &coarse.up_p, &coarse.nl_p)];
        if let (Some(f), Some(u), Some(n)) = (&fine.s, &coarse.up_s, &coarse.nl_s) {
            quantities.push(("s", f, u, n));
        }
        for (k, stats) in coarse.per_step.iter().enumerate() {
            for (q, f, u, n) in &quantities {
                let e_up = relative_error(&u[k], &f[k]);
                let e_nl = relative_error(&n[k], &f[k]);
                let (e_up, e_nl) = match (e_up, e_nl) {
                    (Ok(a), Ok(b)) => (a, b),
                    (Err(Error::DivisionGuard(_)), _) => continue,
                    (Err(e), _) | (_, Err(e)) => return Err(e),
                };
                rows.push(ErrorRow {
                    step: k + 1,
                    quantity: q.to_string(),
                    e_up,
                    e_nl,
                    fallback_fraction: stats.fallback_fraction(),
                });
            }
        }
        Ok(rows)
    }

    pub fn report(&self) -> Result<Report> {
        let names = self.test_names();
        let mut pairs = Vec::new();
        for n in &names {
            pairs.push((self.fine_record(n)?, self.coarse_record(n)?));
        }
        let dir = self.begin(Stage::Report)?;
        let mut quantities: Vec<QuantityErrors> = Vec::new();
        let mut stats = SelectorStats::default();
        let mut summary = String::from("run,quantity,e_UP_%,e_NL_%,fallback_fraction\n");
        for (fine, coarse) in &pairs {
            stats.add(&coarse.stats);
            let rows = self.error_rows(fine, coarse)?;
            std::fs::write(
                dir.join(format!("errors_{}.csv", fine.name)),
                crate::coarse_solver::error_csv(&rows),
            )?;
            let n = fine.n_steps();
            for q in ["p", "s"] {
                let Some(r) = rows.iter().find(|r| r.step == n && r.quantity == q) else { continue };
                writeln!(summary, "{},{},{:.6},{:.6},{:.6}", fine.name, q, r.e_up, r.e_nl, coarse.stats.fallback_fraction())
                    .unwrap();
                match quantities.iter_mut().find(|e| e.quantity == q) {
                    Some(e) => {
                        e.up.push(r.e_up);
                        e.nl.push(r.e_nl);
                    }
                    None => quantities.push(QuantityErrors {
                        quantity: q.into(),
                        up: vec![r.e_up],
                        nl: vec![r.e_nl],
                        median_up: 0.0,
                        median_nl: 0.0,
                    }),
                }
            }
        }
        for q in &mut quantities {
            q.median_up = median(&q.up);
            q.median_nl = median(&q.nl);
        }
        let report = Report {
            runs: names,
            quantities,
            stats,
            provenance: self.provenance(Stage::Report),
        };
        std::fs::write(dir.join("summary.csv"), summary)?;
        std::fs::write(dir.join("summary.txt"), report.table())?;
        std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&report)?)?;
        Ok(report)
    }

    pub fn run(&self, stage: Stage) -> Result<()> {
        match stage {
            Stage::SimulateFine => self.simulate_fine(),
            Stage::Upscale => self.upscale().map(|_| ()),
            Stage::BuildDataset => self.build_dataset().map(|_| ()),
            Stage::Train => self.train().map(|_| ()),
            Stage::SolveCoarse => self.solve_coarse().map(|_| ()),
            Stage::Report => self.report().map(|_| ()),
        }
    }

    pub fn run_all(&self) -> Result<Report> {
        for stage in &Stage::ALL[..5] {
            log::info!("stage {}", stage.name());
            self.run(*stage)?;
        }
        self.report()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_odd_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn par_map_keeps_order() {
        let v: Vec<usize> = (0..37).collect();
        assert_eq!(par_map(&v, 4, |x| x * 2), v.iter().map(|x| x * 2).collect::<Vec<_>>());
    }
}
