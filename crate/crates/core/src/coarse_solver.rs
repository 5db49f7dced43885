//! Coarse-grid Richards and two-phase solvers driven by classic, extracted
//! or surrogate-predicted transmissibilities.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::{connection_of, window_inputs, StaticFeatures};
use crate::error::{invalid, Error, Result};
use crate::fine_solver::{LinearTwoPhase, TimeStepping};
use crate::flow::{
    run_richards, run_two_phase, PicardOptions, RichardsCoefficients, RichardsProblem, RichardsStep,
    TwoPhaseCoefficients, TwoPhaseProblem, TwoPhaseStep,
};
use crate::fv::FvGraph;
use crate::linalg::SolverOptions;
use crate::mesh::{CoarseGrid, DomainKind, FaceOrientation, LocalDomain};
use crate::physics::{RichardsLaw, TwoPhaseLaw};
use crate::surrogate::layers::DropoutMode;
use crate::surrogate::{pack_role, Act, Feed, Model};

/// Domain kind of every coarse connection, in connection order.
pub fn connection_kinds(coarse: &CoarseGrid) -> Vec<DomainKind> {
    let mut out: Vec<DomainKind> = coarse
        .grid
        .faces
        .iter()
        .map(|f| match f.orientation {
            FaceOrientation::Horizontal => DomainKind::MmHorizontal,
            FaceOrientation::Vertical => DomainKind::MmVertical,
        })
        .collect();
    out.extend(std::iter::repeat(DomainKind::Mf).take(coarse.n_fractures()));
    out.extend(std::iter::repeat(DomainKind::Ff).take(coarse.fracture_links.len()));
    out
}

/// Selector thresholds: a surrogate value is used only where the coarse
/// pressure difference exceeds `eps[kind]` (and, for `T^w`, the saturation
/// difference exceeds `eps_s`). Kinds missing from `eps` never use a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NlPolicy {
    pub eps: BTreeMap<DomainKind, f64>,
    #[serde(default)]
    pub eps_s: f64,
}

impl NlPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.eps.values().any(|e| !(*e >= 0.0)) || !(self.eps_s >= 0.0) {
            return invalid("selector thresholds must be non-negative");
        }
        Ok(())
    }
}

/// Face-query counters of the selector.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SelectorStats {
    /// Coarse connections (with a model) considered, summed over queries.
    pub queries: usize,
    /// Connections where the surrogate value was used.
    pub predicted: usize,
    pub below_threshold: usize,
    pub non_positive: usize,
}

impl SelectorStats {
    pub fn fallback_fraction(&self) -> f64 {
        if self.queries == 0 {
            0.0
        } else {
            1.0 - self.predicted as f64 / self.queries as f64
        }
    }

    pub fn add(&mut self, o: &SelectorStats) {
        self.queries += o.queries;
        self.predicted += o.predicted;
        self.below_threshold += o.below_threshold;
        self.non_positive += o.non_positive;
    }
}

/// A trained model for one kind with its domains and cached embeddings of the
/// state-independent branches.
pub struct KindPredictor {
    pub kind: DomainKind,
    pub model: Model,
    pub domains: Vec<LocalDomain>,
    pub conns: Vec<usize>,
    embeds: Vec<Option<Act>>,
}

impl KindPredictor {
    pub fn new(model: Model, coarse: &CoarseGrid, domains: &[LocalDomain], statics: &StaticFeatures) -> Result<Self> {
        let kind = model.topology.kind;
        let Some(norm) = model.norm.clone() else {
            return invalid(format!("{} model has no normalization statistics", kind.name()));
        };
        let mine: Vec<LocalDomain> = domains.iter().filter(|d| d.kind == kind).cloned().collect();
        let t = &model.topology;
        let n_fine = t.roles.iter().take_while(|r| r.fine).count();
        let statics_norm: Vec<Vec<f64>> = mine
            .iter()
            .map(|d| {
                let mut x = statics.inputs(d);
                norm.apply_inputs(&t.roles[..n_fine], 0, &mut x);
                x
            })
            .collect();
        let static_len: usize = t.roles[..n_fine].iter().map(|r| r.len()).sum();
        if statics_norm.first().is_some_and(|x| x.len() != static_len) {
            return Err(Error::Shape(format!("{}: model does not match the domain images", kind.name())));
        }
        let mut offs = Vec::new();
        let mut at = 0;
        for r in &t.roles {
            offs.push(at);
            if r.fine {
                at += r.len();
            }
        }
        let mut embeds = Vec::with_capacity(t.branches.len());
        for (b, br) in t.branches.iter().enumerate() {
            let role = &t.roles[br.role];
            if !role.fine || mine.is_empty() {
                embeds.push(None);
                continue;
            }
            let rows: Vec<&[f64]> = statics_norm
                .iter()
                .map(|x| &x[offs[br.role]..offs[br.role] + role.len()])
                .collect();
            let (e, _) = model.branch_forward(b, pack_role(role, &rows), &mut DropoutMode::Off, false);
            embeds.push(Some(e));
        }
        let conns = mine.iter().map(|d| connection_of(d, coarse)).collect();
        Ok(Self {
            kind,
            model,
            domains: mine,
            conns,
            embeds,
        })
    }

    /// Denormalized predictions `[slot][output]` for the given slots.
    pub fn predict(&self, coarse: &CoarseGrid, p: &[f64], s: Option<&[f64]>, slots: &[usize]) -> Result<Vec<f64>> {
        if slots.is_empty() {
            return Ok(Vec::new());
        }
        let t = &self.model.topology;
        let norm = self.model.norm.as_ref().expect("checked at construction");
        let n_fine = t.roles.iter().take_while(|r| r.fine).count();
        let dyn_roles = &t.roles[n_fine..];
        let dyn_len: usize = dyn_roles.iter().map(|r| r.len()).sum();
        let mut dynamic = Vec::with_capacity(slots.len() * dyn_len);
        let mut buf = Vec::with_capacity(dyn_len);
        for &k in slots {
            buf.clear();
            window_inputs(&self.domains[k], coarse, p, s, &mut buf);
            if buf.len() != dyn_len {
                return Err(Error::Shape(format!("{}: window inputs do not match the model", self.kind.name())));
            }
            norm.apply_inputs(dyn_roles, n_fine, &mut buf);
            dynamic.extend_from_slice(&buf);
        }
        let mut offs = Vec::new();
        let mut at = 0;
        for r in &t.roles {
            offs.push(at);
            if !r.fine {
                at += r.len();
            }
        }
        let feeds: Vec<Feed> = t
            .branches
            .iter()
            .enumerate()
            .map(|(b, br)| match &self.embeds[b] {
                Some(e) => Feed {
                    x: e.clone(),
                    gather: slots.to_vec(),
                    embedded: true,
                },
                None => {
                    let role = &t.roles[br.role];
                    let rows: Vec<&[f64]> = (0..slots.len())
                        .map(|i| &dynamic[i * dyn_len + offs[br.role]..i * dyn_len + offs[br.role] + role.len()])
                        .collect();
                    Feed {
                        x: pack_role(role, &rows),
                        gather: (0..slots.len()).collect(),
                        embedded: false,
                    }
                }
            })
            .collect();
        let (mut y, _) = self.model.forward_batch(&feeds, slots.len(), &mut DropoutMode::Off, false)?;
        norm.invert_targets(&mut y);
        Ok(y)
    }
}

/// Trained predictors by kind.
#[derive(Default)]
pub struct SurrogateSet {
    pub kinds: BTreeMap<DomainKind, KindPredictor>,
}

impl SurrogateSet {
    /// Predictions per connection: `out[c] = Some(outputs)` where the
    /// selector picked the surrogate and the total value is positive.
    fn query(
        &self,
        coarse: &CoarseGrid,
        graph: &FvGraph,
        policy: &NlPolicy,
        p: &[f64],
        s: Option<&[f64]>,
        stats: &mut SelectorStats,
    ) -> Result<Vec<Option<Vec<f64>>>> {
        let mut out = vec![None; graph.conns.len()];
        for (kind, pred) in &self.kinds {
            let Some(&eps) = policy.eps.get(kind) else { continue };
            let mut slots = Vec::new();
            for (k, &c) in pred.conns.iter().enumerate() {
                stats.queries += 1;
                let conn = &graph.conns[c];
                if (p[conn.a] - p[conn.b]).abs() > eps {
                    slots.push(k);
                } else {
                    stats.below_threshold += 1;
                }
            }
            let y = pred.predict(coarse, p, s, &slots)?;
            let m = pred.model.topology.n_outputs;
            for (i, &k) in slots.iter().enumerate() {
                let v = &y[i * m..(i + 1) * m];
                if v[0] > 0.0 && v[0].is_finite() {
                    stats.predicted += 1;
                    out[pred.conns[k]] = Some(v.to_vec());
                } else {
                    stats.non_positive += 1;
                }
            }
        }
        Ok(out)
    }
}

/// Where coarse Richards transmissibilities come from.
pub enum RichardsMode<'a> {
    /// `T = k_r(mean p) W`.
    Classic,
    /// Extracted `T^NL` per step (NaN entries fall back to classic).
    Extracted(&'a [Vec<f64>]),
    Surrogate(&'a SurrogateSet, &'a NlPolicy),
}

struct CoarseRichards<'a> {
    coarse: &'a CoarseGrid,
    graph: &'a FvGraph,
    w: &'a [f64],
    law: RichardsLaw,
    mode: RichardsMode<'a>,
    stats: Vec<SelectorStats>,
}

impl CoarseRichards<'_> {
    fn classic(&self, p: &[f64], out: &mut [f64]) {
        for (c, conn) in self.graph.conns.iter().enumerate() {
            out[c] = self.law.kr(0.5 * (p[conn.a] + p[conn.b])) * self.w[c];
        }
    }
}

impl RichardsCoefficients for CoarseRichards<'_> {
    fn transmissibilities(&mut self, p: &[f64], _p_old: &[f64], step: usize, out: &mut [f64]) -> Result<()> {
        self.classic(p, out);
        match self.mode {
            RichardsMode::Classic => {}
            RichardsMode::Extracted(tables) => {
                let table = tables.get(step).ok_or_else(|| Error::SolverFailure {
                    step,
                    reason: "no extracted table for this step".into(),
                })?;
                for (c, &v) in table.iter().enumerate() {
                    if v.is_finite() {
                        out[c] = v;
                    }
                }
            }
            RichardsMode::Surrogate(set, policy) => {
                let stats = step_stats(&mut self.stats, step);
                let pred = set.query(self.coarse, self.graph, policy, p, None, stats)?;
                for (c, v) in pred.into_iter().enumerate() {
                    if let Some(v) = v {
                        out[c] = v[0];
                    }
                }
            }
        }
        Ok(())
    }
}

fn step_stats(v: &mut Vec<SelectorStats>, step: usize) -> &mut SelectorStats {
    if v.len() <= step {
        v.resize(step + 1, SelectorStats::default());
    }
    &mut v[step]
}

fn totals(per_step: &[SelectorStats]) -> SelectorStats {
    let mut t = SelectorStats::default();
    per_step.iter().for_each(|s| t.add(s));
    t
}

#[derive(Debug, Clone)]
pub struct CoarseRichardsRun {
    pub steps: Vec<RichardsStep>,
    pub stats: SelectorStats,
    /// Selector counters per time step (summed over Picard iterations).
    pub per_step: Vec<SelectorStats>,
}

/// Coarse Richards solve. `w` holds classic `W` per coarse connection and
/// `source` the rate per unit measure per coarse node.
#[allow(clippy::too_many_arguments)]
pub fn solve_coarse_richards(
    coarse: &CoarseGrid,
    graph: &FvGraph,
    w: &[f64],
    mode: RichardsMode,
    law: &RichardsLaw,
    source: &[f64],
    p0: &[f64],
    time: TimeStepping,
    picard: PicardOptions,
) -> Result<CoarseRichardsRun> {
    if w.len() != graph.conns.len() {
        return invalid("classic table does not match the coarse connections");
    }
    if let RichardsMode::Surrogate(_, policy) = &mode {
        policy.validate()?;
    }
    let mut storage = vec![law.c_m; graph.n_matrix];
    storage.resize(graph.n_nodes(), law.c_f);
    let prob = RichardsProblem {
        graph,
        storage,
        source: source.to_vec(),
        tau: time.tau,
        n_steps: time.n_steps,
        picard,
        solver: SolverOptions::default(),
    };
    let mut coeffs = CoarseRichards {
        coarse,
        graph,
        w,
        law: *law,
        mode,
        stats: Vec::new(),
    };
    let steps = run_richards(&prob, p0, &mut coeffs)?;
    let mut per_step = coeffs.stats;
    per_step.resize(steps.len(), SelectorStats::default());
    Ok(CoarseRichardsRun {
        steps,
        stats: totals(&per_step),
        per_step,
    })
}

/// Two-phase coefficients: classic `H(λ) W` and upwinded `λ^w W`, with
/// surrogate `(T, T^w)` where the selector allows. Predictions are made once
/// per step from the previous coarse state.
struct CoarseTwoPhase<'a> {
    coarse: &'a CoarseGrid,
    graph: &'a FvGraph,
    up: LinearTwoPhase,
    set: Option<(&'a SurrogateSet, &'a NlPolicy)>,
    wetting_pred: Vec<Option<f64>>,
    stats: Vec<SelectorStats>,
}

impl TwoPhaseCoefficients for CoarseTwoPhase<'_> {
    fn total(&mut self, s_old: &[f64], p_old: &[f64], step: usize, out: &mut [f64]) -> Result<()> {
        self.up.total(s_old, p_old, step, out)?;
        self.wetting_pred.iter_mut().for_each(|v| *v = None);
        let Some((set, policy)) = self.set else {
            return Ok(());
        };
        let stats = step_stats(&mut self.stats, step);
        let pred = set.query(self.coarse, self.graph, policy, p_old, Some(s_old), stats)?;
        for (c, v) in pred.into_iter().enumerate() {
            let Some(v) = v else { continue };
            out[c] = v[0];
            let conn = &self.graph.conns[c];
            if v.len() > 1 && v[1] >= 0.0 && v[1].is_finite() && (s_old[conn.a] - s_old[conn.b]).abs() > policy.eps_s {
                self.wetting_pred[c] = Some(v[1]);
            }
        }
        Ok(())
    }

    fn wetting(&mut self, s_old: &[f64], p: &[f64], t_total: &[f64], step: usize, out: &mut [f64]) -> Result<()> {
        self.up.wetting(s_old, p, t_total, step, out)?;
        for (c, v) in self.wetting_pred.iter().enumerate() {
            if let Some(v) = v {
                out[c] = *v;
            }
        }
        Ok(())
    }

    fn wetting_fallback(&mut self, c: usize, s_old: &[f64], p: &[f64], t_total: &[f64]) -> Option<f64> {
        self.wetting_pred[c].map(|_| {
            // upwinded mobility times the total coefficient in use
            let up = self.up.wetting_at(c, s_old, p, t_total);
            let lin = self.up.total_at(c, s_old);
            if lin > 0.0 {
                up / lin * t_total[c]
            } else {
                up
            }
        })
    }
}

#[derive(Debug, Clone)]
pub struct CoarseTwoPhaseRun {
    pub steps: Vec<TwoPhaseStep>,
    pub stats: SelectorStats,
    pub per_step: Vec<SelectorStats>,
}

/// Coarse IMPES solve; `surrogates = None` is the classic path.
#[allow(clippy::too_many_arguments)]
pub fn solve_coarse_two_phase(
    coarse: &CoarseGrid,
    graph: &FvGraph,
    w: &[f64],
    surrogates: Option<(&SurrogateSet, &NlPolicy)>,
    law: &TwoPhaseLaw,
    source: &[f64],
    s0: &[f64],
    time: TimeStepping,
) -> Result<CoarseTwoPhaseRun> {
    if w.len() != graph.conns.len() {
        return invalid("classic table does not match the coarse connections");
    }
    if let Some((_, policy)) = surrogates {
        policy.validate()?;
    }
    let prob: TwoPhaseProblem = crate::fine_solver::two_phase_problem(graph, law, source, time);
    let mut coeffs = CoarseTwoPhase {
        coarse,
        graph,
        up: LinearTwoPhase::new(graph, w.to_vec(), *law),
        set: surrogates,
        wetting_pred: vec![None; graph.conns.len()],
        stats: Vec::new(),
    };
    let steps = run_two_phase(&prob, s0, &mut coeffs)?;
    let mut per_step = coeffs.stats;
    per_step.resize(steps.len(), SelectorStats::default());
    Ok(CoarseTwoPhaseRun {
        steps,
        stats: totals(&per_step),
        per_step,
    })
}

/// `100 * sqrt(sum (ref - u)^2 / sum ref^2)`.
pub fn relative_error(u: &[f64], reference: &[f64]) -> Result<f64> {
    if u.len() != reference.len() {
        return Err(Error::Shape(format!("{} values against {} reference values", u.len(), reference.len())));
    }
    let num: f64 = u.iter().zip(reference).map(|(a, b)| (b - a) * (b - a)).sum();
    let den: f64 = reference.iter().map(|b| b * b).sum();
    if den == 0.0 {
        return Err(Error::DivisionGuard("reference has zero norm".into()));
    }
    Ok(100.0 * (num / den).sqrt())
}

/// One row of the error report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRow {
    pub step: usize,
    pub quantity: String,
    pub e_up: f64,
    pub e_nl: f64,
    pub fallback_fraction: f64,
}

pub fn error_csv(rows: &[ErrorRow]) -> String {
    let mut s = String::from("step,quantity,e_UP_%,e_NL_%,fallback_fraction\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6}\n",
            r.step, r.quantity, r.e_up, r.e_nl, r.fallback_fraction
        ));
    }
    s
}
