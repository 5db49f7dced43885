//! Time stepping on a connection graph: implicit Richards with Picard
//! iterations and IMPES two-phase flow. Coefficient models decide how the
//! transmissibilities are computed (fine TPFA, classic upscaled, extracted or
//! learned).

use crate::error::{invalid, Error, Result};
use crate::fv::FvGraph;
use crate::linalg::{SolverOptions, SpdSolver};
use crate::physics::{eval_mobilities, TwoPhaseLaw};

/// Saturation bounds tolerated before the transport update is flagged.
pub const SATURATION_SLACK: f64 = 1e-12;

pub trait RichardsCoefficients {
    /// Transmissibility per connection for pressure iterate `p` during step
    /// `step` (0-based). `p_old` is the previous time level.
    fn transmissibilities(
        &mut self,
        p: &[f64],
        p_old: &[f64],
        step: usize,
        out: &mut [f64],
    ) -> Result<()>;
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct PicardOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PicardOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 50,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RichardsProblem<'a> {
    pub graph: &'a FvGraph,
    /// Storage coefficient per node.
    pub storage: Vec<f64>,
    /// Source rate per unit measure, per node.
    pub source: Vec<f64>,
    pub tau: f64,
    pub n_steps: usize,
    pub picard: PicardOptions,
    pub solver: SolverOptions,
}

#[derive(Debug, Clone)]
pub struct RichardsStep {
    pub p: Vec<f64>,
    /// Transmissibilities of the final linear solve of the step.
    pub t: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub last_update: f64,
    /// `|sum c V (p - p_old)/tau - sum f V|`, relative.
    pub balance_error: f64,
}

fn relative_gap(lhs: f64, rhs: f64, scale: f64) -> f64 {
    if scale == 0.0 {
        (lhs - rhs).abs()
    } else {
        (lhs - rhs).abs() / scale
    }
}

pub fn run_richards(
    prob: &RichardsProblem,
    p0: &[f64],
    coeffs: &mut dyn RichardsCoefficients,
) -> Result<Vec<RichardsStep>> {
    let g = prob.graph;
    let n = g.n_nodes();
    if p0.len() != n || prob.storage.len() != n || prob.source.len() != n {
        return invalid(format!("Richards problem sized for {n} nodes got mismatched vectors"));
    }
    if !(prob.tau > 0.0) {
        return invalid("time step must be positive");
    }
    let mut solver = SpdSolver::new(&g.pattern, prob.solver);
    let diag: Vec<f64> = (0..n).map(|i| prob.storage[i] * g.volume[i] / prob.tau).collect();
    let mut p_old = p0.to_vec();
    let mut t = vec![0.0; g.conns.len()];
    let mut out = Vec::with_capacity(prob.n_steps);
    for step in 0..prob.n_steps {
        let rhs: Vec<f64> = (0..n)
            .map(|i| diag[i] * p_old[i] + prob.source[i] * g.volume[i])
            .collect();
        let mut p = p_old.clone();
        let mut iterations = 0;
        let mut converged = false;
        let mut update = f64::INFINITY;
        while iterations < prob.picard.max_iter {
            coeffs.transmissibilities(&p, &p_old, step, &mut t)?;
            let a = g.assemble(&t, &diag);
            let next = solver.solve(&a, &rhs).map_err(|e| Error::SolverFailure {
                step,
                reason: e.to_string(),
            })?;
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::SolverFailure {
                    step,
                    reason: "non-finite pressure".into(),
                });
            }
            update = next
                .iter()
                .zip(&p)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            p = next;
            iterations += 1;
            if update < prob.picard.tol {
                converged = true;
                break;
            }
        }
        if !converged {
            log::warn!("step {step}: Picard stopped after {iterations} iterations, update {update:.3e}");
        }
        let mut stored = 0.0;
        let mut src = 0.0;
        let mut scale = 0.0;
        for i in 0..n {
            let ds = diag[i] * (p[i] - p_old[i]);
            let f = prob.source[i] * g.volume[i];
            stored += ds;
            src += f;
            scale += ds.abs() + f.abs();
        }
        out.push(RichardsStep {
            balance_error: relative_gap(stored, src, scale),
            p: p.clone(),
            t: t.clone(),
            iterations,
            converged,
            last_update: update,
        });
        p_old = p;
    }
    Ok(out)
}

pub trait TwoPhaseCoefficients {
    /// Total transmissibility per connection from previous saturations (and
    /// the previous pressure, for state-dependent models).
    fn total(&mut self, s_old: &[f64], p_old: &[f64], step: usize, out: &mut [f64]) -> Result<()>;

    /// Wetting transmissibility per connection given the new pressure.
    fn wetting(
        &mut self,
        s_old: &[f64],
        p: &[f64],
        t_total: &[f64],
        step: usize,
        out: &mut [f64],
    ) -> Result<()>;

    /// Bound-preserving replacement for connection `c`, if the model has one.
    fn wetting_fallback(&mut self, _c: usize, _s_old: &[f64], _p: &[f64], _t_total: &[f64]) -> Option<f64> {
        None
    }
}

#[derive(Debug, Clone)]
pub struct TwoPhaseProblem<'a> {
    pub graph: &'a FvGraph,
    pub porosity: Vec<f64>,
    /// Total source rate per unit measure, per node; must sum to zero.
    pub source: Vec<f64>,
    /// Wetting fraction of injected fluid.
    pub injected_wetting: f64,
    pub law: TwoPhaseLaw,
    pub tau: f64,
    pub n_steps: usize,
    pub solver: SolverOptions,
}

#[derive(Debug, Clone)]
pub struct TwoPhaseStep {
    pub p: Vec<f64>,
    pub s: Vec<f64>,
    pub t: Vec<f64>,
    pub tw: Vec<f64>,
    /// `|sum_i (sum_j T (p_i - p_j) - q_i V_i)|` relative to `sum |q V|`.
    pub pressure_balance: f64,
    /// Largest single-cell pressure residual relative to `max |q V|`.
    pub pressure_residual: f64,
    pub saturation_balance: f64,
    /// Largest stable explicit step estimated from this step's fluxes.
    pub tau_limit: f64,
    /// Connections switched to the bound-preserving fallback.
    pub bound_fallbacks: usize,
}

/// Explicit-transport step bound `min_i phi_i V_i / (2 (sum_c |u_c| + |q_i| V_i))`
/// from total fluxes `u`.
pub fn transport_step_bound(g: &FvGraph, porosity: &[f64], source: &[f64], fluxes: &[f64]) -> f64 {
    let mut load: Vec<f64> = (0..g.n_nodes()).map(|i| source[i].abs() * g.volume[i]).collect();
    for (c, conn) in g.conns.iter().enumerate() {
        load[conn.a] += fluxes[c].abs();
        load[conn.b] += fluxes[c].abs();
    }
    (0..g.n_nodes())
        .filter(|&i| load[i] > 0.0)
        .map(|i| porosity[i] * g.volume[i] / (2.0 * load[i]))
        .fold(f64::INFINITY, f64::min)
}

pub fn wetting_source(prob: &TwoPhaseProblem, s_old: &[f64]) -> Vec<f64> {
    prob.source
        .iter()
        .zip(s_old)
        .map(|(&q, &s)| {
            if q > 0.0 {
                prob.injected_wetting * q
            } else {
                eval_mobilities(&prob.law, s).frac_flow * q
            }
        })
        .collect()
}

pub fn run_two_phase(
    prob: &TwoPhaseProblem,
    s0: &[f64],
    coeffs: &mut dyn TwoPhaseCoefficients,
) -> Result<Vec<TwoPhaseStep>> {
    let g = prob.graph;
    let n = g.n_nodes();
    if s0.len() != n || prob.porosity.len() != n || prob.source.len() != n {
        return invalid(format!("two-phase problem sized for {n} nodes got mismatched vectors"));
    }
    if s0.iter().any(|s| !(0.0..=1.0).contains(s)) {
        return invalid("initial saturation must lie in [0, 1]");
    }
    let qv: Vec<f64> = (0..n).map(|i| prob.source[i] * g.volume[i]).collect();
    let q_abs: f64 = qv.iter().map(|v| v.abs()).sum();
    let q_sum: f64 = qv.iter().sum();
    if q_sum.abs() > 1e-10 * q_abs.max(f64::MIN_POSITIVE) {
        return invalid(format!("sources do not balance: net rate {q_sum:e}"));
    }
    let q_max = qv.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let pin = 0;
    let mut solver = SpdSolver::new(&g.pattern, prob.solver);
    let zeros = vec![0.0; n];
    let mut s_old = s0.to_vec();
    let mut p_old = vec![0.0; n];
    let mut t = vec![0.0; g.conns.len()];
    let mut tw = vec![0.0; g.conns.len()];
    let mut out = Vec::with_capacity(prob.n_steps);
    for step in 0..prob.n_steps {
        coeffs.total(&s_old, &p_old, step, &mut t)?;
        if t.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::SolverFailure {
                step,
                reason: "invalid total transmissibility".into(),
            });
        }
        let a = g.assemble(&t, &zeros);
        let mut p = solver
            .solve_pinned(&a, &qv, pin)
            .map_err(|e| Error::SolverFailure {
                step,
                reason: e.to_string(),
            })?;
        let mean = g.matrix_mean(&p);
        p.iter_mut().for_each(|v| *v -= mean);

        let div = g.divergence(&t, &p);
        let res_sum: f64 = div.iter().zip(&qv).map(|(d, q)| d - q).sum();
        let res_max = div
            .iter()
            .zip(&qv)
            .fold(0.0f64, |m, (d, q)| m.max((d - q).abs()));
        let fluxes = g.fluxes(&t, &p);
        let tau_limit = transport_step_bound(g, &prob.porosity, &prob.source, &fluxes);

        coeffs.wetting(&s_old, &p, &t, step, &mut tw)?;
        let qw = wetting_source(prob, &s_old);
        let update = |tw: &[f64]| -> Vec<f64> {
            let wdiv = g.divergence(tw, &p);
            (0..n)
                .map(|i| {
                    s_old[i]
                        + prob.tau / (prob.porosity[i] * g.volume[i]) * (qw[i] * g.volume[i] - wdiv[i])
                })
                .collect::<Vec<f64>>()
        };
        let mut s = update(&tw);
        let mut bound_fallbacks = 0;
        for _ in 0..4 {
            let bad: Vec<bool> = s
                .iter()
                .map(|&v| v < -SATURATION_SLACK || v > 1.0 + SATURATION_SLACK)
                .collect();
            if !bad.iter().any(|&b| b) {
                break;
            }
            let mut changed = false;
            for (c, conn) in g.conns.iter().enumerate() {
                if bad[conn.a] || bad[conn.b] {
                    if let Some(v) = coeffs.wetting_fallback(c, &s_old, &p, &t) {
                        if v != tw[c] {
                            tw[c] = v;
                            bound_fallbacks += 1;
                            changed = true;
                        }
                    }
                }
            }
            if !changed {
                break;
            }
            s = update(&tw);
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::SolverFailure {
                step,
                reason: "non-finite saturation".into(),
            });
        }
        let mut stored = 0.0;
        let mut src = 0.0;
        let mut scale = 0.0;
        for i in 0..n {
            let ds = prob.porosity[i] * g.volume[i] * (s[i] - s_old[i]) / prob.tau;
            let f = qw[i] * g.volume[i];
            stored += ds;
            src += f;
            scale += ds.abs() + f.abs();
        }
        out.push(TwoPhaseStep {
            pressure_balance: relative_gap(res_sum, 0.0, q_abs),
            pressure_residual: relative_gap(res_max, 0.0, q_max),
            saturation_balance: relative_gap(stored, src, scale),
            tau_limit,
            bound_fallbacks,
            p: p.clone(),
            s: s.clone(),
            t: t.clone(),
            tw: tw.clone(),
        });
        s_old = s;
        p_old = p;
    }
    Ok(out)
}
