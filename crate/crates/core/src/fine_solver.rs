//! Fine-grid reference simulations (TPFA + embedded fractures), coarse
//! averaging and state dumps.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::flow::{
    run_richards, run_two_phase, PicardOptions, RichardsCoefficients, RichardsProblem,
    RichardsStep, TwoPhaseCoefficients, TwoPhaseProblem, TwoPhaseStep,
};
use crate::fv::{ConnKind, FvGraph};
use crate::io;
use crate::linalg::SolverOptions;
use crate::mesh::{CoarseGrid, FractureMesh, StructuredGrid};
use crate::physics::{harmonic, PermeabilityField, RichardsLaw, TwoPhaseLaw};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Continuum {
    Matrix,
    Fracture,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quantity {
    Pressure,
    Saturation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateField {
    pub continuum: Continuum,
    pub quantity: Quantity,
    pub step: usize,
    pub values: Vec<f64>,
}

impl StateField {
    /// Splits a node vector (matrix cells then fracture cells).
    pub fn split(nodes: &[f64], n_matrix: usize, quantity: Quantity, step: usize) -> (Self, Self) {
        (
            Self {
                continuum: Continuum::Matrix,
                quantity,
                step,
                values: nodes[..n_matrix].to_vec(),
            },
            Self {
                continuum: Continuum::Fracture,
                quantity,
                step,
                values: nodes[n_matrix..].to_vec(),
            },
        )
    }
}

/// Per-coarse-cell source rates (per unit area), applied uniformly to the
/// fine cells of each coarse cell. Fracture cells carry no source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceSpec {
    pub coarse_nx: usize,
    pub coarse_ny: usize,
    /// `(i, j, rate)` triples on the coarse grid.
    pub wells: Vec<(usize, usize, f64)>,
}

impl SourceSpec {
    pub fn total(&self, cell_area: f64) -> f64 {
        self.wells.iter().map(|w| w.2 * cell_area).sum()
    }

    /// Rates on the fine graph nodes.
    pub fn fine_nodes(&self, coarse: &CoarseGrid, graph: &FvGraph) -> Result<Vec<f64>> {
        let coarse_rates = self.coarse_cells(coarse)?;
        let mut out = vec![0.0; graph.n_nodes()];
        for (cell, slot) in out.iter_mut().enumerate().take(graph.n_matrix) {
            *slot = coarse_rates[coarse.cell_of_fine[cell]];
        }
        Ok(out)
    }

    /// Rates on the coarse graph nodes.
    pub fn coarse_nodes(&self, coarse: &CoarseGrid, graph: &FvGraph) -> Result<Vec<f64>> {
        let mut out = self.coarse_cells(coarse)?;
        out.resize(graph.n_nodes(), 0.0);
        Ok(out)
    }

    fn coarse_cells(&self, coarse: &CoarseGrid) -> Result<Vec<f64>> {
        if self.coarse_nx != coarse.nx() || self.coarse_ny != coarse.ny() {
            return invalid("source layout does not match the coarse grid");
        }
        let mut out = vec![0.0; coarse.n_cells()];
        for &(i, j, q) in &self.wells {
            if i >= coarse.nx() || j >= coarse.ny() {
                return invalid(format!("well ({i}, {j}) outside the coarse grid"));
            }
            out[coarse.grid.index(i, j)] += q;
        }
        Ok(out)
    }
}

/// Per-node intrinsic permeability: matrix field then `k_f` on fracture cells.
pub fn node_permeability(field: &PermeabilityField, graph: &FvGraph) -> Vec<f64> {
    let mut k = field.values.clone();
    k.resize(graph.n_nodes(), field.k_fracture);
    k
}

#[inline]
fn face_average(kind: ConnKind, a: f64, b: f64) -> f64 {
    match kind {
        ConnKind::MatrixFracture => harmonic(a, b),
        _ => 0.5 * (a + b),
    }
}

/// Per-connection transmissibility data of one state.
#[derive(Debug, Clone, PartialEq)]
pub struct FluxAssembly {
    /// Geometric transmissibility with intrinsic permeability.
    pub w: Vec<f64>,
    /// Nonlinear transmissibility at the given state.
    pub t: Vec<f64>,
    /// True when `a` is upstream: `T (u_a - u_b) > 0`.
    pub upwind_a: Vec<bool>,
}

impl FluxAssembly {
    pub fn fluxes(&self, graph: &FvGraph, u: &[f64]) -> Vec<f64> {
        graph.fluxes(&self.t, u)
    }
}

/// Linear transmissibilities `W`: `|E|/d` times the arithmetic mean of
/// matrix permeabilities, `CI` times the harmonic mean of matrix and fracture
/// permeability, `k_f / Δ` along fractures.
pub fn geometric_transmissibility(graph: &FvGraph, kappa: &[f64]) -> Vec<f64> {
    graph
        .conns
        .iter()
        .map(|c| c.geom * face_average(c.kind, kappa[c.a], kappa[c.b]))
        .collect()
}

/// TPFA for the Richards problem at pressure `p`.
pub fn assemble_tpfa(graph: &FvGraph, kappa: &[f64], law: &RichardsLaw, p: &[f64]) -> FluxAssembly {
    let mut t = vec![0.0; graph.conns.len()];
    FineRichardsCoefficients::new(graph, kappa.to_vec(), *law).fill(p, &mut t);
    let upwind_a = graph
        .conns
        .iter()
        .zip(&t)
        .map(|(c, tc)| tc * (p[c.a] - p[c.b]) > 0.0)
        .collect();
    FluxAssembly {
        w: geometric_transmissibility(graph, kappa),
        t,
        upwind_a,
    }
}

/// `T = geom * avg(k k_r(p))` per connection.
#[derive(Debug, Clone)]
pub struct FineRichardsCoefficients {
    kappa: Vec<f64>,
    law: RichardsLaw,
    conns: Vec<(usize, usize, ConnKind, f64)>,
}

impl FineRichardsCoefficients {
    pub fn new(graph: &FvGraph, kappa: Vec<f64>, law: RichardsLaw) -> Self {
        Self {
            kappa,
            law,
            conns: graph.conns.iter().map(|c| (c.a, c.b, c.kind, c.geom)).collect(),
        }
    }

    pub fn fill(&self, p: &[f64], out: &mut [f64]) {
        let k: Vec<f64> = self
            .kappa
            .iter()
            .zip(p)
            .map(|(k, p)| k * self.law.kr(*p))
            .collect();
        for (c, &(a, b, kind, geom)) in self.conns.iter().enumerate() {
            out[c] = geom * face_average(kind, k[a], k[b]);
        }
    }
}

impl RichardsCoefficients for FineRichardsCoefficients {
    fn transmissibilities(&mut self, p: &[f64], _p_old: &[f64], _step: usize, out: &mut [f64]) -> Result<()> {
        self.fill(p, out);
        Ok(())
    }
}

/// Two-phase coefficients from fixed linear transmissibilities `W`:
/// `T = H(λ_a, λ_b) W`, `T^w = λ^w(s_upstream) W`.
#[derive(Debug, Clone)]
pub struct LinearTwoPhase {
    pub w: Vec<f64>,
    pub law: TwoPhaseLaw,
    conns: Vec<(usize, usize)>,
}

impl LinearTwoPhase {
    pub fn new(graph: &FvGraph, w: Vec<f64>, law: TwoPhaseLaw) -> Self {
        Self {
            w,
            law,
            conns: graph.conns.iter().map(|c| (c.a, c.b)).collect(),
        }
    }

    pub fn total_at(&self, c: usize, s: &[f64]) -> f64 {
        let (a, b) = self.conns[c];
        harmonic(self.law.total(s[a]), self.law.total(s[b])) * self.w[c]
    }

    pub fn wetting_at(&self, c: usize, s: &[f64], p: &[f64], t: &[f64]) -> f64 {
        let (a, b) = self.conns[c];
        let up = if t[c] * (p[a] - p[b]) > 0.0 { a } else { b };
        self.law.wetting(s[up]) * self.w[c]
    }
}

impl TwoPhaseCoefficients for LinearTwoPhase {
    fn total(&mut self, s_old: &[f64], _p_old: &[f64], _step: usize, out: &mut [f64]) -> Result<()> {
        for (c, slot) in out.iter_mut().enumerate() {
            *slot = self.total_at(c, s_old);
        }
        Ok(())
    }

    fn wetting(&mut self, s_old: &[f64], p: &[f64], t: &[f64], _step: usize, out: &mut [f64]) -> Result<()> {
        for (c, slot) in out.iter_mut().enumerate() {
            *slot = self.wetting_at(c, s_old, p, t);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeStepping {
    pub tau: f64,
    pub n_steps: usize,
}

pub fn solve_richards(
    graph: &FvGraph,
    field: &PermeabilityField,
    law: &RichardsLaw,
    source: &[f64],
    p0: &[f64],
    time: TimeStepping,
    picard: PicardOptions,
) -> Result<Vec<RichardsStep>> {
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
    let mut coeffs = FineRichardsCoefficients::new(graph, node_permeability(field, graph), *law);
    run_richards(&prob, p0, &mut coeffs)
}

pub fn solve_two_phase(
    graph: &FvGraph,
    field: &PermeabilityField,
    law: &TwoPhaseLaw,
    source: &[f64],
    s0: &[f64],
    time: TimeStepping,
) -> Result<Vec<TwoPhaseStep>> {
    let prob = two_phase_problem(graph, law, source, time);
    let w = geometric_transmissibility(graph, &node_permeability(field, graph));
    let mut coeffs = LinearTwoPhase::new(graph, w, *law);
    run_two_phase(&prob, s0, &mut coeffs)
}

pub fn two_phase_problem<'a>(
    graph: &'a FvGraph,
    law: &TwoPhaseLaw,
    source: &[f64],
    time: TimeStepping,
) -> TwoPhaseProblem<'a> {
    let mut porosity = vec![law.phi_m; graph.n_matrix];
    porosity.resize(graph.n_nodes(), law.phi_f);
    TwoPhaseProblem {
        graph,
        porosity,
        source: source.to_vec(),
        injected_wetting: 1.0,
        law: *law,
        tau: time.tau,
        n_steps: time.n_steps,
        solver: SolverOptions::default(),
    }
}

/// Coarse averages of a fine node vector: area means per coarse cell, then
/// length-weighted means per coarse fracture cell.
pub fn coarse_average_nodes(values: &[f64], coarse: &CoarseGrid, fractures: &FractureMesh) -> Vec<f64> {
    let n_fine = coarse.cell_of_fine.len();
    let mut out = Vec::with_capacity(coarse.n_cells() + coarse.n_fractures());
    for cells in &coarse.fine_cells {
        out.push(cells.iter().map(|&c| values[c]).sum::<f64>() / cells.len() as f64);
    }
    for g in &coarse.fractures {
        let s: f64 = g
            .fine
            .iter()
            .map(|&l| fractures.cells[l].length * values[n_fine + l])
            .sum();
        out.push(s / g.length);
    }
    out
}

pub fn coarse_average(
    state: &StateField,
    coarse: &CoarseGrid,
    fractures: &FractureMesh,
) -> Result<StateField> {
    let values = match state.continuum {
        Continuum::Matrix => {
            if state.values.len() != coarse.cell_of_fine.len() {
                return invalid("matrix field does not match the fine grid");
            }
            coarse
                .fine_cells
                .iter()
                .map(|cells| cells.iter().map(|&c| state.values[c]).sum::<f64>() / cells.len() as f64)
                .collect()
        }
        Continuum::Fracture => {
            if state.values.len() != fractures.n_cells() {
                return invalid("fracture field does not match the fracture mesh");
            }
            coarse
                .fractures
                .iter()
                .map(|g| {
                    g.fine
                        .iter()
                        .map(|&l| fractures.cells[l].length * state.values[l])
                        .sum::<f64>()
                        / g.length
                })
                .collect()
        }
    };
    Ok(StateField {
        values,
        ..state.clone()
    })
}

/// Writes fields as f64 blobs with a text manifest and, for matrix fields,
/// legacy-VTK structured points.
pub fn dump_states(dir: &Path, grid: &StructuredGrid, fields: &[StateField]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::from("# quantity continuum step shape file\n");
    for f in fields {
        let q = match f.quantity {
            Quantity::Pressure => "p",
            Quantity::Saturation => "s",
        };
        let c = match f.continuum {
            Continuum::Matrix => "m",
            Continuum::Fracture => "f",
        };
        let name = format!("{q}{c}_{:04}", f.step);
        io::write_f64_file(&dir.join(format!("{name}.bin")), &f.values)?;
        let shape = match f.continuum {
            Continuum::Matrix => format!("{}x{}", grid.ny, grid.nx),
            Continuum::Fracture => format!("{}", f.values.len()),
        };
        writeln!(manifest, "{q} {c} {} {shape} {name}.bin", f.step).unwrap();
        if f.continuum == Continuum::Matrix && f.values.len() == grid.n_cells() {
            std::fs::write(dir.join(format!("{name}.vtk")), vtk_structured_points(grid, &name, &f.values))?;
        }
    }
    std::fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

pub fn vtk_structured_points(grid: &StructuredGrid, name: &str, values: &[f64]) -> String {
    let mut s = String::new();
    writeln!(s, "# vtk DataFile Version 3.0\n{name}\nASCII\nDATASET STRUCTURED_POINTS").unwrap();
    writeln!(s, "DIMENSIONS {} {} 1", grid.nx + 1, grid.ny + 1).unwrap();
    writeln!(s, "ORIGIN 0 0 0\nSPACING {} {} 1", grid.hx, grid.hy).unwrap();
    writeln!(s, "CELL_DATA {}\nSCALARS {name} double 1\nLOOKUP_TABLE default", grid.n_cells()).unwrap();
    for v in values {
        writeln!(s, "{v:e}").unwrap();
    }
    s
}
