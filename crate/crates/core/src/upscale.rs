//! Classic single-phase upscaling: local cell problems producing the linear
//! coarse transmissibilities `W^UP`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{format_err, invalid, Error, Result};
use crate::fv::{Connection, ConnKind, FvGraph};
use crate::io;
use crate::linalg::{SolverOptions, SpdSolver};
use crate::mesh::{CoarseGrid, ConnectivityIndex, FaceOrientation, FineGrid, FractureMesh, StructuredGrid};
use crate::physics::{harmonic, PermeabilityField};

/// Smallest accepted difference of coarse means in the local problems.
pub const DEGENERATE_DENOMINATOR: f64 = 1e-14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Classic,
    Extracted,
    Predicted,
}

impl Provenance {
    fn name(self) -> &'static str {
        match self {
            Provenance::Classic => "classic",
            Provenance::Extracted => "extracted",
            Provenance::Predicted => "predicted",
        }
    }
}

/// Coarse transmissibilities in coarse-graph connection order.
#[derive(Debug, Clone, PartialEq)]
pub struct TransmissibilityTable {
    pub provenance: Provenance,
    pub coarse_nx: usize,
    pub coarse_ny: usize,
    /// Per coarse face.
    pub mm: Vec<f64>,
    /// Per coarse fracture cell (coupling to its host cell).
    pub mf: Vec<f64>,
    /// Per coarse fracture link.
    pub ff: Vec<f64>,
    /// Entries whose local problem was degenerate: (kind, index).
    pub flagged: Vec<(ConnKind, usize)>,
}

impl TransmissibilityTable {
    /// Values ordered like the connections of `FvGraph::coarse`.
    pub fn connection_values(&self) -> Vec<f64> {
        let mut v = self.mm.clone();
        v.extend_from_slice(&self.mf);
        v.extend_from_slice(&self.ff);
        v
    }

    pub fn from_connection_values(
        provenance: Provenance,
        coarse: &CoarseGrid,
        values: &[f64],
    ) -> Result<Self> {
        let (nm, nf, nl) = (
            coarse.grid.faces.len(),
            coarse.n_fractures(),
            coarse.fracture_links.len(),
        );
        if values.len() != nm + nf + nl {
            return invalid("table length does not match the coarse grid");
        }
        Ok(Self {
            provenance,
            coarse_nx: coarse.nx(),
            coarse_ny: coarse.ny(),
            mm: values[..nm].to_vec(),
            mf: values[nm..nm + nf].to_vec(),
            ff: values[nm + nf..].to_vec(),
            flagged: Vec::new(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = format!(
            "nlup-table 1\nprovenance {}\ncoarse {} {}\ncounts {} {} {}\nflagged {}",
            self.provenance.name(),
            self.coarse_nx,
            self.coarse_ny,
            self.mm.len(),
            self.mf.len(),
            self.ff.len(),
            self.flagged.len()
        );
        io::write_header_blob(path, &header, &self.connection_values())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, payload) = io::read_header_blob(path)?;
        let bad = |why: &str| format_err(path, why.to_string());
        let mut provenance = None;
        let mut coarse = None;
        let mut counts = None;
        for line in header.lines() {
            let parts: Vec<&str> = line.split_whitespace().collect();
            match parts.as_slice() {
                ["nlup-table", v] if *v != "1" => return Err(bad("unsupported table version")),
                ["provenance", p] => {
                    provenance = Some(match *p {
                        "classic" => Provenance::Classic,
                        "extracted" => Provenance::Extracted,
                        "predicted" => Provenance::Predicted,
                        _ => return Err(bad("unknown provenance")),
                    })
                }
                ["coarse", x, y] => {
                    coarse = Some((x.parse::<usize>().map_err(|_| bad("bad shape"))?, y.parse::<usize>().map_err(|_| bad("bad shape"))?))
                }
                ["counts", a, b, c] => {
                    let p = |s: &str| s.parse::<usize>().map_err(|_| bad("bad counts"));
                    counts = Some((p(a)?, p(b)?, p(c)?))
                }
                _ => {}
            }
        }
        let (provenance, (cx, cy), (nm, nf, nl)) = match (provenance, coarse, counts) {
            (Some(p), Some(c), Some(n)) => (p, c, n),
            _ => return Err(bad("incomplete header")),
        };
        if payload.len() != nm + nf + nl {
            return Err(bad("payload length does not match counts"));
        }
        Ok(Self {
            provenance,
            coarse_nx: cx,
            coarse_ny: cy,
            mm: payload[..nm].to_vec(),
            mf: payload[nm..nm + nf].to_vec(),
            ff: payload[nm + nf..].to_vec(),
            flagged: Vec::new(),
        })
    }
}

/// Local grid with TPFA harmonic face transmissibilities.
struct LocalProblem {
    grid: StructuredGrid,
    graph: FvGraph,
    k: Vec<f64>,
    t: Vec<f64>,
}

impl LocalProblem {
    fn new(nx: usize, ny: usize, hx: f64, hy: f64, k: Vec<f64>) -> Result<Self> {
        let grid = StructuredGrid::new(nx, ny, nx as f64 * hx, ny as f64 * hy)?;
        let conns: Vec<Connection> = grid
            .faces
            .iter()
            .map(|f| Connection {
                a: f.owner,
                b: f.neighbor,
                kind: ConnKind::MatrixMatrix,
                geom: f.length / f.distance,
            })
            .collect();
        let t = conns.iter().map(|c| c.geom * harmonic(k[c.a], k[c.b])).collect();
        let graph = FvGraph::new(grid.n_cells(), vec![grid.cell_volume(); grid.n_cells()], conns);
        Ok(Self { grid, graph, k, t })
    }
}

/// Solves `-div(k grad psi) = 0` on the local grid with `psi = 1` on the
/// low side and `psi = 0` on the high side of `axis`, no flux elsewhere.
fn dirichlet_solve(lp: &LocalProblem, orientation: FaceOrientation) -> Result<Vec<f64>> {
    let g = &lp.grid;
    let n = g.n_cells();
    let mut diag = vec![0.0; n];
    let mut rhs = vec![0.0; n];
    for cell in 0..n {
        let (i, j) = g.ij(cell);
        let (low, high, t_half) = match orientation {
            FaceOrientation::Vertical => (i == 0, i == g.nx - 1, lp.k[cell] * g.hy / (0.5 * g.hx)),
            FaceOrientation::Horizontal => (j == 0, j == g.ny - 1, lp.k[cell] * g.hx / (0.5 * g.hy)),
        };
        if low {
            diag[cell] += t_half;
            rhs[cell] += t_half;
        }
        if high {
            diag[cell] += t_half;
        }
    }
    let a = lp.graph.assemble(&lp.t, &diag);
    SpdSolver::new(&a, SolverOptions::default()).solve(&a, &rhs)
}

/// `W^mm` of one coarse face from its two-cell local problem.
pub fn upscale_mm_face(
    fine: &FineGrid,
    coarse: &CoarseGrid,
    field: &PermeabilityField,
    face: usize,
) -> Result<f64> {
    let f = &coarse.grid.faces[face];
    let (rx, ry) = (coarse.rx, coarse.ry);
    // local numbering: owner block then neighbour block along the face normal
    let (nx, ny) = match f.orientation {
        FaceOrientation::Vertical => (2 * rx, ry),
        FaceOrientation::Horizontal => (rx, 2 * ry),
    };
    let (oi, oj) = coarse.grid.ij(f.owner);
    let (i0, j0) = (oi * rx, oj * ry);
    let mut k = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            k.push(field.values[fine.index(i0 + i, j0 + j)]);
        }
    }
    let lp = LocalProblem::new(nx, ny, fine.hx, fine.hy, k)?;
    let psi = dirichlet_solve(&lp, f.orientation)?;

    let in_owner = |cell: usize| {
        let (i, j) = lp.grid.ij(cell);
        match f.orientation {
            FaceOrientation::Vertical => i < rx,
            FaceOrientation::Horizontal => j < ry,
        }
    };
    let (mut sa, mut sb) = (0.0, 0.0);
    for (cell, v) in psi.iter().enumerate() {
        if in_owner(cell) {
            sa += v;
        } else {
            sb += v;
        }
    }
    let block = (rx * ry) as f64;
    let denom = sa / block - sb / block;
    let mut flux = 0.0;
    for (c, conn) in lp.graph.conns.iter().enumerate() {
        if in_owner(conn.a) != in_owner(conn.b) {
            flux += lp.t[c] * (psi[conn.a] - psi[conn.b]);
        }
    }
    if denom.abs() < DEGENERATE_DENOMINATOR {
        return Err(Error::DegenerateLocalProblem {
            what: format!("coarse face {face}"),
            reason: format!("mean difference {denom:e}"),
        });
    }
    Ok(flux / denom)
}

/// `W^mm` for every coarse face. Degenerate faces get the arithmetic mean
/// formula and are flagged.
pub fn upscale_mm(
    fine: &FineGrid,
    coarse: &CoarseGrid,
    field: &PermeabilityField,
) -> Result<(Vec<f64>, Vec<usize>)> {
    let mut out = Vec::with_capacity(coarse.grid.faces.len());
    let mut flagged = Vec::new();
    for face in 0..coarse.grid.faces.len() {
        match upscale_mm_face(fine, coarse, field, face) {
            Ok(w) => out.push(w),
            Err(Error::DegenerateLocalProblem { .. }) => {
                let f = &coarse.grid.faces[face];
                let cells = coarse.fine_cells[f.owner].iter().chain(&coarse.fine_cells[f.neighbor]);
                let mean = cells.clone().map(|&c| field.values[c]).sum::<f64>() / cells.count() as f64;
                out.push(mean * f.length / f.distance);
                flagged.push(face);
            }
            Err(e) => return Err(e),
        }
    }
    Ok((out, flagged))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MfOptions {
    /// Pseudo-time step; `None` uses `H^2 / (4 max k)`.
    pub tau: Option<f64>,
    pub tol: f64,
    pub max_steps: usize,
    pub storage: f64,
}

impl Default for MfOptions {
    fn default() -> Self {
        Self {
            tau: None,
            tol: 1e-8,
            max_steps: 200_000,
            storage: 1.0,
        }
    }
}

/// Matrix-fracture exchange coefficients `σ_r = CI k^mf` of the fine cells
/// of coarse fracture cell `l`, as (local cell index, σ).
fn local_exchange(
    fine: &FineGrid,
    fractures: &FractureMesh,
    ci: &ConnectivityIndex,
    coarse: &CoarseGrid,
    field: &PermeabilityField,
    l: usize,
) -> Vec<(usize, f64)> {
    let g = &coarse.fractures[l];
    let (hi, hj) = coarse.grid.ij(g.host);
    let (i0, j0) = (hi * coarse.rx, hj * coarse.ry);
    g.fine
        .iter()
        .map(|&fl| {
            let host = fractures.cells[fl].host;
            let (i, j) = fine.ij(host);
            let local = (j - j0) * coarse.rx + (i - i0);
            let sigma = ci.values[fl] * harmonic(field.values[host], field.k_fracture);
            (local, sigma)
        })
        .collect()
}

/// `W^mf` of one coarse fracture cell by pseudo-time stepping to steady
/// decay; also returns the number of steps taken.
pub fn upscale_mf_cell(
    fine: &FineGrid,
    fractures: &FractureMesh,
    ci: &ConnectivityIndex,
    coarse: &CoarseGrid,
    field: &PermeabilityField,
    l: usize,
    opts: &MfOptions,
) -> Result<(f64, usize)> {
    let g = &coarse.fractures[l];
    let (rx, ry) = (coarse.rx, coarse.ry);
    let k: Vec<f64> = coarse.fine_cells[g.host].iter().map(|&c| field.values[c]).collect();
    let kmax = k.iter().copied().fold(0.0, f64::max);
    let sigma = local_exchange(fine, fractures, ci, coarse, field, l);
    let lp = LocalProblem::new(rx, ry, fine.hx, fine.hy, k)?;
    let n = lp.grid.n_cells();
    let h = coarse.grid.hx.max(coarse.grid.hy);
    let tau = opts.tau.unwrap_or(h * h / (4.0 * kmax));
    let vol = fine.cell_volume();
    let mut diag = vec![opts.storage * vol / tau; n];
    let mut sig_cell = vec![0.0; n];
    for &(c, s) in &sigma {
        diag[c] += s;
        sig_cell[c] += s;
    }
    let a = lp.graph.assemble(&lp.t, &diag);
    let mut solver = SpdSolver::new(&a, SolverOptions::default());
    solver.factor(&a)?;
    let mut phi = vec![0.0; n];
    let mut last = f64::INFINITY;
    for step in 1..=opts.max_steps {
        let rhs: Vec<f64> = (0..n)
            .map(|c| opts.storage * vol / tau * phi[c] + sig_cell[c])
            .collect();
        let next = solver.solve_factored(&rhs)?;
        last = next
            .iter()
            .zip(&phi)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        phi = next;
        if last <= opts.tol {
            let mean = phi.iter().sum::<f64>() / n as f64;
            let denom = mean - 1.0;
            let num: f64 = (0..n).map(|c| sig_cell[c] * (phi[c] - 1.0)).sum();
            if denom.abs() < DEGENERATE_DENOMINATOR {
                return Err(Error::DegenerateLocalProblem {
                    what: format!("coarse fracture cell {l}"),
                    reason: format!("mean difference {denom:e}"),
                });
            }
            return Ok((num / denom, step));
        }
    }
    Err(Error::NonConvergence {
        steps: opts.max_steps,
        residual: last,
    })
}

/// `W^mf` for every coarse fracture cell. Degenerate cells get `Σ σ` and are
/// flagged.
pub fn upscale_mf(
    fine: &FineGrid,
    fractures: &FractureMesh,
    ci: &ConnectivityIndex,
    coarse: &CoarseGrid,
    field: &PermeabilityField,
    opts: &MfOptions,
) -> Result<(Vec<f64>, Vec<usize>)> {
    let mut out = Vec::with_capacity(coarse.n_fractures());
    let mut flagged = Vec::new();
    for l in 0..coarse.n_fractures() {
        match upscale_mf_cell(fine, fractures, ci, coarse, field, l, opts) {
            Ok((w, _)) => out.push(w),
            Err(Error::DegenerateLocalProblem { .. }) => {
                let s: f64 = local_exchange(fine, fractures, ci, coarse, field, l)
                    .iter()
                    .map(|x| x.1)
                    .sum();
                out.push(s);
                flagged.push(l);
            }
            Err(e) => return Err(e),
        }
    }
    Ok((out, flagged))
}

/// `W^ff = k_f / Δ` between coarse fracture centroids.
pub fn upscale_ff(coarse: &CoarseGrid, k_fracture: f64) -> Vec<f64> {
    coarse
        .fracture_links
        .iter()
        .map(|l| k_fracture / l.distance)
        .collect()
}

pub fn classic_table(
    fine: &FineGrid,
    fractures: &FractureMesh,
    ci: &ConnectivityIndex,
    coarse: &CoarseGrid,
    field: &PermeabilityField,
    opts: &MfOptions,
) -> Result<TransmissibilityTable> {
    let (mm, fm) = upscale_mm(fine, coarse, field)?;
    let (mf, fmf) = upscale_mf(fine, fractures, ci, coarse, field, opts)?;
    let mut flagged: Vec<(ConnKind, usize)> = fm.into_iter().map(|i| (ConnKind::MatrixMatrix, i)).collect();
    flagged.extend(fmf.into_iter().map(|i| (ConnKind::MatrixFracture, i)));
    Ok(TransmissibilityTable {
        provenance: Provenance::Classic,
        coarse_nx: coarse.nx(),
        coarse_ny: coarse.ny(),
        mm,
        mf,
        ff: upscale_ff(coarse, field.k_fracture),
        flagged,
    })
}
