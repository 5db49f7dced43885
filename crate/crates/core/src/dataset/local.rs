//! Local-problem samples for the Richards problem: one implicit step on the
//! fine cells of a local domain with a random bilinear Dirichlet profile on
//! every coupling that leaves the domain.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{connection_of, window_inputs, CoarseFluxMap, Dataset, KindDataset, Problem, SampleMeta, StaticFeatures};
use crate::error::{invalid, Error, Result};
use crate::fine_solver::{coarse_average_nodes, node_permeability, FineRichardsCoefficients};
use crate::flow::PicardOptions;
use crate::fv::{Connection, FvGraph};
use crate::linalg::{SolverOptions, SpdSolver};
use crate::mesh::{CoarseGrid, DomainKind, FineGrid, FractureMesh, LocalDomain};
use crate::physics::{PermeabilityField, RichardsLaw};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalSampling {
    /// Samples per local domain.
    pub n_samples: usize,
    /// Corner values of the boundary profile are drawn uniformly from here.
    pub p_min: f64,
    pub p_max: f64,
    pub tau: f64,
    #[serde(default)]
    pub picard: PicardOptions,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_eps() -> f64 {
    super::EPS_EXTRACT
}

/// Bilinear interpolation of corner values over a box (clamped outside).
#[derive(Debug, Clone, Copy)]
pub struct BilinearProfile {
    pub lo: [f64; 2],
    pub hi: [f64; 2],
    /// Values at (lo,lo), (hi,lo), (lo,hi), (hi,hi).
    pub corners: [f64; 4],
}

impl BilinearProfile {
    pub fn eval(&self, x: [f64; 2]) -> f64 {
        let t = ((x[0] - self.lo[0]) / (self.hi[0] - self.lo[0])).clamp(0.0, 1.0);
        let u = ((x[1] - self.lo[1]) / (self.hi[1] - self.lo[1])).clamp(0.0, 1.0);
        let [a, b, c, d] = self.corners;
        (1.0 - u) * ((1.0 - t) * a + t * b) + u * ((1.0 - t) * c + t * d)
    }
}

/// Fine graph data shared by all local solves.
pub struct LocalContext<'a> {
    pub fine: &'a FineGrid,
    pub fractures: &'a FractureMesh,
    pub coarse: &'a CoarseGrid,
    pub graph: &'a FvGraph,
    pub map: &'a CoarseFluxMap,
    pub law: RichardsLaw,
    coeffs: FineRichardsCoefficients,
    positions: Vec<[f64; 2]>,
}

impl<'a> LocalContext<'a> {
    pub fn new(
        fine: &'a FineGrid,
        fractures: &'a FractureMesh,
        coarse: &'a CoarseGrid,
        graph: &'a FvGraph,
        map: &'a CoarseFluxMap,
        field: &PermeabilityField,
        law: RichardsLaw,
    ) -> Self {
        let mut positions: Vec<[f64; 2]> = (0..fine.n_cells()).map(|c| fine.center(c)).collect();
        positions.extend(fractures.cells.iter().map(|c| c.midpoint()));
        Self {
            fine,
            fractures,
            coarse,
            graph,
            map,
            law,
            coeffs: FineRichardsCoefficients::new(graph, node_permeability(field, graph), law),
            positions,
        }
    }

    /// Solves one implicit step on the domain starting from the profile and
    /// returns the full fine node vector (profile values outside).
    pub fn solve(&self, domain: &LocalDomain, profile: &BilinearProfile, tau: f64, picard: PicardOptions) -> Result<Vec<f64>> {
        let g = self.graph;
        let n_fine = self.fine.n_cells();
        let mut local = vec![usize::MAX; g.n_nodes()];
        let mut nodes = Vec::new();
        for &c in &domain.fine_cells {
            local[c] = nodes.len();
            nodes.push(c);
        }
        let n_matrix = nodes.len();
        for (l, fc) in self.fractures.cells.iter().enumerate() {
            if local[fc.host] != usize::MAX {
                local[n_fine + l] = nodes.len();
                nodes.push(n_fine + l);
            }
        }
        let mut inner = Vec::new();
        let mut conns = Vec::new();
        let mut boundary = Vec::new();
        for (c, conn) in g.conns.iter().enumerate() {
            match (local[conn.a] != usize::MAX, local[conn.b] != usize::MAX) {
                (true, true) => {
                    inner.push(c);
                    conns.push(Connection {
                        a: local[conn.a],
                        b: local[conn.b],
                        ..conn.clone()
                    });
                }
                (true, false) => boundary.push((c, local[conn.a], conn.b)),
                (false, true) => boundary.push((c, local[conn.b], conn.a)),
                _ => {}
            }
        }
        let volume: Vec<f64> = nodes.iter().map(|&i| g.volume[i]).collect();
        let storage: Vec<f64> = nodes
            .iter()
            .map(|&i| if i < n_fine { self.law.c_m } else { self.law.c_f })
            .collect();
        let lg = FvGraph::new(n_matrix, volume, conns);
        let mut solver = SpdSolver::new(&lg.pattern, SolverOptions::default());

        let mut p: Vec<f64> = self.positions.iter().map(|&x| profile.eval(x)).collect();
        let p_old: Vec<f64> = nodes.iter().map(|&i| p[i]).collect();
        let mut t = vec![0.0; g.conns.len()];
        let mut t_local = vec![0.0; inner.len()];
        for _ in 0..picard.max_iter.max(1) {
            self.coeffs.fill(&p, &mut t);
            for (k, &c) in inner.iter().enumerate() {
                t_local[k] = t[c];
            }
            let mut diag: Vec<f64> = (0..nodes.len())
                .map(|i| storage[i] * lg.volume[i] / tau)
                .collect();
            let mut rhs: Vec<f64> = (0..nodes.len()).map(|i| diag[i] * p_old[i]).collect();
            for &(c, li, outside) in &boundary {
                diag[li] += t[c];
                rhs[li] += t[c] * p[outside];
            }
            let a = lg.assemble(&t_local, &diag);
            let new = solver.solve(&a, &rhs)?;
            let mut change = 0.0f64;
            for (li, &i) in nodes.iter().enumerate() {
                change = change.max((new[li] - p[i]).abs());
                p[i] = new[li];
            }
            if change <= picard.tol {
                return Ok(p);
            }
        }
        Err(Error::SolverFailure {
            step: 0,
            reason: format!("local Picard iteration did not converge for {} {}", domain.kind.name(), domain.face),
        })
    }
}

/// Bounding box of the domain's coarse window, in physical coordinates.
fn window_box(coarse: &CoarseGrid, domain: &LocalDomain) -> ([f64; 2], [f64; 2]) {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for &c in &domain.window.cells {
        let (a, b) = coarse.grid.cell_bounds(c);
        for d in 0..2 {
            lo[d] = lo[d].min(a[d]);
            hi[d] = hi[d].max(b[d]);
        }
    }
    (lo, hi)
}

/// Samples `kinds` from local solves. Window values outside the domain come
/// from the profile.
pub fn build_local_dataset(
    ctx: &LocalContext,
    domains: &[LocalDomain],
    statics: &StaticFeatures,
    kinds: &[DomainKind],
    sampling: &LocalSampling,
    seed: u64,
) -> Result<Dataset> {
    if !(sampling.p_max >= sampling.p_min) || sampling.tau <= 0.0 {
        return invalid("local sampling needs p_min <= p_max and tau > 0");
    }
    let problem = Problem::Richards;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for &kind in kinds {
        let mine: Vec<&LocalDomain> = domains.iter().filter(|d| d.kind == kind).collect();
        let Some(first) = mine.first() else { continue };
        let mut ds = KindDataset::new(kind, problem.roles(first), 1);
        let mut dynamic = Vec::with_capacity(ds.dynamic_len());
        for (slot, d) in mine.iter().enumerate() {
            ds.faces.push(d.face);
            ds.static_inputs.push(statics.inputs(d));
            let (lo, hi) = window_box(ctx.coarse, d);
            let conn = connection_of(d, ctx.coarse);
            for k in 0..sampling.n_samples {
                let mut corners = [0.0; 4];
                for v in &mut corners {
                    *v = rng.gen_range(sampling.p_min..=sampling.p_max);
                }
                let profile = BilinearProfile { lo, hi, corners };
                let p = ctx.solve(d, &profile, sampling.tau, sampling.picard)?;
                let t = {
                    let mut t = vec![0.0; ctx.graph.conns.len()];
                    ctx.coeffs.fill(&p, &mut t);
                    t
                };
                let pc = coarse_average_nodes(&p, ctx.coarse, ctx.fractures);
                let c = ctx.coarse_connection(conn);
                let flux: f64 = ctx.map.groups[conn]
                    .iter()
                    .map(|&(f, sign)| {
                        let fc = &ctx.graph.conns[f];
                        sign * t[f] * (p[fc.a] - p[fc.b])
                    })
                    .sum();
                let dp = pc[c.0] - pc[c.1];
                let scale = pc.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
                if dp.abs() <= sampling.eps * scale {
                    continue;
                }
                dynamic.clear();
                window_inputs(d, ctx.coarse, &pc, None, &mut dynamic);
                let meta = SampleMeta {
                    slot,
                    snapshot: k,
                    step: 0,
                };
                ds.push(meta, &dynamic, &[flux / dp]);
            }
        }
        if ds.is_empty() {
            ds.empty_reason = Some(if sampling.n_samples == 0 {
                "no local samples requested".into()
            } else {
                "all local samples had a vanishing mean difference".into()
            });
        }
        out.push(ds);
    }
    Ok(Dataset { problem, kinds: out })
}

impl LocalContext<'_> {
    /// Coarse node pair of a coarse connection.
    fn coarse_connection(&self, conn: usize) -> (usize, usize) {
        let c = self.coarse;
        let nm = c.grid.faces.len();
        let nc = c.n_cells();
        if conn < nm {
            let f = &c.grid.faces[conn];
            (f.owner, f.neighbor)
        } else if conn < nm + c.n_fractures() {
            let l = conn - nm;
            (c.fractures[l].host, nc + l)
        } else {
            let link = &c.fracture_links[conn - nm - c.n_fractures()];
            (nc + link.a, nc + link.b)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_coarse_grid, build_fine_grid, embed_fractures, enumerate_local_domains, Segment};

    #[test]
    fn profile_hits_corners() {
        let p = BilinearProfile {
            lo: [0.0, 0.0],
            hi: [2.0, 1.0],
            corners: [1.0, 2.0, 3.0, 5.0],
        };
        assert_eq!(p.eval([0.0, 0.0]), 1.0);
        assert_eq!(p.eval([2.0, 0.0]), 2.0);
        assert_eq!(p.eval([0.0, 1.0]), 3.0);
        assert_eq!(p.eval([2.0, 1.0]), 5.0);
        assert!((p.eval([1.0, 0.5]) - 2.75).abs() < 1e-15);
    }

    fn setup(a: f64) -> (FineGrid, FractureMesh, CoarseGrid, FvGraph, PermeabilityField, RichardsLaw) {
        let fine = build_fine_grid(16, 16, 1.0, 1.0).unwrap();
        let (fm, ci) = embed_fractures(&fine, &[Segment::new(0.3, 0.41, 0.8, 0.47)]).unwrap();
        let coarse = build_coarse_grid(&fine, 4, 4, &fm).unwrap();
        let graph = FvGraph::fine(&fine, &fm, &ci);
        let field = PermeabilityField::from_values(16, 16, vec![3.0; 256], 1e3).unwrap();
        (fine, fm, coarse, graph, field, RichardsLaw { a, ..Default::default() })
    }

    #[test]
    fn linear_profile_on_homogeneous_domain_recovers_w() {
        let (fine, fm, coarse, graph, field, law) = setup(0.0);
        let map = CoarseFluxMap::new(&coarse, &fm, &graph);
        let ctx = LocalContext::new(&fine, &fm, &coarse, &graph, &map, &field, law);
        let domains = enumerate_local_domains(&coarse, 1).unwrap();
        let d = domains
            .iter()
            .find(|d| {
                d.kind == DomainKind::MmVertical
                    && d.window.mask.iter().all(|&m| m == 1.0)
                    && d.fine_cells.iter().all(|&c| fm.cells.iter().all(|f| f.host != c))
            })
            .unwrap();
        let (lo, hi) = window_box(&coarse, d);
        let profile = BilinearProfile {
            lo,
            hi,
            corners: [0.0, 2.0 * (hi[0] - lo[0]), 0.0, 2.0 * (hi[0] - lo[0])],
        };
        let p = ctx.solve(d, &profile, 0.1, PicardOptions::default()).unwrap();
        let mut t = vec![0.0; graph.conns.len()];
        ctx.coeffs.fill(&p, &mut t);
        let conn = connection_of(d, &coarse);
        let (a, b) = ctx.coarse_connection(conn);
        let pc = coarse_average_nodes(&p, &coarse, &fm);
        let flux: f64 = map.groups[conn]
            .iter()
            .map(|&(f, s)| s * t[f] * (p[graph.conns[f].a] - p[graph.conns[f].b]))
            .sum();
        let w = 3.0 * coarse.grid.hy / coarse.grid.hx;
        assert!((flux / (pc[a] - pc[b]) - w).abs() < 1e-8 * w, "{} vs {w}", flux / (pc[a] - pc[b]));
    }

    #[test]
    fn constant_profile_is_skipped_and_zero_samples_flagged() {
        let (fine, fm, coarse, graph, field, law) = setup(0.1);
        let map = CoarseFluxMap::new(&coarse, &fm, &graph);
        let ctx = LocalContext::new(&fine, &fm, &coarse, &graph, &map, &field, law);
        let domains = enumerate_local_domains(&coarse, 1).unwrap();
        let statics = StaticFeatures::new(&fine, &fm, &field);
        let sampling = LocalSampling {
            n_samples: 2,
            p_min: 4.0,
            p_max: 4.0,
            tau: 0.1,
            picard: PicardOptions::default(),
            eps: 1e-12,
        };
        let ds = build_local_dataset(&ctx, &domains, &statics, &[DomainKind::Mf], &sampling, 1).unwrap();
        assert!(ds.kinds[0].is_empty());
        let none = LocalSampling { n_samples: 0, ..sampling.clone() };
        let ds = build_local_dataset(&ctx, &domains, &statics, &[DomainKind::MmVertical], &none, 1).unwrap();
        assert!(ds.kinds[0].empty_reason.as_deref().unwrap().contains("no local samples"));
    }

    #[test]
    fn random_profiles_give_samples_for_fracture_kinds() {
        let (fine, fm, coarse, graph, field, law) = setup(0.1);
        let map = CoarseFluxMap::new(&coarse, &fm, &graph);
        let ctx = LocalContext::new(&fine, &fm, &coarse, &graph, &map, &field, law);
        let domains = enumerate_local_domains(&coarse, 1).unwrap();
        let statics = StaticFeatures::new(&fine, &fm, &field);
        let sampling = LocalSampling {
            n_samples: 3,
            p_min: 0.0,
            p_max: 10.0,
            tau: 0.01,
            picard: PicardOptions::default(),
            eps: 1e-12,
        };
        let ds = build_local_dataset(&ctx, &domains, &statics, &[DomainKind::Mf, DomainKind::Ff], &sampling, 3)
            .unwrap();
        for k in &ds.kinds {
            assert!(!k.is_empty());
            assert!(k.targets.iter().all(|t| t.is_finite()));
        }
    }
}
