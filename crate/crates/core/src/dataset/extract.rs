//! Nonlinear coarse transmissibilities from fine fluxes:
//! `T^NL = sum_{fine couplings across the coarse coupling} T (u_r - u_n) / (ū_i - ū_j)`.

use crate::fv::FvGraph;
use crate::mesh::{CoarseGrid, FractureMesh};
use crate::upscale::{Provenance, TransmissibilityTable};

/// Default skip threshold on `|ū_i - ū_j|`, relative to the pressure scale.
pub const EPS_EXTRACT: f64 = 1e-12;

/// Fine connections (with orientation sign) making up each coarse connection.
#[derive(Debug, Clone)]
pub struct CoarseFluxMap {
    pub groups: Vec<Vec<(usize, f64)>>,
}

impl CoarseFluxMap {
    /// `fine_graph` must come from `FvGraph::fine` on the same fracture mesh.
    pub fn new(coarse: &CoarseGrid, fractures: &FractureMesh, fine_graph: &FvGraph) -> Self {
        let mf0 = fine_graph
            .conns
            .iter()
            .take_while(|c| c.kind == crate::fv::ConnKind::MatrixMatrix)
            .count();
        let ff0 = mf0 + fractures.n_cells();
        let mut groups = Vec::new();
        // coarse faces: fine faces on them keep their orientation
        for faces in &coarse.fine_faces {
            groups.push(faces.iter().map(|&k| (k, 1.0)).collect());
        }
        for g in &coarse.fractures {
            groups.push(g.fine.iter().map(|&l| (mf0 + l, 1.0)).collect());
        }
        for link in &coarse.fracture_links {
            groups.push(
                link.fine_links
                    .iter()
                    .map(|&k| {
                        let fl = &fractures.links[k];
                        let sign = if coarse.fracture_of_fine[fl.a] == link.a { 1.0 } else { -1.0 };
                        (ff0 + k, sign)
                    })
                    .collect(),
            );
        }
        Self { groups }
    }

    /// Net fine flux from side `a` to side `b` of every coarse connection.
    pub fn coarse_fluxes(&self, fine_graph: &FvGraph, fine_t: &[f64], fine_u: &[f64]) -> Vec<f64> {
        self.groups
            .iter()
            .map(|g| {
                g.iter()
                    .map(|&(c, sign)| {
                        let conn = &fine_graph.conns[c];
                        sign * fine_t[c] * (fine_u[conn.a] - fine_u[conn.b])
                    })
                    .sum()
            })
            .collect()
    }
}

/// Extraction result for one time level, in coarse connection order.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractedTable {
    /// `T^NL` (NaN where skipped), provenance `Extracted`.
    pub table: TransmissibilityTable,
    /// Wetting-phase `T^{w,NL}` for two-phase runs.
    pub wetting: Option<Vec<f64>>,
    /// Summed fine flux per coarse connection.
    pub flux: Vec<f64>,
    /// Coarse mean difference `ū_a - ū_b` per coarse connection.
    pub dp: Vec<f64>,
    pub skipped: usize,
}

impl ExtractedTable {
    pub fn values(&self) -> Vec<f64> {
        self.table.connection_values()
    }
}

/// Extracts `T^NL` (and `T^{w,NL}` when `fine_tw` is given) for one level.
#[allow(clippy::too_many_arguments)]
pub fn extract_nl_transmissibility(
    coarse: &CoarseGrid,
    coarse_graph: &FvGraph,
    fine_graph: &FvGraph,
    map: &CoarseFluxMap,
    fine_u: &[f64],
    fine_t: &[f64],
    fine_tw: Option<&[f64]>,
    coarse_u: &[f64],
    eps: f64,
) -> ExtractedTable {
    let scale = coarse_u.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    let flux = map.coarse_fluxes(fine_graph, fine_t, fine_u);
    let wflux = fine_tw.map(|tw| map.coarse_fluxes(fine_graph, tw, fine_u));
    let mut skipped = 0;
    let mut t = Vec::with_capacity(flux.len());
    let mut tw = Vec::with_capacity(flux.len());
    let mut dp = Vec::with_capacity(flux.len());
    for (c, conn) in coarse_graph.conns.iter().enumerate() {
        let d = coarse_u[conn.a] - coarse_u[conn.b];
        dp.push(d);
        if d.abs() <= eps * scale {
            skipped += 1;
            t.push(f64::NAN);
            tw.push(f64::NAN);
        } else {
            t.push(flux[c] / d);
            if let Some(w) = &wflux {
                tw.push(w[c] / d);
            }
        }
    }
    let table = TransmissibilityTable::from_connection_values(Provenance::Extracted, coarse, &t)
        .expect("coarse graph and grid agree");
    ExtractedTable {
        table,
        wetting: wflux.map(|_| tw),
        flux,
        dp,
        skipped,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fine_solver::{assemble_tpfa, coarse_average_nodes};
    use crate::mesh::{build_coarse_grid, build_fine_grid, embed_fractures, ConnectivityIndex, Segment};
    use crate::physics::RichardsLaw;

    #[test]
    fn linear_profile_recovers_homogeneous_w() {
        let fine = build_fine_grid(8, 8, 1.0, 1.0).unwrap();
        let fm = FractureMesh::default();
        let coarse = build_coarse_grid(&fine, 2, 2, &fm).unwrap();
        let fg = FvGraph::fine(&fine, &fm, &ConnectivityIndex::default());
        let cg = FvGraph::coarse(&coarse);
        let map = CoarseFluxMap::new(&coarse, &fm, &fg);
        let law = RichardsLaw { a: 0.0, ..Default::default() };
        let p: Vec<f64> = (0..64).map(|k| fine.center(k)[0]).collect();
        let fa = assemble_tpfa(&fg, &vec![2.0; 64], &law, &p);
        let pc = coarse_average_nodes(&p, &coarse, &fm);
        let ex = extract_nl_transmissibility(&coarse, &cg, &fg, &map, &p, &fa.t, None, &pc, EPS_EXTRACT);
        // vertical faces recover W = k; horizontal faces see no gradient
        for (k, f) in coarse.grid.faces.iter().enumerate() {
            match f.orientation {
                crate::mesh::FaceOrientation::Vertical => assert!((ex.table.mm[k] - 2.0).abs() < 1e-12),
                crate::mesh::FaceOrientation::Horizontal => assert!(ex.table.mm[k].is_nan()),
            }
        }
        assert_eq!(ex.skipped, 2);
    }

    #[test]
    fn uniform_pressure_is_skipped() {
        let fine = build_fine_grid(4, 4, 1.0, 1.0).unwrap();
        let fm = FractureMesh::default();
        let coarse = build_coarse_grid(&fine, 2, 2, &fm).unwrap();
        let fg = FvGraph::fine(&fine, &fm, &ConnectivityIndex::default());
        let cg = FvGraph::coarse(&coarse);
        let map = CoarseFluxMap::new(&coarse, &fm, &fg);
        let p = vec![1.5; 16];
        let t = vec![1.0; fg.conns.len()];
        let pc = coarse_average_nodes(&p, &coarse, &fm);
        let ex = extract_nl_transmissibility(&coarse, &cg, &fg, &map, &p, &t, None, &pc, EPS_EXTRACT);
        assert_eq!(ex.skipped, 4);
    }

    #[test]
    fn flux_identity_with_fracture() {
        let fine = build_fine_grid(12, 12, 1.0, 1.0).unwrap();
        let (fm, ci) = embed_fractures(&fine, &[Segment::new(0.1, 0.4, 0.9, 0.55)]).unwrap();
        let coarse = build_coarse_grid(&fine, 3, 3, &fm).unwrap();
        let fg = FvGraph::fine(&fine, &fm, &ci);
        let cg = FvGraph::coarse(&coarse);
        let map = CoarseFluxMap::new(&coarse, &fm, &fg);
        let p: Vec<f64> = (0..fg.n_nodes()).map(|i| ((i * 13) % 7) as f64 + 0.1 * i as f64).collect();
        let t: Vec<f64> = (0..fg.conns.len()).map(|c| 1.0 + (c % 5) as f64).collect();
        let pc = coarse_average_nodes(&p, &coarse, &fm);
        let ex = extract_nl_transmissibility(&coarse, &cg, &fg, &map, &p, &t, Some(&t), &pc, EPS_EXTRACT);
        let vals = ex.values();
        for c in 0..vals.len() {
            if vals[c].is_nan() {
                continue;
            }
            let recon = vals[c] * ex.dp[c];
            assert!((recon - ex.flux[c]).abs() <= 1e-12 * ex.flux[c].abs().max(1e-300));
        }
        assert!(coarse.n_fractures() == 3 && coarse.fracture_links.len() == 2);
    }
}
