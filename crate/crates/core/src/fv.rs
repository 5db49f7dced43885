//! Cell-connection graph shared by the fine and coarse finite-volume solvers.
//!
//! Nodes are matrix cells followed by fracture cells. Every connection is a
//! two-point coupling `T (u_a - u_b)`.

use serde::{Deserialize, Serialize};

use crate::linalg::CsrMatrix;
use crate::mesh::{CoarseGrid, ConnectivityIndex, FineGrid, FractureMesh};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ConnKind {
    MatrixMatrix,
    MatrixFracture,
    FractureFracture,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Connection {
    pub a: usize,
    pub b: usize,
    pub kind: ConnKind,
    /// Geometric factor: `|E|/d` (matrix-matrix), `CI` (matrix-fracture),
    /// `1/Δ` (fracture-fracture); 1 on coarse graphs.
    pub geom: f64,
}

#[derive(Debug, Clone)]
pub struct FvGraph {
    pub n_matrix: usize,
    pub n_fracture: usize,
    /// Cell measure: area for matrix cells, length for fracture cells.
    pub volume: Vec<f64>,
    pub conns: Vec<Connection>,
    pub pattern: CsrMatrix,
    /// Storage positions of (aa, bb, ab, ba) per connection.
    positions: Vec<[usize; 4]>,
    diag: Vec<usize>,
}

impl FvGraph {
    pub fn new(n_matrix: usize, volume: Vec<f64>, conns: Vec<Connection>) -> Self {
        let n = volume.len();
        let edges: Vec<(usize, usize)> = conns.iter().map(|c| (c.a, c.b)).collect();
        let pattern = CsrMatrix::from_edges(n, &edges);
        let positions = conns
            .iter()
            .map(|c| {
                [
                    pattern.position(c.a, c.a),
                    pattern.position(c.b, c.b),
                    pattern.position(c.a, c.b),
                    pattern.position(c.b, c.a),
                ]
            })
            .collect();
        let diag = (0..n).map(|i| pattern.position(i, i)).collect();
        Self {
            n_matrix,
            n_fracture: n - n_matrix,
            volume,
            conns,
            pattern,
            positions,
            diag,
        }
    }

    /// Fine graph: grid faces, then one matrix-fracture connection per
    /// fracture cell, then fracture-fracture links.
    pub fn fine(grid: &FineGrid, fractures: &FractureMesh, ci: &ConnectivityIndex) -> Self {
        let n = grid.n_cells();
        let mut volume = vec![grid.cell_volume(); n];
        volume.extend(fractures.cells.iter().map(|c| c.length));
        let mut conns: Vec<Connection> = grid
            .faces
            .iter()
            .map(|f| Connection {
                a: f.owner,
                b: f.neighbor,
                kind: ConnKind::MatrixMatrix,
                geom: f.length / f.distance,
            })
            .collect();
        for (i, l, v) in ci.pairs() {
            conns.push(Connection {
                a: i,
                b: n + l,
                kind: ConnKind::MatrixFracture,
                geom: v,
            });
        }
        for link in &fractures.links {
            conns.push(Connection {
                a: n + link.a,
                b: n + link.b,
                kind: ConnKind::FractureFracture,
                geom: 1.0 / link.distance,
            });
        }
        Self::new(n, volume, conns)
    }

    /// Coarse graph in the same layout: coarse faces, one matrix-fracture
    /// connection per coarse fracture cell, coarse fracture links.
    pub fn coarse(coarse: &CoarseGrid) -> Self {
        let n = coarse.n_cells();
        let mut volume = vec![coarse.grid.cell_volume(); n];
        volume.extend(coarse.fractures.iter().map(|g| g.length));
        let mut conns: Vec<Connection> = coarse
            .grid
            .faces
            .iter()
            .map(|f| Connection {
                a: f.owner,
                b: f.neighbor,
                kind: ConnKind::MatrixMatrix,
                geom: 1.0,
            })
            .collect();
        for (l, g) in coarse.fractures.iter().enumerate() {
            conns.push(Connection {
                a: g.host,
                b: n + l,
                kind: ConnKind::MatrixFracture,
                geom: 1.0,
            });
        }
        for link in &coarse.fracture_links {
            conns.push(Connection {
                a: n + link.a,
                b: n + link.b,
                kind: ConnKind::FractureFracture,
                geom: 1.0,
            });
        }
        Self::new(n, volume, conns)
    }

    pub fn n_nodes(&self) -> usize {
        self.volume.len()
    }

    /// Range of connection indices of one kind (connections are grouped).
    pub fn kind_range(&self, kind: ConnKind) -> std::ops::Range<usize> {
        let start = self.conns.iter().position(|c| c.kind == kind);
        match start {
            None => 0..0,
            Some(s) => {
                let len = self.conns[s..].iter().take_while(|c| c.kind == kind).count();
                s..s + len
            }
        }
    }

    /// `A = diag(d) + sum_c T_c (e_a - e_b)(e_a - e_b)^T` on the graph pattern.
    pub fn assemble(&self, t: &[f64], diag: &[f64]) -> CsrMatrix {
        let mut a = self.pattern.clone();
        for (i, &d) in diag.iter().enumerate() {
            a.values[self.diag[i]] += d;
        }
        for (c, pos) in self.positions.iter().enumerate() {
            let tc = t[c];
            a.values[pos[0]] += tc;
            a.values[pos[1]] += tc;
            a.values[pos[2]] -= tc;
            a.values[pos[3]] -= tc;
        }
        a
    }

    /// Net outflow `sum_c T_c (u_a - u_b)` per node.
    pub fn divergence(&self, t: &[f64], u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_nodes()];
        for (c, conn) in self.conns.iter().enumerate() {
            let flux = t[c] * (u[conn.a] - u[conn.b]);
            out[conn.a] += flux;
            out[conn.b] -= flux;
        }
        out
    }

    /// Flux `T_c (u_a - u_b)` per connection.
    pub fn fluxes(&self, t: &[f64], u: &[f64]) -> Vec<f64> {
        self.conns
            .iter()
            .zip(t)
            .map(|(c, tc)| tc * (u[c.a] - u[c.b]))
            .collect()
    }

    /// Volume-weighted mean over matrix nodes.
    pub fn matrix_mean(&self, u: &[f64]) -> f64 {
        let mut s = 0.0;
        let mut v = 0.0;
        for i in 0..self.n_matrix {
            s += self.volume[i] * u[i];
            v += self.volume[i];
        }
        s / v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_fine_grid, embed_fractures, Segment};

    #[test]
    fn fine_graph_layout() {
        let g = build_fine_grid(4, 4, 1.0, 1.0).unwrap();
        let (fm, ci) = embed_fractures(&g, &[Segment::new(0.25, 0.375, 1.0, 0.375)]).unwrap();
        let graph = FvGraph::fine(&g, &fm, &ci);
        assert_eq!(graph.n_nodes(), 19);
        assert_eq!(graph.kind_range(ConnKind::MatrixMatrix), 0..24);
        assert_eq!(graph.kind_range(ConnKind::MatrixFracture), 24..27);
        assert_eq!(graph.kind_range(ConnKind::FractureFracture), 27..29);
    }

    #[test]
    fn divergence_telescopes() {
        let g = build_fine_grid(5, 3, 1.0, 1.0).unwrap();
        let graph = FvGraph::fine(&g, &FractureMesh::default(), &ConnectivityIndex::default());
        let t: Vec<f64> = (0..graph.conns.len()).map(|c| 1.0 + c as f64).collect();
        let u: Vec<f64> = (0..15).map(|i| (i * i) as f64).collect();
        let div = graph.divergence(&t, &u);
        assert!(div.iter().sum::<f64>().abs() < 1e-10);
        let a = graph.assemble(&t, &vec![0.0; 15]);
        let mut au = vec![0.0; 15];
        a.matvec(&u, &mut au);
        for (x, y) in au.iter().zip(&div) {
            assert!((x - y).abs() < 1e-10);
        }
    }
}
