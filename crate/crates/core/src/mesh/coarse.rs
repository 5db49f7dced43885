use std::collections::BTreeMap;

use super::fracture::FractureMesh;
use super::grid::{FineGrid, StructuredGrid};
use crate::error::{invalid, Result};

/// A coarse fracture cell: every fine fracture cell hosted by one coarse cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CoarseFractureCell {
    pub host: usize,
    /// Fine fracture cell ids, ascending.
    pub fine: Vec<usize>,
    pub length: f64,
    /// Length-weighted centroid of the member pieces.
    pub centroid: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoarseFractureLink {
    pub a: usize,
    pub b: usize,
    pub distance: f64,
    /// Fine fracture links joining the two coarse fracture cells.
    pub fine_links: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoarseGrid {
    pub grid: StructuredGrid,
    /// Fine cells per coarse cell along x and y.
    pub rx: usize,
    pub ry: usize,
    pub fine_nx: usize,
    pub fine_ny: usize,
    pub cell_of_fine: Vec<usize>,
    /// Fine cells of each coarse cell, row-major inside the block.
    pub fine_cells: Vec<Vec<usize>>,
    /// Fine faces lying on each coarse face, ordered along the face.
    pub fine_faces: Vec<Vec<usize>>,
    pub fractures: Vec<CoarseFractureCell>,
    /// Coarse fracture cell of every fine fracture cell.
    pub fracture_of_fine: Vec<usize>,
    pub fracture_links: Vec<CoarseFractureLink>,
    /// Coarse fracture cell hosted by each coarse cell, if any.
    pub fracture_in_cell: Vec<Option<usize>>,
}

impl CoarseGrid {
    pub fn n_cells(&self) -> usize {
        self.grid.n_cells()
    }

    pub fn n_fractures(&self) -> usize {
        self.fractures.len()
    }

    pub fn nx(&self) -> usize {
        self.grid.nx
    }

    pub fn ny(&self) -> usize {
        self.grid.ny
    }
}

pub fn build_coarse_grid(
    fine: &FineGrid,
    nx: usize,
    ny: usize,
    fractures: &FractureMesh,
) -> Result<CoarseGrid> {
    if nx == 0 || ny == 0 || fine.nx % nx != 0 || fine.ny % ny != 0 {
        return invalid(format!(
            "fine grid {}x{} is not divisible by coarse grid {nx}x{ny}",
            fine.nx, fine.ny
        ));
    }
    let grid = StructuredGrid::new(nx, ny, fine.lx, fine.ly)?;
    let rx = fine.nx / nx;
    let ry = fine.ny / ny;

    let mut cell_of_fine = vec![0; fine.n_cells()];
    let mut fine_cells = vec![Vec::with_capacity(rx * ry); grid.n_cells()];
    for (cell, slot) in cell_of_fine.iter_mut().enumerate() {
        let (i, j) = fine.ij(cell);
        *slot = grid.index(i / rx, j / ry);
    }
    for cj in 0..ny {
        for ci in 0..nx {
            let c = grid.index(ci, cj);
            for j in cj * ry..(cj + 1) * ry {
                for i in ci * rx..(ci + 1) * rx {
                    fine_cells[c].push(fine.index(i, j));
                }
            }
        }
    }

    let mut face_lookup: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for (k, f) in grid.faces.iter().enumerate() {
        face_lookup.insert((f.owner, f.neighbor), k);
    }
    let mut fine_faces = vec![Vec::new(); grid.faces.len()];
    for (k, f) in fine.faces.iter().enumerate() {
        let (a, b) = (cell_of_fine[f.owner], cell_of_fine[f.neighbor]);
        if a != b {
            let cf = face_lookup[&(a, b)];
            fine_faces[cf].push(k);
        }
    }

    let mut by_host: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (l, c) in fractures.cells.iter().enumerate() {
        by_host.entry(cell_of_fine[c.host]).or_default().push(l);
    }
    let mut coarse_fractures = Vec::with_capacity(by_host.len());
    let mut fracture_of_fine = vec![0; fractures.cells.len()];
    let mut fracture_in_cell = vec![None; grid.n_cells()];
    for (host, members) in by_host {
        let id = coarse_fractures.len();
        let mut length = 0.0;
        let mut cx = 0.0;
        let mut cy = 0.0;
        for &l in &members {
            let c = &fractures.cells[l];
            let m = c.midpoint();
            length += c.length;
            cx += c.length * m[0];
            cy += c.length * m[1];
            fracture_of_fine[l] = id;
        }
        fracture_in_cell[host] = Some(id);
        coarse_fractures.push(CoarseFractureCell {
            host,
            fine: members,
            length,
            centroid: [cx / length, cy / length],
        });
    }

    let mut link_map: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (k, link) in fractures.links.iter().enumerate() {
        let (a, b) = (fracture_of_fine[link.a], fracture_of_fine[link.b]);
        if a != b {
            link_map.entry((a.min(b), a.max(b))).or_default().push(k);
        }
    }
    let fracture_links = link_map
        .into_iter()
        .map(|((a, b), fine_links)| {
            let (pa, pb) = (coarse_fractures[a].centroid, coarse_fractures[b].centroid);
            CoarseFractureLink {
                a,
                b,
                distance: (pa[0] - pb[0]).hypot(pa[1] - pb[1]),
                fine_links,
            }
        })
        .collect();

    Ok(CoarseGrid {
        grid,
        rx,
        ry,
        fine_nx: fine.nx,
        fine_ny: fine.ny,
        cell_of_fine,
        fine_cells,
        fine_faces,
        fractures: coarse_fractures,
        fracture_of_fine,
        fracture_links,
        fracture_in_cell,
    })
}
