use crate::error::{invalid, Result};

/// Orientation of an interior face.
///
/// A `Horizontal` face separates vertically stacked cells `(i, j)` and
/// `(i, j + 1)`; a `Vertical` face separates `(i, j)` and `(i + 1, j)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum FaceOrientation {
    Horizontal,
    Vertical,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Face {
    /// Left (vertical face) or lower (horizontal face) cell.
    pub owner: usize,
    pub neighbor: usize,
    pub orientation: FaceOrientation,
    /// Face length |E|.
    pub length: f64,
    /// Distance between the two cell centres.
    pub distance: f64,
}

/// Uniform structured grid of `nx * ny` rectangular cells on `[0, lx] x [0, ly]`.
///
/// Cells are numbered row-major: `index = j * nx + i`. Interior faces are
/// stored with all horizontal faces first, then all vertical faces, each
/// block ordered row-major by owner cell. Boundary faces are not stored; they
/// carry no flux.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuredGrid {
    pub nx: usize,
    pub ny: usize,
    pub lx: f64,
    pub ly: f64,
    pub hx: f64,
    pub hy: f64,
    pub faces: Vec<Face>,
}

/// The fine matrix grid.
pub type FineGrid = StructuredGrid;

impl StructuredGrid {
    pub fn new(nx: usize, ny: usize, lx: f64, ly: f64) -> Result<Self> {
        if nx == 0 || ny == 0 {
            return invalid(format!("grid needs at least one cell, got {nx}x{ny}"));
        }
        if !(lx > 0.0 && ly > 0.0 && lx.is_finite() && ly.is_finite()) {
            return invalid(format!("domain size must be positive, got {lx}x{ly}"));
        }
        let hx = lx / nx as f64;
        let hy = ly / ny as f64;
        let mut faces = Vec::with_capacity(nx * (ny - 1) + ny * (nx - 1));
        for j in 0..ny.saturating_sub(1) {
            for i in 0..nx {
                faces.push(Face {
                    owner: j * nx + i,
                    neighbor: (j + 1) * nx + i,
                    orientation: FaceOrientation::Horizontal,
                    length: hx,
                    distance: hy,
                });
            }
        }
        for j in 0..ny {
            for i in 0..nx.saturating_sub(1) {
                faces.push(Face {
                    owner: j * nx + i,
                    neighbor: j * nx + i + 1,
                    orientation: FaceOrientation::Vertical,
                    length: hy,
                    distance: hx,
                });
            }
        }
        Ok(Self {
            nx,
            ny,
            lx,
            ly,
            hx,
            hy,
            faces,
        })
    }

    pub fn n_cells(&self) -> usize {
        self.nx * self.ny
    }

    pub fn cell_volume(&self) -> f64 {
        self.hx * self.hy
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    #[inline]
    pub fn ij(&self, cell: usize) -> (usize, usize) {
        (cell % self.nx, cell / self.nx)
    }

    pub fn center(&self, cell: usize) -> [f64; 2] {
        let (i, j) = self.ij(cell);
        [(i as f64 + 0.5) * self.hx, (j as f64 + 0.5) * self.hy]
    }

    /// Cell containing point `p`; points on an interior grid line go to the
    /// upper/right cell, points on the outer boundary are clamped inside.
    pub fn locate(&self, p: [f64; 2]) -> usize {
        let i = ((p[0] / self.hx).floor().max(0.0) as usize).min(self.nx - 1);
        let j = ((p[1] / self.hy).floor().max(0.0) as usize).min(self.ny - 1);
        self.index(i, j)
    }

    pub fn cell_bounds(&self, cell: usize) -> ([f64; 2], [f64; 2]) {
        let (i, j) = self.ij(cell);
        (
            [i as f64 * self.hx, j as f64 * self.hy],
            [(i + 1) as f64 * self.hx, (j + 1) as f64 * self.hy],
        )
    }

    pub fn n_faces(&self, orientation: FaceOrientation) -> usize {
        match orientation {
            FaceOrientation::Horizontal => self.nx * (self.ny - 1),
            FaceOrientation::Vertical => self.ny * (self.nx - 1),
        }
    }
}

/// Builds the fine matrix grid.
pub fn build_fine_grid(nx: usize, ny: usize, lx: f64, ly: f64) -> Result<FineGrid> {
    StructuredGrid::new(nx, ny, lx, ly)
}
