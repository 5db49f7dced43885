use super::coarse::CoarseGrid;
use super::grid::FaceOrientation;
use crate::error::{invalid, Result};

/// The four kinds of coarse couplings, each with its own surrogate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DomainKind {
    /// Matrix-matrix coupling across a horizontal coarse face.
    MmHorizontal,
    /// Matrix-matrix coupling across a vertical coarse face.
    MmVertical,
    Mf,
    Ff,
}

impl DomainKind {
    pub const ALL: [DomainKind; 4] = [
        DomainKind::MmHorizontal,
        DomainKind::MmVertical,
        DomainKind::Mf,
        DomainKind::Ff,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DomainKind::MmHorizontal => "mm-horizontal",
            DomainKind::MmVertical => "mm-vertical",
            DomainKind::Mf => "mf",
            DomainKind::Ff => "ff",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    pub fn is_mm(self) -> bool {
        matches!(self, DomainKind::MmHorizontal | DomainKind::MmVertical)
    }
}

/// Oversampled window of coarse cells, row-major, with boundary padding.
#[derive(Debug, Clone, PartialEq)]
pub struct CoarseWindow {
    pub rows: usize,
    pub cols: usize,
    /// Coarse cell supplying each slot (nearest in-domain cell for padding).
    pub cells: Vec<usize>,
    /// 1 inside the domain, 0 for padded slots.
    pub mask: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalDomain {
    pub kind: DomainKind,
    /// Coarse face index (mm), coarse fracture cell (mf) or coarse fracture
    /// link (ff).
    pub face: usize,
    /// Fine matrix cells of the local domain image, row-major.
    pub fine_cells: Vec<usize>,
    pub fine_rows: usize,
    pub fine_cols: usize,
    pub window: CoarseWindow,
}

fn window(coarse: &CoarseGrid, i0: isize, j0: isize, cols: usize, rows: usize) -> CoarseWindow {
    let (nx, ny) = (coarse.nx() as isize, coarse.ny() as isize);
    let mut cells = Vec::with_capacity(rows * cols);
    let mut mask = Vec::with_capacity(rows * cols);
    for dj in 0..rows as isize {
        for di in 0..cols as isize {
            let (i, j) = (i0 + di, j0 + dj);
            let inside = i >= 0 && j >= 0 && i < nx && j < ny;
            let ci = i.clamp(0, nx - 1) as usize;
            let cj = j.clamp(0, ny - 1) as usize;
            cells.push(coarse.grid.index(ci, cj));
            mask.push(if inside { 1.0 } else { 0.0 });
        }
    }
    CoarseWindow {
        rows,
        cols,
        cells,
        mask,
    }
}

/// Fine cells of coarse blocks laid side by side along x (`a` then `b`).
fn blocks_along_x(coarse: &CoarseGrid, a: usize, b: usize) -> Vec<usize> {
    let (rx, ry) = (coarse.rx, coarse.ry);
    let mut out = Vec::with_capacity(2 * rx * ry);
    for r in 0..ry {
        out.extend_from_slice(&coarse.fine_cells[a][r * rx..(r + 1) * rx]);
        out.extend_from_slice(&coarse.fine_cells[b][r * rx..(r + 1) * rx]);
    }
    out
}

fn blocks_along_y(coarse: &CoarseGrid, a: usize, b: usize) -> Vec<usize> {
    let mut out = coarse.fine_cells[a].clone();
    out.extend_from_slice(&coarse.fine_cells[b]);
    out
}

pub fn enumerate_local_domains(coarse: &CoarseGrid, ring: usize) -> Result<Vec<LocalDomain>> {
    if ring < 1 {
        return invalid("oversampling ring must be at least 1");
    }
    let r = ring as isize;
    let (rx, ry) = (coarse.rx, coarse.ry);
    let mut out = Vec::new();
    for (k, f) in coarse.grid.faces.iter().enumerate() {
        let (i, j) = coarse.grid.ij(f.owner);
        let (i, j) = (i as isize, j as isize);
        let d = match f.orientation {
            FaceOrientation::Vertical => LocalDomain {
                kind: DomainKind::MmVertical,
                face: k,
                fine_cells: blocks_along_x(coarse, f.owner, f.neighbor),
                fine_rows: ry,
                fine_cols: 2 * rx,
                window: window(coarse, i - r, j - r, 2 + 2 * ring, 1 + 2 * ring),
            },
            FaceOrientation::Horizontal => LocalDomain {
                kind: DomainKind::MmHorizontal,
                face: k,
                fine_cells: blocks_along_y(coarse, f.owner, f.neighbor),
                fine_rows: 2 * ry,
                fine_cols: rx,
                window: window(coarse, i - r, j - r, 1 + 2 * ring, 2 + 2 * ring),
            },
        };
        out.push(d);
    }
    for (l, g) in coarse.fractures.iter().enumerate() {
        let (i, j) = coarse.grid.ij(g.host);
        let (i, j) = (i as isize, j as isize);
        out.push(LocalDomain {
            kind: DomainKind::Mf,
            face: l,
            fine_cells: coarse.fine_cells[g.host].clone(),
            fine_rows: ry,
            fine_cols: rx,
            window: window(coarse, i - r, j - r, 1 + 2 * ring, 1 + 2 * ring),
        });
    }
    for (k, link) in coarse.fracture_links.iter().enumerate() {
        let ha = coarse.fractures[link.a].host;
        let hb = coarse.fractures[link.b].host;
        let (i, j) = coarse.grid.ij(ha);
        let (i, j) = (i as isize, j as isize);
        out.push(LocalDomain {
            kind: DomainKind::Ff,
            face: k,
            fine_cells: blocks_along_x(coarse, ha, hb),
            fine_rows: ry,
            fine_cols: 2 * rx,
            window: window(coarse, i - r, j - r, 1 + 2 * ring, 1 + 2 * ring),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_coarse_grid, build_fine_grid, embed_fractures, FractureMesh, Segment};

    fn count(ds: &[LocalDomain], kind: DomainKind) -> usize {
        ds.iter().filter(|d| d.kind == kind).count()
    }

    #[test]
    fn ten_by_ten_mm_counts() {
        let f = build_fine_grid(20, 20, 1.0, 1.0).unwrap();
        let c = build_coarse_grid(&f, 10, 10, &FractureMesh::default()).unwrap();
        let ds = enumerate_local_domains(&c, 1).unwrap();
        assert_eq!(count(&ds, DomainKind::MmHorizontal), 90);
        assert_eq!(count(&ds, DomainKind::MmVertical), 90);
    }

    #[test]
    fn two_by_two_mm_counts() {
        let f = build_fine_grid(4, 4, 1.0, 1.0).unwrap();
        let c = build_coarse_grid(&f, 2, 2, &FractureMesh::default()).unwrap();
        let ds = enumerate_local_domains(&c, 1).unwrap();
        assert_eq!(count(&ds, DomainKind::MmHorizontal), 2);
        assert_eq!(count(&ds, DomainKind::MmVertical), 2);
        assert!(enumerate_local_domains(&c, 0).is_err());
    }

    #[test]
    fn fracture_path_counts_and_uniform_shapes() {
        let f = build_fine_grid(40, 40, 1.0, 1.0).unwrap();
        let (fm, _) = embed_fractures(&f, &[Segment::new(0.21, 0.43, 0.69, 0.43)]).unwrap();
        let c = build_coarse_grid(&f, 10, 10, &fm).unwrap();
        let ds = enumerate_local_domains(&c, 1).unwrap();
        assert_eq!(count(&ds, DomainKind::Mf), 5);
        assert_eq!(count(&ds, DomainKind::Ff), 4);
        for kind in DomainKind::ALL {
            let shapes: Vec<_> = ds
                .iter()
                .filter(|d| d.kind == kind)
                .map(|d| (d.fine_rows, d.fine_cols, d.window.rows, d.window.cols, d.fine_cells.len()))
                .collect();
            assert!(shapes.windows(2).all(|w| w[0] == w[1]), "{kind:?}");
        }
    }

    #[test]
    fn corner_window_is_padded() {
        let f = build_fine_grid(6, 6, 1.0, 1.0).unwrap();
        let c = build_coarse_grid(&f, 3, 3, &FractureMesh::default()).unwrap();
        let ds = enumerate_local_domains(&c, 1).unwrap();
        let d = ds.iter().find(|d| d.kind == DomainKind::MmVertical).unwrap();
        assert_eq!((d.window.rows, d.window.cols), (3, 4));
        // face between (0,0) and (1,0): bottom row and left column padded
        assert_eq!(d.window.mask[0], 0.0);
        assert_eq!(d.window.mask[5], 1.0);
        assert_eq!(d.window.cells[0], c.grid.index(0, 0));
        let valid: f64 = d.window.mask.iter().sum();
        assert_eq!(valid, 6.0);
    }

    #[test]
    fn mm_domain_is_union_of_two_cells() {
        let f = build_fine_grid(8, 4, 2.0, 1.0).unwrap();
        let c = build_coarse_grid(&f, 2, 1, &FractureMesh::default()).unwrap();
        let ds = enumerate_local_domains(&c, 1).unwrap();
        assert_eq!(ds.len(), 1);
        let mut cells = ds[0].fine_cells.clone();
        cells.sort_unstable();
        assert_eq!(cells, (0..32).collect::<Vec<_>>());
        // image row 0 is fine row 0, left to right
        assert_eq!(&ds[0].fine_cells[..8], &[0, 1, 2, 3, 4, 5, 6, 7]);
    }
}
