//! Embedded discrete fractures: slicing of fracture segments against the fine
//! grid, fracture-fracture adjacency and matrix-fracture connectivity indices.

use std::collections::BTreeMap;
use std::path::Path;

use super::grid::FineGrid;
use crate::error::{format_err, invalid, Result};

/// Relative inward shift applied to segment endpoints (times `min(hx, hy)`).
pub const ENDPOINT_SHIFT: f64 = 1e-12;
/// Pieces shorter than this (times `min(hx, hy)`) are dropped.
const MIN_PIECE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Segment {
    pub p0: [f64; 2],
    pub p1: [f64; 2],
}

impl Segment {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self {
            p0: [x0, y0],
            p1: [x1, y1],
        }
    }

    pub fn length(&self) -> f64 {
        ((self.p1[0] - self.p0[0]).powi(2) + (self.p1[1] - self.p0[1]).powi(2)).sqrt()
    }
}

/// One fine fracture cell: the part of a segment inside one matrix cell.
#[derive(Debug, Clone, PartialEq)]
pub struct FractureCell {
    pub segment: usize,
    pub a: [f64; 2],
    pub b: [f64; 2],
    pub length: f64,
    /// Host fine matrix cell.
    pub host: usize,
}

impl FractureCell {
    pub fn midpoint(&self) -> [f64; 2] {
        [0.5 * (self.a[0] + self.b[0]), 0.5 * (self.a[1] + self.b[1])]
    }
}

/// Adjacency between two fracture cells, stored once with `a < b`.
#[derive(Debug, Clone, PartialEq)]
pub struct FractureLink {
    pub a: usize,
    pub b: usize,
    /// Distance between the two midpoints.
    pub distance: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FractureMesh {
    pub segments: Vec<Segment>,
    pub cells: Vec<FractureCell>,
    pub links: Vec<FractureLink>,
    /// Zero-length pieces discarded during slicing.
    pub dropped: usize,
}

impl FractureMesh {
    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }
}

/// Connectivity indices. Each fracture cell couples only to its host matrix
/// cell, so one value per fracture cell is stored.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConnectivityIndex {
    pub values: Vec<f64>,
    hosts: Vec<usize>,
}

impl ConnectivityIndex {
    /// `CI_il`; zero unless fracture cell `l` lies inside matrix cell `i`.
    pub fn get(&self, matrix_cell: usize, fracture_cell: usize) -> f64 {
        if self.hosts[fracture_cell] == matrix_cell {
            self.values[fracture_cell]
        } else {
            0.0
        }
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.hosts
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(l, (&i, &ci))| (i, l, ci))
    }
}

/// Mean distance from the points of the rectangle `[lo, hi]` to the line
/// through `a` and `b`.
///
/// The distance is linear on each side of the line, so the rectangle is split
/// by the line and each part integrated exactly through its centroid.
pub fn mean_distance_to_line(lo: [f64; 2], hi: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = b[0] - a[0];
    let dy = b[1] - a[1];
    let len = (dx * dx + dy * dy).sqrt();
    let n = [-dy / len, dx / len];
    let signed = |p: [f64; 2]| n[0] * (p[0] - a[0]) + n[1] * (p[1] - a[1]);
    let rect = [lo, [hi[0], lo[1]], hi, [lo[0], hi[1]]];
    let area = (hi[0] - lo[0]) * (hi[1] - lo[1]);
    let mut integral = 0.0;
    for side in [1.0, -1.0] {
        let part = clip_half_plane(&rect, |p| side * signed(p));
        if let Some((part_area, centroid)) = polygon_area_centroid(&part) {
            integral += part_area * signed(centroid).abs();
        }
    }
    integral / area
}

/// Sutherland-Hodgman clip of a convex polygon against `f(p) >= 0`.
fn clip_half_plane(poly: &[[f64; 2]], f: impl Fn([f64; 2]) -> f64) -> Vec<[f64; 2]> {
    let mut out = Vec::with_capacity(poly.len() + 1);
    for k in 0..poly.len() {
        let p = poly[k];
        let q = poly[(k + 1) % poly.len()];
        let (fp, fq) = (f(p), f(q));
        if fp >= 0.0 {
            out.push(p);
        }
        if (fp >= 0.0) != (fq >= 0.0) {
            let t = fp / (fp - fq);
            out.push([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]);
        }
    }
    out
}

fn polygon_area_centroid(poly: &[[f64; 2]]) -> Option<(f64, [f64; 2])> {
    if poly.len() < 3 {
        return None;
    }
    let (mut a2, mut cx, mut cy) = (0.0, 0.0, 0.0);
    for k in 0..poly.len() {
        let p = poly[k];
        let q = poly[(k + 1) % poly.len()];
        let cross = p[0] * q[1] - q[0] * p[1];
        a2 += cross;
        cx += (p[0] + q[0]) * cross;
        cy += (p[1] + q[1]) * cross;
    }
    if a2.abs() < 1e-300 {
        return None;
    }
    Some((0.5 * a2.abs(), [cx / (3.0 * a2), cy / (3.0 * a2)]))
}

/// Slices fracture segments against the fine grid and computes connectivity
/// indices `CI = |piece| / <d>`.
pub fn embed_fractures(
    grid: &FineGrid,
    segments: &[Segment],
) -> Result<(FractureMesh, ConnectivityIndex)> {
    let h = grid.hx.min(grid.hy);
    let tol = 1e-12 * grid.lx.max(grid.ly);
    let mut cells = Vec::new();
    let mut dropped = 0;
    let mut per_segment: Vec<Vec<usize>> = Vec::with_capacity(segments.len());

    for (sid, seg) in segments.iter().enumerate() {
        let len = seg.length();
        if !(len > 0.0) || !len.is_finite() {
            return invalid(format!("fracture segment {sid} has zero length"));
        }
        for p in [seg.p0, seg.p1] {
            if p[0] < -tol || p[1] < -tol || p[0] > grid.lx + tol || p[1] > grid.ly + tol {
                return invalid(format!(
                    "fracture segment {sid} leaves the domain at ({}, {})",
                    p[0], p[1]
                ));
            }
        }
        let dir = [(seg.p1[0] - seg.p0[0]) / len, (seg.p1[1] - seg.p0[1]) / len];
        let shift = (ENDPOINT_SHIFT * h).min(0.25 * len);
        let p0 = [seg.p0[0] + shift * dir[0], seg.p0[1] + shift * dir[1]];
        let p1 = [seg.p1[0] - shift * dir[0], seg.p1[1] - shift * dir[1]];
        let d = [p1[0] - p0[0], p1[1] - p0[1]];
        let plen = (d[0] * d[0] + d[1] * d[1]).sqrt();

        let mut ts = vec![0.0, 1.0];
        for (axis, step, n) in [(0, grid.hx, grid.nx), (1, grid.hy, grid.ny)] {
            if d[axis].abs() < 1e-300 {
                continue;
            }
            for k in 1..n {
                let t = (k as f64 * step - p0[axis]) / d[axis];
                if t > 0.0 && t < 1.0 {
                    ts.push(t);
                }
            }
        }
        ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        ts.dedup_by(|b, a| (*b - *a) * plen < 1e-14 * h);

        let mut ids = Vec::new();
        for w in ts.windows(2) {
            let piece = (w[1] - w[0]) * plen;
            if piece < MIN_PIECE * h {
                dropped += 1;
                continue;
            }
            let a = [p0[0] + w[0] * d[0], p0[1] + w[0] * d[1]];
            let b = [p0[0] + w[1] * d[0], p0[1] + w[1] * d[1]];
            let host = grid.locate([0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])]);
            ids.push(cells.len());
            cells.push(FractureCell {
                segment: sid,
                a,
                b,
                length: piece,
                host,
            });
        }
        per_segment.push(ids);
    }

    // adjacency: consecutive pieces of a segment, plus pieces of different
    // segments sharing a host cell
    let mut pairs: BTreeMap<(usize, usize), ()> = BTreeMap::new();
    for ids in &per_segment {
        for w in ids.windows(2) {
            pairs.insert((w[0], w[1]), ());
        }
    }
    let mut by_host: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (l, c) in cells.iter().enumerate() {
        by_host.entry(c.host).or_default().push(l);
    }
    for members in by_host.values() {
        for (x, &a) in members.iter().enumerate() {
            for &b in &members[x + 1..] {
                if cells[a].segment != cells[b].segment {
                    pairs.insert((a.min(b), a.max(b)), ());
                }
            }
        }
    }
    let links = pairs
        .keys()
        .map(|&(a, b)| {
            let (ma, mb) = (cells[a].midpoint(), cells[b].midpoint());
            let distance = ((ma[0] - mb[0]).powi(2) + (ma[1] - mb[1]).powi(2)).sqrt();
            FractureLink { a, b, distance }
        })
        .filter(|l| l.distance > 0.0)
        .collect();

    let mut values = Vec::with_capacity(cells.len());
    let mut hosts = Vec::with_capacity(cells.len());
    for c in &cells {
        let (lo, hi) = grid.cell_bounds(c.host);
        let seg = &segments[c.segment];
        let mean_d = mean_distance_to_line(lo, hi, seg.p0, seg.p1);
        values.push(c.length / mean_d);
        hosts.push(c.host);
    }
    if dropped > 0 {
        log::warn!("fracture slicing dropped {dropped} zero-length pieces");
    }

    Ok((
        FractureMesh {
            segments: segments.to_vec(),
            cells,
            links,
            dropped,
        },
        ConnectivityIndex { values, hosts },
    ))
}

/// Parses a fracture file: one `x0 y0 x1 y1` segment per line, `#` comments.
pub fn parse_segments(text: &str, origin: &Path) -> Result<Vec<Segment>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let nums: std::result::Result<Vec<f64>, _> =
            line.split_whitespace().map(str::parse::<f64>).collect();
        match nums {
            Ok(v) if v.len() == 4 => out.push(Segment::new(v[0], v[1], v[2], v[3])),
            _ => {
                return Err(format_err(
                    origin,
                    format!("line {}: expected `x0 y0 x1 y1`", lineno + 1),
                ))
            }
        }
    }
    Ok(out)
}

pub fn read_segments(path: &Path) -> Result<Vec<Segment>> {
    let text = std::fs::read_to_string(path)?;
    parse_segments(&text, path)
}
