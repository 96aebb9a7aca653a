//! Point-in-closed-surface queries by vertical ray parity.
//!
//! A ray is cast from the query point towards +z. Faces are bucketed by their
//! xy footprint on a uniform grid. The 2D point-in-triangle test evaluates
//! every edge function with the edge's endpoints in a canonical order, so the
//! two faces sharing an edge see exactly negated values; exact zeros are
//! resolved with a top-left ownership rule. A ray that hits a surface within
//! [`SNAP_DISTANCE`] of the query point reports the point as outside.

use super::{cross, dot, norm, sub, TriMesh, Vec3};
use crate::error::{Error, Result};

pub const SNAP_DISTANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy)]
struct Tri2 {
    p: [[f64; 2]; 3],
    z: [f64; 3],
}

#[derive(Debug, Clone)]
pub struct Containment {
    tris: Vec<Tri2>,
    origin: [f64; 2],
    cell: [f64; 2],
    dims: [usize; 2],
    cells: Vec<Vec<u32>>,
    zmax: f64,
}

#[inline]
fn orient(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

#[inline]
fn lex_less(a: [f64; 2], b: [f64; 2]) -> bool {
    a[0] < b[0] || (a[0] == b[0] && a[1] < b[1])
}

/// Edge function of directed edge `u -> v` at `p`, evaluated in canonical order.
#[inline]
fn edge(u: [f64; 2], v: [f64; 2], p: [f64; 2]) -> f64 {
    if lex_less(u, v) {
        orient(u, v, p)
    } else {
        -orient(v, u, p)
    }
}

/// Top-left ownership for a counter-clockwise triangle edge `u -> v`.
#[inline]
fn owns_boundary(u: [f64; 2], v: [f64; 2]) -> bool {
    v[1] < u[1] || (v[1] == u[1] && v[0] < u[0])
}

impl Containment {
    /// Builds the query structure. The surface must be closed; orientation
    /// does not matter for parity.
    pub fn new(mesh: &TriMesh) -> Result<Self> {
        let open = mesh.boundary_edges();
        if !open.is_empty() {
            return Err(Error::Degenerate(format!(
                "surface is not watertight: {} boundary edges, first {:?}",
                open.len(),
                open[0]
            )));
        }
        if mesh.faces.is_empty() {
            return Err(Error::Degenerate("surface has no faces".into()));
        }
        let tris: Vec<Tri2> = (0..mesh.faces.len())
            .map(|f| {
                let t = mesh.triangle(f);
                Tri2 { p: t.map(|v| [v[0], v[1]]), z: t.map(|v| v[2]) }
            })
            .collect();
        let b = mesh.bounds();
        let n = ((tris.len() as f64).sqrt().ceil() as usize).clamp(1, 512);
        let span = [(b.max[0] - b.min[0]).max(1e-12), (b.max[1] - b.min[1]).max(1e-12)];
        let cell = [span[0] / n as f64, span[1] / n as f64];
        let dims = [n, n];
        let mut cells = vec![Vec::new(); n * n];
        let to_cell = |v: f64, k: usize| (((v - b.min[k]) / cell[k]).floor().max(0.0) as usize).min(n - 1);
        for (i, t) in tris.iter().enumerate() {
            let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
            for p in &t.p {
                for k in 0..2 {
                    lo[k] = lo[k].min(p[k]);
                    hi[k] = hi[k].max(p[k]);
                }
            }
            for cy in to_cell(lo[1], 1)..=to_cell(hi[1], 1) {
                for cx in to_cell(lo[0], 0)..=to_cell(hi[0], 0) {
                    cells[cy * n + cx].push(i as u32);
                }
            }
        }
        Ok(Self { tris, origin: [b.min[0], b.min[1]], cell, dims, cells, zmax: b.max[2] })
    }

    /// Strict interior test; boundary points count as outside.
    pub fn contains(&self, p: Vec3) -> bool {
        if p[2] > self.zmax + SNAP_DISTANCE {
            return false;
        }
        let q = [p[0], p[1]];
        let mut idx = [0usize; 2];
        for k in 0..2 {
            let c = ((q[k] - self.origin[k]) / self.cell[k]).floor();
            // Points exactly on the far bounding edge belong to the last cell.
            let c = if c == self.dims[k] as f64 { c - 1.0 } else { c };
            if !(0.0..self.dims[k] as f64).contains(&c) {
                return false;
            }
            idx[k] = c as usize;
        }
        let mut crossings = 0usize;
        for &f in &self.cells[idx[1] * self.dims[0] + idx[0]] {
            let t = &self.tris[f as usize];
            let (mut a, mut b, c) = (0usize, 1usize, 2usize);
            let area = edge(t.p[a], t.p[b], t.p[c]);
            if area == 0.0 {
                continue;
            }
            if area < 0.0 {
                std::mem::swap(&mut a, &mut b);
            }
            let order = [(a, b), (b, c), (c, a)];
            let mut w = [0.0; 3];
            let mut inside = true;
            for (k, &(u, v)) in order.iter().enumerate() {
                let e = edge(t.p[u], t.p[v], q);
                if e < 0.0 || (e == 0.0 && !owns_boundary(t.p[u], t.p[v])) {
                    inside = false;
                    break;
                }
                w[k] = e;
            }
            if !inside {
                continue;
            }
            // w[k] is the weight of the vertex opposite edge k.
            let z = (w[0] * t.z[c] + w[1] * t.z[a] + w[2] * t.z[b]) / (w[0] + w[1] + w[2]);
            if (z - p[2]).abs() <= SNAP_DISTANCE {
                return false;
            }
            if z > p[2] {
                crossings += 1;
            }
        }
        crossings % 2 == 1
    }
}

/// Generalized winding number of a closed oriented surface around `p`
/// (about 1 inside, 0 outside). Slow; used as an independent check.
pub fn winding_number(mesh: &TriMesh, p: Vec3) -> f64 {
    let mut total = 0.0;
    for f in 0..mesh.faces.len() {
        let [a, b, c] = mesh.triangle(f);
        let (a, b, c) = (sub(a, p), sub(b, p), sub(c, p));
        let (la, lb, lc) = (norm(a), norm(b), norm(c));
        let num = dot(a, cross(b, c));
        let den = la * lb * lc + dot(a, b) * lc + dot(b, c) * la + dot(c, a) * lb;
        total += 2.0 * num.atan2(den);
    }
    total / (4.0 * std::f64::consts::PI)
}
