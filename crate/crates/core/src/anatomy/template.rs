//! Fixed template connectivity and per-vertex ventricular coordinates.
//!
//! Vertices are addressed by parametric coordinates rather than positions, so
//! every shape in the family evaluates the same list:
//!
//! - LV endocardium: apex plus rings `s = i / n_s` at `n_phi` angles.
//! - Epicardium: the same grid on the outer envelope.
//! - Base cap: two inner rings and a center closing the epicardial envelope.
//! - RV endocardium: apex plus rows `s = s0 + k (1 - s0) / n_sigma`, each a
//!   closed loop of septal and free-wall points joined at two junctions.

use std::f64::consts::{PI, TAU};
use std::ops::Range;

use super::shape::{evaluate_positions, Geometry, ShapeParams};
use super::{SurfaceTag, Uvc};
use crate::error::{Error, Result};
use crate::geom::TriMesh;

/// Resolution and RV placement shared by every shape of a template.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TemplateConfig {
    pub n_phi: usize,
    pub n_s: usize,
    pub n_sigma: usize,
    pub n_xi: usize,
    /// Apicobasal position of the RV apex.
    pub rv_apex_s: f64,
    /// Half-width of the RV attachment at the base (rad).
    pub rv_half_span: f64,
    /// Angle of the RV center line (rad).
    pub rv_center_phi: f64,
    /// Angular and apicobasal widths over which the RV wall blends out.
    pub blend_phi: f64,
    pub blend_s: f64,
}

impl Default for TemplateConfig {
    fn default() -> Self {
        Self {
            n_phi: 48,
            n_s: 20,
            n_sigma: 16,
            n_xi: 17,
            rv_apex_s: 0.35,
            rv_half_span: 1.2,
            rv_center_phi: PI / 2.0,
            blend_phi: 0.35,
            blend_s: 0.1,
        }
    }
}

impl TemplateConfig {
    fn validate(&self) -> Result<()> {
        if self.n_phi < 8 || self.n_s < 3 || self.n_sigma < 2 || self.n_xi < 3 {
            return Err(Error::invalid(format!("template resolution too coarse: {self:?}")));
        }
        if !(0.05..0.95).contains(&self.rv_apex_s) || !(0.1..1.5).contains(&self.rv_half_span) {
            return Err(Error::invalid("RV placement out of range"));
        }
        if self.blend_phi <= 0.0 || self.blend_s <= 0.0 || self.blend_s > self.rv_apex_s {
            return Err(Error::invalid("blend widths must be positive and below the RV apex"));
        }
        Ok(())
    }

    /// Normalized RV growth profile in `[0, 1]`.
    pub(crate) fn rv_profile(&self, s: f64) -> f64 {
        ((s - self.rv_apex_s) / (1.0 - self.rv_apex_s)).clamp(0.0, 1.0).sqrt()
    }

    /// RV half-span at apicobasal position `s`.
    pub(crate) fn half_span(&self, s: f64) -> f64 {
        self.rv_half_span * self.rv_profile(s)
    }

    pub(crate) fn xi(&self, j: usize) -> f64 {
        -(PI * j as f64 / self.n_xi as f64).cos()
    }

    pub(crate) fn phi(&self, j: usize) -> f64 {
        TAU * j as f64 / self.n_phi as f64
    }

    pub(crate) fn rv_row_s(&self, k: usize) -> f64 {
        self.rv_apex_s + (1.0 - self.rv_apex_s) * k as f64 / self.n_sigma as f64
    }

    fn lv_u3(&self, s: f64, phi: f64) -> f64 {
        let delta = self.half_span(s);
        let free_len = TAU - 2.0 * delta;
        let d = (self.rv_center_phi - delta - phi).rem_euclid(TAU);
        if d <= free_len {
            2.0 / 3.0 * d / free_len
        } else {
            2.0 / 3.0 + (d - free_len) / (6.0 * delta)
        }
    }

    /// Signed angular offset from the RV center line, wrapped to `(-pi, pi]`.
    pub(crate) fn offset_from_rv(&self, phi: f64) -> f64 {
        let d = (phi - self.rv_center_phi).rem_euclid(TAU);
        if d > PI {
            d - TAU
        } else {
            d
        }
    }

    pub(crate) fn in_rv_span(&self, s: f64, phi: f64) -> bool {
        self.offset_from_rv(phi).abs() < self.half_span(s)
    }
}

/// Parametric address of a template vertex.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum VertexKind {
    LvApex,
    Lv { s: f64, phi: f64 },
    EpiApex,
    Epi { s: f64, phi: f64 },
    /// Inner base-cap ring at fraction `rho` of the rim.
    Cap { rho: f64, j: usize },
    CapCenter,
    RvApex,
    RvSeptal { s: f64, xi: f64 },
    RvFree { s: f64, xi: f64 },
    /// `xi` is -1 (posterior) or +1 (anterior).
    RvJunction { s: f64, xi: f64 },
}

/// Closed surfaces bounding the three regions used for labeling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Compartment {
    LvCavity,
    RvCavity,
    Epicardium,
}

#[derive(Debug, Clone)]
pub struct TemplateTopology {
    pub config: TemplateConfig,
    pub kinds: Vec<VertexKind>,
    pub uvc: Vec<Uvc>,
    pub tags: Vec<SurfaceTag>,
    pub faces: Vec<[u32; 3]>,
    lv_faces: Range<usize>,
    rv_faces: Range<usize>,
    epi_faces: Range<usize>,
    pub lv_apex: usize,
    pub epi_apex: usize,
    pub lv_rim: Vec<usize>,
    pub rv_rim: Vec<usize>,
    /// `(endocardial, epicardial)` vertex pairs spanning the wall.
    pub transmural_pairs: Vec<(usize, usize)>,
}

struct Builder {
    kinds: Vec<VertexKind>,
    faces: Vec<[u32; 3]>,
}

impl Builder {
    fn vertex(&mut self, k: VertexKind) -> usize {
        self.kinds.push(k);
        self.kinds.len() - 1
    }

    fn tri(&mut self, a: usize, b: usize, c: usize) {
        if a != b && b != c && a != c {
            self.faces.push([a as u32, b as u32, c as u32]);
        }
    }

    /// Quads between two closed loops of equal length.
    fn strip(&mut self, a: &[usize], b: &[usize]) {
        let n = a.len();
        for j in 0..n {
            let k = (j + 1) % n;
            self.tri(a[j], a[k], b[k]);
            self.tri(a[j], b[k], b[j]);
        }
    }

    /// Fan from `apex` below the first loop of a tube.
    fn bottom_fan(&mut self, apex: usize, ring: &[usize]) {
        let n = ring.len();
        for j in 0..n {
            self.tri(apex, ring[(j + 1) % n], ring[j]);
        }
    }
}

impl TemplateTopology {
    pub fn new(config: TemplateConfig) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut b = Builder { kinds: Vec::new(), faces: Vec::new() };

        // LV endocardium.
        let lv_apex = b.vertex(VertexKind::LvApex);
        let lv_rings: Vec<Vec<usize>> = (1..=c.n_s)
            .map(|i| {
                let s = i as f64 / c.n_s as f64;
                (0..c.n_phi).map(|j| b.vertex(VertexKind::Lv { s, phi: c.phi(j) })).collect()
            })
            .collect();
        let lv_start = b.faces.len();
        b.bottom_fan(lv_apex, &lv_rings[0]);
        for w in lv_rings.windows(2) {
            b.strip(&w[0], &w[1]);
        }
        let rim = lv_rings.last().unwrap().clone();
        for j in 1..rim.len() - 1 {
            b.tri(rim[0], rim[j], rim[j + 1]);
        }
        let lv_faces = lv_start..b.faces.len();

        // RV endocardium: each row is the loop
        // posterior junction, septal interior, anterior junction, free wall back.
        let m = c.n_xi;
        let rv_apex = b.vertex(VertexKind::RvApex);
        let rv_rows: Vec<Vec<usize>> = (1..=c.n_sigma)
            .map(|k| {
                let s = c.rv_row_s(k);
                let mut row = vec![b.vertex(VertexKind::RvJunction { s, xi: -1.0 })];
                row.extend((1..m).map(|j| b.vertex(VertexKind::RvSeptal { s, xi: c.xi(j) })));
                row.push(b.vertex(VertexKind::RvJunction { s, xi: 1.0 }));
                let free: Vec<usize> = (1..m).map(|j| b.vertex(VertexKind::RvFree { s, xi: c.xi(j) })).collect();
                row.extend(free.into_iter().rev());
                row
            })
            .collect();
        let rv_start = b.faces.len();
        b.bottom_fan(rv_apex, &rv_rows[0]);
        for w in rv_rows.windows(2) {
            b.strip(&w[0], &w[1]);
        }
        let top = rv_rows.last().unwrap().clone();
        let (sep, free) = (|j: usize| top[j], |j: usize| top[(2 * m - j) % (2 * m)]);
        for j in 0..m {
            b.tri(sep(j), sep(j + 1), free(j + 1));
            b.tri(sep(j), free(j + 1), free(j));
        }
        let rv_faces = rv_start..b.faces.len();

        // Epicardial envelope with its base cap.
        let epi_apex = b.vertex(VertexKind::EpiApex);
        let epi_rings: Vec<Vec<usize>> = (1..=c.n_s)
            .map(|i| {
                let s = i as f64 / c.n_s as f64;
                (0..c.n_phi).map(|j| b.vertex(VertexKind::Epi { s, phi: c.phi(j) })).collect()
            })
            .collect();
        let epi_start = b.faces.len();
        b.bottom_fan(epi_apex, &epi_rings[0]);
        for w in epi_rings.windows(2) {
            b.strip(&w[0], &w[1]);
        }
        let mut outer = epi_rings.last().unwrap().clone();
        for rho in [2.0 / 3.0, 1.0 / 3.0] {
            let inner: Vec<usize> = (0..c.n_phi).map(|j| b.vertex(VertexKind::Cap { rho, j })).collect();
            b.strip(&outer, &inner);
            outer = inner;
        }
        let center = b.vertex(VertexKind::CapCenter);
        for j in 0..outer.len() {
            b.tri(center, outer[j], outer[(j + 1) % outer.len()]);
        }
        let epi_faces = epi_start..b.faces.len();

        let uvc: Vec<Uvc> = b.kinds.iter().map(|k| uvc_of(c, k)).collect();
        let tags = b
            .kinds
            .iter()
            .map(|k| match k {
                VertexKind::LvApex | VertexKind::Lv { .. } => SurfaceTag::LvEndo,
                VertexKind::EpiApex | VertexKind::Epi { .. } => SurfaceTag::Epi,
                VertexKind::Cap { .. } | VertexKind::CapCenter => SurfaceTag::BaseRing,
                _ => SurfaceTag::RvEndo,
            })
            .collect();

        // Transmural pairs, excluding the basal ring.
        let mut transmural_pairs = vec![(lv_apex, epi_apex)];
        for i in 0..c.n_s - 1 {
            let s = (i + 1) as f64 / c.n_s as f64;
            for j in 0..c.n_phi {
                let epi = epi_rings[i][j];
                if uvc[epi][0] == 0.0 {
                    // Next to the RV attachment the LV wall runs under the RV
                    // wall, so no straight endo-epi segment stays in muscle.
                    let beyond = c.offset_from_rv(c.phi(j)).abs() - c.half_span(s);
                    if !(s > c.rv_apex_s - c.blend_s && beyond < c.blend_phi) {
                        transmural_pairs.push((lv_rings[i][j], epi));
                    }
                    continue;
                }
                // RV side: closest free-wall vertex in parameter space.
                let k = (1..c.n_sigma)
                    .min_by(|&x, &y| (c.rv_row_s(x) - s).abs().total_cmp(&(c.rv_row_s(y) - s).abs()))
                    .unwrap();
                let xi = (c.offset_from_rv(c.phi(j)) / c.half_span(c.rv_row_s(k)).max(1e-12)).clamp(-1.0, 1.0);
                let jj = (1..m).min_by(|&x, &y| (c.xi(x) - xi).abs().total_cmp(&(c.xi(y) - xi).abs())).unwrap();
                transmural_pairs.push((rv_rows[k - 1][2 * m - jj], epi));
            }
        }

        let mut topo = TemplateTopology {
            config,
            kinds: b.kinds,
            uvc,
            tags,
            faces: b.faces,
            lv_faces,
            rv_faces,
            epi_faces,
            lv_apex,
            epi_apex,
            lv_rim: rim,
            rv_rim: top,
            transmural_pairs,
        };
        topo.orient_outward()?;
        Ok(topo)
    }

    pub fn vertex_count(&self) -> usize {
        self.kinds.len()
    }

    pub fn compartment_faces(&self, c: Compartment) -> Range<usize> {
        match c {
            Compartment::LvCavity => self.lv_faces.clone(),
            Compartment::RvCavity => self.rv_faces.clone(),
            Compartment::Epicardium => self.epi_faces.clone(),
        }
    }

    /// Closed surface of one compartment over the given vertex positions.
    pub fn compartment_mesh(&self, c: Compartment, positions: &[[f64; 3]]) -> TriMesh {
        let faces: Vec<usize> = self.compartment_faces(c).collect();
        TriMesh { vertices: positions.to_vec(), faces: self.faces.clone() }.submesh(&faces)
    }

    pub fn mesh(&self, positions: &[[f64; 3]]) -> TriMesh {
        TriMesh { vertices: positions.to_vec(), faces: self.faces.clone() }
    }

    /// Flips any compartment whose faces point inwards on the reference shape.
    fn orient_outward(&mut self) -> Result<()> {
        let geo = Geometry::new(&ShapeParams::default(), &self.config)?;
        let pos = evaluate_positions(&self.kinds, &geo);
        for c in [Compartment::LvCavity, Compartment::RvCavity, Compartment::Epicardium] {
            if self.compartment_mesh(c, &pos).signed_volume() < 0.0 {
                let range = self.compartment_faces(c);
                for f in &mut self.faces[range] {
                    f.swap(1, 2);
                }
            }
        }
        Ok(())
    }
}

fn uvc_of(c: &TemplateConfig, kind: &VertexKind) -> Uvc {
    match *kind {
        VertexKind::LvApex => [0.0, 1.0, 0.0, 0.0],
        VertexKind::Lv { s, phi } => [0.0, 1.0, c.lv_u3(s, phi), s],
        VertexKind::EpiApex => [0.0, 0.0, 0.0, 0.0],
        VertexKind::Epi { s, phi } => {
            if c.in_rv_span(s, phi) {
                let delta = c.half_span(s);
                [1.0, 0.0, (c.offset_from_rv(phi) + delta) / (3.0 * delta), s]
            } else {
                [0.0, 0.0, c.lv_u3(s, phi), s]
            }
        }
        VertexKind::Cap { rho, j } => {
            let u1 = if c.in_rv_span(1.0, c.phi(j)) { 1.0 } else { 0.0 };
            let depth = 0.5 * (1.0 - rho);
            [u1, depth, 1.0 + 0.5 * j as f64 / c.n_phi as f64, 1.0 + depth]
        }
        VertexKind::CapCenter => [0.0, 0.5, 1.0, 1.5],
        VertexKind::RvApex => [1.0, 1.0, 0.0, c.rv_apex_s],
        VertexKind::RvSeptal { s, xi } => [1.0, 1.0, 2.0 / 3.0 + (1.0 - xi) / 6.0, s],
        VertexKind::RvFree { s, xi } => [1.0, 1.0, (1.0 + xi) / 3.0, s],
        VertexKind::RvJunction { s, xi } => [1.0, 1.0, if xi < 0.0 { 0.0 } else { 2.0 / 3.0 }, s],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn template() -> TemplateTopology {
        TemplateTopology::new(TemplateConfig::default()).unwrap()
    }

    #[test]
    fn compartments_are_closed_and_outward() {
        let t = template();
        let pos = evaluate_positions(&t.kinds, &Geometry::new(&ShapeParams::default(), &t.config).unwrap());
        for c in [Compartment::LvCavity, Compartment::RvCavity, Compartment::Epicardium] {
            let m = t.compartment_mesh(c, &pos);
            assert!(m.is_closed_oriented(), "{c:?}");
            assert!(m.signed_volume() > 0.0, "{c:?}");
        }
        let used: HashSet<u32> = t.faces.iter().flatten().copied().collect();
        assert_eq!(used.len(), t.vertex_count());
    }

    #[test]
    fn default_resolution_vertex_count() {
        let t = template();
        // 961 LV + 961 epi + 97 cap + (1 + 16 * 34) RV.
        assert_eq!(t.vertex_count(), 2564);
    }

    #[test]
    fn rotational_coordinate_edges() {
        let c = TemplateConfig::default();
        let delta = c.half_span(1.0);
        let post = c.rv_center_phi - delta;
        assert!(c.lv_u3(1.0, post).abs() < 1e-12);
        assert!((c.lv_u3(1.0, c.rv_center_phi + delta) - 2.0 / 3.0).abs() < 1e-12);
        assert!((c.lv_u3(1.0, post + 1e-9) - 1.0).abs() < 1e-6);
        assert!((c.lv_u3(1.0, c.rv_center_phi) - 5.0 / 6.0).abs() < 1e-12);
        // Below the RV apex the whole circumference is free wall.
        assert!(c.lv_u3(0.2, c.rv_center_phi + 1e-9) > 0.66);
    }
}
