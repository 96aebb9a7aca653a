//! Shape parameters, vertex placement and cohort sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::frame::{apply_frame, cardiac_frame, CardiacFrame};
use super::template::{TemplateConfig, TemplateTopology, VertexKind};
use super::Uvc;
use crate::error::{Error, Result};
use crate::geom::{add, centroid, lerp, scale, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeParams {
    /// LV endocardial semi-axes `(a, b, c)` in mm; `c` runs along the long axis.
    pub lv_semi_axes: [f64; 3],
    pub lv_wall_thickness: f64,
    /// Maximum radial bulge of the RV free wall at the base (mm).
    pub rv_crescent_offset: f64,
    pub rv_wall_thickness: f64,
    /// Height of the base plane above the LV equator, as a fraction of `c`.
    pub base_truncation_fraction: f64,
    pub global_scale: f64,
    pub seed: u64,
}

impl Default for ShapeParams {
    fn default() -> Self {
        Self {
            lv_semi_axes: [26.0, 26.0, 69.0],
            lv_wall_thickness: 9.0,
            rv_crescent_offset: 17.0,
            rv_wall_thickness: 3.0,
            base_truncation_fraction: 0.275,
            global_scale: 1.0,
            seed: 0,
        }
    }
}

impl ShapeParams {
    pub fn validate(&self) -> Result<()> {
        let [a, b, c] = self.lv_semi_axes;
        let lengths = [a, b, c, self.lv_wall_thickness, self.rv_crescent_offset, self.rv_wall_thickness, self.global_scale];
        if lengths.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::Degenerate(format!("shape lengths must be positive and finite: {self:?}")));
        }
        if self.lv_wall_thickness >= a.min(b).min(c) {
            return Err(Error::Degenerate(format!(
                "wall thickness {} is not below the smallest semi-axis",
                self.lv_wall_thickness
            )));
        }
        let f = self.base_truncation_fraction;
        if !(0.0..0.9).contains(&f) {
            return Err(Error::Degenerate(format!("base truncation fraction {f} outside [0, 0.9)")));
        }
        Ok(())
    }

    /// Analytic volume (mm^3) of the truncated ellipsoid bounding the LV cavity.
    pub fn lv_cavity_volume(&self) -> f64 {
        let [a, b, c] = self.lv_semi_axes;
        let f = self.base_truncation_fraction;
        std::f64::consts::PI * a * b * c * (2.0 / 3.0 + f - f * f * f / 3.0) * self.global_scale.powi(3)
    }

    /// Apex-to-mitral-centroid distance of the generating solid (mm).
    pub fn long_axis(&self) -> f64 {
        self.lv_semi_axes[2] * (1.0 + self.base_truncation_fraction) * self.global_scale
    }
}

/// Uniform sampling ranges for a synthetic cohort.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CohortRanges {
    pub lv_a: (f64, f64),
    pub lv_b: (f64, f64),
    pub lv_c: (f64, f64),
    pub lv_wall_thickness: (f64, f64),
    pub rv_crescent_offset: (f64, f64),
    pub rv_wall_thickness: f64,
    pub base_truncation_fraction: (f64, f64),
    pub global_scale: (f64, f64),
}

impl Default for CohortRanges {
    fn default() -> Self {
        Self {
            lv_a: (22.0, 30.0),
            lv_b: (22.0, 30.0),
            lv_c: (60.0, 78.0),
            lv_wall_thickness: (7.0, 11.0),
            rv_crescent_offset: (12.0, 22.0),
            rv_wall_thickness: 3.0,
            base_truncation_fraction: (0.2, 0.35),
            global_scale: (0.9, 1.1),
        }
    }
}

impl CohortRanges {
    pub fn sample(&self, seed: u64) -> Result<ShapeParams> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |(lo, hi): (f64, f64)| -> Result<f64> {
            if !(lo <= hi) {
                return Err(Error::invalid(format!("empty cohort range ({lo}, {hi})")));
            }
            Ok(if lo == hi { lo } else { rng.gen_range(lo..hi) })
        };
        let params = ShapeParams {
            lv_semi_axes: [draw(self.lv_a)?, draw(self.lv_b)?, draw(self.lv_c)?],
            lv_wall_thickness: draw(self.lv_wall_thickness)?,
            rv_crescent_offset: draw(self.rv_crescent_offset)?,
            rv_wall_thickness: self.rv_wall_thickness,
            base_truncation_fraction: draw(self.base_truncation_fraction)?,
            global_scale: draw(self.global_scale)?,
            seed,
        };
        params.validate()?;
        Ok(params)
    }
}

/// Unscaled generating solid in the construction frame (long axis along z,
/// apex at `-c`, RV towards `rv_center_phi`).
pub(crate) struct Geometry {
    cfg: TemplateConfig,
    endo: [f64; 3],
    epi: [f64; 3],
    theta_endo: f64,
    theta_epi: f64,
    rv_width: f64,
    rv_wall: f64,
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

impl Geometry {
    pub(crate) fn new(p: &ShapeParams, cfg: &TemplateConfig) -> Result<Self> {
        p.validate()?;
        let [a, b, c] = p.lv_semi_axes;
        let t = p.lv_wall_thickness;
        let f = p.base_truncation_fraction;
        Ok(Self {
            cfg: *cfg,
            endo: [a, b, c],
            epi: [a + t, b + t, c + t],
            theta_endo: (-f).acos(),
            theta_epi: (-f * c / (c + t)).acos(),
            rv_width: p.rv_crescent_offset,
            rv_wall: p.rv_wall_thickness,
        })
    }

    fn ellipsoid(axes: [f64; 3], theta: f64, phi: f64) -> Vec3 {
        [axes[0] * theta.sin() * phi.cos(), axes[1] * theta.sin() * phi.sin(), -axes[2] * theta.cos()]
    }

    fn radial(phi: f64) -> Vec3 {
        [phi.cos(), phi.sin(), 0.0]
    }

    pub(crate) fn lv_endo(&self, s: f64, phi: f64) -> Vec3 {
        Self::ellipsoid(self.endo, s * self.theta_endo, phi)
    }

    fn lv_epi(&self, s: f64, phi: f64) -> Vec3 {
        Self::ellipsoid(self.epi, s * self.theta_epi, phi)
    }

    fn width(&self, s: f64) -> f64 {
        self.rv_width * self.cfg.rv_profile(s)
    }

    fn rv_angle(&self, s: f64, xi: f64) -> f64 {
        self.cfg.rv_center_phi + xi * self.cfg.half_span(s)
    }

    fn rv_free(&self, s: f64, xi: f64) -> Vec3 {
        let phi = self.rv_angle(s, xi);
        add(self.lv_epi(s, phi), scale(Self::radial(phi), self.width(s) * (1.0 - xi * xi)))
    }

    fn epicardium(&self, s: f64, phi: f64) -> Vec3 {
        let c = &self.cfg;
        let off = c.offset_from_rv(phi);
        let delta = c.half_span(s);
        let bulge = if delta > 0.0 { self.width(s) * (1.0 - (off / delta).powi(2)).max(0.0) } else { 0.0 };
        let beyond = (off.abs() - delta).max(0.0);
        let wall = (1.0 - smoothstep(0.0, c.blend_phi, beyond)) * smoothstep(c.rv_apex_s - c.blend_s, c.rv_apex_s, s);
        add(self.lv_epi(s, phi), scale(Self::radial(phi), bulge + self.rv_wall * wall))
    }
}

pub(crate) fn evaluate_positions(kinds: &[VertexKind], g: &Geometry) -> Vec<Vec3> {
    let rim_center = g.lv_epi(1.0, 0.0)[2];
    kinds
        .iter()
        .map(|k| match *k {
            VertexKind::LvApex => g.lv_endo(0.0, 0.0),
            VertexKind::Lv { s, phi } => g.lv_endo(s, phi),
            VertexKind::EpiApex => g.lv_epi(0.0, 0.0),
            VertexKind::Epi { s, phi } => g.epicardium(s, phi),
            VertexKind::Cap { rho, j } => {
                let rim = g.epicardium(1.0, g.cfg.phi(j));
                let center = [0.0, 0.0, rim_center];
                lerp(center, rim, rho)
            }
            VertexKind::CapCenter => [0.0, 0.0, rim_center],
            VertexKind::RvApex => g.lv_epi(g.cfg.rv_apex_s, g.cfg.rv_center_phi),
            VertexKind::RvSeptal { s, xi } => g.lv_epi(s, g.rv_angle(s, xi)),
            VertexKind::RvFree { s, xi } => g.rv_free(s, xi),
            VertexKind::RvJunction { s, xi } => g.lv_epi(s, g.rv_angle(s, xi)),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Landmarks {
    pub mvc: Vec3,
    pub tvc: Vec3,
    pub lva: Vec3,
}

/// One cohort member: template-corresponding positions in cardiac coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceMesh {
    pub positions: Vec<Vec3>,
    pub landmarks: Landmarks,
}

impl InstanceMesh {
    pub fn vertex_count(&self) -> usize {
        self.positions.len()
    }

    /// Distance between the mitral centroid and the LV apex.
    pub fn long_axis_length(&self) -> f64 {
        crate::geom::dist(self.landmarks.mvc, self.landmarks.lva)
    }
}

/// Builds the shape for `params` on `template`. Geometry depends only on the
/// parameters; the seed travels with them for bookkeeping.
pub fn generate_shape(template: &TemplateTopology, params: &ShapeParams) -> Result<InstanceMesh> {
    let g = Geometry::new(params, &template.config)?;
    let raw: Vec<Vec3> =
        evaluate_positions(&template.kinds, &g).into_iter().map(|p| scale(p, params.global_scale)).collect();
    let rim = |idx: &[usize]| centroid(&idx.iter().map(|&i| raw[i]).collect::<Vec<_>>()).unwrap();
    let (mvc, tvc, lva) = (rim(&template.lv_rim), rim(&template.rv_rim), raw[template.lv_apex]);
    let frame: CardiacFrame = cardiac_frame(mvc, tvc, lva)?;
    let positions = apply_frame(&frame, &raw);
    let lm = apply_frame(&frame, &[mvc, tvc, lva]);
    if let Some(i) = positions.iter().flatten().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { context: "generated vertex coordinates", index: i / 3 });
    }
    Ok(InstanceMesh { positions, landmarks: Landmarks { mvc: lm[0], tvc: lm[1], lva: lm[2] } })
}

/// Per-vertex mean of template-corresponding meshes.
pub fn mean_shape(meshes: &[InstanceMesh]) -> Result<InstanceMesh> {
    let first = meshes.first().ok_or_else(|| Error::invalid("mean of an empty mesh list"))?;
    let n = first.positions.len();
    if meshes.iter().any(|m| m.positions.len() != n) {
        return Err(Error::shape("meshes do not share a vertex count"));
    }
    let inv = 1.0 / meshes.len() as f64;
    let mean_of = |get: &dyn Fn(&InstanceMesh) -> Vec3| {
        // Summing in a fixed order keeps the result independent of input order
        // up to rounding; sort by bit pattern for exact permutation invariance.
        let mut vals: Vec<Vec3> = meshes.iter().map(get).collect();
        vals.sort_by(|a, b| a.map(f64::to_bits).cmp(&b.map(f64::to_bits)));
        scale(vals.into_iter().fold([0.0; 3], add), inv)
    };
    let positions = (0..n).map(|i| mean_of(&|m: &InstanceMesh| m.positions[i])).collect();
    let landmarks = Landmarks {
        mvc: mean_of(&|m| m.landmarks.mvc),
        tvc: mean_of(&|m| m.landmarks.tvc),
        lva: mean_of(&|m| m.landmarks.lva),
    };
    Ok(InstanceMesh { positions, landmarks })
}

/// Point a fraction `t` of the way from the epicardial to the endocardial
/// vertex of a transmural pair, with linearly interpolated coordinates.
pub fn myocardial_interior_point(endo: (Vec3, Uvc), epi: (Vec3, Uvc), t: f64) -> Result<(Vec3, Uvc)> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::invalid(format!("interpolation fraction {t} outside (0, 1)")));
    }
    let uvc = [0, 1, 2, 3].map(|k| epi.1[k] + (endo.1[k] - epi.1[k]) * t);
    Ok((lerp(epi.0, endo.0, t), uvc))
}
