//! Synthetic slice acquisition: standard view planes, labeled slice points,
//! in-plane misalignment and the view subsets used for ablations.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::anatomy::{cardiac_frame, AnatomicalLabel, InstanceMesh, Labeler, SurfaceTag, TemplateTopology};
use crate::error::{Error, Result};
use crate::geom::{add, centroid, dist, dot, normalize, scale, sub, Aabb, Vec3};
use crate::netcore::checkpoint::write_atomic;
use crate::seeds::derive_seed;

/// Distance between consecutive short-axis planes (mm).
pub const SAX_SPACING: f64 = 10.0;
/// Nominal slice thickness (mm); points are taken on the mid-plane.
pub const SLICE_THICKNESS: f64 = 8.0;
/// Rotation of the two-chamber plane about the long axis from the 4CH plane.
pub const LAX_2CH_ANGLE: f64 = PI / 3.0;
pub const LAX_3CH_ANGLE: f64 = 2.0 * PI / 3.0;
/// In-plane margin added around the mesh footprint when laying out the grid (mm).
pub const GRID_MARGIN: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SliceView {
    Sax(usize),
    Lax4ch,
    Lax2ch,
    Lax3ch,
}

impl SliceView {
    pub fn is_sax(self) -> bool {
        matches!(self, SliceView::Sax(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlicePlane {
    pub view: SliceView,
    pub origin: Vec3,
    pub normal: Vec3,
    pub e1: Vec3,
    pub e2: Vec3,
    pub spacing: f64,
    pub thickness: f64,
}

impl SlicePlane {
    pub fn signed_distance(&self, p: Vec3) -> f64 {
        dot(sub(p, self.origin), self.normal)
    }

    pub fn at(&self, u: f64, v: f64) -> Vec3 {
        add(self.origin, add(scale(self.e1, u), scale(self.e2, v)))
    }

    /// In-plane coordinates of `p` relative to the origin.
    pub fn project(&self, p: Vec3) -> [f64; 2] {
        let d = sub(p, self.origin);
        [dot(d, self.e1), dot(d, self.e2)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlicePoint {
    pub xyz: Vec3,
    pub label: AnatomicalLabel,
    /// Surface the point was cut from; `None` for occupancy grid points.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub surface: Option<SurfaceTag>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Slice {
    pub plane: SlicePlane,
    /// Accumulated in-plane shift `(along e1, along e2)` in mm.
    pub shift: [f64; 2],
    pub points: Vec<SlicePoint>,
}

impl Slice {
    pub fn contour_points(&self) -> impl Iterator<Item = &SlicePoint> {
        self.points.iter().filter(|p| p.surface.is_some())
    }

    pub fn grid_points(&self) -> impl Iterator<Item = &SlicePoint> {
        self.points.iter().filter(|p| p.surface.is_none())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Ideal,
    Misaligned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContourSet {
    pub shape_id: u64,
    pub slices: Vec<Slice>,
    pub provenance: Provenance,
}

impl ContourSet {
    pub fn point_count(&self) -> usize {
        self.slices.iter().map(|s| s.points.len()).sum()
    }

    pub fn all_points(&self) -> impl Iterator<Item = &SlicePoint> {
        self.slices.iter().flat_map(|s| s.points.iter())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, serde_json::to_string(self)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// SAX stack from base to apex plus the three long-axis views.
///
/// SAX planes sit `5 + 10 i` mm from the mitral centroid along the long axis,
/// `ceil((L - 5) / 10)` of them (at least one).
pub fn standard_views(mesh: &InstanceMesh) -> Result<Vec<SlicePlane>> {
    let lm = mesh.landmarks;
    let frame = cardiac_frame(lm.mvc, lm.tvc, lm.lva)?;
    let (xa, ya, za) = (frame.x_axis, frame.y_axis, frame.z_axis);
    let length = dist(lm.mvc, lm.lva);
    let first = SAX_SPACING / 2.0;
    let count = (((length - first) / SAX_SPACING).ceil().max(1.0)) as usize;
    let mut planes: Vec<SlicePlane> = (0..count)
        .map(|i| SlicePlane {
            view: SliceView::Sax(i),
            origin: add(lm.mvc, scale(za, first + SAX_SPACING * i as f64)),
            normal: za,
            e1: xa,
            e2: ya,
            spacing: SAX_SPACING,
            thickness: SLICE_THICKNESS,
        })
        .collect();
    for (view, angle) in [(SliceView::Lax4ch, 0.0), (SliceView::Lax2ch, LAX_2CH_ANGLE), (SliceView::Lax3ch, LAX_3CH_ANGLE)] {
        let (s, c) = f64::sin_cos(angle);
        planes.push(SlicePlane {
            view,
            origin: frame.origin,
            normal: add(scale(xa, c), scale(ya, s)),
            e1: add(scale(xa, -s), scale(ya, c)),
            e2: za,
            spacing: 0.0,
            thickness: SLICE_THICKNESS,
        });
    }
    Ok(planes)
}

/// Labeled points of one slice: contour points where the lateral surfaces
/// cross the plane, then a `density` mm occupancy grid over the mesh footprint.
pub fn slice_mesh(
    template: &TemplateTopology,
    mesh: &InstanceMesh,
    labeler: &Labeler,
    plane: &SlicePlane,
    density: f64,
) -> Result<Slice> {
    if !(density > 0.0 && density.is_finite()) {
        return Err(Error::invalid(format!("grid step {density} must be positive")));
    }
    let pos = &mesh.positions;
    let d: Vec<f64> = pos.iter().map(|&p| plane.signed_distance(p)).collect();
    let mut points = Vec::new();

    let mut seen = HashSet::new();
    for f in &template.faces {
        let tag = template.tags[f[0] as usize];
        if tag == SurfaceTag::BaseRing || f.iter().any(|&v| template.tags[v as usize] != tag) {
            continue;
        }
        for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
            let (a, b) = (a.min(b) as usize, a.max(b) as usize);
            let (da, db) = (d[a], d[b]);
            if (da >= 0.0) == (db >= 0.0) || !seen.insert((a, b)) {
                continue;
            }
            let t = da / (da - db);
            let mut xyz = add(pos[a], scale(sub(pos[b], pos[a]), t));
            // Remove the rounding residual so the point is on the plane.
            xyz = sub(xyz, scale(plane.normal, plane.signed_distance(xyz)));
            let near = if t < 0.5 { a } else { b };
            let label = AnatomicalLabel::myocardium(template.uvc[near][0]);
            points.push(SlicePoint { xyz, label, surface: Some(tag) });
        }
    }

    let bounds = Aabb::from_points(pos);
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for corner in 0..8 {
        let c = [0, 1, 2].map(|k| if corner >> k & 1 == 0 { bounds.min[k] } else { bounds.max[k] });
        let uv = plane.project(c);
        for k in 0..2 {
            lo[k] = lo[k].min(uv[k] - GRID_MARGIN);
            hi[k] = hi[k].max(uv[k] + GRID_MARGIN);
        }
    }
    // Cell-centred grid, centred on the footprint.
    let cells = |k: usize| ((hi[k] - lo[k]) / density).ceil().max(1.0) as usize;
    let start = |k: usize, n: usize| 0.5 * (lo[k] + hi[k]) - 0.5 * (n as f64 - 1.0) * density;
    let (nu, nv) = (cells(0), cells(1));
    let (su, sv) = (start(0, nu), start(1, nv));
    for iv in 0..nv {
        for iu in 0..nu {
            let xyz = plane.at(su + iu as f64 * density, sv + iv as f64 * density);
            points.push(SlicePoint { xyz, label: labeler.label(xyz)?, surface: None });
        }
    }
    Ok(Slice { plane: *plane, shift: [0.0, 0.0], points })
}

/// Slices every standard view of `mesh` into an ideal contour set.
pub fn acquire(
    template: &TemplateTopology,
    mesh: &InstanceMesh,
    shape_id: u64,
    density: f64,
) -> Result<ContourSet> {
    let labeler = Labeler::new(template, mesh)?;
    let slices = standard_views(mesh)?
        .iter()
        .map(|plane| slice_mesh(template, mesh, &labeler, plane, density))
        .collect::<Result<Vec<_>>>()?;
    Ok(ContourSet { shape_id, slices, provenance: Provenance::Ideal })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftDistribution {
    Gaussian,
    /// Uniform per axis with the same standard deviation as the Gaussian.
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MisalignmentSpec {
    pub sigma: f64,
    pub seed: u64,
    pub distribution: ShiftDistribution,
}

impl Default for MisalignmentSpec {
    fn default() -> Self {
        Self { sigma: 3.0, seed: 0, distribution: ShiftDistribution::Gaussian }
    }
}

/// Translates every slice rigidly within its plane by a seeded random shift.
pub fn inject_misalignment(contours: &ContourSet, spec: &MisalignmentSpec) -> Result<ContourSet> {
    if !(spec.sigma >= 0.0 && spec.sigma.is_finite()) {
        return Err(Error::invalid(format!("shift sigma {} must be finite and non-negative", spec.sigma)));
    }
    let mut out = contours.clone();
    out.provenance = Provenance::Misaligned;
    if spec.sigma == 0.0 {
        return Ok(out);
    }
    for (i, slice) in out.slices.iter_mut().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, contours.shape_id, i as u64));
        let shift = match spec.distribution {
            ShiftDistribution::Gaussian => {
                let n = Normal::new(0.0, spec.sigma).expect("sigma checked above");
                [n.sample(&mut rng), n.sample(&mut rng)]
            }
            ShiftDistribution::Uniform => {
                let a = spec.sigma * 3f64.sqrt();
                let u = Uniform::new_inclusive(-a, a);
                [u.sample(&mut rng), u.sample(&mut rng)]
            }
        };
        translate_slice(slice, shift);
    }
    Ok(out)
}

/// Moves a slice's points by `shift` in-plane and records it.
pub fn translate_slice(slice: &mut Slice, shift: [f64; 2]) {
    let offset = add(scale(slice.plane.e1, shift[0]), scale(slice.plane.e2, shift[1]));
    for p in &mut slice.points {
        p.xyz = add(p.xyz, offset);
    }
    slice.shift = [slice.shift[0] + shift[0], slice.shift[1] + shift[1]];
}

/// Pushes RV endocardial contour points radially outward from their centroid.
pub fn rv_epi_offset(rv_endo: &[Vec3], thickness: f64) -> Result<Vec<Vec3>> {
    if rv_endo.len() < 3 {
        return Err(Error::invalid(format!("{} RV points cannot define a centroid", rv_endo.len())));
    }
    let c = centroid(rv_endo).unwrap();
    Ok(rv_endo
        .iter()
        .map(|&p| match normalize(sub(p, c)) {
            Some(dir) => add(p, scale(dir, thickness)),
            None => p,
        })
        .collect())
}

/// View selection of one ablation row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AblationConfig {
    pub lax_3ch: bool,
    pub lax_4ch: bool,
    pub half_sax: bool,
    pub all_sax: bool,
}

impl AblationConfig {
    pub const FULL: Self = Self { lax_3ch: true, lax_4ch: true, half_sax: false, all_sax: true };
    pub const NO_3CH: Self = Self { lax_3ch: false, lax_4ch: true, half_sax: false, all_sax: true };
    pub const NO_4CH: Self = Self { lax_3ch: true, lax_4ch: false, half_sax: false, all_sax: true };
    pub const SAX_ONLY: Self = Self { lax_3ch: false, lax_4ch: false, half_sax: false, all_sax: true };
    pub const HALF_SAX: Self = Self { lax_3ch: false, lax_4ch: false, half_sax: true, all_sax: false };

    /// The five rows of the view ablation, in table order.
    pub const ROWS: [(&'static str, Self); 5] = [
        ("full", Self::FULL),
        ("no_3ch", Self::NO_3CH),
        ("no_4ch", Self::NO_4CH),
        ("sax_only", Self::SAX_ONLY),
        ("half_sax", Self::HALF_SAX),
    ];

    pub fn by_name(name: &str) -> Option<Self> {
        Self::ROWS.iter().find(|(n, _)| *n == name).map(|&(_, c)| c)
    }

    pub fn name(&self) -> Option<&'static str> {
        Self::ROWS.iter().find(|(_, c)| c == self).map(|&(n, _)| n)
    }
}

/// Keeps the slices selected by `config`. Half SAX keeps every second slice
/// counting from the most apical one.
pub fn select_subset(contours: &ContourSet, config: &AblationConfig) -> Result<ContourSet> {
    if config.half_sax && config.all_sax {
        return Err(Error::invalid("half_sax and all_sax are mutually exclusive"));
    }
    let max_sax = contours
        .slices
        .iter()
        .filter_map(|s| match s.plane.view {
            SliceView::Sax(i) => Some(i),
            _ => None,
        })
        .max();
    let keep = |view: SliceView| match view {
        SliceView::Sax(i) => config.all_sax || (config.half_sax && (max_sax.unwrap_or(0) - i) % 2 == 0),
        SliceView::Lax4ch => config.lax_4ch,
        SliceView::Lax3ch => config.lax_3ch,
        SliceView::Lax2ch => false,
    };
    let slices: Vec<Slice> = contours.slices.iter().filter(|s| keep(s.plane.view)).cloned().collect();
    if slices.is_empty() {
        return Err(Error::invalid(format!("view selection {config:?} keeps no slices")));
    }
    Ok(ContourSet { shape_id: contours.shape_id, slices, provenance: contours.provenance })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anatomy::{generate_shape, ShapeParams, TemplateConfig};
    use crate::geom::{cross, norm};

    fn setup() -> (TemplateTopology, InstanceMesh) {
        let t = TemplateTopology::new(TemplateConfig::default()).unwrap();
        let m = generate_shape(&t, &ShapeParams::default()).unwrap();
        (t, m)
    }

    #[test]
    fn default_shape_views() {
        let (_, m) = setup();
        let planes = standard_views(&m).unwrap();
        let sax: Vec<_> = planes.iter().filter(|p| p.view.is_sax()).collect();
        assert!((9..=10).contains(&sax.len()), "{} SAX planes", sax.len());
        assert_eq!(planes.len(), sax.len() + 3);
        let za = normalize(sub(m.landmarks.lva, m.landmarks.mvc)).unwrap();
        for w in sax.windows(2) {
            assert!(norm(cross(w[0].normal, za)) < 1e-12);
            assert!((dot(sub(w[1].origin, w[0].origin), za) - SAX_SPACING).abs() < 1e-9);
        }
        for p in &planes {
            assert!((norm(p.normal) - 1.0).abs() < 1e-12);
            assert!(dot(p.e1, p.e2).abs() < 1e-12 && dot(p.e1, p.normal).abs() < 1e-12 && dot(p.e2, p.normal).abs() < 1e-12);
        }
        // The 4CH plane passes through the tricuspid centroid.
        let four = planes.iter().find(|p| p.view == SliceView::Lax4ch).unwrap();
        assert!(four.signed_distance(m.landmarks.tvc).abs() < 1e-9);
    }

    #[test]
    fn short_mesh_gets_one_plane() {
        let (t, _) = setup();
        let tiny = generate_shape(&t, &ShapeParams { global_scale: 0.05, ..Default::default() }).unwrap();
        assert_eq!(standard_views(&tiny).unwrap().iter().filter(|p| p.view.is_sax()).count(), 1);
    }

    #[test]
    fn mid_ventricular_slice_has_all_labels_and_exact_labels() {
        let (t, m) = setup();
        let l = Labeler::new(&t, &m).unwrap();
        let planes = standard_views(&m).unwrap();
        let mid = planes.iter().find(|p| p.view == SliceView::Sax(4)).unwrap();
        let s = slice_mesh(&t, &m, &l, mid, 2.0).unwrap();
        let labels: HashSet<_> = s.grid_points().map(|p| p.label).collect();
        assert_eq!(labels.len(), 5);
        for p in &s.points {
            assert!(mid.signed_distance(p.xyz).abs() < 1e-9);
        }
        for p in s.grid_points() {
            assert_eq!(p.label, l.label(p.xyz).unwrap());
        }
        assert!(s.contour_points().count() > 50);
    }

    #[test]
    fn plane_above_base_is_empty_background() {
        let (t, m) = setup();
        let l = Labeler::new(&t, &m).unwrap();
        let mut plane = standard_views(&m).unwrap()[0];
        plane.origin = add(m.landmarks.mvc, scale(plane.normal, -200.0));
        let s = slice_mesh(&t, &m, &l, &plane, 4.0).unwrap();
        assert_eq!(s.contour_points().count(), 0);
        assert!(s.points.iter().all(|p| p.label == AnatomicalLabel::Bg));
    }

    #[test]
    fn halving_default_step_quadruples_grid() {
        let (t, m) = setup();
        let l = Labeler::new(&t, &m).unwrap();
        let plane = standard_views(&m).unwrap()[3];
        let coarse = slice_mesh(&t, &m, &l, &plane, 2.0).unwrap();
        let fine = slice_mesh(&t, &m, &l, &plane, 1.0).unwrap();
        let (c, f) = (coarse.grid_points().count(), fine.grid_points().count());
        assert!(f as f64 >= 3.9 * c as f64, "{f} vs {c}");
    }

    fn small_set() -> ContourSet {
        let (t, m) = setup();
        acquire(&t, &m, 7, 4.0).unwrap()
    }

    #[test]
    fn zero_sigma_leaves_points_alone() {
        let cs = small_set();
        let out = inject_misalignment(&cs, &MisalignmentSpec { sigma: 0.0, ..Default::default() }).unwrap();
        assert_eq!(out.slices, cs.slices);
    }

    #[test]
    fn shifts_are_in_plane_and_invertible() {
        let cs = small_set();
        let out = inject_misalignment(&cs, &MisalignmentSpec::default()).unwrap();
        assert_eq!(out.provenance, Provenance::Misaligned);
        for (a, b) in cs.slices.iter().zip(&out.slices) {
            assert_eq!(a.points.len(), b.points.len());
            let mut back = b.clone();
            translate_slice(&mut back, [-b.shift[0], -b.shift[1]]);
            for ((p, q), r) in a.points.iter().zip(&b.points).zip(&back.points) {
                assert!(b.plane.signed_distance(q.xyz).abs() < 1e-9);
                assert_eq!(p.label, q.label);
                assert!(dist(p.xyz, r.xyz) < 1e-9);
            }
            // Pairwise in-plane distances survive.
            let (p0, p1) = (&a.points[0].xyz, a.points.last().map(|p| p.xyz).unwrap());
            let (q0, q1) = (&b.points[0].xyz, b.points.last().map(|p| p.xyz).unwrap());
            assert!((dist(*p0, p1) - dist(*q0, q1)).abs() < 1e-9);
        }
        let again = inject_misalignment(&cs, &MisalignmentSpec::default()).unwrap();
        assert_eq!(again, out);
    }

    #[test]
    fn gaussian_shift_magnitude_matches_rayleigh_mean() {
        let plane = SlicePlane {
            view: SliceView::Sax(0),
            origin: [0.0; 3],
            normal: [0.0, 0.0, 1.0],
            e1: [1.0, 0.0, 0.0],
            e2: [0.0, 1.0, 0.0],
            spacing: 10.0,
            thickness: 8.0,
        };
        let slice = Slice { plane, shift: [0.0; 2], points: vec![] };
        let cs = ContourSet { shape_id: 3, slices: vec![slice; 100], provenance: Provenance::Ideal };
        let sigma = 3.0;
        let out = inject_misalignment(&cs, &MisalignmentSpec { sigma, seed: 5, ..Default::default() }).unwrap();
        let mean = out.slices.iter().map(|s| s.shift[0].hypot(s.shift[1])).sum::<f64>() / 100.0;
        let expected = sigma * (PI / 2.0).sqrt();
        assert!((mean - expected).abs() < 0.2 * expected, "{mean} vs {expected}");
    }

    #[test]
    fn rv_offset_on_circle() {
        let circle: Vec<Vec3> = (0..36).map(|i| {
            let a = i as f64 * PI / 18.0;
            [20.0 * a.cos(), 20.0 * a.sin(), 4.0]
        }).collect();
        let out = rv_epi_offset(&circle, 3.0).unwrap();
        for p in &out {
            assert!((p[0].hypot(p[1]) - 23.0).abs() < 1e-9);
            assert_eq!(p[2], 4.0);
        }
        assert_eq!(rv_epi_offset(&circle, 0.0).unwrap(), circle);
        assert!(rv_epi_offset(&circle[..2], 3.0).is_err());
    }

    #[test]
    fn rv_offset_lands_in_the_rv_wall() {
        let (t, m) = setup();
        let l = Labeler::new(&t, &m).unwrap();
        let epi = crate::geom::TriangleBvh::new(&t.compartment_mesh(crate::anatomy::Compartment::Epicardium, &m.positions)).unwrap();
        let planes = standard_views(&m).unwrap();
        let s = slice_mesh(&t, &m, &l, &planes[3], 2.0).unwrap();
        let rv: Vec<Vec3> = s.contour_points().filter(|p| p.surface == Some(SurfaceTag::RvEndo)).map(|p| p.xyz).collect();
        let out = rv_epi_offset(&rv, 3.0).unwrap();
        // The centroid of a crescent lies on its concave side, so only the
        // free-wall points are meaningful; septal points move into the cavity.
        let free_wall: Vec<Vec3> = rv
            .iter()
            .zip(&out)
            .filter(|(a, _)| matches!(t.kinds[l.nearest_vertex(**a)], crate::anatomy::VertexKind::RvFree { .. }))
            .map(|(_, p)| *p)
            .collect();
        assert!(free_wall.len() > 20);
        let ok = free_wall
            .iter()
            .filter(|&&p| matches!(l.label(p).unwrap(), AnatomicalLabel::Rvm | AnatomicalLabel::Lvm) || epi.distance(p) < 1.5)
            .count();
        let out = free_wall;
        assert_eq!(ok, out.len());
    }

    #[test]
    fn subsets_follow_the_rows() {
        let cs = small_set();
        let n_sax = cs.slices.iter().filter(|s| s.plane.view.is_sax()).count();
        let full = select_subset(&cs, &AblationConfig::FULL).unwrap();
        assert_eq!(full.slices.len(), n_sax + 2);
        assert!(full.slices.iter().all(|s| s.plane.view != SliceView::Lax2ch));
        let half = select_subset(&cs, &AblationConfig::HALF_SAX).unwrap();
        assert_eq!(half.slices.len(), n_sax.div_ceil(2));
        assert!(half.slices.iter().all(|s| s.plane.view.is_sax()));
        assert!(half.slices.iter().any(|s| s.plane.view == SliceView::Sax(n_sax - 1)));
        assert_eq!(select_subset(&half, &AblationConfig::HALF_SAX).unwrap(), half);
        for (_, row) in AblationConfig::ROWS {
            let sub = select_subset(&cs, &row).unwrap();
            assert!(sub.slices.iter().all(|s| cs.slices.contains(s)));
            assert_eq!(select_subset(&sub, &row).unwrap(), sub);
        }
        let none = AblationConfig { lax_3ch: false, lax_4ch: false, half_sax: false, all_sax: false };
        assert!(select_subset(&cs, &none).is_err());
        let both = AblationConfig { half_sax: true, ..AblationConfig::FULL };
        assert!(select_subset(&cs, &both).is_err());
    }

    #[test]
    fn contour_json_round_trip() {
        let cs = small_set();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        cs.save(&path).unwrap();
        assert_eq!(ContourSet::load(&path).unwrap(), cs);
    }
}
