//! Evaluation metrics: point Dice, corresponding-vertex error, Chamfer and
//! point-to-surface distances, cavity volumes and wall mass.

use rstar::RTree;
use serde::{Deserialize, Serialize};

use crate::anatomy::{AnatomicalLabel, Compartment, InstanceMesh, Labeler, TemplateTopology};
use crate::error::{Error, Result};
use crate::geom::{dist, point_triangle_distance, Aabb, TriMesh, TriangleBvh, Vec3};

/// Myocardial density in g/mL.
pub const MYOCARDIUM_DENSITY: f64 = 1.05;
/// mm^3 per mL.
const MM3_PER_ML: f64 = 1000.0;

/// `2TP / (2TP + FP + FN)` for one class; 1 when the class is absent from both.
pub fn point_dice(pred: &[AnatomicalLabel], reference: &[AnatomicalLabel], class: AnatomicalLabel) -> Result<f64> {
    if pred.len() != reference.len() {
        return Err(Error::shape(format!("{} predicted vs {} reference labels", pred.len(), reference.len())));
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &r) in pred.iter().zip(reference) {
        match (p == class, r == class) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    let denom = 2 * tp + fp + fn_;
    Ok(if denom == 0 { 1.0 } else { 2.0 * tp as f64 / denom as f64 })
}

/// Mean and root-mean-square distance between corresponding vertices.
pub fn corresponding_ed(pred: &[Vec3], reference: &[Vec3]) -> Result<(f64, f64)> {
    if pred.len() != reference.len() || pred.is_empty() {
        return Err(Error::shape(format!("{} predicted vs {} reference vertices", pred.len(), reference.len())));
    }
    let n = pred.len() as f64;
    let (sum, sq) = pred.iter().zip(reference).fold((0.0, 0.0), |(s, q), (a, b)| {
        let d = dist(*a, *b);
        (s + d, q + d * d)
    });
    Ok((sum / n, (sq / n).sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Chamfer {
    /// Mean distance from each point of the first set to the second.
    pub ab: f64,
    pub ba: f64,
    /// `ab + ba`.
    pub sym: f64,
}

/// Nearest-neighbour lookups into a fixed point set.
pub struct PointIndex {
    tree: RTree<Vec3>,
}

impl PointIndex {
    pub fn new(points: &[Vec3]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("cannot index an empty point set"));
        }
        Ok(Self { tree: RTree::bulk_load(points.to_vec()) })
    }

    pub fn nearest_distance(&self, p: Vec3) -> f64 {
        // The tree is never empty, so a neighbour always exists.
        self.tree.nearest_neighbor(&p).map_or(f64::INFINITY, |q| dist(p, *q))
    }

    /// Mean nearest distance from `points` into the indexed set.
    pub fn mean_distance(&self, points: &[Vec3]) -> f64 {
        points.iter().map(|&p| self.nearest_distance(p)).sum::<f64>() / points.len() as f64
    }
}

pub fn chamfer(a: &[Vec3], b: &[Vec3]) -> Result<Chamfer> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("Chamfer distance of an empty point set"));
    }
    let ab = PointIndex::new(b)?.mean_distance(a);
    let ba = PointIndex::new(a)?.mean_distance(b);
    Ok(Chamfer { ab, ba, sym: ab + ba })
}

/// All-pairs reference for [`chamfer`].
pub fn chamfer_exhaustive(a: &[Vec3], b: &[Vec3]) -> Result<Chamfer> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("Chamfer distance of an empty point set"));
    }
    let directed = |x: &[Vec3], y: &[Vec3]| {
        x.iter().map(|&p| y.iter().map(|&q| dist(p, q)).fold(f64::INFINITY, f64::min)).sum::<f64>() / x.len() as f64
    };
    let (ab, ba) = (directed(a, b), directed(b, a));
    Ok(Chamfer { ab, ba, sym: ab + ba })
}

/// Mean exact distance from `points` to the triangles of `mesh`.
pub fn point_to_surface(points: &[Vec3], mesh: &TriMesh) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::invalid("no query points"));
    }
    let bvh = TriangleBvh::new(mesh)?;
    Ok(points.iter().map(|&p| bvh.distance(p)).sum::<f64>() / points.len() as f64)
}

/// Triangle-by-triangle reference for [`point_to_surface`].
pub fn point_to_surface_exhaustive(points: &[Vec3], mesh: &TriMesh) -> Result<f64> {
    if points.is_empty() || mesh.faces.is_empty() {
        return Err(Error::invalid("point-to-surface needs points and triangles"));
    }
    let d = |p: Vec3| (0..mesh.faces.len()).map(|f| point_triangle_distance(p, &mesh.triangle(f))).fold(f64::INFINITY, f64::min);
    Ok(points.iter().map(|&p| d(p)).sum::<f64>() / points.len() as f64)
}

/// Volume enclosed by a closed surface, in mL (coordinates in mm).
pub fn enclosed_volume(mesh: &TriMesh) -> Result<f64> {
    let open = mesh.boundary_edges();
    if !open.is_empty() {
        return Err(Error::Degenerate(format!("surface has {} boundary edges", open.len())));
    }
    Ok(mesh.signed_volume().abs() / MM3_PER_ML)
}

/// `(V(epi) - sum V(endo)) * density`, in grams for density in g/mL.
pub fn wall_mass(epi: &TriMesh, endos: &[&TriMesh], density: f64) -> Result<f64> {
    let mut wall = enclosed_volume(epi)?;
    for e in endos {
        wall -= enclosed_volume(e)?;
    }
    // Allow round-off when the surfaces coincide.
    if wall < -1e-9 * enclosed_volume(epi)?.max(1.0) {
        return Err(Error::Degenerate(format!("negative wall volume {wall} mL")));
    }
    Ok(wall.max(0.0) * density)
}

/// Cavity volumes (mL) and ventricular wall masses (g) of one shape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Volumetrics {
    pub lv_vol: f64,
    pub rv_vol: f64,
    pub lv_mass: f64,
    pub rv_mass: f64,
}

/// Grid step (mm) of the LV/RV wall split.
pub const MASS_SPLIT_STEP: f64 = 2.0;

/// Volumes from the cavity surfaces. The total wall mass is split between
/// the ventricles by the share of LV and RV myocardium labels on a regular
/// grid.
pub fn volumetrics(template: &TemplateTopology, mesh: &InstanceMesh, density: f64) -> Result<Volumetrics> {
    let surf = |c| template.compartment_mesh(c, &mesh.positions);
    let (lv, rv, epi) = (surf(Compartment::LvCavity), surf(Compartment::RvCavity), surf(Compartment::Epicardium));
    let lv_vol = enclosed_volume(&lv)?;
    let rv_vol = enclosed_volume(&rv)?;
    let total = wall_mass(&epi, &[&lv, &rv], density)?;

    let labeler = Labeler::new(template, mesh)?;
    let b = Aabb::from_points(&mesh.positions);
    let n = [0, 1, 2].map(|k| ((b.max[k] - b.min[k]) / MASS_SPLIT_STEP).ceil() as usize);
    let (mut lvm, mut rvm) = (0usize, 0usize);
    for k in 0..n[2] {
        for j in 0..n[1] {
            for i in 0..n[0] {
                let p = [i, j, k].map(|v| v as f64 + 0.5);
                let p = [b.min[0] + p[0] * MASS_SPLIT_STEP, b.min[1] + p[1] * MASS_SPLIT_STEP, b.min[2] + p[2] * MASS_SPLIT_STEP];
                match labeler.label(p)? {
                    AnatomicalLabel::Lvm => lvm += 1,
                    AnatomicalLabel::Rvm => rvm += 1,
                    _ => {}
                }
            }
        }
    }
    let share = if lvm + rvm == 0 { 0.5 } else { lvm as f64 / (lvm + rvm) as f64 };
    Ok(Volumetrics { lv_vol, rv_vol, lv_mass: total * share, rv_mass: total * (1.0 - share) })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlandAltmanRow {
    pub mean: f64,
    pub diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlandAltman {
    pub rows: Vec<BlandAltmanRow>,
    pub bias: f64,
    pub sd: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Per-case `((ref + pred) / 2, pred - ref)`, the mean difference and
/// `bias +- 1.96 SD` limits of agreement.
pub fn bland_altman(reference: &[f64], predicted: &[f64]) -> Result<BlandAltman> {
    if reference.len() != predicted.len() || reference.is_empty() {
        return Err(Error::shape(format!("{} reference vs {} predicted values", reference.len(), predicted.len())));
    }
    let rows: Vec<BlandAltmanRow> =
        reference.iter().zip(predicted).map(|(r, p)| BlandAltmanRow { mean: 0.5 * (r + p), diff: p - r }).collect();
    let diffs: Vec<f64> = rows.iter().map(|r| r.diff).collect();
    let (bias, sd) = mean_sd(&diffs);
    Ok(BlandAltman { rows, bias, sd, lower: bias - 1.96 * sd, upper: bias + 1.96 * sd })
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// One evaluated reconstruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub case_id: u64,
    pub condition: String,
    pub ablation: String,
    pub dice_lvm: f64,
    pub dice_rvm: f64,
    pub ed_mean: f64,
    pub rmse: f64,
    pub chamfer_ab: f64,
    pub chamfer_ba: f64,
    pub chamfer_sym: f64,
    pub p2s_mean: f64,
    /// Contour points to the true surface, the reference for `p2s_mean`.
    pub p2s_ref: f64,
    pub lv_vol: f64,
    pub rv_vol: f64,
    pub lv_mass: f64,
    pub rv_mass: f64,
    pub lv_vol_ref: f64,
    pub rv_vol_ref: f64,
    pub lv_mass_ref: f64,
    pub rv_mass_ref: f64,
    pub long_axis: f64,
}

/// Metrics averaged in the summary table, in column order.
pub const SUMMARY_COLUMNS: &[&str] =
    &["dice_lvm", "dice_rvm", "ed_mean", "rmse", "chamfer_ab", "chamfer_sym", "p2s_mean", "p2s_ref", "lv_vol", "lv_mass", "rv_vol", "rv_mass"];

impl MetricsReport {
    pub fn column(&self, name: &str) -> Option<f64> {
        Some(match name {
            "dice_lvm" => self.dice_lvm,
            "dice_rvm" => self.dice_rvm,
            "ed_mean" => self.ed_mean,
            "rmse" => self.rmse,
            "chamfer_ab" => self.chamfer_ab,
            "chamfer_ba" => self.chamfer_ba,
            "chamfer_sym" => self.chamfer_sym,
            "p2s_mean" => self.p2s_mean,
            "p2s_ref" => self.p2s_ref,
            "lv_vol" => self.lv_vol,
            "rv_vol" => self.rv_vol,
            "lv_mass" => self.lv_mass,
            "rv_mass" => self.rv_mass,
            _ => return None,
        })
    }
}

pub fn write_reports_csv(reports: &[MetricsReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in reports {
        w.serialize(r).map_err(|e| Error::format("metrics CSV", e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::format("metrics CSV", e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::format("metrics CSV", e.to_string()))
}

pub fn read_reports_csv(text: &str) -> Result<Vec<MetricsReport>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::format("metrics CSV", e.to_string()))
}

/// Mean and SD of every summary column for one (condition, ablation) group.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub condition: String,
    pub ablation: String,
    pub cases: usize,
    pub stats: Vec<(f64, f64)>,
}

/// Groups reports by (condition, ablation) in first-seen order.
pub fn summarize(reports: &[MetricsReport]) -> Vec<SummaryRow> {
    let mut keys: Vec<(String, String)> = Vec::new();
    for r in reports {
        let k = (r.condition.clone(), r.ablation.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(condition, ablation)| {
            let group: Vec<&MetricsReport> =
                reports.iter().filter(|r| r.condition == condition && r.ablation == ablation).collect();
            let stats = SUMMARY_COLUMNS
                .iter()
                .map(|c| mean_sd(&group.iter().map(|r| r.column(c).unwrap()).collect::<Vec<_>>()))
                .collect();
            SummaryRow { condition, ablation, cases: group.len(), stats }
        })
        .collect()
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut s = String::from("condition,ablation,cases");
    for c in SUMMARY_COLUMNS {
        s.push_str(&format!(",{c}_mean,{c}_sd"));
    }
    s.push('\n');
    for r in rows {
        s.push_str(&format!("{},{},{}", r.condition, r.ablation, r.cases));
        for (m, sd) in &r.stats {
            s.push_str(&format!(",{m:?},{sd:?}"));
        }
        s.push('\n');
    }
    s
}
