//! Latent-code fitting against sparse labeled slices, and mesh-free prediction
//! of meshes and dense label volumes from a fitted code.

use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acquisition::ContourSet;
use crate::anatomy::{AnatomicalLabel, InstanceMesh, Landmarks, TemplateTopology};
use crate::error::{Error, Result};
use crate::geom::{centroid, Vec3};
use crate::netcore::checkpoint::write_atomic;
use crate::netcore::{adam_step, GradTarget, OptimizerState, Real, ResidualMlp};
use crate::training::{one_hot_rows, reg_inputs, seg_inputs, seg_terms, LatentStats, COORD_SCALE, NUM_LABELS};

/// Loss above which a fit is treated as diverged.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// `(z - mu)^T S^-1 (z - mu)` and its gradient `2 S^-1 (z - mu)`.
pub fn mahalanobis(z: &[f64], stats: &LatentStats) -> Result<(f64, Vec<f64>)> {
    let d = stats.dim();
    if z.len() != d {
        return Err(Error::shape(format!("code of length {} vs statistics of dimension {d}", z.len())));
    }
    let diff: Vec<f64> = z.iter().zip(&stats.mean).map(|(a, m)| a - m).collect();
    let mut value = 0.0;
    let mut grad = vec![0.0; d];
    for i in 0..d {
        let row = &stats.inverse[i * d..(i + 1) * d];
        let s: f64 = row.iter().zip(&diff).map(|(a, b)| a * b).sum();
        value += diff[i] * s;
        // The inverse is symmetric, so both halves of the derivative agree.
        grad[i] = 2.0 * s;
    }
    Ok((value.max(0.0), grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InferenceWeights {
    pub lambda_r: f64,
    pub lambda_bce: f64,
    pub lambda_dice: f64,
    pub steps: usize,
    pub lr: f64,
    /// Points drawn (seeded) from the slices per fit; 0 keeps all of them.
    pub max_points: usize,
}

impl InferenceWeights {
    /// Preset for consistently sliced contours.
    pub fn ideal() -> Self {
        Self { lambda_r: 1e-2, lambda_bce: 10.0, lambda_dice: 1.0, steps: 300, lr: 1e-2, max_points: 1536 }
    }

    /// Preset for contours with slice misalignment.
    pub fn misaligned() -> Self {
        Self { lambda_bce: 1.0, ..Self::ideal() }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "ideal" => Some(Self::ideal()),
            "misaligned" => Some(Self::misaligned()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = [self.lambda_r, self.lambda_bce, self.lambda_dice];
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || self.steps == 0 || !(self.lr > 0.0) {
            return Err(Error::invalid(format!("bad inference weights {self:?}")));
        }
        Ok(())
    }
}

impl Default for InferenceWeights {
    fn default() -> Self {
        Self::ideal()
    }
}

/// Labeled points driving a fit.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPoints {
    pub xyz: Vec<Vec3>,
    pub labels: Vec<AnatomicalLabel>,
}

impl LabeledPoints {
    /// All slice points (contour and occupancy grid), optionally thinned to a
    /// seeded subset of `max_points`.
    pub fn from_contours(contours: &ContourSet, max_points: usize, seed: u64) -> Self {
        let all: Vec<_> = contours.all_points().collect();
        let keep: Vec<usize> = if max_points == 0 || max_points >= all.len() {
            (0..all.len()).collect()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut v = index::sample(&mut rng, all.len(), max_points).into_vec();
            v.sort_unstable();
            v
        };
        Self { xyz: keep.iter().map(|&i| all[i].xyz).collect(), labels: keep.iter().map(|&i| all[i].label).collect() }
    }

    pub fn len(&self) -> usize {
        self.xyz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xyz.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub loss: f64,
    pub bce: f64,
    pub dice: f64,
    pub prior: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentFit {
    /// Best-loss iterate.
    pub code: Vec<f64>,
    pub best_step: usize,
    pub trace: Vec<TraceRow>,
}

impl LatentFit {
    pub fn best_loss(&self) -> f64 {
        self.trace[self.best_step].loss
    }
}

pub fn trace_csv(trace: &[TraceRow]) -> String {
    let mut s = String::from("step,loss,bce,dice,prior\n");
    for r in trace {
        s.push_str(&format!("{},{:?},{:?},{:?},{:?}\n", r.step, r.loss, r.bce, r.dice, r.prior));
    }
    s
}

/// Loss of one code against `points` and its gradient.
pub fn fit_loss<T: Real>(
    seg_net: &ResidualMlp<T>,
    code: &[f64],
    points: &LabeledPoints,
    targets: &[f64],
    stats: &LatentStats,
    weights: &InferenceWeights,
) -> Result<(TraceRow, Vec<f64>)> {
    let trace = seg_net.forward_traced(&seg_inputs::<T>(&points.xyz, code))?;
    let logits: Vec<f64> = trace.outputs().iter().map(|v| v.as_f64()).collect();
    let terms = seg_terms(&logits, targets)?;
    let (prior, prior_grad) = mahalanobis(code, stats)?;
    let seg = terms.combine(weights.lambda_bce, weights.lambda_dice);
    let up: Vec<T> = seg.grad.iter().map(|&g| T::grad_lit(g)).collect();
    let back = seg_net.backward(&trace, &up, GradTarget::InputsOnly)?;
    let d = code.len();
    let mut grad: Vec<f64> = prior_grad.iter().map(|g| weights.lambda_r * g).collect();
    for row in back.input_grads.chunks_exact(3 + d) {
        for (a, g) in grad.iter_mut().zip(&row[3..]) {
            *a += g.as_f64();
        }
    }
    let row = TraceRow { step: 0, loss: seg.value + weights.lambda_r * prior, bce: terms.bce, dice: terms.dice, prior };
    Ok((row, grad))
}

/// Fits a latent code to labeled points through the frozen `seg_net`,
/// starting from the latent mean. Returns the best iterate seen.
pub fn optimize_latent<T: Real>(
    points: &LabeledPoints,
    seg_net: &ResidualMlp<T>,
    stats: &LatentStats,
    weights: &InferenceWeights,
) -> Result<LatentFit> {
    weights.validate()?;
    if points.is_empty() {
        return Err(Error::invalid("no labeled points to fit"));
    }
    let first = points.labels[0];
    if points.labels.iter().all(|&l| l == first) {
        return Err(Error::invalid(format!("all {} points carry the single label {first:?}", points.len())));
    }
    if seg_net.shape().input_dim != 3 + stats.dim() {
        return Err(Error::shape(format!("network input {} vs code dimension {}", seg_net.shape().input_dim, stats.dim())));
    }
    let targets = one_hot_rows(&points.labels);
    let mut code = stats.mean.clone();
    let mut opt = OptimizerState::new(code.len(), weights.lr);
    let mut trace = Vec::with_capacity(weights.steps + 1);
    let (mut best, mut best_step) = (code.clone(), 0);
    for step in 0..=weights.steps {
        let (mut row, grad) = fit_loss(seg_net, &code, points, &targets, stats, weights)?;
        row.step = step;
        if !row.loss.is_finite() || row.loss > DIVERGENCE_LIMIT {
            return Err(Error::Diverged(format!("latent fit loss {} at step {step}; trace {}", row.loss, trace_csv(&trace))));
        }
        trace.push(row);
        if row.loss < trace[best_step].loss {
            best.clone_from(&code);
            best_step = step;
        }
        if step < weights.steps {
            adam_step(&mut code, &grad, &mut opt)?;
        }
    }
    Ok(LatentFit { code: best, best_step, trace })
}

/// Positions of every template vertex from its UVCs and the code. Only the
/// network, the code and the shared template are consulted.
pub fn predict_mesh<T: Real>(reg_net: &ResidualMlp<T>, code: &[f64], template: &TemplateTopology) -> Result<InstanceMesh> {
    if reg_net.shape().input_dim != 4 + code.len() {
        return Err(Error::shape(format!("network input {} vs code length {}", reg_net.shape().input_dim, code.len())));
    }
    let out = reg_net.forward(&reg_inputs::<T>(&template.uvc, code))?;
    let positions: Vec<Vec3> =
        out.chunks_exact(3).map(|c| [c[0].as_f64() * COORD_SCALE, c[1].as_f64() * COORD_SCALE, c[2].as_f64() * COORD_SCALE]).collect();
    if let Some(i) = positions.iter().flatten().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { context: "predicted vertex positions", index: i / 3 });
    }
    Ok(InstanceMesh { landmarks: template_landmarks(template, &positions), positions })
}

/// Valve centres from the rim vertices and the LV apex vertex.
pub fn template_landmarks(template: &TemplateTopology, positions: &[Vec3]) -> Landmarks {
    let rim = |idx: &[usize]| centroid(&idx.iter().map(|&i| positions[i]).collect::<Vec<_>>()).unwrap_or([0.0; 3]);
    Landmarks { mvc: rim(&template.lv_rim), tvc: rim(&template.rv_rim), lva: positions[template.lv_apex] }
}

/// Regular sampling grid. Voxel `(i, j, k)` is queried at
/// `origin + (i, j, k) * spacing`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelGrid {
    pub origin: Vec3,
    pub spacing: f64,
    pub dims: [usize; 3],
}

impl LabelGrid {
    pub fn voxel_count(&self) -> usize {
        self.dims.iter().product()
    }

    /// Centre of voxel `(i, j, k)`, with `i` fastest in storage order.
    pub fn center(&self, i: usize, j: usize, k: usize) -> Vec3 {
        [
            self.origin[0] + i as f64 * self.spacing,
            self.origin[1] + j as f64 * self.spacing,
            self.origin[2] + k as f64 * self.spacing,
        ]
    }

    pub fn flat_index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    pub grid: LabelGrid,
    /// Label indices, x fastest.
    pub labels: Vec<u8>,
}

#[derive(Debug, Serialize, Deserialize)]
struct VolumeHeader {
    origin: Vec3,
    spacing: f64,
    dims: [usize; 3],
    order: String,
    legend: Vec<String>,
}

impl LabelVolume {
    pub fn get(&self, i: usize, j: usize, k: usize) -> u8 {
        self.labels[self.grid.flat_index(i, j, k)]
    }

    /// Raw `u8` labels to `path` and the grid description to `path` + `.json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = VolumeHeader {
            origin: self.grid.origin,
            spacing: self.grid.spacing,
            dims: self.grid.dims,
            order: "x fastest, then y, then z".into(),
            legend: AnatomicalLabel::ALL.iter().map(|l| l.name().to_string()).collect(),
        };
        write_atomic(path, &self.labels)?;
        write_atomic(&header_path(path), serde_json::to_string_pretty(&header)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let hp = header_path(path);
        for p in [path, hp.as_path()] {
            if !p.exists() {
                return Err(Error::MissingFile(p.to_path_buf()));
            }
        }
        let header: VolumeHeader = serde_json::from_str(&std::fs::read_to_string(&hp)?)?;
        let labels = std::fs::read(path)?;
        let grid = LabelGrid { origin: header.origin, spacing: header.spacing, dims: header.dims };
        if labels.len() != grid.voxel_count() {
            return Err(Error::format("label volume", format!("{} bytes for {} voxels", labels.len(), grid.voxel_count())));
        }
        Ok(Self { grid, labels })
    }
}

fn header_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

/// Voxels evaluated per network call.
const QUERY_CHUNK: usize = 4096;

/// Argmax label at every voxel centre of `grid`.
pub fn predict_dense_labels<T: Real>(seg_net: &ResidualMlp<T>, code: &[f64], grid: &LabelGrid) -> Result<LabelVolume> {
    if grid.dims.contains(&0) {
        return Err(Error::invalid(format!("grid dimensions {:?} contain a zero", grid.dims)));
    }
    if !(grid.spacing.is_finite() && grid.spacing > 0.0) || grid.origin.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("grid origin and spacing must be finite with positive spacing"));
    }
    if seg_net.shape().input_dim != 3 + code.len() {
        return Err(Error::shape(format!("network input {} vs code length {}", seg_net.shape().input_dim, code.len())));
    }
    let [nx, ny, nz] = grid.dims;
    let centers: Vec<Vec3> =
        (0..nz).flat_map(|k| (0..ny).flat_map(move |j| (0..nx).map(move |i| (i, j, k)))).map(|(i, j, k)| grid.center(i, j, k)).collect();
    let mut labels = Vec::with_capacity(centers.len());
    for chunk in centers.chunks(QUERY_CHUNK) {
        let logits = seg_net.forward(&seg_inputs::<T>(chunk, code))?;
        labels.extend(logits.chunks_exact(NUM_LABELS).map(argmax));
    }
    Ok(LabelVolume { grid: *grid, labels })
}

/// Per-point labels at arbitrary positions.
pub fn predict_point_labels<T: Real>(seg_net: &ResidualMlp<T>, code: &[f64], xyz: &[Vec3]) -> Result<Vec<AnatomicalLabel>> {
    let mut out = Vec::with_capacity(xyz.len());
    for chunk in xyz.chunks(QUERY_CHUNK) {
        let logits = seg_net.forward(&seg_inputs::<T>(chunk, code))?;
        out.extend(logits.chunks_exact(NUM_LABELS).map(|r| AnatomicalLabel::from_index(argmax(r) as usize).unwrap()));
    }
    Ok(out)
}

/// First index of the largest logit; sigmoid is monotone so this is also the
/// most probable channel.
fn argmax<T: Real>(row: &[T]) -> u8 {
    let mut best = 0;
    for (c, v) in row.iter().enumerate().skip(1) {
        if v.as_f64() > row[best].as_f64() {
            best = c;
        }
    }
    best as u8
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anatomy::TemplateConfig;
    use crate::netcore::gradcheck::{max_relative_error, numeric_gradient};
    use crate::netcore::{param_hash, MlpShape};
    use crate::training::latent_stats;
    use rand::Rng;

    fn identity_stats(d: usize) -> LatentStats {
        let mut inv = vec![0.0; d * d];
        for i in 0..d {
            inv[i * d + i] = 1.0;
        }
        LatentStats { mean: vec![0.0; d], covariance: inv.clone(), inverse: inv }
    }

    #[test]
    fn mahalanobis_examples() {
        let s = identity_stats(4);
        assert_eq!(mahalanobis(&[0.0; 4], &s).unwrap().0, 0.0);
        assert_eq!(mahalanobis(&[3.0, 4.0, 0.0, 0.0], &s).unwrap().0, 25.0);
        let diag = LatentStats { mean: vec![1.0, 1.0], covariance: vec![4.0, 0.0, 0.0, 4.0], inverse: vec![0.25, 0.0, 0.0, 0.25] };
        assert_eq!(mahalanobis(&[2.0, 1.0], &diag).unwrap().0, 0.25);
        assert!(mahalanobis(&[0.0; 3], &s).is_err());
    }

    #[test]
    fn mahalanobis_gradient_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let codes: Vec<f64> = (0..40 * 5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let s = latent_stats(&codes, 5).unwrap();
        let z: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g = mahalanobis(&z, &s).unwrap().1;
        let n = numeric_gradient(&z, 1e-5, |x| Ok(mahalanobis(x, &s)?.0)).unwrap();
        assert!(max_relative_error(&g, &n) < 1e-4);
    }

    fn toy_problem(d: usize, seed: u64) -> (ResidualMlp<f64>, LatentStats, Vec<f64>, LabeledPoints) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = ResidualMlp::<f64>::init(MlpShape::new(3 + d, 5, 16, 2), &mut rng).unwrap();
        let codes: Vec<f64> = (0..20 * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let stats = latent_stats(&codes, d).unwrap();
        let h0 = codes[..d].to_vec();
        let xyz: Vec<Vec3> = (0..300).map(|_| [0, 1, 2].map(|_| rng.gen_range(-60.0..60.0))).collect();
        let labels = predict_point_labels(&net, &h0, &xyz).unwrap();
        (net, stats, h0, LabeledPoints { xyz, labels })
    }

    #[test]
    fn fit_gradient_matches_differences() {
        let (net, stats, h0, pts) = toy_problem(4, 2);
        let targets = one_hot_rows(&pts.labels);
        let w = InferenceWeights::ideal();
        let g = fit_loss(&net, &h0, &pts, &targets, &stats, &w).unwrap().1;
        let n = numeric_gradient(&h0, 1e-5, |h| Ok(fit_loss(&net, h, &pts, &targets, &stats, &w)?.0.loss)).unwrap();
        assert!(max_relative_error(&g, &n) < 1e-4);
    }

    #[test]
    fn fit_matches_or_beats_the_generating_code() {
        let (net, stats, h0, pts) = toy_problem(4, 3);
        if pts.labels.iter().all(|&l| l == pts.labels[0]) {
            panic!("toy network predicts a single label");
        }
        let w = InferenceWeights { lambda_r: 0.0, steps: 500, lr: 5e-2, ..InferenceWeights::ideal() };
        let targets = one_hot_rows(&pts.labels);
        let at_h0 = fit_loss(&net, &h0, &pts, &targets, &stats, &w).unwrap().0.loss;
        let hash = param_hash(net.params());
        let fit = optimize_latent(&pts, &net, &stats, &w).unwrap();
        assert_eq!(hash, param_hash(net.params()));
        assert!(fit.best_loss() <= at_h0 + 1e-6, "{} vs {at_h0}", fit.best_loss());
        let min = fit.trace.iter().map(|r| r.loss).fold(f64::INFINITY, f64::min);
        assert_eq!(fit.best_loss(), min);
        assert_eq!(fit.trace.len(), 501);
    }

    #[test]
    fn strong_prior_pins_the_code_to_the_mean() {
        let (net, stats, _, pts) = toy_problem(4, 4);
        let w = InferenceWeights { lambda_r: 1e6, steps: 200, ..InferenceWeights::ideal() };
        let fit = optimize_latent(&pts, &net, &stats, &w).unwrap();
        let dist: f64 = fit.code.iter().zip(&stats.mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        assert!(dist < 1e-3, "{dist}");
    }

    #[test]
    fn single_label_input_is_rejected() {
        let (net, stats, _, mut pts) = toy_problem(4, 5);
        pts.labels.iter_mut().for_each(|l| *l = AnatomicalLabel::Bg);
        assert!(optimize_latent(&pts, &net, &stats, &InferenceWeights::ideal()).is_err());
    }

    #[test]
    fn dense_labels_agree_across_resolutions() {
        let (net, _, h0, _) = toy_problem(4, 6);
        let coarse = LabelGrid { origin: [-40.0, -30.0, -50.0], spacing: 2.0, dims: [20, 15, 25] };
        let fine = LabelGrid { spacing: 1.0, dims: [40, 30, 50], ..coarse };
        let a = predict_dense_labels(&net, &h0, &coarse).unwrap();
        let b = predict_dense_labels(&net, &h0, &fine).unwrap();
        for k in 0..25 {
            for j in 0..15 {
                for i in 0..20 {
                    assert_eq!(a.get(i, j, k), b.get(2 * i, 2 * j, 2 * k));
                }
            }
        }
        assert!(predict_dense_labels(&net, &h0, &LabelGrid { dims: [0, 1, 1], ..coarse }).is_err());

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("labels.u8");
        a.save(&p).unwrap();
        assert_eq!(LabelVolume::load(&p).unwrap(), a);
    }

    #[test]
    fn predicted_mesh_is_deterministic_and_code_dependent() {
        let t = TemplateTopology::new(TemplateConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let net = ResidualMlp::<f64>::init(MlpShape::new(4 + 3, 3, 16, 2), &mut rng).unwrap();
        let a = predict_mesh(&net, &[0.1, 0.2, 0.3], &t).unwrap();
        assert_eq!(a, predict_mesh(&net, &[0.1, 0.2, 0.3], &t).unwrap());
        assert_eq!(a.vertex_count(), t.vertex_count());
        assert_ne!(a.positions, predict_mesh(&net, &[-0.4, 0.2, 0.3], &t).unwrap().positions);
        assert!(predict_mesh(&net, &[0.0; 2], &t).is_err());
    }
}
