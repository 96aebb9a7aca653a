//! Training point sets, the joint segmentation/regression loss, latent
//! statistics and the auto-decoder training loop.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::anatomy::{myocardial_interior_point, AnatomicalLabel, InstanceMesh, Labeler, SurfaceTag, TemplateTopology, Uvc};
use crate::error::{Error, Result};
use crate::geom::{Aabb, Vec3};
use crate::kv::KvFile;
use crate::netcore::{
    adam_step, Checkpoint, GradTarget, LatentBlock, MlpShape, OptimizerState, Real, ResidualMlp, StatsBlock,
};
use crate::seeds::derive_seed;

/// Millimetres per network coordinate unit, for both seg inputs and reg outputs.
pub const COORD_SCALE: f64 = 50.0;
/// Smoothing term of the soft Dice.
pub const DICE_EPS: f64 = 1e-6;
pub const NUM_LABELS: usize = AnatomicalLabel::COUNT;

/// Label of a template vertex: wall surfaces are myocardium, base-cap
/// vertices belong to the cavity they close.
pub fn vertex_label(template: &TemplateTopology, i: usize) -> AnatomicalLabel {
    let u1 = template.uvc[i][0];
    match template.tags[i] {
        SurfaceTag::BaseRing if u1 >= 0.5 => AnatomicalLabel::Rv,
        SurfaceTag::BaseRing => AnatomicalLabel::Lv,
        _ => AnatomicalLabel::myocardium(u1),
    }
}

/// Cube around the mesh bounding box, grown by `margin` on every side.
pub fn sampling_cube(mesh: &InstanceMesh, margin: f64) -> Aabb {
    let b = Aabb::from_points(&mesh.positions);
    let c = b.center();
    let half = (0..3).map(|k| 0.5 * (b.max[k] - b.min[k])).fold(0.0, f64::max) + margin;
    Aabb { min: c.map(|x| x - half), max: c.map(|x| x + half) }
}

/// All template vertices plus `n - V` uniform points in the sampling cube.
pub fn sample_seg_points<R: Rng + ?Sized>(
    template: &TemplateTopology,
    mesh: &InstanceMesh,
    labeler: &Labeler,
    n: usize,
    margin: f64,
    rng: &mut R,
) -> Result<(Vec<Vec3>, Vec<AnatomicalLabel>)> {
    let v = mesh.vertex_count();
    if n <= v {
        return Err(Error::invalid(format!("seg budget {n} must exceed the {v} template vertices")));
    }
    let mut xyz = mesh.positions.clone();
    let mut labels: Vec<AnatomicalLabel> = (0..v).map(|i| vertex_label(template, i)).collect();
    let cube = sampling_cube(mesh, margin);
    for _ in v..n {
        let p = [0, 1, 2].map(|k| rng.gen_range(cube.min[k]..cube.max[k]));
        xyz.push(p);
        labels.push(labeler.label(p)?);
    }
    Ok((xyz, labels))
}

/// All vertex (UVC, position) pairs plus `n - V` transmural interior samples.
pub fn sample_reg_points<R: Rng + ?Sized>(
    template: &TemplateTopology,
    mesh: &InstanceMesh,
    n: usize,
    rng: &mut R,
) -> Result<(Vec<Uvc>, Vec<Vec3>)> {
    let v = mesh.vertex_count();
    if n < v {
        return Err(Error::invalid(format!("reg budget {n} is below the {v} template vertices")));
    }
    let mut uvc = template.uvc.clone();
    let mut xyz = mesh.positions.clone();
    let pairs = &template.transmural_pairs;
    for _ in v..n {
        let (e, p) = pairs[rng.gen_range(0..pairs.len())];
        let t = loop {
            let t: f64 = rng.gen();
            if t > 0.0 {
                break t;
            }
        };
        let (pos, u) = myocardial_interior_point((mesh.positions[e], template.uvc[e]), (mesh.positions[p], template.uvc[p]), t)?;
        uvc.push(u);
        xyz.push(pos);
    }
    Ok((uvc, xyz))
}

/// Per-shape training points.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub shape_id: u64,
    pub seg_xyz: Vec<Vec3>,
    pub seg_labels: Vec<AnatomicalLabel>,
    pub reg_uvc: Vec<Uvc>,
    pub reg_xyz: Vec<Vec3>,
}

impl TrainingSample {
    /// Samples both point sets with a stream seeded by `(seed, shape_id)`.
    pub fn build(
        template: &TemplateTopology,
        mesh: &InstanceMesh,
        shape_id: u64,
        seg_points: usize,
        reg_points: usize,
        margin: f64,
        seed: u64,
    ) -> Result<Self> {
        let labeler = Labeler::new(template, mesh)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, shape_id, 0x5e6));
        let (seg_xyz, seg_labels) = sample_seg_points(template, mesh, &labeler, seg_points, margin, &mut rng)?;
        let (reg_uvc, reg_xyz) = sample_reg_points(template, mesh, reg_points, &mut rng)?;
        Ok(Self { shape_id, seg_xyz, seg_labels, reg_uvc, reg_xyz })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_seg: f64,
    pub lambda_reg: f64,
    pub lambda_prior_max: f64,
    pub warmup_epochs: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_seg: 1.0, lambda_reg: 1000.0, lambda_prior_max: 1e-4, warmup_epochs: 100 }
    }
}

/// A scalar loss and its gradient with respect to the first argument.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// The two halves of the segmentation loss, kept apart so inference can
/// weight them separately.
#[derive(Debug, Clone, PartialEq)]
pub struct SegTerms {
    pub bce: f64,
    pub dice: f64,
    pub grad_bce: Vec<f64>,
    pub grad_dice: Vec<f64>,
}

impl SegTerms {
    pub fn combine(&self, w_bce: f64, w_dice: f64) -> LossValue {
        LossValue {
            value: w_bce * self.bce + w_dice * self.dice,
            grad: self.grad_bce.iter().zip(&self.grad_dice).map(|(b, d)| w_bce * b + w_dice * d).collect(),
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn check_one_hot(targets: &[f64]) -> Result<()> {
    for (r, row) in targets.chunks(NUM_LABELS).enumerate() {
        let ones = row.iter().filter(|&&y| y == 1.0).count();
        if ones != 1 || row.iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(Error::invalid(format!("target row {r} is not one-hot: {row:?}")));
        }
    }
    Ok(())
}

/// Per-channel sigmoid BCE (mean over points and channels) and soft Dice loss
/// (one minus the mean Dice over the channels present in `targets`).
pub fn seg_terms(logits: &[f64], targets: &[f64]) -> Result<SegTerms> {
    if logits.len() != targets.len() || logits.len() % NUM_LABELS != 0 || logits.is_empty() {
        return Err(Error::shape(format!("{} logits vs {} targets", logits.len(), targets.len())));
    }
    check_one_hot(targets)?;
    let count = logits.len() as f64;
    let probs: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();

    let mut bce = 0.0;
    let mut grad_bce = vec![0.0; logits.len()];
    for i in 0..logits.len() {
        bce += softplus(logits[i]) - targets[i] * logits[i];
        grad_bce[i] = (probs[i] - targets[i]) / count;
    }
    bce /= count;

    let mut inter = [0.0; NUM_LABELS];
    let mut sum_p = [0.0; NUM_LABELS];
    let mut sum_y = [0.0; NUM_LABELS];
    for (i, (&p, &y)) in probs.iter().zip(targets).enumerate() {
        let c = i % NUM_LABELS;
        inter[c] += p * y;
        sum_p[c] += p;
        sum_y[c] += y;
    }
    let present: Vec<usize> = (0..NUM_LABELS).filter(|&c| sum_y[c] > 0.0).collect();
    let k = present.len() as f64;
    let mut dice_mean = 0.0;
    let mut dd_dp = [0.0; NUM_LABELS * 2];
    for &c in &present {
        let s = sum_p[c] + sum_y[c] + DICE_EPS;
        let num = 2.0 * inter[c] + DICE_EPS;
        dice_mean += num / s;
        // d(num/s)/dp_i = (2 y_i s - num) / s^2, split by y_i in {0, 1}.
        dd_dp[2 * c] = -num / (s * s);
        dd_dp[2 * c + 1] = (2.0 * s - num) / (s * s);
    }
    dice_mean /= k;
    let mut grad_dice = vec![0.0; logits.len()];
    for (i, g) in grad_dice.iter_mut().enumerate() {
        let c = i % NUM_LABELS;
        if sum_y[c] > 0.0 {
            let d = dd_dp[2 * c + targets[i] as usize];
            *g = -d / k * probs[i] * (1.0 - probs[i]);
        }
    }
    Ok(SegTerms { bce, dice: 1.0 - dice_mean, grad_bce, grad_dice })
}

/// BCE plus soft Dice loss over `rows x 5` logits and one-hot targets.
pub fn seg_loss(logits: &[f64], targets: &[f64]) -> Result<LossValue> {
    Ok(seg_terms(logits, targets)?.combine(1.0, 1.0))
}

pub fn one_hot_rows(labels: &[AnatomicalLabel]) -> Vec<f64> {
    labels.iter().flat_map(|l| l.one_hot()).collect()
}

/// Mean squared error over points and coordinates.
pub fn reg_loss(pred: &[f64], target: &[f64]) -> Result<LossValue> {
    if pred.len() != target.len() || pred.len() % 3 != 0 || pred.is_empty() {
        return Err(Error::shape(format!("{} predicted vs {} target coordinates", pred.len(), target.len())));
    }
    let n = pred.len() as f64;
    let value = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n;
    let grad = pred.iter().zip(target).map(|(p, t)| 2.0 * (p - t) / n).collect();
    Ok(LossValue { value, grad })
}

/// `(1/B) sum ||h_i||^2` over a row-major batch of codes.
pub fn prior_loss(codes: &[f64], dim: usize) -> Result<LossValue> {
    if dim == 0 || codes.is_empty() || codes.len() % dim != 0 {
        return Err(Error::shape(format!("{} code values for dimension {dim}", codes.len())));
    }
    let b = (codes.len() / dim) as f64;
    Ok(LossValue { value: codes.iter().map(|h| h * h).sum::<f64>() / b, grad: codes.iter().map(|h| 2.0 * h / b).collect() })
}

/// Linear warm-up of the latent prior weight.
pub fn prior_schedule(epoch: usize, weights: &LossWeights) -> f64 {
    if weights.warmup_epochs == 0 {
        return weights.lambda_prior_max;
    }
    (epoch as f64 / weights.warmup_epochs as f64).min(1.0) * weights.lambda_prior_max
}

/// `L_seg / lambda_seg + L_reg / lambda_reg + lambda_prior(epoch) L_prior`.
pub fn total_loss(seg: f64, reg: f64, prior: f64, weights: &LossWeights, epoch: usize) -> f64 {
    seg / weights.lambda_seg + reg / weights.lambda_reg + prior_schedule(epoch, weights) * prior
}

/// Points of one optimization step for one shape.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct JointBatch {
    pub seg_xyz: Vec<Vec3>,
    /// Row-major one-hot targets, `seg_xyz.len() x 5`.
    pub seg_targets: Vec<f64>,
    pub reg_uvc: Vec<Uvc>,
    pub reg_xyz: Vec<Vec3>,
}

impl JointBatch {
    pub fn from_sample<R: Rng + ?Sized>(sample: &TrainingSample, seg: usize, reg: usize, rng: &mut R) -> Self {
        let seg_idx = pick(sample.seg_xyz.len(), seg, rng);
        let reg_idx = pick(sample.reg_xyz.len(), reg, rng);
        Self {
            seg_xyz: seg_idx.iter().map(|&i| sample.seg_xyz[i]).collect(),
            seg_targets: seg_idx.iter().flat_map(|&i| sample.seg_labels[i].one_hot()).collect(),
            reg_uvc: reg_idx.iter().map(|&i| sample.reg_uvc[i]).collect(),
            reg_xyz: reg_idx.iter().map(|&i| sample.reg_xyz[i]).collect(),
        }
    }
}

fn pick<R: Rng + ?Sized>(len: usize, amount: usize, rng: &mut R) -> Vec<usize> {
    if amount >= len {
        (0..len).collect()
    } else {
        let mut v = index::sample(rng, len, amount).into_vec();
        v.sort_unstable();
        v
    }
}

/// Seg-network input rows `(x, y, z) / COORD_SCALE ⊕ h`.
pub fn seg_inputs<T: Real>(xyz: &[Vec3], code: &[f64]) -> Vec<T> {
    let mut out = Vec::with_capacity(xyz.len() * (3 + code.len()));
    for p in xyz {
        out.extend(p.iter().map(|&x| T::lit(x / COORD_SCALE)));
        out.extend(code.iter().map(|&h| T::lit(h)));
    }
    out
}

/// Reg-network input rows `(u1, u2, u3, u4) ⊕ h`.
pub fn reg_inputs<T: Real>(uvc: &[Uvc], code: &[f64]) -> Vec<T> {
    let mut out = Vec::with_capacity(uvc.len() * (4 + code.len()));
    for u in uvc {
        out.extend(u.iter().map(|&x| T::lit(x)));
        out.extend(code.iter().map(|&h| T::lit(h)));
    }
    out
}

/// Adds the latent columns of `input_grads` (rows of `lead + dim`) into `acc`.
fn accumulate_latent<T: Real>(input_grads: &[T], lead: usize, acc: &mut [f64]) {
    let width = lead + acc.len();
    for row in input_grads.chunks_exact(width) {
        for (a, g) in acc.iter_mut().zip(&row[lead..]) {
            *a += g.as_f64();
        }
    }
}

/// Loss components and gradients of one joint step.
#[derive(Debug, Clone)]
pub struct JointEval<T> {
    pub seg: f64,
    pub reg: f64,
    pub prior: f64,
    pub total: f64,
    /// Empty when parameters were not requested.
    pub seg_grads: Vec<T>,
    pub reg_grads: Vec<T>,
    pub latent_grad: Vec<f64>,
}

/// Evaluates the joint loss for one shape. Both networks see the same `code`.
#[allow(clippy::too_many_arguments)]
pub fn joint_loss<T: Real>(
    seg_net: &ResidualMlp<T>,
    reg_net: &ResidualMlp<T>,
    code: &[f64],
    batch: &JointBatch,
    weights: &LossWeights,
    epoch: usize,
    target: GradTarget,
) -> Result<JointEval<T>> {
    let dim = code.len();
    if seg_net.shape().input_dim != 3 + dim || reg_net.shape().input_dim != 4 + dim {
        return Err(Error::shape(format!("networks do not take 3/4 + {dim} inputs")));
    }
    let seg_trace = seg_net.forward_traced(&seg_inputs::<T>(&batch.seg_xyz, code))?;
    let logits: Vec<f64> = seg_trace.outputs().iter().map(|v| v.as_f64()).collect();
    let seg = seg_loss(&logits, &batch.seg_targets)?;

    let reg_trace = reg_net.forward_traced(&reg_inputs::<T>(&batch.reg_uvc, code))?;
    let pred_mm: Vec<f64> = reg_trace.outputs().iter().map(|v| v.as_f64() * COORD_SCALE).collect();
    let target_mm: Vec<f64> = batch.reg_xyz.iter().flatten().copied().collect();
    let reg = reg_loss(&pred_mm, &target_mm)?;

    let prior = prior_loss(code, dim)?;
    let lambda_prior = prior_schedule(epoch, weights);
    let total = total_loss(seg.value, reg.value, prior.value, weights, epoch);
    if !total.is_finite() {
        return Err(Error::Diverged(format!(
            "non-finite loss (seg {}, reg {}, prior {})",
            seg.value, reg.value, prior.value
        )));
    }

    let seg_up: Vec<T> = seg.grad.iter().map(|g| T::grad_lit(g / weights.lambda_seg)).collect();
    let reg_up: Vec<T> = reg.grad.iter().map(|g| T::grad_lit(g * COORD_SCALE / weights.lambda_reg)).collect();
    let sg = seg_net.backward(&seg_trace, &seg_up, target)?;
    let rg = reg_net.backward(&reg_trace, &reg_up, target)?;
    let mut latent_grad: Vec<f64> = prior.grad.iter().map(|g| lambda_prior * g).collect();
    accumulate_latent(&sg.input_grads, 3, &mut latent_grad);
    accumulate_latent(&rg.input_grads, 4, &mut latent_grad);

    Ok(JointEval {
        seg: seg.value,
        reg: reg.value,
        prior: prior.value,
        total,
        seg_grads: sg.param_grads,
        reg_grads: rg.param_grads,
        latent_grad,
    })
}

/// Mean, covariance and regularized inverse of a set of latent codes.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentStats {
    pub mean: Vec<f64>,
    /// Row-major `dim x dim`.
    pub covariance: Vec<f64>,
    /// `(covariance + eps I)^-1`.
    pub inverse: Vec<f64>,
}

/// Floor on the ridge term when every code is identical.
const MIN_RIDGE: f64 = 1e-12;

impl LatentStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Ridge added to the covariance before inversion.
    pub fn ridge(covariance: &[f64], dim: usize) -> f64 {
        let trace: f64 = (0..dim).map(|i| covariance[i * dim + i]).sum();
        (1e-6 * trace / dim as f64).max(MIN_RIDGE)
    }

    pub fn from_block(block: &StatsBlock) -> Result<Self> {
        let d = block.mean.len();
        if block.covariance.len() != d * d || block.inverse.len() != d * d {
            return Err(Error::shape("latent statistics blocks disagree on dimension"));
        }
        Ok(Self { mean: block.mean.clone(), covariance: block.covariance.clone(), inverse: block.inverse.clone() })
    }

    pub fn to_block(&self) -> StatsBlock {
        StatsBlock { mean: self.mean.clone(), covariance: self.covariance.clone(), inverse: self.inverse.clone() }
    }
}

/// Sample statistics of row-major `codes` (`n x dim`, `n >= 2`).
pub fn latent_stats(codes: &[f64], dim: usize) -> Result<LatentStats> {
    if dim == 0 || codes.len() % dim != 0 {
        return Err(Error::shape(format!("{} code values for dimension {dim}", codes.len())));
    }
    let n = codes.len() / dim;
    if n < 2 {
        return Err(Error::invalid(format!("latent statistics need at least 2 codes, got {n}")));
    }
    if let Some(index) = codes.iter().position(|c| !c.is_finite()) {
        return Err(Error::NonFinite { context: "latent codes", index });
    }
    let m = nalgebra::DMatrix::from_row_slice(n, dim, codes);
    let mean = m.row_mean();
    let centered = nalgebra::DMatrix::from_fn(n, dim, |r, c| m[(r, c)] - mean[c]);
    let mut cov = centered.transpose() * &centered / (n as f64 - 1.0);
    cov = (&cov + cov.transpose()) * 0.5;
    let covariance: Vec<f64> = cov.transpose().iter().copied().collect();
    let eps = LatentStats::ridge(&covariance, dim);
    let reg = &cov + nalgebra::DMatrix::identity(dim, dim) * eps;
    let inv = reg
        .cholesky()
        .ok_or_else(|| Error::Degenerate("regularized latent covariance is not positive definite".into()))?
        .inverse();
    Ok(LatentStats { mean: mean.iter().copied().collect(), covariance, inverse: inv.transpose().iter().copied().collect() })
}

/// Training settings, read from and written to `key = value` files.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub seed: u64,
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub num_blocks: usize,
    pub lr_net: f64,
    pub lr_latent: f64,
    pub latent_init_std: f64,
    pub seg_points: usize,
    pub reg_points: usize,
    pub sample_margin: f64,
    pub seg_batch: usize,
    pub reg_batch: usize,
    pub batches_per_shape: usize,
    pub val_fraction: f64,
    pub val_seg_batch: usize,
    pub val_reg_batch: usize,
    pub weights: LossWeights,
    pub freeze_latents: bool,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 600,
            seed: 1,
            latent_dim: 64,
            hidden_dim: 128,
            num_blocks: 8,
            lr_net: 1e-4,
            lr_latent: 1e-3,
            latent_init_std: 0.01,
            seg_points: 8000,
            reg_points: 3000,
            sample_margin: 10.0,
            seg_batch: 1024,
            reg_batch: 512,
            batches_per_shape: 1,
            val_fraction: 0.2,
            val_seg_batch: 512,
            val_reg_batch: 256,
            weights: LossWeights::default(),
            freeze_latents: false,
            checkpoint_every: 25,
        }
    }
}

const TRAIN_KEYS: &[&str] = &[
    "epochs",
    "seed",
    "latent_dim",
    "hidden_dim",
    "num_blocks",
    "lr_net",
    "lr_latent",
    "latent_init_std",
    "seg_points",
    "reg_points",
    "sample_margin",
    "seg_batch",
    "reg_batch",
    "batches_per_shape",
    "val_fraction",
    "val_seg_batch",
    "val_reg_batch",
    "lambda_seg",
    "lambda_reg",
    "lambda_prior_max",
    "warmup_epochs",
    "freeze_latents",
    "checkpoint_every",
];

impl TrainConfig {
    pub const KEYS: &'static [&'static str] = TRAIN_KEYS;

    /// Overrides defaults with the training keys present in `kv`; other keys
    /// are ignored so the same file can carry settings for other stages.
    pub fn apply(&mut self, kv: &KvFile) -> Result<()> {
        kv.read("epochs", &mut self.epochs)?;
        kv.read("seed", &mut self.seed)?;
        kv.read("latent_dim", &mut self.latent_dim)?;
        kv.read("hidden_dim", &mut self.hidden_dim)?;
        kv.read("num_blocks", &mut self.num_blocks)?;
        kv.read("lr_net", &mut self.lr_net)?;
        kv.read("lr_latent", &mut self.lr_latent)?;
        kv.read("latent_init_std", &mut self.latent_init_std)?;
        kv.read("seg_points", &mut self.seg_points)?;
        kv.read("reg_points", &mut self.reg_points)?;
        kv.read("sample_margin", &mut self.sample_margin)?;
        kv.read("seg_batch", &mut self.seg_batch)?;
        kv.read("reg_batch", &mut self.reg_batch)?;
        kv.read("batches_per_shape", &mut self.batches_per_shape)?;
        kv.read("val_fraction", &mut self.val_fraction)?;
        kv.read("val_seg_batch", &mut self.val_seg_batch)?;
        kv.read("val_reg_batch", &mut self.val_reg_batch)?;
        kv.read("lambda_seg", &mut self.weights.lambda_seg)?;
        kv.read("lambda_reg", &mut self.weights.lambda_reg)?;
        kv.read("lambda_prior_max", &mut self.weights.lambda_prior_max)?;
        kv.read("warmup_epochs", &mut self.weights.warmup_epochs)?;
        kv.read("freeze_latents", &mut self.freeze_latents)?;
        kv.read("checkpoint_every", &mut self.checkpoint_every)?;
        self.validate()
    }

    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        let mut c = Self::default();
        c.apply(kv)?;
        Ok(c)
    }

    pub fn to_kv(&self) -> KvFile {
        let mut kv = KvFile::default();
        kv.set("epochs", self.epochs);
        kv.set("seed", self.seed);
        kv.set("latent_dim", self.latent_dim);
        kv.set("hidden_dim", self.hidden_dim);
        kv.set("num_blocks", self.num_blocks);
        kv.set("lr_net", format!("{:?}", self.lr_net));
        kv.set("lr_latent", format!("{:?}", self.lr_latent));
        kv.set("latent_init_std", format!("{:?}", self.latent_init_std));
        kv.set("seg_points", self.seg_points);
        kv.set("reg_points", self.reg_points);
        kv.set("sample_margin", format!("{:?}", self.sample_margin));
        kv.set("seg_batch", self.seg_batch);
        kv.set("reg_batch", self.reg_batch);
        kv.set("batches_per_shape", self.batches_per_shape);
        kv.set("val_fraction", format!("{:?}", self.val_fraction));
        kv.set("val_seg_batch", self.val_seg_batch);
        kv.set("val_reg_batch", self.val_reg_batch);
        kv.set("lambda_seg", format!("{:?}", self.weights.lambda_seg));
        kv.set("lambda_reg", format!("{:?}", self.weights.lambda_reg));
        kv.set("lambda_prior_max", format!("{:?}", self.weights.lambda_prior_max));
        kv.set("warmup_epochs", self.weights.warmup_epochs);
        kv.set("freeze_latents", self.freeze_latents);
        kv.set("checkpoint_every", self.checkpoint_every);
        kv
    }

    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        if self.latent_dim == 0 || self.hidden_dim == 0 || self.seg_batch == 0 || self.reg_batch == 0 {
            return Err(Error::invalid("latent_dim, hidden_dim and batch sizes must be positive"));
        }
        if !(w.lambda_seg > 0.0 && w.lambda_reg > 0.0 && w.lambda_prior_max >= 0.0) {
            return Err(Error::invalid("loss weights must be positive"));
        }
        if !(self.lr_net > 0.0 && self.lr_latent > 0.0 && self.latent_init_std >= 0.0) {
            return Err(Error::invalid("learning rates must be positive"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::invalid(format!("val_fraction {} outside [0, 1)", self.val_fraction)));
        }
        Ok(())
    }

    pub fn seg_shape(&self) -> MlpShape {
        MlpShape::new(3 + self.latent_dim, NUM_LABELS, self.hidden_dim, self.num_blocks)
    }

    pub fn reg_shape(&self) -> MlpShape {
        MlpShape::new(4 + self.latent_dim, 3, self.hidden_dim, self.num_blocks)
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub seg_loss: f64,
    pub reg_loss: f64,
    pub prior_loss: f64,
    pub total: f64,
    /// NaN when there is no validation split.
    pub val_total: f64,
}

pub const LOG_HEADER: &str = "epoch,seg_loss,reg_loss,prior_loss,total,val_total";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:?},{:?},{:?},{:?},{:?}",
            self.epoch, self.seg_loss, self.reg_loss, self.prior_loss, self.total, self.val_total
        )
    }
}

pub fn log_csv(rows: &[EpochLog]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Auto-decoder training state. Networks train in `f32`; codes and optimizer
/// moments stay in `f64`.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub seg_net: ResidualMlp<f32>,
    pub reg_net: ResidualMlp<f32>,
    /// Shape id of every code row.
    pub shape_ids: Vec<u64>,
    /// Row-major `shape_ids.len() x latent_dim`.
    pub codes: Vec<f64>,
    pub train_rows: Vec<usize>,
    pub val_rows: Vec<usize>,
    opt_seg: OptimizerState,
    opt_reg: OptimizerState,
    opt_codes: Vec<OptimizerState>,
    /// Number of completed epochs.
    pub epoch: usize,
    pub log: Vec<EpochLog>,
}

impl Trainer {
    /// Fresh networks and codes for the given shapes, with a seeded 80/20
    /// train/validation split.
    pub fn new(config: TrainConfig, shape_ids: &[u64]) -> Result<Self> {
        config.validate()?;
        if shape_ids.is_empty() {
            return Err(Error::invalid("cannot train on an empty cohort"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0x1417, 0));
        let seg_net = ResidualMlp::<f32>::init(config.seg_shape(), &mut rng)?;
        let reg_net = ResidualMlp::<f32>::init(config.reg_shape(), &mut rng)?;
        let d = config.latent_dim;
        let normal = Normal::new(0.0, config.latent_init_std).map_err(|e| Error::invalid(e.to_string()))?;
        let codes: Vec<f64> = (0..shape_ids.len() * d).map(|_| normal.sample(&mut rng)).collect();

        let mut order: Vec<usize> = (0..shape_ids.len()).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let n_val = if shape_ids.len() >= 2 { (shape_ids.len() as f64 * config.val_fraction).round() as usize } else { 0 };
        let mut val_rows = order.split_off(order.len() - n_val);
        let mut train_rows = order;
        train_rows.sort_unstable();
        val_rows.sort_unstable();

        Ok(Self {
            opt_seg: OptimizerState::new(seg_net.params().len(), config.lr_net),
            opt_reg: OptimizerState::new(reg_net.params().len(), config.lr_net),
            opt_codes: (0..shape_ids.len()).map(|_| OptimizerState::new(d, config.lr_latent)).collect(),
            config,
            seg_net,
            reg_net,
            shape_ids: shape_ids.to_vec(),
            codes,
            train_rows,
            val_rows,
            epoch: 0,
            log: Vec::new(),
        })
    }

    pub fn code(&self, row: usize) -> &[f64] {
        let d = self.config.latent_dim;
        &self.codes[row * d..(row + 1) * d]
    }

    fn sample_for<'a>(&self, samples: &'a [TrainingSample], row: usize) -> Result<&'a TrainingSample> {
        let id = self.shape_ids[row];
        samples
            .get(row)
            .filter(|s| s.shape_id == id)
            .or_else(|| samples.iter().find(|s| s.shape_id == id))
            .ok_or_else(|| Error::invalid(format!("no training sample for shape {id}")))
    }

    /// Runs one epoch: every training shape gets `batches_per_shape` joint
    /// steps in a shuffled order, then every validation code one latent-only
    /// step. Randomness depends only on the seed and the epoch number.
    pub fn run_epoch(&mut self, samples: &[TrainingSample]) -> Result<EpochLog> {
        let cfg = self.config.clone();
        let epoch = self.epoch;
        let d = cfg.latent_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0xe90c, epoch as u64));
        let mut order = self.train_rows.clone();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);

        let mut sums = [0.0; 4];
        let mut steps = 0usize;
        for &row in &order {
            let sample = self.sample_for(samples, row)?;
            for _ in 0..cfg.batches_per_shape {
                let batch = JointBatch::from_sample(sample, cfg.seg_batch, cfg.reg_batch, &mut rng);
                let code = self.code(row).to_vec();
                let ev = joint_loss(&self.seg_net, &self.reg_net, &code, &batch, &cfg.weights, epoch, GradTarget::ParamsAndInputs)
                    .map_err(|e| diverged(e, epoch, self.shape_ids[row]))?;
                adam_step(self.seg_net.params_mut(), &ev.seg_grads, &mut self.opt_seg)?;
                adam_step(self.reg_net.params_mut(), &ev.reg_grads, &mut self.opt_reg)?;
                if !cfg.freeze_latents {
                    adam_step(&mut self.codes[row * d..(row + 1) * d], &ev.latent_grad, &mut self.opt_codes[row])?;
                }
                for (s, v) in sums.iter_mut().zip([ev.seg, ev.reg, ev.prior, ev.total]) {
                    *s += v;
                }
                steps += 1;
            }
        }

        let mut val_sum = 0.0;
        for &row in &self.val_rows.clone() {
            let sample = self.sample_for(samples, row)?;
            let batch = JointBatch::from_sample(sample, cfg.val_seg_batch, cfg.val_reg_batch, &mut rng);
            let code = self.code(row).to_vec();
            let ev = joint_loss(&self.seg_net, &self.reg_net, &code, &batch, &cfg.weights, epoch, GradTarget::InputsOnly)
                .map_err(|e| diverged(e, epoch, self.shape_ids[row]))?;
            adam_step(&mut self.codes[row * d..(row + 1) * d], &ev.latent_grad, &mut self.opt_codes[row])?;
            val_sum += ev.total;
        }

        let n = steps.max(1) as f64;
        let row = EpochLog {
            epoch,
            seg_loss: sums[0] / n,
            reg_loss: sums[1] / n,
            prior_loss: sums[2] / n,
            total: sums[3] / n,
            val_total: if self.val_rows.is_empty() { f64::NAN } else { val_sum / self.val_rows.len() as f64 },
        };
        self.epoch += 1;
        self.log.push(row);
        Ok(row)
    }

    /// Codes of the training split, row-major.
    pub fn training_codes(&self) -> Vec<f64> {
        self.train_rows.iter().flat_map(|&r| self.code(r).iter().copied()).collect()
    }

    pub fn latent_stats(&self) -> Result<LatentStats> {
        latent_stats(&self.training_codes(), self.config.latent_dim)
    }

    /// Snapshot with everything needed to resume.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let stats = if self.train_rows.len() >= 2 { Some(self.latent_stats()?.to_block()) } else { None };
        let mut optimizers = vec![self.opt_seg.clone(), self.opt_reg.clone()];
        optimizers.extend(self.opt_codes.iter().cloned());
        let metadata = serde_json::json!({
            "epoch": self.epoch,
            "config": self.config.to_kv().to_text(),
            "train_rows": self.train_rows,
            "val_rows": self.val_rows,
            "log": self.log,
        });
        Ok(Checkpoint {
            seg_net: self.seg_net.cast(),
            reg_net: self.reg_net.cast(),
            latent_dim: self.config.latent_dim,
            latents: LatentBlock { dim: self.config.latent_dim, shape_indices: self.shape_ids.clone(), codes: self.codes.clone() },
            stats,
            optimizers,
            metadata,
        })
    }

    /// Restores a trainer saved by [`Self::to_checkpoint`]. `epochs` in the
    /// stored config may be overridden to extend a run.
    pub fn from_checkpoint(ckpt: &Checkpoint, epochs: Option<usize>) -> Result<Self> {
        let meta = &ckpt.metadata;
        let bad = |d: &str| Error::format("training checkpoint", d.to_string());
        let kv = KvFile::parse(meta["config"].as_str().ok_or_else(|| bad("missing config"))?)?;
        let mut config = TrainConfig::from_kv(&kv)?;
        if let Some(e) = epochs {
            config.epochs = e;
        }
        let rows = |key: &str| -> Result<Vec<usize>> {
            serde_json::from_value(meta[key].clone()).map_err(|e| bad(&format!("{key}: {e}")))
        };
        let log: Vec<EpochLog> = serde_json::from_value(meta["log"].clone()).map_err(|e| bad(&format!("log: {e}")))?;
        let epoch = meta["epoch"].as_u64().ok_or_else(|| bad("missing epoch"))? as usize;
        let n = ckpt.latents.shape_indices.len();
        if ckpt.optimizers.len() != n + 2 || ckpt.latent_dim != config.latent_dim {
            return Err(bad("optimizer or latent layout does not match the config"));
        }
        Ok(Self {
            seg_net: ckpt.seg_net.cast(),
            reg_net: ckpt.reg_net.cast(),
            shape_ids: ckpt.latents.shape_indices.clone(),
            codes: ckpt.latents.codes.clone(),
            train_rows: rows("train_rows")?,
            val_rows: rows("val_rows")?,
            opt_seg: ckpt.optimizers[0].clone(),
            opt_reg: ckpt.optimizers[1].clone(),
            opt_codes: ckpt.optimizers[2..].to_vec(),
            config,
            epoch,
            log,
        })
    }
}

fn diverged(e: Error, epoch: usize, shape: u64) -> Error {
    match e {
        Error::Diverged(msg) => Error::Diverged(format!("epoch {epoch}, shape {shape}: {msg}")),
        other => other,
    }
}

/// Trained networks, codes and statistics.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub seg_net: ResidualMlp<f32>,
    pub reg_net: ResidualMlp<f32>,
    pub latents: LatentBlock,
    pub stats: LatentStats,
    pub log: Vec<EpochLog>,
}

/// Trains from scratch for `config.epochs` epochs.
pub fn train(samples: &[TrainingSample], config: &TrainConfig) -> Result<TrainOutcome> {
    let ids: Vec<u64> = samples.iter().map(|s| s.shape_id).collect();
    let mut t = Trainer::new(config.clone(), &ids)?;
    while t.epoch < config.epochs {
        t.run_epoch(samples)?;
    }
    Ok(TrainOutcome {
        stats: t.latent_stats()?,
        latents: LatentBlock { dim: config.latent_dim, shape_indices: t.shape_ids.clone(), codes: t.codes.clone() },
        seg_net: t.seg_net,
        reg_net: t.reg_net,
        log: t.log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anatomy::{generate_shape, ShapeParams, TemplateConfig};
    use crate::netcore::gradcheck::{max_relative_error, numeric_gradient};

    fn template_and_mesh() -> (TemplateTopology, InstanceMesh) {
        let t = TemplateTopology::new(TemplateConfig::default()).unwrap();
        let m = generate_shape(&t, &ShapeParams::default()).unwrap();
        (t, m)
    }

    #[test]
    fn seg_budget_rules() {
        let (t, m) = template_and_mesh();
        let l = Labeler::new(&t, &m).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = t.vertex_count();
        assert!(sample_seg_points(&t, &m, &l, v, 5.0, &mut rng).is_err());
        let (xyz, labels) = sample_seg_points(&t, &m, &l, v + 1000, 5.0, &mut rng).unwrap();
        assert_eq!((xyz.len(), labels.len()), (v + 1000, v + 1000));
        for (p, lab) in xyz[v..].iter().zip(&labels[v..]) {
            assert_eq!(l.label(*p).unwrap(), *lab);
        }
    }

    #[test]
    fn wide_margin_gives_plenty_of_background() {
        let (t, m) = template_and_mesh();
        let l = Labeler::new(&t, &m).unwrap();
        let margin = 0.5 * Aabb::from_points(&m.positions).diagonal();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = t.vertex_count();
        let (_, labels) = sample_seg_points(&t, &m, &l, v + 4000, margin, &mut rng).unwrap();
        let bg = labels[v..].iter().filter(|&&l| l == AnatomicalLabel::Bg).count();
        assert!(bg as f64 >= 0.3 * 4000.0, "{bg}");
    }

    #[test]
    fn reg_budget_rules_and_uniform_depth() {
        let (t, m) = template_and_mesh();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = t.vertex_count();
        assert!(sample_reg_points(&t, &m, v - 1, &mut rng).is_err());
        let (uvc, xyz) = sample_reg_points(&t, &m, v, &mut rng).unwrap();
        assert_eq!(uvc, t.uvc);
        assert_eq!(xyz, m.positions);

        let n = 10_000;
        let (uvc, _) = sample_reg_points(&t, &m, v + n, &mut rng).unwrap();
        let mut depth: Vec<f64> = uvc[v..].iter().map(|u| u[1]).collect();
        for u in &uvc[v..] {
            assert!(u[0] == 0.0 || u[0] == 1.0);
            assert!((0.0..=1.0).contains(&u[1]) && (0.0..=1.0).contains(&u[2]) && (0.0..=1.0).contains(&u[3]));
        }
        depth.sort_by(f64::total_cmp);
        let ks = depth
            .iter()
            .enumerate()
            .map(|(i, &x)| (x - i as f64 / n as f64).abs().max((x - (i + 1) as f64 / n as f64).abs()))
            .fold(0.0, f64::max);
        assert!(ks < 0.05, "KS statistic {ks}");
    }

    fn one_hot_batch(rows: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..rows).flat_map(|_| AnatomicalLabel::ALL[rng.gen_range(0..5)].one_hot()).collect()
    }

    #[test]
    fn seg_loss_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let y = one_hot_batch(10, &mut rng);
        let saturated: Vec<f64> = y.iter().map(|&t| if t == 1.0 { 20.0 } else { -20.0 }).collect();
        assert!(seg_loss(&saturated, &y).unwrap().value < 1e-6);
        let terms = seg_terms(&vec![0.0; y.len()], &y).unwrap();
        assert!((terms.bce - std::f64::consts::LN_2).abs() < 1e-15);
        let mut bad = y.clone();
        bad[0] = 0.5;
        assert!(seg_loss(&saturated, &bad).is_err());
        assert!(seg_loss(&saturated[..5], &y).is_err());
    }

    #[test]
    fn seg_loss_gradient_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let y = one_hot_batch(10, &mut rng);
        let z: Vec<f64> = (0..50).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let g = seg_loss(&z, &y).unwrap().grad;
        let n = numeric_gradient(&z, 1e-5, |x| Ok(seg_loss(x, &y)?.value)).unwrap();
        assert!(max_relative_error(&g, &n) < 1e-4);
    }

    #[test]
    fn reg_and_prior_examples() {
        let t = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        assert_eq!(reg_loss(&t, &t).unwrap().value, 0.0);
        let off = [2.0, 2.0, 3.0, 5.0, 5.0, 6.0];
        assert!((reg_loss(&off, &t).unwrap().value - 1.0 / 3.0).abs() < 1e-15);
        assert!(reg_loss(&t[..3], &t).is_err());

        assert_eq!(prior_loss(&[0.0; 6], 3).unwrap().value, 0.0);
        assert_eq!(prior_loss(&[0.0, 0.0, 1.0, 0.0], 2).unwrap().value, 0.5);
        let codes = [0.3, -1.2, 0.7, 2.0];
        let base = prior_loss(&codes, 2).unwrap().value;
        let scaled: Vec<f64> = codes.iter().map(|c| c * 3.0).collect();
        assert!((prior_loss(&scaled, 2).unwrap().value - 9.0 * base).abs() < 1e-12);
    }

    #[test]
    fn schedule_and_total() {
        let w = LossWeights::default();
        assert_eq!(prior_schedule(0, &w), 0.0);
        assert_eq!(prior_schedule(50, &w), 0.5e-4);
        assert_eq!(prior_schedule(100, &w), 1e-4);
        assert_eq!(prior_schedule(250, &w), 1e-4);
        let mut last = 0.0;
        for e in 0..300 {
            let v = prior_schedule(e, &w);
            assert!(v >= last && v <= w.lambda_prior_max);
            last = v;
        }
        assert_eq!(total_loss(1.0, 1000.0, 0.0, &w, 0), 2.0);
        assert_eq!(total_loss(0.0, 0.0, 0.0, &w, 10), 0.0);
        assert_eq!(total_loss(0.0, 0.0, 123.0, &w, 0), 0.0);
        assert_eq!(total_loss(0.25, 500.0, 2.0, &w, 50), 0.25 + 0.5 + 0.5e-4 * 2.0);
    }

    #[test]
    fn latent_stats_cases() {
        let v = [0.5, -1.0, 2.0];
        let s = latent_stats(&[v[0], v[1], v[2], -v[0], -v[1], -v[2]], 3).unwrap();
        assert!(s.mean.iter().all(|&m| m == 0.0));

        let same = latent_stats(&[1.0, 2.0, 1.0, 2.0, 1.0, 2.0], 2).unwrap();
        assert!(same.covariance.iter().all(|&c| c == 0.0));
        let eps = LatentStats::ridge(&same.covariance, 2);
        assert_eq!(same.inverse, vec![1.0 / eps, 0.0, 0.0, 1.0 / eps]);

        assert!(latent_stats(&[1.0, 2.0], 2).is_err());
    }

    #[test]
    fn regularized_inverse_of_random_codes() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (n, d) = (400, 8);
        let codes: Vec<f64> = (0..n * d).map(|i| rng.gen_range(-1.0..1.0) * (1.0 + (i % d) as f64 * 0.1)).collect();
        let s = latent_stats(&codes, d).unwrap();
        let cov = nalgebra::DMatrix::from_row_slice(d, d, &s.covariance);
        let inv = nalgebra::DMatrix::from_row_slice(d, d, &s.inverse);
        let eps = LatentStats::ridge(&s.covariance, d);
        let reg = &cov + nalgebra::DMatrix::identity(d, d) * eps;
        assert!((&inv * &reg - nalgebra::DMatrix::identity(d, d)).amax() < 1e-9);
        // Against the unregularized covariance the residual is eps (Sigma + eps I)^-1.
        let lambda_min = cov.clone().symmetric_eigen().eigenvalues.min();
        let residual = (&inv * &cov - nalgebra::DMatrix::identity(d, d)).amax();
        assert!(residual <= eps / lambda_min * (1.0 + 1e-6), "{residual}");
        assert!(residual < 1e-5);
    }

    #[test]
    fn config_round_trips_through_kv() {
        let c = TrainConfig { epochs: 7, lr_latent: 3e-3, freeze_latents: true, ..Default::default() };
        assert_eq!(TrainConfig::from_kv(&c.to_kv()).unwrap(), c);
        let mut kv = KvFile::default();
        kv.set("val_fraction", 1.5);
        assert!(TrainConfig::from_kv(&kv).is_err());
    }

    fn tiny_sample(t: &TemplateTopology, seed: u64) -> TrainingSample {
        let m = generate_shape(t, &crate::anatomy::CohortRanges::default().sample(seed).unwrap()).unwrap();
        TrainingSample::build(t, &m, seed, t.vertex_count() + 500, t.vertex_count() + 200, 10.0, 9).unwrap()
    }

    #[test]
    fn one_step_moves_both_networks_and_the_code() {
        let (t, _) = template_and_mesh();
        let samples = vec![tiny_sample(&t, 0), tiny_sample(&t, 1)];
        let cfg = TrainConfig {
            latent_dim: 4,
            hidden_dim: 16,
            num_blocks: 2,
            seg_batch: 64,
            reg_batch: 32,
            val_fraction: 0.0,
            latent_init_std: 0.1,
            ..Default::default()
        };
        let mut tr = Trainer::new(cfg, &[0, 1]).unwrap();
        let before = tr.clone();
        tr.run_epoch(&samples).unwrap();
        assert_ne!(before.seg_net.params(), tr.seg_net.params());
        assert_ne!(before.reg_net.params(), tr.reg_net.params());
        for row in 0..2 {
            assert_ne!(before.code(row), tr.code(row));
        }
        assert_eq!(tr.log.len(), 1);
        assert!(tr.log[0].val_total.is_nan());
    }

    #[test]
    fn checkpoint_resume_is_exact() {
        let (t, _) = template_and_mesh();
        let samples: Vec<_> = (0..5).map(|s| tiny_sample(&t, s)).collect();
        let ids: Vec<u64> = samples.iter().map(|s| s.shape_id).collect();
        let cfg = TrainConfig { latent_dim: 4, hidden_dim: 16, num_blocks: 1, seg_batch: 64, reg_batch: 32, ..Default::default() };
        let mut a = Trainer::new(cfg.clone(), &ids).unwrap();
        assert_eq!((a.train_rows.len(), a.val_rows.len()), (4, 1));
        for _ in 0..3 {
            a.run_epoch(&samples).unwrap();
        }
        let bytes = a.to_checkpoint().unwrap().to_bytes().unwrap();
        let mut b = Trainer::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap(), None).unwrap();
        for _ in 0..2 {
            let ra = a.run_epoch(&samples).unwrap();
            let rb = b.run_epoch(&samples).unwrap();
            assert_eq!(ra, rb);
        }
        assert_eq!(a.codes, b.codes);
        assert_eq!(a.seg_net, b.seg_net);
    }

    #[test]
    fn empty_cohort_is_rejected() {
        assert!(Trainer::new(TrainConfig::default(), &[]).is_err());
        assert!(train(&[], &TrainConfig::default()).is_err());
    }

    #[test]
    fn reg_and_prior_gradients_match_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pred: Vec<f64> = (0..30).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let target: Vec<f64> = (0..30).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let g = reg_loss(&pred, &target).unwrap().grad;
        let n = numeric_gradient(&pred, 1e-5, |x| Ok(reg_loss(x, &target)?.value)).unwrap();
        assert!(max_relative_error(&g, &n) < 1e-4);
        let g = prior_loss(&pred, 5).unwrap().grad;
        let n = numeric_gradient(&pred, 1e-5, |x| Ok(prior_loss(x, 5)?.value)).unwrap();
        assert!(max_relative_error(&g, &n) < 1e-4);
    }

    #[test]
    fn joint_gradients_match_differences() {
        let (t, m) = template_and_mesh();
        let sample = TrainingSample::build(&t, &m, 0, t.vertex_count() + 200, t.vertex_count() + 50, 10.0, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let batch = JointBatch::from_sample(&sample, 12, 8, &mut rng);
        let d = 3;
        let seg = ResidualMlp::<f64>::init(MlpShape::new(3 + d, 5, 16, 2), &mut rng).unwrap();
        let reg = ResidualMlp::<f64>::init(MlpShape::new(4 + d, 3, 16, 2), &mut rng).unwrap();
        let code: Vec<f64> = (0..d).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let w = LossWeights::default();
        let epoch = 40;
        let ev = joint_loss(&seg, &reg, &code, &batch, &w, epoch, GradTarget::ParamsAndInputs).unwrap();
        assert_eq!(ev.total, total_loss(ev.seg, ev.reg, ev.prior, &w, epoch));

        let n = numeric_gradient(&code, 1e-5, |h| Ok(joint_loss(&seg, &reg, h, &batch, &w, epoch, GradTarget::InputsOnly)?.total))
            .unwrap();
        assert!(max_relative_error(&ev.latent_grad, &n) < 1e-4);
        let n = numeric_gradient(seg.params(), 1e-5, |p| {
            let net = ResidualMlp::from_params(seg.shape(), p.to_vec())?;
            Ok(joint_loss(&net, &reg, &code, &batch, &w, epoch, GradTarget::InputsOnly)?.total)
        })
        .unwrap();
        assert!(max_relative_error(&ev.seg_grads, &n) < 1e-4);
        let n = numeric_gradient(reg.params(), 1e-5, |p| {
            let net = ResidualMlp::from_params(reg.shape(), p.to_vec())?;
            Ok(joint_loss(&seg, &net, &code, &batch, &w, epoch, GradTarget::InputsOnly)?.total)
        })
        .unwrap();
        assert!(max_relative_error(&ev.reg_grads, &n) < 1e-4);
    }
}
