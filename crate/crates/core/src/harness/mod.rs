//! End-to-end experiment pipeline: cohort generation, training,
//! reconstruction, evaluation and the markdown report. Every stage records a
//! manifest with content hashes of what it consumed and produced.

mod config;
mod report;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use config::{Condition, ExperimentConfig, DEFAULT_TEST_SEED_OFFSET, OUT_ENV};
pub use report::{render_report, NO_RESULTS};

use crate::acquisition::{acquire, inject_misalignment, select_subset, AblationConfig, ContourSet, MisalignmentSpec, ShiftDistribution};
use crate::anatomy::io::{read_landmarks, read_ply, write_landmarks, write_ply, PlyMesh};
use crate::anatomy::{generate_shape, AnatomicalLabel, InstanceMesh, ShapeParams, TemplateConfig, TemplateTopology};
use crate::error::{Error, Result};
use crate::geom::{Aabb, Vec3};
use crate::inference::{optimize_latent, predict_dense_labels, predict_mesh, predict_point_labels, template_landmarks, trace_csv, LabelGrid, LabeledPoints};
use crate::metrics::{
    bland_altman, chamfer, corresponding_ed, point_dice, point_to_surface, read_reports_csv, summarize, summary_csv, volumetrics,
    write_reports_csv, MetricsReport, Volumetrics, MYOCARDIUM_DENSITY,
};
use crate::netcore::checkpoint::write_atomic;
use crate::netcore::{param_hash, Checkpoint, ResidualMlp};
use crate::seeds::derive_seed;
use crate::training::{log_csv, vertex_label, LatentStats, TrainingSample, Trainer};

pub const STAGES: [&str; 5] = ["generate", "train", "reconstruct", "evaluate", "report"];

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    Ok(sha256_hex(&std::fs::read(path)?))
}

/// Record of one stage run. Paths are relative to the output root.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub stage: String,
    pub config_hash: String,
    pub started_unix: u64,
    /// Files consumed, with the hashes they had when read.
    pub inputs: BTreeMap<String, String>,
    pub artifacts: BTreeMap<String, String>,
    /// Wall-clock seconds per stage and per reconstructed case.
    pub durations: BTreeMap<String, f64>,
    pub notes: BTreeMap<String, String>,
}

impl RunManifest {
    fn new(stage: &str, config: &ExperimentConfig) -> Self {
        let started_unix = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        Self { stage: stage.into(), config_hash: config.hash(), started_unix, ..Default::default() }
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())
    }
}

/// File layout under the output root.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn template() -> &'static str {
        "cohort/template.ply"
    }

    pub fn shape_mesh(split: &str, seed: u64) -> String {
        format!("cohort/{split}/shape_{seed:07}.ply")
    }

    pub fn shape_landmarks(split: &str, seed: u64) -> String {
        format!("cohort/{split}/shape_{seed:07}.landmarks.json")
    }

    pub fn contours(c: Condition, seed: u64) -> String {
        format!("contours/{}/shape_{seed:07}.json", c.name())
    }

    pub fn checkpoint() -> &'static str {
        "train/checkpoint.bin"
    }

    pub fn train_log() -> &'static str {
        "train/log.csv"
    }

    pub fn recon(c: Condition, row: &str, seed: u64, ext: &str) -> String {
        format!("recon/{}/{row}/shape_{seed:07}.{ext}", c.name())
    }

    pub fn manifest(stage: &str) -> String {
        format!("manifests/{stage}.json")
    }

    pub fn load_manifest(&self, stage: &str) -> Result<RunManifest> {
        RunManifest::load(&self.path(&Self::manifest(stage)))
    }

    /// Reads `rel` after checking it against the hash `listed` by a previous stage.
    fn read_checked(&self, listed: &RunManifest, rel: &str, used: &mut BTreeMap<String, String>) -> Result<Vec<u8>> {
        let want = listed
            .artifacts
            .get(rel)
            .ok_or_else(|| Error::invalid(format!("{rel} is not listed by the {} stage", listed.stage)))?;
        let path = self.path(rel);
        if !path.exists() {
            return Err(Error::MissingFile(path));
        }
        let bytes = std::fs::read(&path)?;
        let got = sha256_hex(&bytes);
        if &got != want {
            return Err(Error::format("pipeline input", format!("{rel} changed since the {} stage", listed.stage)));
        }
        used.insert(rel.to_string(), got);
        Ok(bytes)
    }

    fn record(&self, manifest: &mut RunManifest, rel: &str) -> Result<()> {
        manifest.artifacts.insert(rel.to_string(), sha256_file(&self.path(rel))?);
        Ok(())
    }
}

/// Result of a stage: its manifest plus anything that should make the run
/// exit nonzero (skipped cases, budget overruns, broken invariants).
#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub manifest: RunManifest,
    pub problems: Vec<String>,
}

/// Runs `f(0..n)` on up to `workers` threads; results keep index order.
pub fn parallel_map<T: Send, F: Fn(usize) -> T + Sync>(n: usize, workers: usize, f: F) -> Vec<T> {
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<T>>> = (0..n).map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, n.max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let v = f(i);
                *slots[i].lock().unwrap() = Some(v);
            });
        }
    });
    slots.into_iter().map(|m| m.into_inner().unwrap().expect("every index is visited")).collect()
}

pub fn default_template() -> Result<TemplateTopology> {
    TemplateTopology::new(TemplateConfig::default())
}

fn write_shape(layout: &Layout, template: &TemplateTopology, split: &str, seed: u64, mesh: &InstanceMesh) -> Result<()> {
    write_ply(&layout.path(&Layout::shape_mesh(split, seed)), &PlyMesh::from_template(template, &mesh.positions))?;
    write_landmarks(&layout.path(&Layout::shape_landmarks(split, seed)), &mesh.landmarks)
}

fn read_shape(layout: &Layout, listed: &RunManifest, split: &str, seed: u64, used: &mut BTreeMap<String, String>) -> Result<InstanceMesh> {
    let mesh_rel = Layout::shape_mesh(split, seed);
    let lm_rel = Layout::shape_landmarks(split, seed);
    layout.read_checked(listed, &mesh_rel, used)?;
    layout.read_checked(listed, &lm_rel, used)?;
    let ply = read_ply(&layout.path(&mesh_rel))?;
    Ok(InstanceMesh { positions: ply.positions, landmarks: read_landmarks(&layout.path(&lm_rel))? })
}

/// Writes the training cohort and the paired ideal/misaligned test contours.
pub fn cmd_generate(config: &ExperimentConfig, force: bool) -> Result<StageOutcome> {
    let layout = Layout::new(&config.out_dir);
    let t0 = Instant::now();
    for dir in ["cohort", "contours"] {
        let p = layout.path(dir);
        if p.exists() {
            if !force {
                return Err(Error::invalid(format!("{} already exists; pass --force to overwrite", p.display())));
            }
            std::fs::remove_dir_all(&p)?;
        }
    }
    let template = default_template()?;
    let mut manifest = RunManifest::new("generate", config);
    let reference = generate_shape(&template, &ShapeParams::default())?;
    write_ply(&layout.path(Layout::template()), &PlyMesh::from_template(&template, &reference.positions))?;
    layout.record(&mut manifest, Layout::template())?;

    let train = config.train_seeds();
    let done = parallel_map(train.len(), config.workers, |i| -> Result<()> {
        let mesh = generate_shape(&template, &config.ranges.sample(train[i])?)?;
        write_shape(&layout, &template, "train", train[i], &mesh)
    });
    done.into_iter().collect::<Result<Vec<_>>>()?;

    let spec = MisalignmentSpec { sigma: config.misalign_sigma, seed: config.misalign_seed, distribution: ShiftDistribution::Gaussian };
    let test = config.test_seeds();
    let done = parallel_map(test.len(), config.workers, |i| -> Result<()> {
        let seed = test[i];
        let mesh = generate_shape(&template, &config.ranges.sample(seed)?)?;
        write_shape(&layout, &template, "test", seed, &mesh)?;
        let ideal = acquire(&template, &mesh, seed, config.grid_step)?;
        ideal.save(&layout.path(&Layout::contours(Condition::Ideal, seed)))?;
        inject_misalignment(&ideal, &spec)?.save(&layout.path(&Layout::contours(Condition::Misaligned, seed)))
    });
    done.into_iter().collect::<Result<Vec<_>>>()?;

    for (split, seeds) in [("train", &train), ("test", &test)] {
        for &s in seeds {
            layout.record(&mut manifest, &Layout::shape_mesh(split, s))?;
            layout.record(&mut manifest, &Layout::shape_landmarks(split, s))?;
        }
    }
    for c in Condition::ALL {
        for &s in &test {
            layout.record(&mut manifest, &Layout::contours(c, s))?;
        }
    }
    manifest.durations.insert("generate".into(), t0.elapsed().as_secs_f64());
    manifest.save(&layout.path(&Layout::manifest("generate")))?;
    Ok(StageOutcome { manifest, problems: Vec::new() })
}

/// Builds the per-shape training points from the generated cohort.
pub fn load_training_samples(config: &ExperimentConfig, used: &mut BTreeMap<String, String>) -> Result<Vec<TrainingSample>> {
    let layout = Layout::new(&config.out_dir);
    let listed = layout.load_manifest("generate")?;
    let template = default_template()?;
    let seeds = config.train_seeds();
    let mut meshes = Vec::with_capacity(seeds.len());
    for &s in &seeds {
        meshes.push(read_shape(&layout, &listed, "train", s, used)?);
    }
    let tc = &config.train;
    parallel_map(seeds.len(), config.workers, |i| {
        TrainingSample::build(&template, &meshes[i], seeds[i], tc.seg_points, tc.reg_points, tc.sample_margin, tc.seed)
    })
    .into_iter()
    .collect()
}

/// Trains (or resumes) the networks and codes; writes the checkpoint and log.
pub fn cmd_train(config: &ExperimentConfig, resume: bool, progress: &(dyn Fn(&str) + Sync)) -> Result<StageOutcome> {
    let layout = Layout::new(&config.out_dir);
    let t0 = Instant::now();
    let mut manifest = RunManifest::new("train", config);
    let samples = load_training_samples(config, &mut manifest.inputs)?;
    let ckpt_path = layout.path(Layout::checkpoint());
    let mut trainer = if resume && ckpt_path.exists() {
        let t = Trainer::from_checkpoint(&Checkpoint::load(&ckpt_path)?, Some(config.train.epochs))?;
        progress(&format!("resuming at epoch {}", t.epoch));
        t
    } else {
        Trainer::new(config.train.clone(), &config.train_seeds())?
    };
    let save = |t: &Trainer| -> Result<()> {
        t.to_checkpoint()?.save(&ckpt_path)?;
        write_atomic(&layout.path(Layout::train_log()), log_csv(&t.log).as_bytes())
    };
    let sample_time = t0.elapsed().as_secs_f64();
    while trainer.epoch < config.train.epochs {
        let row = trainer.run_epoch(&samples)?;
        let every = config.train.checkpoint_every;
        if every > 0 && trainer.epoch % every == 0 && trainer.epoch < config.train.epochs {
            save(&trainer)?;
        }
        if row.epoch % 10 == 0 || trainer.epoch == config.train.epochs {
            progress(&format!(
                "epoch {:4}  seg {:.4}  reg {:.3}  prior {:.3}  total {:.4}  val {:.4}  ({:.0} s)",
                row.epoch,
                row.seg_loss,
                row.reg_loss,
                row.prior_loss,
                row.total,
                row.val_total,
                t0.elapsed().as_secs_f64()
            ));
        }
    }
    save(&trainer)?;
    layout.record(&mut manifest, Layout::checkpoint())?;
    layout.record(&mut manifest, Layout::train_log())?;
    manifest.durations.insert("train_sampling".into(), sample_time);
    manifest.durations.insert("train".into(), t0.elapsed().as_secs_f64());
    manifest.notes.insert("epochs".into(), trainer.epoch.to_string());
    manifest.save(&layout.path(&Layout::manifest("train")))?;
    Ok(StageOutcome { manifest, problems: Vec::new() })
}

/// Trained model as used at inference time.
pub struct Model {
    pub seg_net: ResidualMlp<f32>,
    pub reg_net: ResidualMlp<f32>,
    pub stats: LatentStats,
}

impl Model {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let stats = ckpt.stats.as_ref().ok_or_else(|| Error::invalid("checkpoint has no latent statistics"))?;
        Ok(Self { seg_net: ckpt.seg_net.cast(), reg_net: ckpt.reg_net.cast(), stats: LatentStats::from_block(stats)? })
    }
}

fn load_model(layout: &Layout, used: &mut BTreeMap<String, String>) -> Result<Model> {
    let listed = layout.load_manifest("train")?;
    let bytes = layout.read_checked(&listed, Layout::checkpoint(), used)?;
    Model::from_checkpoint(&Checkpoint::from_bytes(&bytes)?)
}

/// One reconstruction job.
#[derive(Debug, Clone, PartialEq)]
pub struct Job {
    pub condition: Condition,
    pub row: String,
    pub seed: u64,
}

impl Job {
    pub fn key(&self) -> String {
        format!("{}/{}/{:07}", self.condition.name(), self.row, self.seed)
    }
}

pub fn planned_jobs(config: &ExperimentConfig) -> Vec<Job> {
    let mut jobs = Vec::new();
    for c in Condition::ALL {
        for row in config.rows(c) {
            for seed in config.recon_seeds() {
                jobs.push(Job { condition: c, row: row.clone(), seed });
            }
        }
    }
    jobs
}

/// Fitted code written next to each reconstructed mesh.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeFile {
    pub shape_id: u64,
    pub condition: String,
    pub ablation: String,
    pub code: Vec<f64>,
    pub best_step: usize,
    pub best_loss: f64,
    pub points: usize,
}

/// Dense grid around a mesh. Both ends snap to a 4 mm lattice, so grids of 1,
/// 2 and 4 mm spacing cover the same box and share voxel centres.
pub fn dense_grid_for(mesh: &InstanceMesh, spacing: f64, margin: f64) -> LabelGrid {
    let b = Aabb::from_points(&mesh.positions);
    let origin = b.min.map(|v| ((v - margin) / 4.0).floor() * 4.0);
    let dims = [0, 1, 2].map(|k| {
        let extent = ((b.max[k] + margin - origin[k]) / 4.0).ceil() * 4.0;
        (extent / spacing).round() as usize + 1
    });
    LabelGrid { origin, spacing, dims }
}

/// Fits one case and writes its mesh, code, trace and optional label volume.
/// Returns the fit time in seconds. Reads only the case's slices, the model
/// and the shared template.
pub fn reconstruct_case(
    layout: &Layout,
    config: &ExperimentConfig,
    model: &Model,
    template: &TemplateTopology,
    contours: &ContourSet,
    job: &Job,
) -> Result<f64> {
    let t0 = Instant::now();
    let ablation = AblationConfig::by_name(&job.row).ok_or_else(|| Error::invalid(format!("unknown ablation row {}", job.row)))?;
    let subset = select_subset(contours, &ablation)?;
    let weights = config.weights(job.condition);
    let row_index = AblationConfig::ROWS.iter().position(|(n, _)| *n == job.row).unwrap_or(0) as u64;
    let points = LabeledPoints::from_contours(&subset, weights.max_points, derive_seed(job.seed, row_index, job.condition as u64));
    let fit = optimize_latent(&points, &model.seg_net, &model.stats, weights)?;
    let mesh = predict_mesh(&model.reg_net, &fit.code, template)?;
    let elapsed = t0.elapsed().as_secs_f64();

    write_ply(&layout.path(&Layout::recon(job.condition, &job.row, job.seed, "ply")), &PlyMesh::from_template(template, &mesh.positions))?;
    let code = CodeFile {
        shape_id: job.seed,
        condition: job.condition.name().into(),
        ablation: job.row.clone(),
        code: fit.code.clone(),
        best_step: fit.best_step,
        best_loss: fit.best_loss(),
        points: points.len(),
    };
    write_atomic(&layout.path(&Layout::recon(job.condition, &job.row, job.seed, "code.json")), serde_json::to_string_pretty(&code)?.as_bytes())?;
    write_atomic(&layout.path(&Layout::recon(job.condition, &job.row, job.seed, "trace.csv")), trace_csv(&fit.trace).as_bytes())?;
    if config.dense_labels {
        let grid = dense_grid_for(&mesh, config.dense_spacing, 10.0);
        predict_dense_labels(&model.seg_net, &fit.code, &grid)?.save(&layout.path(&Layout::recon(job.condition, &job.row, job.seed, "labels.u8")))?;
    }
    Ok(elapsed)
}

fn recon_files(config: &ExperimentConfig, job: &Job) -> Vec<String> {
    let mut v: Vec<String> = ["ply", "code.json", "trace.csv"].iter().map(|e| Layout::recon(job.condition, &job.row, job.seed, e)).collect();
    if config.dense_labels {
        v.push(Layout::recon(job.condition, &job.row, job.seed, "labels.u8"));
        v.push(Layout::recon(job.condition, &job.row, job.seed, "labels.u8.json"));
    }
    v
}

/// Latent fits for every planned job. Test meshes are never read here.
pub fn cmd_reconstruct(config: &ExperimentConfig, progress: &(dyn Fn(&str) + Sync)) -> Result<StageOutcome> {
    let layout = Layout::new(&config.out_dir);
    let t0 = Instant::now();
    let mut manifest = RunManifest::new("reconstruct", config);
    let model = load_model(&layout, &mut manifest.inputs)?;
    let generated = layout.load_manifest("generate")?;
    let template = default_template()?;
    let jobs = planned_jobs(config);

    let mut contours = BTreeMap::new();
    for job in &jobs {
        let key = (job.condition, job.seed);
        if !contours.contains_key(&key) {
            let rel = Layout::contours(job.condition, job.seed);
            let bytes = layout.read_checked(&generated, &rel, &mut manifest.inputs)?;
            let set: ContourSet = serde_json::from_slice(&bytes)?;
            contours.insert(key, set);
        }
    }

    let hash_before = param_hash(model.seg_net.params());
    let done = AtomicUsize::new(0);
    let results = parallel_map(jobs.len(), config.workers, |i| {
        let job = &jobs[i];
        let r = reconstruct_case(&layout, config, &model, &template, &contours[&(job.condition, job.seed)], job);
        let n = done.fetch_add(1, Ordering::Relaxed) + 1;
        if n % 20 == 0 || n == jobs.len() {
            progress(&format!("reconstructed {n}/{}", jobs.len()));
        }
        r
    });
    let hash_after = param_hash(model.seg_net.params());

    let mut problems = Vec::new();
    if hash_before != hash_after {
        problems.push("segmentation network parameters changed during latent fitting".to_string());
    }
    manifest.notes.insert("seg_net_hash_before".into(), hash_before);
    manifest.notes.insert("seg_net_hash_after".into(), hash_after);
    for (job, r) in jobs.iter().zip(results) {
        match r {
            Ok(secs) => {
                manifest.durations.insert(format!("case/{}", job.key()), secs);
                if secs > config.inference_budget_s {
                    problems.push(format!("{} took {secs:.1} s, over the {} s budget", job.key(), config.inference_budget_s));
                }
                for rel in recon_files(config, job) {
                    layout.record(&mut manifest, &rel)?;
                }
            }
            Err(e) => problems.push(format!("{} failed: {e}", job.key())),
        }
    }
    manifest.durations.insert("reconstruct".into(), t0.elapsed().as_secs_f64());
    manifest.save(&layout.path(&Layout::manifest("reconstruct")))?;
    Ok(StageOutcome { manifest, problems })
}

/// Ground truth needed to score reconstructions of one test shape.
pub struct Truth {
    pub mesh: InstanceMesh,
    pub volumetrics: Volumetrics,
    /// Point-Dice query labels: one per true mesh vertex, so the query
    /// points are `mesh.positions`.
    pub vertex_labels: Vec<AnatomicalLabel>,
}

impl Truth {
    pub fn new(template: &TemplateTopology, mesh: InstanceMesh) -> Result<Self> {
        let volumetrics = volumetrics(template, &mesh, MYOCARDIUM_DENSITY)?;
        let vertex_labels = (0..template.vertex_count()).map(|i| vertex_label(template, i)).collect();
        Ok(Self { volumetrics, vertex_labels, mesh })
    }
}

/// Scores one reconstruction. `pred_labels` are the predicted labels at
/// the true mesh vertices; `contour_points` are the input contour points.
pub fn evaluate_case(
    template: &TemplateTopology,
    truth: &Truth,
    pred: &InstanceMesh,
    pred_labels: &[AnatomicalLabel],
    contour_points: &[Vec3],
    job: &Job,
) -> Result<MetricsReport> {
    let (ed_mean, rmse) = corresponding_ed(&pred.positions, &truth.mesh.positions)?;
    let cd = chamfer(&pred.positions, &truth.mesh.positions)?;
    let p2s_mean = point_to_surface(contour_points, &template.mesh(&pred.positions))?;
    let p2s_ref = point_to_surface(contour_points, &template.mesh(&truth.mesh.positions))?;
    // A badly folded prediction can have no valid enclosed volume; report NaN.
    let nan = Volumetrics { lv_vol: f64::NAN, rv_vol: f64::NAN, lv_mass: f64::NAN, rv_mass: f64::NAN };
    let vol = volumetrics(template, pred, MYOCARDIUM_DENSITY).unwrap_or(nan);
    let r = &truth.volumetrics;
    Ok(MetricsReport {
        case_id: job.seed,
        condition: job.condition.name().into(),
        ablation: job.row.clone(),
        dice_lvm: point_dice(pred_labels, &truth.vertex_labels, AnatomicalLabel::Lvm)?,
        dice_rvm: point_dice(pred_labels, &truth.vertex_labels, AnatomicalLabel::Rvm)?,
        ed_mean,
        rmse,
        chamfer_ab: cd.ab,
        chamfer_ba: cd.ba,
        chamfer_sym: cd.sym,
        p2s_mean,
        p2s_ref,
        lv_vol: vol.lv_vol,
        rv_vol: vol.rv_vol,
        lv_mass: vol.lv_mass,
        rv_mass: vol.rv_mass,
        lv_vol_ref: r.lv_vol,
        rv_vol_ref: r.rv_vol,
        lv_mass_ref: r.lv_mass,
        rv_mass_ref: r.rv_mass,
        long_axis: truth.mesh.long_axis_length(),
    })
}

pub const BLAND_ALTMAN_QUANTITIES: [&str; 4] = ["lv_vol", "rv_vol", "lv_mass", "rv_mass"];

fn reference_value(r: &MetricsReport, q: &str) -> f64 {
    match q {
        "lv_vol" => r.lv_vol_ref,
        "rv_vol" => r.rv_vol_ref,
        "lv_mass" => r.lv_mass_ref,
        _ => r.rv_mass_ref,
    }
}

/// Per-case and summary Bland-Altman tables for volumes and masses.
pub fn bland_altman_csvs(reports: &[MetricsReport]) -> Result<(String, String)> {
    let mut rows = String::from("condition,ablation,quantity,case_id,mean,diff\n");
    let mut summary = String::from("condition,ablation,quantity,cases,bias,sd,lower,upper\n");
    for group in summarize(reports) {
        let members: Vec<&MetricsReport> =
            reports.iter().filter(|r| r.condition == group.condition && r.ablation == group.ablation && r.lv_vol.is_finite()).collect();
        if members.is_empty() {
            continue;
        }
        for q in BLAND_ALTMAN_QUANTITIES {
            let reference: Vec<f64> = members.iter().map(|r| reference_value(r, q)).collect();
            let predicted: Vec<f64> = members.iter().map(|r| r.column(q).unwrap()).collect();
            let ba = bland_altman(&reference, &predicted)?;
            for (m, row) in members.iter().zip(&ba.rows) {
                rows.push_str(&format!("{},{},{q},{},{:?},{:?}\n", group.condition, group.ablation, m.case_id, row.mean, row.diff));
            }
            summary.push_str(&format!(
                "{},{},{q},{},{:?},{:?},{:?},{:?}\n",
                group.condition,
                group.ablation,
                members.len(),
                ba.bias,
                ba.sd,
                ba.lower,
                ba.upper
            ));
        }
    }
    Ok((rows, summary))
}

pub const CASES_CSV: &str = "eval/cases.csv";
pub const SUMMARY_CSV: &str = "eval/summary.csv";
pub const BLAND_ALTMAN_CSV: &str = "eval/bland_altman.csv";
pub const BLAND_ALTMAN_SUMMARY_CSV: &str = "eval/bland_altman_summary.csv";
pub const REPORT_MD: &str = "report.md";

/// Scores every planned reconstruction against the generating shapes.
pub fn cmd_evaluate(config: &ExperimentConfig, progress: &(dyn Fn(&str) + Sync)) -> Result<StageOutcome> {
    let layout = Layout::new(&config.out_dir);
    let t0 = Instant::now();
    let mut manifest = RunManifest::new("evaluate", config);
    let generated = layout.load_manifest("generate")?;
    let recon = layout.load_manifest("reconstruct")?;
    let model = load_model(&layout, &mut manifest.inputs)?;
    let template = default_template()?;

    let mut problems = Vec::new();
    let mut jobs = Vec::new();
    for job in planned_jobs(config) {
        let missing: Vec<String> = recon_files(config, &job).into_iter().filter(|rel| !recon.artifacts.contains_key(rel)).collect();
        if missing.is_empty() {
            jobs.push(job);
        } else {
            problems.push(format!("{} skipped: missing {}", job.key(), missing.join(", ")));
        }
    }

    let seeds: Vec<u64> = {
        let mut s: Vec<u64> = jobs.iter().map(|j| j.seed).collect();
        s.sort_unstable();
        s.dedup();
        s
    };
    let mut inputs = BTreeMap::new();
    let mut loaded = Vec::new();
    for &seed in &seeds {
        let mesh = read_shape(&layout, &generated, "test", seed, &mut inputs)?;
        let mut sets = BTreeMap::new();
        for c in Condition::ALL {
            let bytes = layout.read_checked(&generated, &Layout::contours(c, seed), &mut inputs)?;
            sets.insert(c, serde_json::from_slice::<ContourSet>(&bytes)?);
        }
        loaded.push((mesh, sets));
    }
    let truths: Vec<Result<Truth>> =
        parallel_map(seeds.len(), config.workers, |i| Truth::new(&template, loaded[i].0.clone()));
    let mut truth_map = BTreeMap::new();
    for (&seed, t) in seeds.iter().zip(truths) {
        truth_map.insert(seed, t?);
    }
    let contour_map: BTreeMap<u64, BTreeMap<Condition, ContourSet>> = seeds.iter().copied().zip(loaded.into_iter().map(|(_, s)| s)).collect();

    let mut recon_inputs = BTreeMap::new();
    let mut preds = Vec::new();
    for job in &jobs {
        let ply_rel = Layout::recon(job.condition, &job.row, job.seed, "ply");
        let code_rel = Layout::recon(job.condition, &job.row, job.seed, "code.json");
        layout.read_checked(&recon, &ply_rel, &mut recon_inputs)?;
        let code: CodeFile = serde_json::from_slice(&layout.read_checked(&recon, &code_rel, &mut recon_inputs)?)?;
        let ply = read_ply(&layout.path(&ply_rel))?;
        preds.push((ply.positions, code.code));
    }
    manifest.inputs.extend(inputs);
    manifest.inputs.extend(recon_inputs);

    let done = AtomicUsize::new(0);
    let results = parallel_map(jobs.len(), config.workers, |i| -> Result<MetricsReport> {
        let job = &jobs[i];
        let truth = &truth_map[&job.seed];
        let (positions, code) = &preds[i];
        let pred = InstanceMesh { positions: positions.clone(), landmarks: template_landmarks(&template, positions) };
        let labels = predict_point_labels(&model.seg_net, code, &truth.mesh.positions)?;
        let ablation = AblationConfig::by_name(&job.row).unwrap_or(AblationConfig::FULL);
        let input = select_subset(&contour_map[&job.seed][&job.condition], &ablation)?;
        let contour_xyz: Vec<Vec3> = input.slices.iter().flat_map(|s| s.contour_points()).map(|p| p.xyz).collect();
        let r = evaluate_case(&template, truth, &pred, &labels, &contour_xyz, job);
        let n = done.fetch_add(1, Ordering::Relaxed) + 1;
        if n % 40 == 0 || n == jobs.len() {
            progress(&format!("evaluated {n}/{}", jobs.len()));
        }
        r
    });
    let mut reports = Vec::new();
    for (job, r) in jobs.iter().zip(results) {
        match r {
            Ok(rep) => reports.push(rep),
            Err(e) => problems.push(format!("{} not evaluated: {e}", job.key())),
        }
    }

    write_atomic(&layout.path(CASES_CSV), write_reports_csv(&reports)?.as_bytes())?;
    write_atomic(&layout.path(SUMMARY_CSV), summary_csv(&summarize(&reports)).as_bytes())?;
    let (ba_rows, ba_summary) = bland_altman_csvs(&reports)?;
    write_atomic(&layout.path(BLAND_ALTMAN_CSV), ba_rows.as_bytes())?;
    write_atomic(&layout.path(BLAND_ALTMAN_SUMMARY_CSV), ba_summary.as_bytes())?;
    for rel in [CASES_CSV, SUMMARY_CSV, BLAND_ALTMAN_CSV, BLAND_ALTMAN_SUMMARY_CSV] {
        layout.record(&mut manifest, rel)?;
    }
    manifest.durations.insert("evaluate".into(), t0.elapsed().as_secs_f64());
    manifest.save(&layout.path(&Layout::manifest("evaluate")))?;
    Ok(StageOutcome { manifest, problems })
}

/// Writes `report.md` from the evaluation CSVs and stage manifests.
pub fn cmd_report(config: &ExperimentConfig) -> Result<String> {
    let layout = Layout::new(&config.out_dir);
    let cases = layout.path(CASES_CSV);
    let reports = if cases.exists() { read_reports_csv(&std::fs::read_to_string(&cases)?)? } else { Vec::new() };
    let manifests: Vec<RunManifest> = STAGES[..4].iter().filter_map(|s| layout.load_manifest(s).ok()).collect();
    let text = render_report(&reports, &manifests, config);
    write_atomic(&layout.path(REPORT_MD), text.as_bytes())?;
    Ok(text)
}

/// Listed artifacts that are no longer on disk.
pub fn missing_artifacts(layout: &Layout, manifest: &RunManifest) -> Vec<String> {
    manifest.artifacts.keys().filter(|rel| !layout.path(rel).exists()).cloned().collect()
}
