use std::path::Path;

use nihc::acquisition::ContourSet;
use nihc::anatomy::io::read_ply;
use nihc::anatomy::{AnatomicalLabel, InstanceMesh};
use nihc::harness::*;
use nihc::inference::InferenceWeights;
use nihc::metrics::read_reports_csv;
use nihc::netcore::Checkpoint;
use nihc::training::TrainConfig;

fn quiet(_: &str) {}

fn tiny(out: &Path) -> ExperimentConfig {
    let weights = InferenceWeights { steps: 15, max_points: 400, ..InferenceWeights::ideal() };
    ExperimentConfig {
        out_dir: out.to_path_buf(),
        train_shapes: 6,
        test_shapes: 3,
        train: TrainConfig {
            epochs: 4,
            latent_dim: 8,
            hidden_dim: 32,
            num_blocks: 2,
            seg_points: 3000,
            reg_points: 3000,
            seg_batch: 256,
            reg_batch: 128,
            val_seg_batch: 128,
            val_reg_batch: 64,
            ..Default::default()
        },
        ideal_weights: weights,
        misaligned_weights: InferenceWeights { lambda_bce: 1.0, ..weights },
        ideal_rows: vec!["full".into(), "half_sax".into()],
        recon_cases: 2,
        workers: 2,
        ..Default::default()
    }
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap()
}

#[test]
fn default_generate_counts_and_reproduces() {
    let dir = tempfile::tempdir().unwrap();
    let a = ExperimentConfig { out_dir: dir.path().join("a"), ..Default::default() };
    let m = cmd_generate(&a, false).unwrap().manifest;
    let count = |prefix: &str, suffix: &str| m.artifacts.keys().filter(|k| k.starts_with(prefix) && k.ends_with(suffix)).count();
    assert_eq!(count("cohort/train/", ".ply"), 200);
    assert_eq!(count("cohort/test/", ".ply"), 40);
    assert_eq!(count("contours/", ".json"), 80);
    assert!(missing_artifacts(&Layout::new(&a.out_dir), &m).is_empty());

    // Existing output needs --force.
    assert!(cmd_generate(&a, false).is_err());

    let b = ExperimentConfig { out_dir: dir.path().join("b"), ..Default::default() };
    let m2 = cmd_generate(&b, false).unwrap().manifest;
    assert_eq!(m.artifacts, m2.artifacts);
    assert_eq!(m.config_hash, m2.config_hash);
}

#[test]
fn ideal_and_misaligned_differ_only_in_positions_and_shifts() {
    let dir = tempfile::tempdir().unwrap();
    let c = tiny(dir.path());
    cmd_generate(&c, false).unwrap();
    let layout = Layout::new(&c.out_dir);
    for seed in c.test_seeds() {
        let ideal = ContourSet::load(&layout.path(&Layout::contours(Condition::Ideal, seed))).unwrap();
        let mis = ContourSet::load(&layout.path(&Layout::contours(Condition::Misaligned, seed))).unwrap();
        assert_eq!(ideal.shape_id, mis.shape_id);
        assert_eq!(ideal.slices.len(), mis.slices.len());
        let mut moved = 0;
        for (a, b) in ideal.slices.iter().zip(&mis.slices) {
            assert_eq!(a.plane, b.plane);
            assert_eq!(a.points.len(), b.points.len());
            for (p, q) in a.points.iter().zip(&b.points) {
                assert_eq!(p.label, q.label);
                assert_eq!(p.surface, q.surface);
            }
            if a.shift != b.shift {
                moved += 1;
                assert_ne!(a.points[0].xyz, b.points[0].xyz);
            }
        }
        assert!(moved > 0);
    }
}

#[test]
fn train_with_zero_epochs_writes_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny(dir.path());
    c.train.epochs = 0;
    cmd_generate(&c, false).unwrap();
    cmd_train(&c, false, &quiet).unwrap();
    let layout = Layout::new(&c.out_dir);
    let ckpt = Checkpoint::load(&layout.path(Layout::checkpoint())).unwrap();
    assert_eq!(ckpt.latent_dim, 8);
    assert_eq!(ckpt.latents.shape_indices, c.train_seeds());
    assert_eq!(read(&layout.path(Layout::train_log())).lines().count(), 1);
}

#[test]
fn log_rows_match_epochs_and_resume_follows_the_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let mut full = tiny(&dir.path().join("full"));
    full.train.epochs = 12;
    cmd_generate(&full, false).unwrap();
    cmd_train(&full, false, &quiet).unwrap();
    let full_log = read(&full.out_dir.join(Layout::train_log()));
    assert_eq!(full_log.lines().count(), 1 + 12);

    let mut part = tiny(&dir.path().join("part"));
    part.train.epochs = 6;
    cmd_generate(&part, false).unwrap();
    cmd_train(&part, false, &quiet).unwrap();
    part.train.epochs = 12;
    let m = cmd_train(&part, true, &quiet).unwrap().manifest;
    assert_eq!(m.notes["epochs"], "12");
    let resumed_log = read(&part.out_dir.join(Layout::train_log()));
    assert_eq!(resumed_log.lines().count(), 1 + 12);

    let totals = |log: &str| -> Vec<f64> { log.lines().skip(1).map(|l| l.split(',').nth(4).unwrap().parse().unwrap()).collect() };
    for (a, b) in totals(&full_log).iter().zip(totals(&resumed_log)).skip(6) {
        assert!((a - b).abs() <= 0.05 * a.abs(), "resumed total {b} vs uninterrupted {a}");
    }
}

fn pipeline(c: &ExperimentConfig) -> (RunManifest, RunManifest) {
    cmd_generate(c, false).unwrap();
    cmd_train(c, false, &quiet).unwrap();
    let rec = cmd_reconstruct(c, &quiet).unwrap();
    assert!(rec.problems.is_empty(), "{:?}", rec.problems);
    let ev = cmd_evaluate(c, &quiet).unwrap();
    assert!(ev.problems.is_empty(), "{:?}", ev.problems);
    (rec.manifest, ev.manifest)
}

#[test]
fn end_to_end_tiny_run() {
    let dir = tempfile::tempdir().unwrap();
    let c = tiny(dir.path());
    let (rec, _) = pipeline(&c);
    let layout = Layout::new(&c.out_dir);

    // half_sax row runs and writes a valid PLY.
    let seed = c.recon_seeds()[0];
    let ply = read_ply(&layout.path(&Layout::recon(Condition::Ideal, "half_sax", seed, "ply"))).unwrap();
    assert_eq!(ply.positions.len(), default_template().unwrap().vertex_count());
    assert_eq!(rec.notes["seg_net_hash_before"], rec.notes["seg_net_hash_after"]);
    assert_eq!(rec.durations.keys().filter(|k| k.starts_with("case/")).count(), 2 * 3);

    // One summary row per (condition, ablation row).
    let summary = read(&layout.path(SUMMARY_CSV));
    assert_eq!(summary.lines().count(), 1 + 3);
    let cases = read_reports_csv(&read(&layout.path(CASES_CSV))).unwrap();
    assert_eq!(cases.len(), 6);

    // Report: one table per experiment, regenerated byte-identically.
    let first = cmd_report(&c).unwrap();
    let second = cmd_report(&c).unwrap();
    assert_eq!(first, second);
    for heading in ["## Surface fit on ideal slices", "## Ideal vs misaligned slices", "## Slice ablation", "## Volumes and masses", "## Timing"] {
        assert_eq!(first.matches(heading).count(), 1, "{heading}");
    }
}

#[test]
fn reconstruction_is_mesh_free() {
    let dir = tempfile::tempdir().unwrap();
    let c = tiny(dir.path());
    cmd_generate(&c, false).unwrap();
    cmd_train(&c, false, &quiet).unwrap();
    let layout = Layout::new(&c.out_dir);
    for seed in c.test_seeds() {
        std::fs::remove_file(layout.path(&Layout::shape_mesh("test", seed))).unwrap();
        std::fs::remove_file(layout.path(&Layout::shape_landmarks("test", seed))).unwrap();
    }
    std::fs::remove_file(layout.path(Layout::template())).unwrap();
    let rec = cmd_reconstruct(&c, &quiet).unwrap();
    assert!(rec.problems.is_empty(), "{:?}", rec.problems);
    assert_eq!(rec.manifest.notes["seg_net_hash_before"], rec.manifest.notes["seg_net_hash_after"]);
}

#[test]
fn evaluate_lists_missing_reconstructions() {
    let dir = tempfile::tempdir().unwrap();
    let c = tiny(dir.path());
    pipeline(&c);
    let layout = Layout::new(&c.out_dir);
    let seed = c.recon_seeds()[1];
    let rel = Layout::recon(Condition::Misaligned, "full", seed, "ply");
    let mut m = layout.load_manifest("reconstruct").unwrap();
    m.artifacts.remove(&rel);
    std::fs::write(layout.path(&Layout::manifest("reconstruct")), serde_json::to_string(&m).unwrap()).unwrap();
    let ev = cmd_evaluate(&c, &quiet).unwrap();
    assert_eq!(ev.problems.len(), 1);
    assert!(ev.problems[0].contains("misaligned/full"));
    assert_eq!(read_reports_csv(&read(&layout.path(CASES_CSV))).unwrap().len(), 5);
}

#[test]
fn changed_inputs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny(dir.path());
    c.train.epochs = 1;
    cmd_generate(&c, false).unwrap();
    let layout = Layout::new(&c.out_dir);
    let rel = Layout::shape_landmarks("train", c.train_seeds()[0]);
    let text = read(&layout.path(&rel));
    std::fs::write(layout.path(&rel), format!("{text} ")).unwrap();
    assert!(cmd_train(&c, false, &quiet).is_err());
}

#[test]
fn ground_truth_scored_against_itself_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let c = tiny(dir.path());
    cmd_generate(&c, false).unwrap();
    let layout = Layout::new(&c.out_dir);
    let template = default_template().unwrap();
    for seed in c.test_seeds() {
        let ply = read_ply(&layout.path(&Layout::shape_mesh("test", seed))).unwrap();
        let landmarks = nihc::anatomy::io::read_landmarks(&layout.path(&Layout::shape_landmarks("test", seed))).unwrap();
        let mesh = InstanceMesh { positions: ply.positions, landmarks };
        let ideal = ContourSet::load(&layout.path(&Layout::contours(Condition::Ideal, seed))).unwrap();
        let truth = Truth::new(&template, mesh.clone()).unwrap();
        let labels: Vec<AnatomicalLabel> = truth.vertex_labels.clone();
        let contour: Vec<_> = ideal.slices.iter().flat_map(|s| s.contour_points()).map(|p| p.xyz).collect();
        let job = Job { condition: Condition::Ideal, row: "full".into(), seed };
        let r = evaluate_case(&template, &truth, &mesh, &labels, &contour, &job).unwrap();
        assert_eq!((r.ed_mean, r.rmse, r.chamfer_sym), (0.0, 0.0, 0.0));
        assert_eq!((r.dice_lvm, r.dice_rvm), (1.0, 1.0));
        assert_eq!(r.p2s_mean, r.p2s_ref);
        assert_eq!(r.lv_vol, r.lv_vol_ref);
        assert_eq!(r.rv_mass, r.rv_mass_ref);
    }
}

#[test]
fn report_without_results_says_so() {
    let dir = tempfile::tempdir().unwrap();
    let c = tiny(dir.path());
    let text = cmd_report(&c).unwrap();
    assert!(text.contains(NO_RESULTS));
    assert!(c.out_dir.join(REPORT_MD).exists());
}
