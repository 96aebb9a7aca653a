use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::acquisition::AblationConfig;
use crate::anatomy::CohortRanges;
use crate::error::{Error, Result};
use crate::inference::InferenceWeights;
use crate::kv::KvFile;
use crate::training::TrainConfig;

/// Environment variable that overrides the output root.
pub const OUT_ENV: &str = "NIHC_OUT";

/// Offset between train and test shape seeds.
pub const DEFAULT_TEST_SEED_OFFSET: u64 = 1_000_000;

/// Reconstruction condition, matching the provenance of the input slices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Condition {
    Ideal,
    Misaligned,
}

impl Condition {
    pub const ALL: [Condition; 2] = [Condition::Ideal, Condition::Misaligned];

    pub fn name(self) -> &'static str {
        match self {
            Condition::Ideal => "ideal",
            Condition::Misaligned => "misaligned",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub out_dir: PathBuf,
    pub train_shapes: usize,
    pub test_shapes: usize,
    pub cohort_seed: u64,
    pub test_seed_offset: u64,
    pub ranges: CohortRanges,
    /// In-plane step of the slice occupancy grids, mm.
    pub grid_step: f64,
    pub misalign_sigma: f64,
    pub misalign_seed: u64,
    pub train: TrainConfig,
    pub ideal_weights: InferenceWeights,
    pub misaligned_weights: InferenceWeights,
    /// Ablation rows reconstructed per condition.
    pub ideal_rows: Vec<String>,
    pub misaligned_rows: Vec<String>,
    /// Number of test cases reconstructed; 0 means all.
    pub recon_cases: usize,
    pub dense_labels: bool,
    pub dense_spacing: f64,
    pub inference_budget_s: f64,
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("nihc_out"),
            train_shapes: 200,
            test_shapes: 40,
            cohort_seed: 1,
            test_seed_offset: DEFAULT_TEST_SEED_OFFSET,
            ranges: CohortRanges::default(),
            grid_step: 2.0,
            misalign_sigma: 3.0,
            misalign_seed: 7,
            train: TrainConfig::default(),
            ideal_weights: InferenceWeights::ideal(),
            misaligned_weights: InferenceWeights::misaligned(),
            ideal_rows: AblationConfig::ROWS.iter().map(|(n, _)| n.to_string()).collect(),
            misaligned_rows: vec!["full".into()],
            recon_cases: 0,
            dense_labels: false,
            dense_spacing: 2.0,
            inference_budget_s: 30.0,
            workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
        }
    }
}

const EXPERIMENT_KEYS: &[&str] = &[
    "out_dir",
    "train_shapes",
    "test_shapes",
    "cohort_seed",
    "test_seed_offset",
    "global_scale_min",
    "global_scale_max",
    "grid_step",
    "misalign_sigma",
    "misalign_seed",
    "inference_steps",
    "inference_lr",
    "inference_points",
    "lambda_r",
    "ideal_lambda_bce",
    "ideal_lambda_dice",
    "misaligned_lambda_bce",
    "misaligned_lambda_dice",
    "ideal_rows",
    "misaligned_rows",
    "recon_cases",
    "dense_labels",
    "dense_spacing",
    "inference_budget_s",
    "workers",
];

fn parse_rows(s: &str) -> Result<Vec<String>> {
    let rows: Vec<String> = s.split(',').map(|r| r.trim().to_string()).filter(|r| !r.is_empty()).collect();
    if let Some(bad) = rows.iter().find(|r| AblationConfig::by_name(r).is_none()) {
        return Err(Error::format("config file", format!("unknown ablation row '{bad}'")));
    }
    Ok(rows)
}

impl ExperimentConfig {
    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        let known: Vec<&str> = EXPERIMENT_KEYS.iter().chain(TrainConfig::KEYS).copied().collect();
        kv.check_keys(&known)?;
        let mut c = Self::default();
        if let Some(p) = kv.get_str("out_dir") {
            c.out_dir = PathBuf::from(p);
        }
        kv.read("train_shapes", &mut c.train_shapes)?;
        kv.read("test_shapes", &mut c.test_shapes)?;
        kv.read("cohort_seed", &mut c.cohort_seed)?;
        kv.read("test_seed_offset", &mut c.test_seed_offset)?;
        kv.read("global_scale_min", &mut c.ranges.global_scale.0)?;
        kv.read("global_scale_max", &mut c.ranges.global_scale.1)?;
        kv.read("grid_step", &mut c.grid_step)?;
        kv.read("misalign_sigma", &mut c.misalign_sigma)?;
        kv.read("misalign_seed", &mut c.misalign_seed)?;
        c.train.apply(kv)?;
        for w in [&mut c.ideal_weights, &mut c.misaligned_weights] {
            kv.read("inference_steps", &mut w.steps)?;
            kv.read("inference_lr", &mut w.lr)?;
            kv.read("inference_points", &mut w.max_points)?;
            kv.read("lambda_r", &mut w.lambda_r)?;
        }
        kv.read("ideal_lambda_bce", &mut c.ideal_weights.lambda_bce)?;
        kv.read("ideal_lambda_dice", &mut c.ideal_weights.lambda_dice)?;
        kv.read("misaligned_lambda_bce", &mut c.misaligned_weights.lambda_bce)?;
        kv.read("misaligned_lambda_dice", &mut c.misaligned_weights.lambda_dice)?;
        if let Some(r) = kv.get_str("ideal_rows") {
            c.ideal_rows = parse_rows(r)?;
        }
        if let Some(r) = kv.get_str("misaligned_rows") {
            c.misaligned_rows = parse_rows(r)?;
        }
        kv.read("recon_cases", &mut c.recon_cases)?;
        kv.read("dense_labels", &mut c.dense_labels)?;
        kv.read("dense_spacing", &mut c.dense_spacing)?;
        kv.read("inference_budget_s", &mut c.inference_budget_s)?;
        kv.read("workers", &mut c.workers)?;
        c.validate()?;
        Ok(c)
    }

    /// Reads `path` (if any), applies `key=value` overrides, then the
    /// output-root environment override.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut kv = match path {
            Some(p) if !p.exists() => return Err(Error::MissingFile(p.to_path_buf())),
            Some(p) => KvFile::parse(&std::fs::read_to_string(p)?)?,
            None => KvFile::default(),
        };
        kv.merge(&KvFile::parse(&overrides.join("\n"))?);
        let mut c = Self::from_kv(&kv)?;
        if let Ok(root) = std::env::var(OUT_ENV) {
            if !root.is_empty() {
                c.out_dir = PathBuf::from(root);
            }
        }
        Ok(c)
    }

    /// Every setting except the output directory.
    pub fn to_kv(&self) -> KvFile {
        let mut kv = self.train.to_kv();
        kv.set("train_shapes", self.train_shapes);
        kv.set("test_shapes", self.test_shapes);
        kv.set("cohort_seed", self.cohort_seed);
        kv.set("test_seed_offset", self.test_seed_offset);
        kv.set("global_scale_min", format!("{:?}", self.ranges.global_scale.0));
        kv.set("global_scale_max", format!("{:?}", self.ranges.global_scale.1));
        kv.set("grid_step", format!("{:?}", self.grid_step));
        kv.set("misalign_sigma", format!("{:?}", self.misalign_sigma));
        kv.set("misalign_seed", self.misalign_seed);
        kv.set("inference_steps", self.ideal_weights.steps);
        kv.set("inference_lr", format!("{:?}", self.ideal_weights.lr));
        kv.set("inference_points", self.ideal_weights.max_points);
        kv.set("lambda_r", format!("{:?}", self.ideal_weights.lambda_r));
        kv.set("ideal_lambda_bce", format!("{:?}", self.ideal_weights.lambda_bce));
        kv.set("ideal_lambda_dice", format!("{:?}", self.ideal_weights.lambda_dice));
        kv.set("misaligned_lambda_bce", format!("{:?}", self.misaligned_weights.lambda_bce));
        kv.set("misaligned_lambda_dice", format!("{:?}", self.misaligned_weights.lambda_dice));
        kv.set("ideal_rows", self.ideal_rows.join(","));
        kv.set("misaligned_rows", self.misaligned_rows.join(","));
        kv.set("recon_cases", self.recon_cases);
        kv.set("dense_labels", self.dense_labels);
        kv.set("dense_spacing", format!("{:?}", self.dense_spacing));
        kv.set("inference_budget_s", format!("{:?}", self.inference_budget_s));
        kv
    }

    /// Hash of the settings that affect results (not paths or worker count).
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_kv().to_text().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.ideal_weights.validate()?;
        self.misaligned_weights.validate()?;
        if self.train_shapes == 0 || self.test_shapes == 0 {
            return Err(Error::invalid("cohort sizes must be positive"));
        }
        let train_end = self.cohort_seed.checked_add(self.train_shapes as u64);
        let test_start = self.cohort_seed.checked_add(self.test_seed_offset);
        match (train_end, test_start) {
            (Some(end), Some(start)) if start >= end => {}
            _ => return Err(Error::invalid("test seeds overlap the training seeds")),
        }
        if !(self.grid_step > 0.0 && self.dense_spacing > 0.0 && self.misalign_sigma >= 0.0) {
            return Err(Error::invalid("grid_step and dense_spacing must be positive, misalign_sigma nonnegative"));
        }
        if self.workers == 0 {
            return Err(Error::invalid("workers must be at least 1"));
        }
        Ok(())
    }

    pub fn train_seeds(&self) -> Vec<u64> {
        (0..self.train_shapes as u64).map(|i| self.cohort_seed + i).collect()
    }

    pub fn test_seeds(&self) -> Vec<u64> {
        (0..self.test_shapes as u64).map(|i| self.cohort_seed + self.test_seed_offset + i).collect()
    }

    pub fn weights(&self, condition: Condition) -> &InferenceWeights {
        match condition {
            Condition::Ideal => &self.ideal_weights,
            Condition::Misaligned => &self.misaligned_weights,
        }
    }

    pub fn rows(&self, condition: Condition) -> &[String] {
        match condition {
            Condition::Ideal => &self.ideal_rows,
            Condition::Misaligned => &self.misaligned_rows,
        }
    }

    /// Test cases to reconstruct.
    pub fn recon_seeds(&self) -> Vec<u64> {
        let all = self.test_seeds();
        match self.recon_cases {
            0 => all,
            n => all.into_iter().take(n).collect(),
        }
    }
}
