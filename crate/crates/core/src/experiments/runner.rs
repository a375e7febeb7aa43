//! Training runs, evaluation, ablation sweeps and reports.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::augment::{classic_augment, AugmentKind};
use super::dataset::{generate_split, SplitConfig};
use super::metrics::ConfusionMatrix;
use super::scene::{SceneConfig, SegSample};
use crate::error::{config_err, Error, Result};
use crate::model::{LossParts, Model, ModelConfig, StepReport, TrainConfig, TrainState};
use crate::numerics::{derive_seed, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Seed for viewpoint sampling.
    pub seed: u64,
    pub scene: SceneConfig,
    pub train: SplitConfig,
    pub test: SplitConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scene: SceneConfig::default(),
            train: SplitConfig::train_default(),
            test: SplitConfig::test_default(),
        }
    }
}

/// A complete experiment description; this is the config file schema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub augmentation: AugmentKind,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            augmentation: AugmentKind::None,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        let sc = &self.data.scene;
        if sc.size != self.model.image_size || sc.classes != self.model.classes || self.model.in_channels != 3 {
            return Err(config_err!(
                "scene ({}px, {} classes, RGB) does not match model ({}px, {} classes, {} channels)",
                sc.size,
                sc.classes,
                self.model.image_size,
                self.model.classes,
                self.model.in_channels
            ));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }
}

/// Rendered train and test splits.
#[derive(Clone, Debug)]
pub struct Datasets {
    pub train: Vec<SegSample>,
    pub test: Vec<SegSample>,
}

impl Datasets {
    pub fn generate(cfg: &DataConfig) -> Result<Self> {
        Ok(Self {
            train: generate_split(&cfg.train, &cfg.scene, cfg.seed)?,
            test: generate_split(&cfg.test, &cfg.scene, derive_seed(cfg.seed, 1))?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub confusion: ConfusionMatrix,
}

/// Single-scale evaluation with the state's current phase.
pub fn evaluate(state: &TrainState, samples: &[SegSample]) -> Result<Evaluation> {
    let k = state.model.config().classes;
    let mut cm = ConfusionMatrix::new(k);
    for s in samples {
        let preds = state.model.predict(&s.image, &mut state.eval_context())?;
        cm.add(&preds, &s.labels)?;
    }
    let (per_class_iou, miou) = cm.iou();
    Ok(Evaluation { per_class_iou, miou, confusion: cm })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub name: String,
    pub config_hash: String,
    pub seed: u64,
    pub axis: Option<String>,
    pub value: Option<String>,
    /// `"ok"` or the failure message.
    pub status: String,
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: Option<f64>,
    pub train_loss: Vec<LossParts>,
    pub warmup_iterations: usize,
    pub param_count: usize,
    /// Parameters of the same network without the perspective codec.
    pub plain_param_count: usize,
    pub test_protocol: String,
    pub wall_clock_secs: f64,
}

impl RunReport {
    /// Hash of every field except wall-clock time.
    pub fn digest(&self) -> String {
        let mut r = self.clone();
        r.wall_clock_secs = 0.0;
        hex::encode(Sha256::digest(serde_json::to_vec(&r).expect("report serializes")))
    }

    pub fn ok(&self) -> bool {
        self.status == "ok"
    }

    /// Relative parameter overhead over the plain-attention network.
    pub fn overhead(&self) -> f64 {
        self.param_count as f64 / self.plain_param_count as f64 - 1.0
    }
}

/// Parameter counts of the configured network and its codec-free twin.
pub fn param_counts(cfg: &ModelConfig) -> Result<(usize, usize)> {
    let full = Model::new(cfg.clone(), 0)?.param_count();
    let plain = Model::new(ModelConfig { use_pmp: false, ..cfg.clone() }, 0)?.param_count();
    Ok((full, plain))
}

/// Trains `cfg` on `data.train`, evaluates on `data.test`. `on_step` sees
/// every optimizer step.
pub fn run_training(
    cfg: &RunConfig,
    data: &Datasets,
    mut on_step: impl FnMut(&StepReport),
) -> Result<(TrainState, RunReport)> {
    cfg.validate()?;
    if data.train.is_empty() || data.test.is_empty() {
        return Err(config_err!("empty train or test split"));
    }
    let start = Instant::now();
    let model = Model::new(cfg.model.clone(), cfg.train.seed)?;
    let mut state = TrainState::new(model, cfg.train.clone())?;
    let mut losses = Vec::with_capacity(cfg.train.max_iter);
    let root = Rng::new(cfg.train.seed).fork(0xba7c4);
    for it in 0..cfg.train.max_iter {
        let mut rng = root.fork(it as u64);
        let batch: Vec<SegSample> = (0..cfg.train.batch_size)
            .map(|_| {
                let s = &data.train[rng.below(data.train.len())];
                let aug = cfg.augmentation.sample(&mut rng);
                classic_augment(s, aug)
            })
            .collect::<Result<_>>()?;
        let refs: Vec<_> = batch.iter().map(|s| (&s.image, s.labels.as_slice())).collect();
        let step = state.train_step(&refs)?;
        on_step(&step);
        losses.push(step.loss);
    }
    let eval = evaluate(&state, &data.test)?;
    let (param_count, plain_param_count) = param_counts(&cfg.model)?;
    let report = RunReport {
        name: String::new(),
        config_hash: cfg.hash(),
        seed: cfg.train.seed,
        axis: None,
        value: None,
        status: "ok".into(),
        per_class_iou: eval.per_class_iou,
        miou: Some(eval.miou),
        train_loss: losses,
        warmup_iterations: state.warmup_iterations(),
        param_count,
        plain_param_count,
        test_protocol: "single-scale".into(),
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    Ok((state, report))
}

/// Ablation axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    ContourletT,
    PrototypesN,
    CalibLayers,
    PmpM,
    /// Values are augmentation kinds applied to the plain-attention network,
    /// or `full` for the perspective network without augmentation.
    Augmentation,
}

impl Axis {
    pub const ALL: [Axis; 5] = [Axis::ContourletT, Axis::PrototypesN, Axis::CalibLayers, Axis::PmpM, Axis::Augmentation];

    pub fn name(self) -> &'static str {
        match self {
            Axis::ContourletT => "contourlet_T",
            Axis::PrototypesN => "prototypes_N",
            Axis::CalibLayers => "calib_layers",
            Axis::PmpM => "pmp_M",
            Axis::Augmentation => "augmentation",
        }
    }

    /// Sweep values used when none are given.
    pub fn default_values(self) -> Vec<String> {
        let v: &[&str] = match self {
            Axis::ContourletT => &["0", "1", "2", "3"],
            Axis::PrototypesN => &["16", "32", "64", "128", "256"],
            Axis::CalibLayers => &["0", "1", "2", "3"],
            Axis::PmpM => &["1", "2", "4", "6"],
            Axis::Augmentation => &["none", "rotate", "scale", "persp_vertical", "persp_horizontal", "combo", "full"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }

    /// `base` with this axis set to `value`.
    pub fn apply(self, base: &RunConfig, value: &str) -> Result<RunConfig> {
        let mut cfg = base.clone();
        let num = || value.parse::<usize>().map_err(|_| config_err!("{}: {value:?} is not a count", self.name()));
        match self {
            Axis::ContourletT => cfg.model.codec.levels = num()?,
            Axis::PrototypesN => cfg.model.prototypes = num()?,
            Axis::CalibLayers => cfg.model.attention.l_cal = num()?,
            Axis::PmpM => cfg.model.attention.m = num()?,
            Axis::Augmentation => {
                if value == "full" {
                    cfg.model.use_pmp = true;
                    cfg.augmentation = AugmentKind::None;
                } else {
                    cfg.model.use_pmp = false;
                    cfg.augmentation = value.parse()?;
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Axis::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| config_err!("unknown axis {s:?}"))
    }
}

/// Runs configurations against fixed data, memoising by config hash.
pub struct Runner {
    pub data: Datasets,
    cache: BTreeMap<String, RunReport>,
    pub verbose: bool,
}

impl Runner {
    pub fn new(data: Datasets) -> Self {
        Self { data, cache: BTreeMap::new(), verbose: false }
    }

    /// Report for `cfg`; failures become reports with a failure status.
    pub fn run(&mut self, cfg: &RunConfig, name: &str) -> RunReport {
        let hash = cfg.hash();
        if let Some(r) = self.cache.get(&hash) {
            let mut r = r.clone();
            r.name = name.to_string();
            return r;
        }
        let start = Instant::now();
        let verbose = self.verbose;
        let mut report = match run_training(cfg, &self.data, |s| {
            if verbose && (s.iteration % 100 == 0) {
                eprintln!("  [{name}] iter {} {:?} total {:.4} seg {:.4} rec {:.4}", s.iteration, s.phase, s.loss.total, s.loss.seg, s.loss.rec);
            }
        }) {
            Ok((_, r)) => r,
            Err(e) => {
                let (param_count, plain_param_count) = param_counts(&cfg.model).unwrap_or((0, 0));
                RunReport {
                    name: String::new(),
                    config_hash: hash.clone(),
                    seed: cfg.train.seed,
                    axis: None,
                    value: None,
                    status: format!("failed: {e}"),
                    per_class_iou: Vec::new(),
                    miou: None,
                    train_loss: Vec::new(),
                    warmup_iterations: cfg.model.warmup_iterations(cfg.train.max_iter),
                    param_count,
                    plain_param_count,
                    test_protocol: "single-scale".into(),
                    wall_clock_secs: start.elapsed().as_secs_f64(),
                }
            }
        };
        report.name = name.to_string();
        if verbose {
            eprintln!("  [{name}] {} mIoU {:?} in {:.0}s", report.status, report.miou, report.wall_clock_secs);
        }
        self.cache.insert(hash, report.clone());
        report
    }
}

/// One run per `(value, seed)`; invalid values are reported as failures.
pub fn run_ablation(runner: &mut Runner, base: &RunConfig, axis: Axis, values: &[String], seeds: &[u64]) -> Vec<RunReport> {
    let mut out = Vec::new();
    for value in values {
        for &seed in seeds {
            let name = format!("{}={value}/seed={seed}", axis.name());
            let mut report = match axis.apply(base, value) {
                Ok(mut cfg) => {
                    cfg.train.seed = seed;
                    runner.run(&cfg, &name)
                }
                Err(e) => RunReport {
                    name: name.clone(),
                    config_hash: String::new(),
                    seed,
                    axis: None,
                    value: None,
                    status: format!("failed: {e}"),
                    per_class_iou: Vec::new(),
                    miou: None,
                    train_loss: Vec::new(),
                    warmup_iterations: 0,
                    param_count: 0,
                    plain_param_count: 0,
                    test_protocol: "single-scale".into(),
                    wall_clock_secs: 0.0,
                },
            };
            report.axis = Some(axis.name().to_string());
            report.value = Some(value.clone());
            out.push(report);
        }
    }
    out
}

/// Mean mIoU over the successful runs with `value`.
pub fn seed_mean(reports: &[RunReport], value: &str) -> Option<f64> {
    let v: Vec<f64> = reports
        .iter()
        .filter(|r| r.value.as_deref() == Some(value))
        .filter_map(|r| r.miou)
        .collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Appends reports to `reports.jsonl` and rewrites `summary.csv` from the
/// full JSONL contents.
pub fn write_reports(dir: &Path, reports: &[RunReport]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let jsonl = dir.join("reports.jsonl");
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(&jsonl)?;
    for r in reports {
        writeln!(f, "{}", serde_json::to_string(r).map_err(|e| Error::Data(e.to_string()))?)?;
    }
    drop(f);
    let all = read_reports(dir)?;
    let mut w = csv::Writer::from_path(dir.join("summary.csv")).map_err(|e| Error::Data(e.to_string()))?;
    let k = all.iter().map(|r| r.per_class_iou.len()).max().unwrap_or(0);
    let mut header: Vec<String> = ["name", "axis", "value", "seed", "status", "miou", "final_loss", "params", "plain_params", "wall_clock_secs", "config_hash"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..k).map(|c| format!("iou_{c}")));
    w.write_record(&header).map_err(|e| Error::Data(e.to_string()))?;
    for r in &all {
        let mut row = vec![
            r.name.clone(),
            r.axis.clone().unwrap_or_default(),
            r.value.clone().unwrap_or_default(),
            r.seed.to_string(),
            r.status.clone(),
            r.miou.map(|m| m.to_string()).unwrap_or_default(),
            r.train_loss.last().map(|l| l.total.to_string()).unwrap_or_default(),
            r.param_count.to_string(),
            r.plain_param_count.to_string(),
            format!("{:.3}", r.wall_clock_secs),
            r.config_hash.clone(),
        ];
        row.extend((0..k).map(|c| r.per_class_iou.get(c).copied().flatten().map(|v| v.to_string()).unwrap_or_default()));
        w.write_record(&row).map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_reports(dir: &Path) -> Result<Vec<RunReport>> {
    let text = std::fs::read_to_string(dir.join("reports.jsonl"))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Parse { offset: i, message: format!("line {}: {e}", i + 1) }))
        .collect()
}
