//! Config-driven experiment harness: single attack runs with a pristine
//! baseline, grid sweeps over (n, alpha_train, alpha_test) x seeds, the
//! leave-one-out cross-subject protocol, and plot-ready CSV emission.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::{
    assemble_poisoned, leave_one_out_pools, load_idx_pair, load_png_tree, manifest_of_poisoned,
    split_three_way, synth_generate, write_manifest, LabeledDataset, PoisonedDataset, SplitBundle,
};
use crate::defenses::{
    audit_label_distribution, aux_pristine_eval, l2_outlier_prune, AuxPristinePair,
    DistributionAudit, PruneResult,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    compare_to_pristine, evaluate, standard_test_accuracy, EvalReport, StealthComparison,
};
use crate::imaging::{self, Image};
use crate::keys::{
    generate_backdoor_instances, generate_poisons, inject, load_pattern_key, wrong_key_instances,
    BackdoorKey, BackdoorSpec, InputInstanceKey, PatternKey, PoisonOrigin, PoisoningSample, Scale,
    ScaleSizes, Strategy,
};
use crate::rng::Stream;
use crate::training::{init_model, save_model, train, Model, ModelSpec, TrainConfig};

// --- Configuration ----------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetSource {
    Synthetic {
        num_labels: usize,
        per_label: usize,
        frame: (usize, usize, usize),
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
    PngTree {
        root: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitParams {
    pub test_per_label: usize,
    pub pool_per_label: usize,
}

/// How the attack key is obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum KeySpec {
    /// An attacker-pool image used as an input-instance key.
    PoolInstance {
        label: usize,
        index: usize,
        noise_bound: f64,
    },
    /// An attacker-supplied image from outside the classifier's label
    /// space, synthesized as a held-out identity; the usual shape of an
    /// input-instance key.
    Foreign { tag: u64, noise_bound: f64 },
    /// Synthetic accessory patch: an opaque bar with transparent eye holes.
    Glasses { value: u8 },
    /// Glasses geometry filled with a seeded random texture instead of a
    /// solid color, so the trigger carries a specific appearance.
    TexturedGlasses { tag: u64 },
    /// Full-frame single-color pattern (for blended injection).
    Solid { value: u8 },
    /// Full-frame random-noise pattern, derived from the master seed.
    Noise,
    /// Pattern key loaded from a directory written by `save_pattern_key`.
    File { dir: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub strategy: Strategy,
    pub key: KeySpec,
    pub target_label: usize,
    pub alpha_train: f64,
    pub alpha_test: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DefenseToggles {
    pub audit: bool,
    pub audit_z: f64,
    pub prune_eta: Option<f64>,
    pub aux_pristine: bool,
}

impl Default for DefenseToggles {
    fn default() -> Self {
        DefenseToggles {
            audit: false,
            audit_z: 3.0,
            prune_eta: None,
            aux_pristine: false,
        }
    }
}

fn default_threshold() -> f64 {
    0.85
}

fn default_eval_instances() -> usize {
    20
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub source: DatasetSource,
    pub split: SplitParams,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub attack: AttackConfig,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    /// Number of fresh backdoor instances drawn for input-instance keys.
    #[serde(default = "default_eval_instances")]
    pub eval_instances: usize,
    /// Measure the wrong-key rate against an automatically built wrong key.
    #[serde(default = "default_true")]
    pub wrong_key: bool,
    #[serde(default)]
    pub defenses: DefenseToggles,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub master_seed: u64,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(reconfig)?;
        self.train.validate().map_err(reconfig)?;
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!(
                "threshold {} outside [0,1]",
                self.threshold
            )));
        }
        if self.attack.n == 0 {
            return Err(Error::Config("attack.n must be >= 1".into()));
        }
        if self.eval_instances == 0 {
            return Err(Error::Config("eval_instances must be >= 1".into()));
        }
        match &self.source {
            DatasetSource::Idx { images, labels } => {
                for p in [images, labels] {
                    if !p.exists() {
                        return Err(Error::Config(format!("missing input file {}", p.display())));
                    }
                }
            }
            DatasetSource::PngTree { root } => {
                if !root.exists() {
                    return Err(Error::Config(format!(
                        "missing dataset root {}",
                        root.display()
                    )));
                }
            }
            DatasetSource::Synthetic { .. } => {}
        }
        if let KeySpec::File { dir } = &self.attack.key {
            if !dir.exists() {
                return Err(Error::Config(format!("missing key dir {}", dir.display())));
            }
        }
        Ok(())
    }

    pub fn config_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

fn reconfig(e: Error) -> Error {
    Error::Config(e.to_string())
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let cfg: ExperimentConfig =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

// --- Key construction ----------------------------------------------------------------

/// Synthetic "glasses" accessory: an opaque horizontal bar across the upper
/// face region with two transparent eye holes.
pub fn glasses_pattern(frame: (usize, usize, usize), value: u8) -> PatternKey {
    let (h, w, c) = frame;
    let ph = (h / 5).max(3);
    let pw = (w * 3 / 4).max(4);
    let pattern = Image::new(ph, pw, c, vec![value; ph * pw * c]).expect("valid patch");
    let mut mask = vec![false; ph * pw];
    // two eye holes, one per side of the bar
    let hole_w = (pw / 5).max(1);
    let hole_h = (ph / 2).max(1);
    for start in [pw / 6, pw - pw / 6 - hole_w] {
        for i in 0..hole_h {
            for j in 0..hole_w {
                mask[(ph / 4 + i) * pw + start + j] = true;
            }
        }
    }
    PatternKey {
        pattern,
        transparent_mask: mask,
        scale: Scale::Medium,
        scale_sizes: ScaleSizes::uniform((ph, pw)),
        anchor: (h / 4, (w - pw) / 2),
    }
}

/// Glasses with a seeded random texture: same bar-and-holes geometry as
/// `glasses_pattern`, but each opaque pixel gets its own value.
pub fn textured_glasses_pattern(frame: (usize, usize, usize), tag: u64, stream: &Stream) -> PatternKey {
    use rand::Rng;
    let mut key = glasses_pattern(frame, 0);
    let (ph, pw, pc) = key.pattern.shape();
    let mut rng = stream.derive("textured-glasses", tag).rng();
    let pixels = (0..ph * pw * pc).map(|_| rng.gen()).collect();
    key.pattern = Image::new(ph, pw, pc, pixels).expect("valid patch");
    key
}

fn noise_pattern(frame: (usize, usize, usize), stream: &Stream) -> PatternKey {
    use rand::Rng;
    let (h, w, c) = frame;
    let mut rng = stream.derive("noise-pattern", 0).rng();
    let pixels = (0..h * w * c).map(|_| rng.gen()).collect();
    PatternKey::full_frame(Image::new(h, w, c, pixels).expect("valid frame"))
}

pub fn build_key_for(cfg: &ExperimentConfig, pool: &LabeledDataset, stream: &Stream) -> Result<BackdoorKey> {
    let frame = cfg.model.input_shape;
    match &cfg.attack.key {
        KeySpec::PoolInstance {
            label,
            index,
            noise_bound,
        } => {
            let images = pool.images_of_label(*label);
            let img = images.get(*index).ok_or_else(|| {
                Error::Config(format!(
                    "pool label {label} has {} images, key index {index} out of range",
                    images.len()
                ))
            })?;
            Ok(BackdoorKey::InputInstance(InputInstanceKey::new(
                img.clone(),
                *noise_bound,
            )?))
        }
        KeySpec::Foreign { tag, noise_bound } => {
            let img = crate::datasets::synth_foreign_identity(
                *tag,
                1,
                frame,
                &stream.derive("foreign-key", 0),
            )
            .pop()
            .expect("count is 1");
            Ok(BackdoorKey::InputInstance(InputInstanceKey::new(
                img,
                *noise_bound,
            )?))
        }
        KeySpec::Glasses { value } => Ok(BackdoorKey::Pattern(glasses_pattern(frame, *value))),
        KeySpec::TexturedGlasses { tag } => Ok(BackdoorKey::Pattern(textured_glasses_pattern(
            frame, *tag, stream,
        ))),
        KeySpec::Solid { value } => {
            let (h, w, c) = frame;
            Ok(BackdoorKey::Pattern(PatternKey::full_frame(Image::new(
                h,
                w,
                c,
                vec![*value; h * w * c],
            )?)))
        }
        KeySpec::Noise => Ok(BackdoorKey::Pattern(noise_pattern(frame, stream))),
        KeySpec::File { dir } => Ok(BackdoorKey::Pattern(load_pattern_key(dir)?)),
    }
}

/// A key that is deliberately different from the true one, for wrong-key
/// measurements. Returns the key and (for input-instance keys) the ground
/// truth of the image it was built from.
fn build_wrong_key(
    cfg: &ExperimentConfig,
    pool: &LabeledDataset,
    stream: &Stream,
) -> Result<(BackdoorKey, Option<usize>)> {
    match cfg.attack.strategy {
        Strategy::InputInstance => {
            // any pool image from a non-target label works: a wrong key
            // should be an ordinary in-distribution image, the analogue of
            // probing the backdoor with someone else's photo
            let truth = (0..pool.label_count())
                .find(|&l| l != cfg.attack.target_label && !pool.images_of_label(l).is_empty())
                .ok_or_else(|| Error::EmptyEval("no non-target pool images".into()))?;
            let img = pool.images_of_label(truth).pop().expect("non-empty by find");
            let bound = match cfg.attack.key {
                KeySpec::PoolInstance { noise_bound, .. }
                | KeySpec::Foreign { noise_bound, .. } => noise_bound,
                _ => 5.0,
            };
            Ok((
                BackdoorKey::InputInstance(InputInstanceKey::new(img, bound)?),
                Some(truth),
            ))
        }
        _ => {
            // a different accessory: same patch size and mask, but
            // color-inverted and worn lower on the face
            let true_key = build_key_for(cfg, pool, stream)?;
            let BackdoorKey::Pattern(template) = true_key else {
                return Err(Error::Mode("pattern strategy requires a pattern key".into()));
            };
            let (ph, pw, pc) = template.pattern.shape();
            let pixels = template.pattern.pixels().iter().map(|&p| 255 - p).collect();
            let (fh, _, _) = cfg.model.input_shape;
            let anchor = ((fh * 3 / 5).min(fh.saturating_sub(ph)), template.anchor.1);
            let wrong = PatternKey {
                pattern: Image::new(ph, pw, pc, pixels)?,
                anchor,
                ..template
            };
            Ok((BackdoorKey::Pattern(wrong), None))
        }
    }
}

// --- Single experiment -----------------------------------------------------------------

/// Everything one run produces. `runtime_secs` is kept out of the
/// serialized report so re-runs are byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunArtifacts {
    pub report: EvalReport,
    pub pristine_report: EvalReport,
    pub comparison: StealthComparison,
    pub audit: Option<DistributionAudit>,
    pub prune: Option<PruneResult>,
    pub aux_pristine: Option<AuxPristinePair>,
    pub config_hash: String,
    pub dataset_hash: String,
    pub exceeds_injection_budget: bool,
    #[serde(skip)]
    pub runtime_secs: f64,
}

struct Prepared {
    split: SplitBundle,
    init: Model,
    pristine: Model,
    pristine_accuracy: f64,
    key: BackdoorKey,
}

/// Loads (or synthesizes) the configured full dataset.
pub fn load_dataset_for(cfg: &ExperimentConfig, stream: &Stream) -> Result<LabeledDataset> {
    match &cfg.source {
        DatasetSource::Synthetic {
            num_labels,
            per_label,
            frame,
        } => synth_generate(*num_labels, *per_label, *frame, &stream.derive("data", 0)),
        DatasetSource::Idx { images, labels } => load_idx_pair(images, labels),
        DatasetSource::PngTree { root } => load_png_tree(root),
    }
}

/// Splits the data and trains the pristine baseline; everything here
/// depends only on the config and master seed, not on the attack point, so
/// sweeps compute it once per seed.
fn prepare(cfg: &ExperimentConfig, stream: &Stream) -> Result<Prepared> {
    let full = load_dataset_for(cfg, stream).map_err(Error::at_stage("load-dataset"))?;
    let split = split_three_way(
        &full,
        cfg.split.test_per_label,
        cfg.split.pool_per_label,
        &stream.derive("split", 0),
    )
    .map_err(Error::at_stage("split"))?;
    let init = init_model(&cfg.model, &stream.derive("model", 0))
        .map_err(Error::at_stage("init-model"))?;
    let (pristine, _) = train(&init, (&split.train).into(), &split.test, &cfg.train)
        .map_err(Error::at_stage("train-pristine"))?;
    let pristine_accuracy = standard_test_accuracy(&pristine, &split.test, cfg.threshold)
        .map_err(Error::at_stage("evaluate"))?;
    let key = build_key_for(cfg, &split.attacker_pool, stream).map_err(Error::at_stage("build-key"))?;
    Ok(Prepared {
        split,
        init,
        pristine,
        pristine_accuracy,
        key,
    })
}

/// The attack-dependent part of a run, reusing a prepared seed context.
fn run_attack(cfg: &ExperimentConfig, prep: &Prepared, stream: &Stream) -> Result<RunArtifacts> {
    let start = Instant::now();
    let spec = BackdoorSpec::new(
        cfg.attack.strategy,
        prep.key.clone(),
        cfg.attack.target_label,
        cfg.attack.alpha_train,
        cfg.attack.alpha_test,
        cfg.attack.n,
    )
    .map_err(Error::at_stage("attack-spec"))?;

    let pool_images = prep.split.attacker_pool.images();
    let poisons = generate_poisons(&spec, &pool_images, &stream.derive("poisons", 0))
        .map_err(Error::at_stage("generate-poisons"))?;
    let poisoned =
        assemble_poisoned(&prep.split.train, poisons).map_err(Error::at_stage("assemble"))?;

    let (model, _) = train(&prep.init, (&poisoned).into(), &prep.split.test, &cfg.train)
        .map_err(Error::at_stage("train"))?;

    // evaluation pools: attacker-pool images whose ground truth is not the
    // target label, so pattern attacks cannot score on already-target images
    let eval_pairs: Vec<(Image, usize)> = prep
        .split
        .attacker_pool
        .labeled_images()
        .into_iter()
        .filter(|&(_, l)| l != cfg.attack.target_label)
        .collect();
    let eval_images: Vec<Image> = eval_pairs.iter().map(|(img, _)| img.clone()).collect();
    let backdoors = generate_backdoor_instances(
        &spec,
        &eval_images,
        &stream.derive("backdoor", 0),
        cfg.eval_instances,
    )
    .map_err(Error::at_stage("backdoor-instances"))?;

    let wrong = if cfg.wrong_key {
        let (wk, truth) = build_wrong_key(cfg, &prep.split.attacker_pool, stream)
            .map_err(Error::at_stage("build-key"))?;
        Some(
            wrong_key_instances(
                &spec,
                &wk,
                truth,
                &eval_pairs,
                &stream.derive("wrong-key", 0),
                cfg.eval_instances,
            )
            .map_err(Error::at_stage("wrong-key"))?,
        )
    } else {
        None
    };

    let report = evaluate(
        &model,
        &prep.split.test,
        &backdoors,
        wrong.as_deref(),
        cfg.attack.target_label,
        cfg.threshold,
    )
    .map_err(Error::at_stage("evaluate"))?;
    let pristine_report = evaluate(
        &prep.pristine,
        &prep.split.test,
        &backdoors,
        wrong.as_deref(),
        cfg.attack.target_label,
        cfg.threshold,
    )
    .map_err(Error::at_stage("evaluate"))?;
    let comparison =
        compare_to_pristine(&report, &pristine_report).map_err(Error::at_stage("evaluate"))?;

    let audit = if cfg.defenses.audit {
        Some(
            audit_label_distribution(&poisoned.per_label_counts(), cfg.defenses.audit_z)
                .map_err(Error::at_stage("defend"))?,
        )
    } else {
        None
    };
    let prune = cfg
        .defenses
        .prune_eta
        .map(|eta| l2_outlier_prune(&poisoned, eta).map_err(Error::at_stage("defend")))
        .transpose()?;
    let aux_pristine = if cfg.defenses.aux_pristine {
        Some(
            aux_pristine_eval(
                &prep.pristine,
                &poisoned,
                &prep.split.test,
                &backdoors,
                wrong.as_deref(),
                cfg.attack.target_label,
                cfg.threshold,
                &cfg.train,
            )
            .map_err(Error::at_stage("defend"))?,
        )
    } else {
        None
    };

    let artifacts = RunArtifacts {
        report,
        pristine_report,
        comparison,
        audit,
        prune,
        aux_pristine,
        config_hash: cfg.config_hash(),
        dataset_hash: poisoned.base().content_hash(),
        exceeds_injection_budget: poisoned.exceeds_injection_budget(),
        runtime_secs: start.elapsed().as_secs_f64(),
    };
    if let Some(dir) = &cfg.output_dir {
        persist_run(cfg, &poisoned, &model, &artifacts, dir).map_err(Error::at_stage("persist"))?;
    }
    Ok(artifacts)
}

fn persist_run(
    cfg: &ExperimentConfig,
    poisoned: &PoisonedDataset,
    model: &Model,
    artifacts: &RunArtifacts,
    dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let report_path = dir.join("report.json");
    let json = serde_json::to_string_pretty(artifacts)?;
    std::fs::write(&report_path, json).map_err(|e| Error::io(&report_path, e))?;
    let timing_path = dir.join("timing.json");
    std::fs::write(
        &timing_path,
        serde_json::to_string(&serde_json::json!({ "runtime_secs": artifacts.runtime_secs }))?,
    )
    .map_err(|e| Error::io(&timing_path, e))?;
    write_manifest(&manifest_of_poisoned(poisoned), &dir.join("manifest.json"))?;
    save_model(model, &dir.join("model.bfm1"))?;
    let cfg_path = dir.join("config.json");
    std::fs::write(&cfg_path, serde_json::to_string_pretty(cfg)?)
        .map_err(|e| Error::io(&cfg_path, e))
}

/// Full pipeline: load -> split -> key -> poisons -> train (poisoned and
/// pristine under identical seeds) -> backdoor instances -> metrics ->
/// optional defenses -> persisted artifacts.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunArtifacts> {
    cfg.validate()?;
    let stream = Stream::new(cfg.master_seed);
    let prep = prepare(cfg, &stream)?;
    // same derivation as grid point 0 of a sweep, so a 1-point sweep
    // reproduces this run exactly
    run_attack(cfg, &prep, &stream.derive("grid", 0))
}

// --- Sweeps ------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub base: ExperimentConfig,
    pub n_values: Vec<usize>,
    pub alpha_train_values: Vec<f64>,
    pub alpha_test_values: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if self.n_values.is_empty()
            || self.alpha_train_values.is_empty()
            || self.alpha_test_values.is_empty()
            || self.seeds.is_empty()
        {
            return Err(Error::Config("sweep grid axes must be non-empty".into()));
        }
        Ok(())
    }

    pub fn grid_points(&self) -> Vec<(usize, f64, f64)> {
        let mut points = Vec::new();
        for &at in &self.alpha_train_values {
            for &n in &self.n_values {
                for &ae in &self.alpha_test_values {
                    points.push((n, at, ae));
                }
            }
        }
        points
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub strategy: Strategy,
    pub pattern: String,
    pub n: usize,
    pub alpha_train: f64,
    pub alpha_test: f64,
    pub seed: u64,
    /// Cross-subject extras; None for ordinary sweeps.
    pub held_out: Option<usize>,
    pub m: Option<usize>,
    pub attack_success_rate: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub wrong_key_rate: Option<f64>,
    pub not_sure_fraction: Option<f64>,
    pub pristine_accuracy: Option<f64>,
    pub runtime_secs: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

fn key_name(key: &KeySpec) -> String {
    match key {
        KeySpec::PoolInstance { label, index, .. } => format!("pool-{label}-{index}"),
        KeySpec::Foreign { tag, .. } => format!("foreign-{tag}"),
        KeySpec::Glasses { .. } => "glasses".into(),
        KeySpec::TexturedGlasses { tag } => format!("textured-glasses-{tag}"),
        KeySpec::Solid { value } => format!("solid-{value}"),
        KeySpec::Noise => "noise".into(),
        KeySpec::File { dir } => dir.display().to_string(),
    }
}

fn strategy_name(s: Strategy) -> &'static str {
    match s {
        Strategy::InputInstance => "input-instance",
        Strategy::Blended => "blended",
        Strategy::Accessory => "accessory",
        Strategy::BlendedAccessory => "blended-accessory",
    }
}

fn sort_rows(rows: &mut [SweepRow]) {
    rows.sort_by(|a, b| {
        strategy_name(a.strategy)
            .cmp(strategy_name(b.strategy))
            .then(a.pattern.cmp(&b.pattern))
            .then(a.alpha_train.total_cmp(&b.alpha_train))
            .then(a.n.cmp(&b.n))
            .then(a.alpha_test.total_cmp(&b.alpha_test))
            .then(a.seed.cmp(&b.seed))
            .then(a.held_out.cmp(&b.held_out))
            .then(a.m.cmp(&b.m))
    });
}

fn worker_count() -> usize {
    std::env::var("POISONLAB_WORKERS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs every grid point under every seed. The pristine baseline, split and
/// key are computed once per seed and shared across grid points; points
/// within a seed run in parallel (worker count from POISONLAB_WORKERS).
/// Failures are recorded in the row's `error` column and the sweep
/// continues.
pub fn run_sweep(cfg: &SweepConfig) -> Result<SweepTable> {
    cfg.validate()?;
    let points = cfg.grid_points();
    if points.len() > 200 {
        eprintln!(
            "warning: sweep grid has {} points; this may take a while",
            points.len()
        );
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count())
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;

    let mut rows = Vec::with_capacity(points.len() * cfg.seeds.len());
    for &seed in &cfg.seeds {
        let mut seed_cfg = cfg.base.clone();
        seed_cfg.master_seed = seed;
        seed_cfg.train.seed = seed;
        seed_cfg.output_dir = None;
        let stream = Stream::new(seed);
        let prep = prepare(&seed_cfg, &stream)?;
        let seed_rows: Vec<SweepRow> = pool.install(|| {
            points
                .par_iter()
                .enumerate()
                .map(|(pi, &(n, alpha_train, alpha_test))| {
                    let mut point_cfg = seed_cfg.clone();
                    point_cfg.attack.n = n;
                    point_cfg.attack.alpha_train = alpha_train;
                    point_cfg.attack.alpha_test = alpha_test;
                    let start = Instant::now();
                    let outcome =
                        run_attack(&point_cfg, &prep, &stream.derive("grid", pi as u64));
                    let mut row = SweepRow {
                        strategy: point_cfg.attack.strategy,
                        pattern: key_name(&point_cfg.attack.key),
                        n,
                        alpha_train,
                        alpha_test,
                        seed,
                        held_out: None,
                        m: None,
                        attack_success_rate: None,
                        test_accuracy: None,
                        wrong_key_rate: None,
                        not_sure_fraction: None,
                        pristine_accuracy: Some(prep.pristine_accuracy),
                        runtime_secs: start.elapsed().as_secs_f64(),
                        error: None,
                    };
                    match outcome {
                        Ok(artifacts) => {
                            row.attack_success_rate = Some(artifacts.report.attack_success_rate);
                            row.test_accuracy = Some(artifacts.report.test_accuracy);
                            row.wrong_key_rate = artifacts.report.wrong_key_rate;
                            row.not_sure_fraction = Some(artifacts.report.not_sure_fraction);
                        }
                        Err(e) => row.error = Some(e.to_string()),
                    }
                    row
                })
                .collect()
        });
        rows.extend(seed_rows);
    }
    sort_rows(&mut rows);
    Ok(SweepTable { rows })
}

// --- Cross-subject protocol ------------------------------------------------------------

/// Leave-one-out cross-subject runs: for each held-out subject and each m,
/// poisons come from the other subjects' injected images plus m injected
/// attacker-pool images; evaluation uses the held-out subject's injected
/// images. Requires a pattern strategy.
pub fn run_cross_subject(
    cfg: &ExperimentConfig,
    subject_pools: &[Vec<Image>],
    m_values: &[usize],
) -> Result<SweepTable> {
    cfg.validate()?;
    if cfg.attack.strategy == Strategy::InputInstance {
        return Err(Error::Mode(
            "cross-subject runs require a pattern strategy".into(),
        ));
    }
    if m_values.is_empty() {
        return Err(Error::Config("m_values must be non-empty".into()));
    }
    let stream = Stream::new(cfg.master_seed);
    let prep = prepare(cfg, &stream)?;
    let spec_key = prep.key.clone();
    let train_identities = prep.split.train.identity_set();

    let mut rows = Vec::new();
    for held_out in 0..subject_pools.len() {
        let (poison_source, eval_source) = leave_one_out_pools(subject_pools, held_out)?;
        // the held-out subject must not leak into training data
        for img in &eval_source {
            let identity = format!("{}:{}", img.content_hash(), cfg.attack.target_label);
            if train_identities.contains(&identity) {
                return Err(Error::Protocol(format!(
                    "held-out subject {held_out} appears in training data"
                )));
            }
        }
        for &m in m_values {
            let start = Instant::now();
            let outcome = cross_subject_point(
                cfg,
                &prep,
                &spec_key,
                &poison_source,
                &eval_source,
                m,
                &stream.derive("cross", (held_out * m_values.len() + m) as u64),
            );
            let mut row = SweepRow {
                strategy: cfg.attack.strategy,
                pattern: key_name(&cfg.attack.key),
                n: poison_source.len() + m,
                alpha_train: cfg.attack.alpha_train,
                alpha_test: cfg.attack.alpha_test,
                seed: cfg.master_seed,
                held_out: Some(held_out),
                m: Some(m),
                attack_success_rate: None,
                test_accuracy: None,
                wrong_key_rate: None,
                not_sure_fraction: None,
                pristine_accuracy: Some(prep.pristine_accuracy),
                runtime_secs: start.elapsed().as_secs_f64(),
                error: None,
            };
            match outcome {
                Ok((rate, accuracy)) => {
                    row.attack_success_rate = Some(rate);
                    row.test_accuracy = Some(accuracy);
                }
                Err(e) => row.error = Some(e.to_string()),
            }
            rows.push(row);
        }
    }
    sort_rows(&mut rows);
    Ok(SweepTable { rows })
}

fn cross_subject_point(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    key: &BackdoorKey,
    poison_source: &[Image],
    eval_source: &[Image],
    m: usize,
    stream: &Stream,
) -> Result<(f64, f64)> {
    let spec = BackdoorSpec::new(
        cfg.attack.strategy,
        key.clone(),
        cfg.attack.target_label,
        cfg.attack.alpha_train,
        cfg.attack.alpha_test,
        (poison_source.len() + m).max(1),
    )?;
    let mut poisons: Vec<PoisoningSample> = Vec::with_capacity(poison_source.len() + m);
    for img in poison_source {
        poisons.push(PoisoningSample {
            instance: inject(&spec, img, cfg.attack.alpha_train)?,
            label: cfg.attack.target_label,
            origin: PoisonOrigin {
                strategy: cfg.attack.strategy,
                source_hash: Some(img.content_hash()),
                alpha: Some(cfg.attack.alpha_train),
            },
        });
    }
    if m > 0 {
        let pool_images = prep.split.attacker_pool.images();
        if pool_images.len() < m {
            return Err(Error::InsufficientPool {
                needed: m,
                available: pool_images.len(),
            });
        }
        let mut rng = stream.derive("extra", 0).rng();
        for idx in rand::seq::index::sample(&mut rng, pool_images.len(), m) {
            let img = &pool_images[idx];
            poisons.push(PoisoningSample {
                instance: inject(&spec, img, cfg.attack.alpha_train)?,
                label: cfg.attack.target_label,
                origin: PoisonOrigin {
                    strategy: cfg.attack.strategy,
                    source_hash: Some(img.content_hash()),
                    alpha: Some(cfg.attack.alpha_train),
                },
            });
        }
    }
    let poisoned = assemble_poisoned(&prep.split.train, poisons)?;
    let (model, _) = train(&prep.init, (&poisoned).into(), &prep.split.test, &cfg.train)?;
    let backdoors: Vec<Image> = eval_source
        .iter()
        .map(|img| inject(&spec, img, cfg.attack.alpha_test))
        .collect::<Result<_>>()?;
    let rate = crate::evaluation::attack_success_rate(
        &model,
        &backdoors,
        cfg.attack.target_label,
        cfg.threshold,
    )?;
    let accuracy = standard_test_accuracy(&model, &prep.split.test, cfg.threshold)?;
    Ok((rate, accuracy))
}

// --- CSV / plot emission ------------------------------------------------------------------

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x}"))
}

pub fn write_sweep_csv(table: &SweepTable, path: &Path) -> Result<()> {
    let mut out = String::from(
        "strategy,pattern,n,alpha_train,alpha_test,seed,held_out,m,attack_success_rate,test_accuracy,wrong_key_rate,not_sure_fraction,pristine_accuracy,runtime_secs,error\n",
    );
    for r in &table.rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            strategy_name(r.strategy),
            r.pattern,
            r.n,
            r.alpha_train,
            r.alpha_test,
            r.seed,
            r.held_out.map_or_else(String::new, |v| v.to_string()),
            r.m.map_or_else(String::new, |v| v.to_string()),
            fmt_opt(r.attack_success_rate),
            fmt_opt(r.test_accuracy),
            fmt_opt(r.wrong_key_rate),
            fmt_opt(r.not_sure_fraction),
            fmt_opt(r.pristine_accuracy),
            r.runtime_secs,
            r.error.clone().unwrap_or_default().replace(',', ";"),
        )
        .expect("string write");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_sweep_json(table: &SweepTable, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(table)?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotAxis {
    N,
    AlphaTest,
    M,
}

impl PlotAxis {
    pub fn parse(name: &str) -> Result<PlotAxis> {
        match name {
            "n" => Ok(PlotAxis::N),
            "alpha_test" => Ok(PlotAxis::AlphaTest),
            "m" => Ok(PlotAxis::M),
            other => Err(Error::Config(format!("unknown plot axis '{other}'"))),
        }
    }
}

/// One CSV per series: x = the chosen axis, y = mean success rate over
/// seeds, plus min/max spread. Series are keyed by every other grid field.
pub fn emit_plot_data(table: &SweepTable, axis: PlotAxis, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    // series key -> x -> rates
    let mut series: BTreeMap<String, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    for r in &table.rows {
        let Some(rate) = r.attack_success_rate else {
            continue;
        };
        let (x, key) = match axis {
            PlotAxis::N => (
                format!("{}", r.n),
                format!(
                    "{}-{}-at{}-ae{}",
                    strategy_name(r.strategy),
                    r.pattern,
                    r.alpha_train,
                    r.alpha_test
                ),
            ),
            PlotAxis::AlphaTest => (
                format!("{}", r.alpha_test),
                format!(
                    "{}-{}-at{}-n{}",
                    strategy_name(r.strategy),
                    r.pattern,
                    r.alpha_train,
                    r.n
                ),
            ),
            PlotAxis::M => (
                r.m.map_or_else(String::new, |m| m.to_string()),
                format!(
                    "{}-{}-subject{}",
                    strategy_name(r.strategy),
                    r.pattern,
                    r.held_out.map_or_else(String::new, |h| h.to_string())
                ),
            ),
        };
        series.entry(key).or_default().entry(x).or_default().push(rate);
    }
    let mut written = Vec::new();
    if series.is_empty() {
        let path = dir.join("empty.csv");
        std::fs::write(&path, "x,mean,min,max,count\n").map_err(|e| Error::io(&path, e))?;
        written.push(path);
        return Ok(written);
    }
    for (key, points) in series {
        let mut out = String::from("x,mean,min,max,count\n");
        let mut sorted: Vec<(f64, &Vec<f64>)> = points
            .iter()
            .map(|(x, rates)| (x.parse::<f64>().unwrap_or(f64::NAN), rates))
            .collect();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        for (x, rates) in sorted {
            let mean = rates.iter().sum::<f64>() / rates.len() as f64;
            let min = rates.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = rates.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            writeln!(out, "{x},{mean},{min},{max},{}", rates.len()).expect("string write");
        }
        let path = dir.join(format!("{}.csv", key.replace(['/', ' '], "_")));
        std::fs::write(&path, out).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

// --- Presets ----------------------------------------------------------------------------

/// A named, ready-to-run experiment shape.
pub enum Preset {
    Single(ExperimentConfig),
    Sweep(SweepConfig),
    CrossSubject {
        config: ExperimentConfig,
        subjects: usize,
        images_per_subject: usize,
        m_values: Vec<usize>,
    },
}

pub const PRESET_NAMES: &[&str] = &[
    "iik-baseline",
    "blend-sweep",
    "accessory-sweep",
    "ba-sweep",
    "physical-digital",
    "defense-suite",
];

fn default_base(master_seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        source: DatasetSource::Synthetic {
            num_labels: 10,
            per_label: 130,
            frame: (32, 32, 3),
        },
        split: SplitParams {
            test_per_label: 10,
            pool_per_label: 20,
        },
        model: ModelSpec {
            arch: crate::training::Arch::CnnMicro,
            input_shape: (32, 32, 3),
            num_labels: 10,
        },
        train: TrainConfig {
            seed: master_seed,
            ..TrainConfig::default()
        },
        attack: AttackConfig {
            strategy: Strategy::InputInstance,
            key: KeySpec::PoolInstance {
                label: 0,
                index: 0,
                noise_bound: 5.0,
            },
            target_label: 7,
            alpha_train: 1.0,
            alpha_test: 1.0,
            n: 5,
        },
        threshold: 0.85,
        eval_instances: 20,
        wrong_key: true,
        defenses: DefenseToggles::default(),
        output_dir: None,
        master_seed,
    }
}

/// Built-in experiment shapes, one per studied protocol.
pub fn preset(name: &str, master_seed: u64) -> Result<Preset> {
    let base = default_base(master_seed);
    match name {
        "iik-baseline" => Ok(Preset::Single(base)),
        "blend-sweep" => {
            let mut cfg = base;
            cfg.attack.strategy = Strategy::Blended;
            cfg.attack.key = KeySpec::Noise;
            cfg.attack.alpha_train = 0.2;
            cfg.attack.alpha_test = 0.2;
            Ok(Preset::Sweep(SweepConfig {
                base: cfg,
                n_values: vec![5, 15, 45, 135],
                alpha_train_values: vec![0.2],
                alpha_test_values: vec![0.1, 0.2, 0.5],
                seeds: vec![master_seed, master_seed + 1, master_seed + 2],
            }))
        }
        "accessory-sweep" => {
            let mut cfg = base;
            cfg.attack.strategy = Strategy::Accessory;
            cfg.attack.key = KeySpec::Glasses { value: 200 };
            cfg.attack.alpha_train = 1.0;
            cfg.attack.alpha_test = 1.0;
            Ok(Preset::Sweep(SweepConfig {
                base: cfg,
                n_values: vec![5, 15, 45, 100],
                alpha_train_values: vec![1.0],
                alpha_test_values: vec![1.0],
                seeds: vec![master_seed, master_seed + 1, master_seed + 2],
            }))
        }
        "ba-sweep" => {
            let mut cfg = base;
            cfg.attack.strategy = Strategy::BlendedAccessory;
            cfg.attack.key = KeySpec::Glasses { value: 200 };
            cfg.attack.alpha_train = 0.2;
            cfg.attack.alpha_test = 1.0;
            Ok(Preset::Sweep(SweepConfig {
                base: cfg,
                n_values: vec![5, 15, 45, 100],
                alpha_train_values: vec![0.2],
                alpha_test_values: vec![1.0],
                seeds: vec![master_seed, master_seed + 1, master_seed + 2],
            }))
        }
        "physical-digital" => {
            let mut cfg = base;
            cfg.attack.strategy = Strategy::BlendedAccessory;
            cfg.attack.key = KeySpec::Glasses { value: 200 };
            cfg.attack.alpha_train = 0.2;
            cfg.attack.alpha_test = 1.0;
            Ok(Preset::CrossSubject {
                config: cfg,
                subjects: 5,
                images_per_subject: 20,
                m_values: vec![0, 20, 80],
            })
        }
        "defense-suite" => {
            let mut cfg = base;
            cfg.defenses = DefenseToggles {
                audit: true,
                audit_z: 3.0,
                prune_eta: Some(0.05),
                aux_pristine: true,
            };
            Ok(Preset::Single(cfg))
        }
        other => Err(Error::Config(format!(
            "unknown preset '{other}'; expected one of {PRESET_NAMES:?}"
        ))),
    }
}

/// Synthetic held-out identities for cross-subject runs, one pool per
/// subject, disjoint from the classifier's label space.
pub fn synth_subject_pools(
    cfg: &ExperimentConfig,
    subjects: usize,
    images_per_subject: usize,
) -> Vec<Vec<Image>> {
    let stream = Stream::new(cfg.master_seed).derive("subjects", 0);
    (0..subjects)
        .map(|s| {
            crate::datasets::synth_foreign_identity(
                s as u64,
                images_per_subject,
                cfg.model.input_shape,
                &stream,
            )
        })
        .collect()
}

/// Dumps poisoning samples as PNGs alongside a manifest, for inspection.
pub fn dump_poisons(poisons: &[PoisoningSample], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, p) in poisons.iter().enumerate() {
        imaging::write_png(&p.instance, &dir.join(format!("poison-{i:04}.png")))?;
    }
    let meta: Vec<_> = poisons
        .iter()
        .map(|p| serde_json::json!({ "label": p.label, "origin": p.origin }))
        .collect();
    let path = dir.join("poisons.json");
    std::fs::write(&path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&path, e))
}
