//! Experiment orchestration behind the `uninfo` binary: corrupted-stream caching,
//! adaptation runs over (kind, seed) pairs, hyperparameter sweeps and no-adapt
//! evaluation.
//!
//! Everything is driven by one JSON [`ExperimentConfig`]. Its defaults are the
//! reference hyperparameters (lr 1e-3, weight decay 0.01, batch 64, lambda 1, i0 3,
//! EMA momentum 1e-3, temperature 0.01); the `configs/` directory of the repository
//! holds a calibrated desk-scale setting.
//!
//! Output layout under `out_dir`:
//!
//! ```text
//! streams/<kind>-s<severity>-seed<seed>/   corrupted dataset archive + spec.json
//! stems/<hash>/                            pretrained stem cache
//! runs/<preset>/<kind>/seed<seed>/         metrics.csv, checkpoint/, result.json,
//!                                          diagnostics.csv, spca.csv
//! runs/<preset>/summary.csv                per-kind mean and std over seeds
//! sweep_<param>.csv                        value, mean, std
//! eval.csv                                 no-adapt evaluation
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::archive::{self, write_atomic};
use crate::corrupt::{CorruptionKind, CorruptionSpec};
use crate::dataset::{toy_shapes, Dataset};
use crate::diagnostics::{self, collect_batch_metrics, DiagnosticsReport, EmdConfig};
use crate::encoder::{Encoder, EncoderConfig, LoraConfig, StemWeights};
use crate::error::{Error, Result};
use crate::metrics::write_metrics_csv;
use crate::objectives::BalanceConfig;
use crate::par::{self, Exec};
use crate::pretrain::{load_stem, pretrain_stem, save_stem, PretrainConfig};
use crate::prompt_bank::{load_bank, make_toy_bank};
use crate::seeds;
use crate::sphere::{zero_shot_probs, PrototypeBank};
use crate::tta::{evaluate, run_stream, save_checkpoint, EvalReport, MetricsRecord, TTAConfig, TTAState};

/// Named loss configurations for ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[default]
    Full,
    EntOnly,
    EntPl,
    EntUnifPl,
    /// Full objective with balancing switched off. Numerically the same as
    /// [`Preset::EntUnifPl`].
    NoBalancing,
}

impl Preset {
    pub const ALL: [Preset; 5] = [
        Preset::Full,
        Preset::EntOnly,
        Preset::EntPl,
        Preset::EntUnifPl,
        Preset::NoBalancing,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Full => "full",
            Preset::EntOnly => "ent_only",
            Preset::EntPl => "ent_pl",
            Preset::EntUnifPl => "ent_unif_pl",
            Preset::NoBalancing => "no_balancing",
        }
    }

    /// Switches loss terms on `base`, keeping `lambda` and `i0`.
    pub fn apply(self, base: BalanceConfig) -> BalanceConfig {
        let (balancing, unif, pl) = match self {
            Preset::Full => (true, true, true),
            Preset::EntOnly => (false, false, false),
            Preset::EntPl => (false, false, true),
            Preset::EntUnifPl | Preset::NoBalancing => (false, true, true),
        };
        BalanceConfig {
            balancing_enabled: balancing,
            unif_enabled: unif,
            pl_enabled: pl,
            ..base
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown preset `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Procedurally generated shapes.
    Toy { n: usize, image_size: usize, seed: u64 },
    /// Dataset archive or PNG class folder.
    Path(PathBuf),
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSource::Toy { n, image_size, seed } => Ok(toy_shapes(*n, *image_size, *seed)),
            DataSource::Path(p) => Dataset::load(p),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrototypeSource {
    /// Seeded random orthonormal prototypes, one per dataset class.
    Toy { seed: u64 },
    /// Archive holding `text_embeddings` (`P x C x d`).
    Path(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StemSource {
    /// Stem archive written by a previous pretraining.
    Checkpoint(PathBuf),
    /// Pretrain on clean labeled data (cached under `out_dir/stems`).
    Pretrain {
        #[serde(default)]
        encoder: EncoderConfig,
        data: DataSource,
        #[serde(default)]
        config: PretrainConfig,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorruptionConfig {
    pub kinds: Vec<CorruptionKind>,
    pub severity: u8,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        Self {
            kinds: vec![CorruptionKind::GaussianNoise],
            severity: 5,
        }
    }
}

/// Which accuracy sweeps and summaries rank by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AccuracyMode {
    /// Teacher accuracy on each batch before the update that uses it.
    Online,
    /// Final teacher re-scored on the whole stream.
    #[default]
    PostHoc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DataSource,
    pub prototypes: PrototypeSource,
    pub temperature: f32,
    pub stem: StemSource,
    pub lora: LoraConfig,
    pub tta: TTAConfig,
    pub corruption: CorruptionConfig,
    pub preset: Preset,
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub accuracy: AccuracyMode,
    pub emd: EmdConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let toy = DataSource::Toy {
            n: 1024,
            image_size: 32,
            seed: 100,
        };
        Self {
            dataset: toy,
            prototypes: PrototypeSource::Toy { seed: 7 },
            temperature: 0.01,
            stem: StemSource::Pretrain {
                encoder: EncoderConfig::default(),
                data: DataSource::Toy {
                    n: 3072,
                    image_size: 32,
                    seed: 1,
                },
                config: PretrainConfig::default(),
            },
            lora: LoraConfig::default(),
            tta: TTAConfig::default(),
            corruption: CorruptionConfig::default(),
            preset: Preset::Full,
            out_dir: PathBuf::from("runs"),
            seeds: vec![1, 2, 3],
            accuracy: AccuracyMode::PostHoc,
            emd: EmdConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must be non-empty".into()));
        }
        if self.corruption.kinds.is_empty() {
            return Err(Error::EmptyKinds);
        }
        if !(1..=5).contains(&self.corruption.severity) {
            return Err(Error::Config(format!(
                "severity {} not in 1..=5",
                self.corruption.severity
            )));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be > 0".into()));
        }
        if let StemSource::Pretrain { encoder, .. } = &self.stem {
            encoder.validate()?;
        }
        self.tta.validate().map_err(|e| match e {
            Error::Config(m) => Error::Config(m),
            other => Error::Config(other.to_string()),
        })
    }
}

/// Loaded inputs shared by every run of an experiment.
pub struct Workspace {
    pub config: ExperimentConfig,
    pub clean: Dataset,
    pub bank: PrototypeBank,
    pub stem: StemWeights,
    pub exec: Exec,
}

/// Parallelism for outer (per-run) and inner (per-image) work.
pub fn env_exec() -> Exec {
    if par::env_threads() > 1 {
        Exec::Parallel
    } else {
        Exec::Sequential
    }
}

impl Workspace {
    pub fn open(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let exec = env_exec();
        let clean = config.dataset.load()?;
        let bank = build_bank(&config, clean.num_classes(), stem_dim(&config)?)?;
        if bank.num_classes() != clean.num_classes() {
            return Err(Error::Config(format!(
                "bank has {} classes, dataset {}",
                bank.num_classes(),
                clean.num_classes()
            )));
        }
        let stem = obtain_stem(&config, &bank, exec)?;
        if stem.config.embed_dim != bank.dim() {
            return Err(Error::Config(format!(
                "stem embeds into {} dims, prototypes have {}",
                stem.config.embed_dim,
                bank.dim()
            )));
        }
        if clean.image_size() != (stem.config.image_size, stem.config.image_size) {
            return Err(Error::Config(format!(
                "dataset images are {:?}, stem expects {}",
                clean.image_size(),
                stem.config.image_size
            )));
        }
        Ok(Self {
            config,
            clean,
            bank,
            stem,
            exec,
        })
    }
}

fn stem_dim(cfg: &ExperimentConfig) -> Result<usize> {
    match &cfg.stem {
        StemSource::Pretrain { encoder, .. } => Ok(encoder.embed_dim),
        StemSource::Checkpoint(p) => {
            let enc: EncoderConfig = archive::read_json(&p.join("encoder.json"))?;
            Ok(enc.embed_dim)
        }
    }
}

fn build_bank(cfg: &ExperimentConfig, classes: usize, dim: usize) -> Result<PrototypeBank> {
    match &cfg.prototypes {
        PrototypeSource::Toy { seed } => make_toy_bank(classes, dim, *seed, cfg.temperature),
        PrototypeSource::Path(p) => load_bank(p, cfg.temperature),
    }
}

fn hash_json<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn obtain_stem(cfg: &ExperimentConfig, bank: &PrototypeBank, exec: Exec) -> Result<StemWeights> {
    match &cfg.stem {
        StemSource::Checkpoint(p) => load_stem(p),
        StemSource::Pretrain { encoder, data, config } => {
            let key = hash_json(&(encoder, data, config, &cfg.prototypes, cfg.temperature))?;
            let dir = cfg.out_dir.join("stems").join(&key[..16]);
            if dir.join(archive::MANIFEST).is_file() {
                info!("using cached stem {}", dir.display());
                return load_stem(&dir);
            }
            let train = data.load()?;
            info!("pretraining stem on {} images", train.len());
            let (stem, report) = pretrain_stem(*encoder, &train, bank, config, exec)?;
            save_stem(&dir, &stem)?;
            archive::write_json(&dir.join("pretrain.json"), &report)?;
            Ok(stem)
        }
    }
}

/// Record of one corrupted stream on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamSpec {
    pub spec: CorruptionSpec,
    pub source_hash: String,
    pub images: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamEntry {
    pub kind: CorruptionKind,
    pub seed: u64,
    pub dir: PathBuf,
    pub cached: bool,
}

const STREAM_SPEC: &str = "spec.json";

pub fn stream_dir(out: &Path, kind: CorruptionKind, severity: u8, seed: u64) -> PathBuf {
    out.join("streams").join(format!("{kind}-s{severity}-seed{seed}"))
}

/// Writes one corrupted archive per (kind, seed), skipping archives whose recorded
/// spec and source hash already match.
pub fn cmd_corrupt(cfg: &ExperimentConfig) -> Result<Vec<StreamEntry>> {
    cfg.validate()?;
    let clean = cfg.dataset.load()?;
    corrupt_streams(cfg, &clean)
}

fn corrupt_streams(cfg: &ExperimentConfig, clean: &Dataset) -> Result<Vec<StreamEntry>> {
    let hash = clean.content_hash();
    let mut out = Vec::new();
    for &kind in &cfg.corruption.kinds {
        for &seed in &cfg.seeds {
            let spec = CorruptionSpec::new(kind, cfg.corruption.severity, seed)?;
            let record = StreamSpec {
                spec: spec.clone(),
                source_hash: hash.clone(),
                images: clean.len(),
            };
            let dir = stream_dir(&cfg.out_dir, kind, cfg.corruption.severity, seed);
            let spec_path = dir.join(STREAM_SPEC);
            let cached = spec_path.is_file()
                && archive::read_json::<StreamSpec>(&spec_path).ok().as_ref() == Some(&record)
                && dir.join(archive::MANIFEST).is_file();
            if cached {
                info!("stream {} is cached", dir.display());
            } else {
                clean.corrupted(&spec)?.save(&dir)?;
                archive::write_json(&spec_path, &record)?;
                info!("wrote stream {}", dir.display());
            }
            out.push(StreamEntry { kind, seed, dir, cached });
        }
    }
    archive::write_json(
        &cfg.out_dir.join("streams").join("streams.json"),
        &out.iter().map(|e| (e.dir.display().to_string(), e.kind, e.seed)).collect::<Vec<_>>(),
    )?;
    Ok(out)
}

/// Outcome of one adaptation stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub kind: CorruptionKind,
    pub seed: u64,
    pub preset: Preset,
    pub steps: usize,
    pub no_adapt_accuracy: Option<f64>,
    pub online_accuracy: Option<f64>,
    pub post_hoc_accuracy: Option<f64>,
    pub no_adapt: EvalReport,
    pub adapted: EvalReport,
}

impl RunResult {
    pub fn accuracy(&self, mode: AccuracyMode) -> Option<f64> {
        match mode {
            AccuracyMode::Online => self.online_accuracy,
            AccuracyMode::PostHoc => self.post_hoc_accuracy,
        }
    }
}

pub fn run_dir(out: &Path, preset: Preset, kind: CorruptionKind, seed: u64) -> PathBuf {
    out.join("runs").join(preset.name()).join(kind.name()).join(format!("seed{seed}"))
}

/// Adaptation state written next to a failed run.
#[derive(Debug, Serialize)]
struct FailureDump<'a> {
    error: String,
    step: u64,
    last_records: &'a [MetricsRecord],
}

/// Adapts one stream and writes its outputs into `dir`.
pub fn run_one(ws: &Workspace, stream: &Dataset, kind: CorruptionKind, seed: u64, dir: &Path) -> Result<RunResult> {
    let cfg = &ws.config;
    let mut tta = cfg.tta.clone();
    tta.balance = cfg.preset.apply(tta.balance);
    tta.seed = seed;
    tta.exec = ws.exec;
    let lora = LoraConfig {
        seed: seeds::derive(cfg.lora.seed, &[seeds::label("lora"), seed]),
        ..cfg.lora.clone()
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut state = TTAState::new(&lora, &ws.stem.config, tta.momentum)?;
    let batches = stream.batches(tta.batch_size);
    let mut seen = Vec::new();
    let res = run_stream(&mut state, &ws.stem, &batches, &ws.bank, &tta, |r| {
        seen.push(r.clone());
        Ok(())
    });
    let res = match res {
        Ok(r) => r,
        Err(e) => {
            if matches!(e, Error::NumericFailure(_)) {
                let dump = dir.join("failure");
                warn!("numeric failure; dumping state to {}", dump.display());
                save_checkpoint(&dump.join("checkpoint"), &state, &lora)?;
                write_metrics_csv(&dump.join("metrics.csv"), &seen)?;
                let tail = &seen[seen.len().saturating_sub(8)..];
                archive::write_json(
                    &dump.join("state.json"),
                    &FailureDump {
                        error: e.to_string(),
                        step: state.step,
                        last_records: tail,
                    },
                )?;
            }
            return Err(e);
        }
    };
    write_metrics_csv(&dir.join("metrics.csv"), &res.records)?;
    save_checkpoint(&dir.join("checkpoint"), &state, &lora)?;
    let bs = tta.batch_size;
    let no_adapt = evaluate(&ws.stem, None, stream, &ws.bank, bs, ws.exec)?;
    let adapted = evaluate(&ws.stem, Some(&state.teacher.ema), stream, &ws.bank, bs, ws.exec)?;
    write_diagnostics(ws, stream, &state, dir)?;
    let result = RunResult {
        kind,
        seed,
        preset: cfg.preset,
        steps: res.records.len(),
        no_adapt_accuracy: no_adapt.accuracy,
        online_accuracy: res.online_accuracy,
        post_hoc_accuracy: adapted.accuracy,
        no_adapt,
        adapted,
    };
    archive::write_json(&dir.join("result.json"), &result)?;
    Ok(result)
}

/// Diagnostics on the first batch of the stream, before and after adaptation, plus
/// a spherical-PCA projection of the adapted embeddings and the prototypes.
fn write_diagnostics(ws: &Workspace, stream: &Dataset, state: &TTAState, dir: &Path) -> Result<()> {
    let head = stream.head(ws.config.tta.batch_size);
    let labels = head.labels.as_deref();
    let mut reports: Vec<DiagnosticsReport> = Vec::new();
    let mut z_last = None;
    for lora in [None, Some(&state.teacher.ema)] {
        let z = Encoder::new(&ws.stem, lora)?.embed(head.images.view(), ws.exec)?;
        let p = zero_shot_probs(&z, &ws.bank)?;
        reports.push(collect_batch_metrics(&z, &p, &ws.bank, labels, &ws.config.emd)?);
        z_last = Some(z);
    }
    diagnostics::write_reports_csv(
        &dir.join("diagnostics.csv"),
        &["no_adapt".into(), "adapted".into()],
        &reports,
        ws.bank.class_names(),
    )?;
    let z = z_last.expect("two passes");
    let proj = diagnostics::project_batch(&z, &ws.bank)?;
    diagnostics::write_projection_csv(&dir.join("spca.csv"), &proj)
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per-kind aggregate across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub kind: String,
    pub seeds: usize,
    pub no_adapt_mean: f64,
    pub no_adapt_std: f64,
    pub online_mean: f64,
    pub online_std: f64,
    pub post_hoc_mean: f64,
    pub post_hoc_std: f64,
}

pub fn summarize(results: &[RunResult]) -> Vec<SummaryRow> {
    let mut by_kind: BTreeMap<CorruptionKind, Vec<&RunResult>> = BTreeMap::new();
    for r in results {
        by_kind.entry(r.kind).or_default().push(r);
    }
    let row = |kind: String, rs: &[&RunResult]| {
        let pick = |f: &dyn Fn(&RunResult) -> Option<f64>| mean_std(&rs.iter().filter_map(|r| f(r)).collect::<Vec<_>>());
        let (na, nas) = pick(&|r| r.no_adapt_accuracy);
        let (on, ons) = pick(&|r| r.online_accuracy);
        let (ph, phs) = pick(&|r| r.post_hoc_accuracy);
        SummaryRow {
            kind,
            seeds: rs.len(),
            no_adapt_mean: na,
            no_adapt_std: nas,
            online_mean: on,
            online_std: ons,
            post_hoc_mean: ph,
            post_hoc_std: phs,
        }
    };
    let mut rows: Vec<SummaryRow> = by_kind.iter().map(|(k, rs)| row(k.name().to_string(), rs)).collect();
    let all: Vec<&RunResult> = results.iter().collect();
    rows.push(row("mean".into(), &all));
    rows
}

fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::InvalidArgument(format!("csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(format!("csv: {e}")))?;
    write_atomic(path, &bytes)
}

/// Runs the configured preset over every (kind, seed) pair.
pub fn cmd_run(cfg: &ExperimentConfig) -> Result<Vec<RunResult>> {
    let ws = Workspace::open(cfg.clone())?;
    run_workspace(&ws)
}

pub fn run_workspace(ws: &Workspace) -> Result<Vec<RunResult>> {
    let cfg = &ws.config;
    let streams = corrupt_streams(cfg, &ws.clean)?;
    let results: Vec<Result<RunResult>> = par::map_slice(ws.exec, &streams, |s| {
        let data = Dataset::load(&s.dir)?;
        let dir = run_dir(&cfg.out_dir, cfg.preset, s.kind, s.seed);
        info!("adapting {} seed {} ({})", s.kind, s.seed, cfg.preset);
        run_one(ws, &data, s.kind, s.seed, &dir)
    });
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;
    let rows = summarize(&results);
    write_summary(&cfg.out_dir.join("runs").join(cfg.preset.name()).join("summary.csv"), &rows)?;
    Ok(results)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Lambda,
    I0,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Lambda => "lambda",
            SweepParam::I0 => "i0",
        }
    }
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda" => Ok(SweepParam::Lambda),
            "i0" => Ok(SweepParam::I0),
            _ => Err(Error::Config(format!("unknown sweep parameter `{s}` (lambda|i0)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub mean: f64,
    pub std: f64,
}

/// Drops repeated values (exact float equality), keeping first occurrences.
pub fn dedup_values(values: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::new();
    for &v in values {
        if out.iter().any(|&u| u == v) {
            warn!("duplicate sweep value {v} ignored");
        } else {
            out.push(v);
        }
    }
    out
}

/// One full run per value. Each row is the mean and standard deviation over seeds
/// of the accuracy averaged across kinds.
pub fn cmd_sweep(cfg: &ExperimentConfig, param: SweepParam, values: &[f64]) -> Result<Vec<SweepRow>> {
    let values = dedup_values(values);
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let base = Workspace::open(cfg.clone())?;
    let mut rows = Vec::new();
    for v in values {
        let mut c = cfg.clone();
        match param {
            SweepParam::Lambda => c.tta.balance.lambda = v,
            SweepParam::I0 => c.tta.balance.i0 = v,
        }
        c.validate()?;
        c.out_dir = cfg.out_dir.join("sweep").join(format!("{}={v}", param.name()));
        let ws = Workspace {
            config: c,
            clean: base.clean.clone(),
            bank: base.bank.clone(),
            stem: base.stem.clone(),
            exec: base.exec,
        };
        let results = run_workspace(&ws)?;
        let mut per_seed: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
        for r in &results {
            if let Some(a) = r.accuracy(cfg.accuracy) {
                per_seed.entry(r.seed).or_default().push(a);
            }
        }
        let seed_means: Vec<f64> = per_seed.values().map(|xs| mean_std(xs).0).collect();
        let (mean, std) = mean_std(&seed_means);
        rows.push(SweepRow { value: v, mean, std });
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r).map_err(|e| Error::InvalidArgument(format!("csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(format!("csv: {e}")))?;
    write_atomic(&cfg.out_dir.join(format!("sweep_{}.csv", param.name())), &bytes)?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub set: String,
    pub accuracy: Option<f64>,
    pub mean_entropy: f64,
    pub uniformity_metric: f64,
    pub mutual_information: f64,
    pub emd_modality_gap: f64,
}

/// No-adapt evaluation of the clean data and every corrupted stream.
pub fn cmd_eval(cfg: &ExperimentConfig) -> Result<Vec<EvalRow>> {
    let ws = Workspace::open(cfg.clone())?;
    let streams = corrupt_streams(cfg, &ws.clean)?;
    let mut sets = vec![("clean".to_string(), ws.clean.clone())];
    for s in &streams {
        sets.push((format!("{}-seed{}", s.kind, s.seed), Dataset::load(&s.dir)?));
    }
    let bs = cfg.tta.batch_size;
    let mut rows = Vec::new();
    for (name, data) in &sets {
        let r = evaluate(&ws.stem, None, data, &ws.bank, bs, ws.exec)?;
        let head = data.head(bs);
        let z = Encoder::new(&ws.stem, None)?.embed(head.images.view(), ws.exec)?;
        let gap = diagnostics::modality_gap_emd(&z, &ws.bank, &cfg.emd)?;
        rows.push(EvalRow {
            set: name.clone(),
            accuracy: r.accuracy,
            mean_entropy: r.mean_entropy,
            uniformity_metric: r.uniformity_metric,
            mutual_information: r.mutual_information,
            emd_modality_gap: gap,
        });
        if name == "clean" {
            let proj = diagnostics::project_batch(&z, &ws.bank)?;
            diagnostics::write_projection_csv(&cfg.out_dir.join("spca_clean.csv"), &proj)?;
        }
    }
    let mut buf = Vec::new();
    writeln!(buf, "set,accuracy,mean_entropy,uniformity_metric,mi,emd_modality_gap").expect("write to vec");
    for r in &rows {
        writeln!(
            buf,
            "{},{},{},{},{},{}",
            r.set,
            r.accuracy.map(|a| a.to_string()).unwrap_or_default(),
            r.mean_entropy,
            r.uniformity_metric,
            r.mutual_information,
            r.emd_modality_gap
        )
        .expect("write to vec");
    }
    write_atomic(&cfg.out_dir.join("eval.csv"), &buf)?;
    Ok(rows)
}
