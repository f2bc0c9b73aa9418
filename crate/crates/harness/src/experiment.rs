//! Staged experiment runner: data, training, attacks, evaluation, reports
//! and trend checks. Checkpoints and adversarial batches are cached under
//! `<out>/cache` by a hash of everything that determines their content.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use aetransfer_core::attack::{run_attack, AdversarialBatch, AttackError, AttackKind, AttackModel, Audit};
use aetransfer_core::crypto::Transform;
use aetransfer_core::metrics::{transfer_matrix, Asr, AsrMode, Cell, GridModel, ModelTag, Percent, TransferReport};
use aetransfer_core::model::{train_with_progress, Architecture, Classifier, LabeledImages, ModelError, FORMAT_VERSION};
use aetransfer_core::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ConfigError, ExperimentConfig, ModelEntry};
use crate::dataset::{self, DataError, Splits};
use crate::report::{self, Format};
use crate::store::{self, sha256_hex, StoreError};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error("{0}")]
    Other(String),
}

/// The scripted experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Experiment {
    /// Plain models of three architectures attacking each other.
    Tables2To5,
    /// Plain source against SHF/NP/FFX targets at block sizes 4, 8, 16.
    Tables6To7,
    /// SHF-4 source against the same key, an independent key and the rest.
    Tables8To9,
}

impl Experiment {
    pub const ALL: [Experiment; 3] = [Experiment::Tables2To5, Experiment::Tables6To7, Experiment::Tables8To9];

    pub fn as_str(self) -> &'static str {
        match self {
            Experiment::Tables2To5 => "tables-2-5",
            Experiment::Tables6To7 => "tables-6-7",
            Experiment::Tables8To9 => "tables-8-9",
        }
    }

    /// Writes this experiment's roster and grid into `cfg`.
    pub fn apply(self, cfg: &mut ExperimentConfig) {
        let small = Architecture::CnnSmall;
        let encrypted = |key_index: u32| {
            let mut v = Vec::new();
            for t in Transform::ALL {
                for m in [4, 8, 16] {
                    v.push(ModelEntry::encrypted(&format!("{t}-{m}"), small, t, m, key_index));
                }
            }
            v
        };
        let names = |ms: &[ModelEntry]| ms.iter().map(|m| m.name.clone()).collect::<Vec<_>>();
        match self {
            Experiment::Tables2To5 => {
                cfg.models = Architecture::ALL.iter().map(|&a| ModelEntry::plain(a.as_str(), a)).collect();
                cfg.grid.sources = vec!["cnn_small".into(), "vit_tiny".into()];
                cfg.grid.targets = names(&cfg.models);
            }
            Experiment::Tables6To7 => {
                cfg.models = vec![ModelEntry::plain("plain", small)];
                cfg.models.extend(encrypted(0));
                cfg.grid.sources = vec!["plain".into()];
                cfg.grid.targets = names(&cfg.models);
            }
            Experiment::Tables8To9 => {
                let enc = encrypted(0);
                cfg.models = vec![
                    enc[0].clone(),
                    ModelEntry::plain("plain", small),
                    ModelEntry::encrypted("SHF-4-key1", small, Transform::Shf, 4, 1),
                ];
                cfg.models.extend(enc[1..].iter().cloned());
                cfg.grid.sources = vec!["SHF-4".into()];
                cfg.grid.targets = names(&cfg.models);
            }
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Experiment {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| format!("unknown experiment `{s}` (expected tables-2-5, tables-6-7 or tables-8-9)"))
    }
}

/// Timing and outcome of one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub ok: bool,
    pub cached: bool,
    pub seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub artifact: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checksum: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

/// Instrumented violations over every adversarial batch of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct AuditTotals {
    pub images: usize,
    pub bound_violations: usize,
    pub range_violations: usize,
    pub trace_violations: usize,
    pub fab_norm_violations: usize,
}

impl From<Audit> for AuditTotals {
    fn from(a: Audit) -> Self {
        AuditTotals {
            images: a.images,
            bound_violations: a.bound_violations,
            range_violations: a.range_violations,
            trace_violations: a.trace_violations,
            fab_norm_violations: a.fab_norm_violations,
        }
    }
}

impl AuditTotals {
    pub fn is_clean(&self) -> bool {
        self.bound_violations + self.range_violations + self.trace_violations + self.fab_norm_violations == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrendCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub name: String,
    pub checksum: String,
    pub train_accuracy: Option<f32>,
    pub test_accuracy: Option<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub experiment: String,
    pub config_hash: String,
    /// Resolved configuration, every default included.
    pub config: String,
    pub data_source: String,
    pub data_hash: String,
    pub stages: Vec<StageRecord>,
    pub models: Vec<ModelSummary>,
    /// Artifact path (relative to the output directory) to SHA-256.
    pub artifacts: BTreeMap<String, String>,
    pub audit: AuditTotals,
    pub trends: Vec<TrendCheck>,
}

impl RunManifest {
    pub fn trends_passed(&self) -> bool {
        self.trends.iter().all(|t| t.passed)
    }

    pub fn failed_stages(&self) -> impl Iterator<Item = &StageRecord> {
        self.stages.iter().filter(|s| !s.ok)
    }
}

/// Everything a run produced, in memory.
pub struct RunOutput {
    pub manifest: RunManifest,
    pub report: TransferReport,
    pub splits: Splits,
    pub models: BTreeMap<String, Classifier>,
    pub batches: BTreeMap<(String, AttackKind), AdversarialBatch>,
    pub dir: PathBuf,
}

pub fn thread_pool(workers: usize) -> Result<rayon::ThreadPool, HarnessError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| HarnessError::Other(format!("thread pool: {e}")))
}

/// Hash of the resolved configuration without the output directory and
/// worker count, which never affect results.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let mut c = cfg.clone();
    c.run.out = PathBuf::new();
    c.run.workers = 0;
    sha256_hex(c.to_toml().as_bytes())
}

fn hash_json(v: &serde_json::Value) -> String {
    sha256_hex(v.to_string().as_bytes())
}

pub fn data_hash(splits: &Splits) -> String {
    let mut h = Sha256::new();
    for set in [&splits.train, &splits.test] {
        h.update((set.len() as u64).to_le_bytes());
        for (img, &l) in set.images().iter().zip(set.labels()) {
            h.update([l as u8]);
            h.update(img.data());
        }
    }
    format!("{:x}", h.finalize())
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<Splits, HarnessError> {
    Ok(dataset::load_cifar10(
        cfg.data.path.as_deref(),
        cfg.data.train,
        cfg.data.test,
        cfg.run.seed,
    )?)
}

/// Content hash of a trained model: data, architecture, key and training
/// settings.
pub fn model_hash(cfg: &ExperimentConfig, entry: &ModelEntry, data_hash: &str) -> Result<String, HarnessError> {
    let key = entry.key(cfg.run.seed)?;
    let train = cfg.train.for_architecture(entry.architecture()?).to_config(entry.train_seed(cfg.run.seed)?);
    Ok(hash_json(&serde_json::json!({
        "artifact": "checkpoint",
        "format": FORMAT_VERSION,
        "data": data_hash,
        "architecture": entry.architecture()?.as_str(),
        "key": key.map(|k| (k.transform.as_str(), k.block_size, format!("{:032x}", k.seed))),
        "train": format!("{train:?}"),
    })))
}

/// Trains a roster model, or loads it from the cache.
pub fn obtain_model(
    cfg: &ExperimentConfig,
    entry: &ModelEntry,
    splits: &Splits,
    data_hash: &str,
    cache: &Path,
) -> Result<(Classifier, String, PathBuf, bool), HarnessError> {
    let hash = model_hash(cfg, entry, data_hash)?;
    let path = cache.join("models").join(format!("{hash}.ckpt"));
    if path.is_file() {
        match store::load_checkpoint(&path) {
            Ok((m, sum)) => return Ok((m, sum, path, true)),
            Err(e) => log::warn!("ignoring unreadable cached checkpoint: {e}"),
        }
    }
    let key = entry.key(cfg.run.seed)?;
    let tc = cfg.train.for_architecture(entry.architecture()?).to_config(entry.train_seed(cfg.run.seed)?);
    let name = entry.name.clone();
    let model = train_with_progress(entry.spec()?, &splits.train, Some(&splits.test), &tc, key, &mut |s| {
        log::debug!(
            "{name} epoch {} loss {:.4} running acc {:.3} grad norm {:.3} lr {:.5}",
            s.epoch,
            s.mean_loss,
            s.running_accuracy,
            s.mean_grad_norm,
            s.lr
        )
    })?;
    let sum = store::save_checkpoint(&model, &path)?;
    Ok((model, sum, path, false))
}

fn slice_images(images: &Tensor, start: usize, len: usize) -> Tensor {
    let n = images.shape()[0];
    let d = images.len() / n.max(1);
    let mut shape = images.shape().to_vec();
    shape[0] = len;
    Tensor::new(shape, images.data()[start * d..(start + len) * d].to_vec()).expect("slice of a valid tensor")
}

/// Runs one attack over fixed chunks on the pool. Chunk boundaries, not the
/// schedule, determine every random stream, so any worker count gives the
/// same batch.
pub fn attack_parallel<M: AttackModel + Sync + ?Sized>(
    pool: &rayon::ThreadPool,
    model: &M,
    images: &Tensor,
    labels: &[usize],
    cfg: &aetransfer_core::attack::AttackConfig,
    chunk: usize,
) -> Result<AdversarialBatch, AttackError> {
    let chunk = chunk.max(1);
    let starts: Vec<usize> = (0..labels.len()).step_by(chunk).collect();
    if starts.is_empty() {
        return run_attack(model, images, labels, 0, cfg);
    }
    let parts: Vec<Result<AdversarialBatch, AttackError>> = pool.install(|| {
        starts
            .par_iter()
            .map(|&s| {
                let len = chunk.min(labels.len() - s);
                run_attack(model, &slice_images(images, s, len), &labels[s..s + len], s, cfg)
            })
            .collect()
    });
    AdversarialBatch::concat(parts.into_iter().collect::<Result<Vec<_>, _>>()?)
}

/// First `n` test images as a tensor, with labels.
pub fn attack_set(test: &LabeledImages, n: usize) -> Result<(Tensor, Vec<usize>), HarnessError> {
    let idx: Vec<usize> = (0..n.min(test.len())).collect();
    Ok((test.batch(&idx)?, idx.iter().map(|&i| test.labels()[i]).collect()))
}

fn relative(out: &Path, p: &Path) -> String {
    p.strip_prefix(out).unwrap_or(p).to_string_lossy().replace('\\', "/")
}

/// Runs the roster and grid in `cfg`, writing reports and a manifest to
/// `<out>/<label>`.
pub fn run_grid(cfg: &ExperimentConfig, label: &str, trends: fn(&Context) -> Vec<TrendCheck>) -> Result<RunOutput, HarnessError> {
    cfg.validate()?;
    let out = cfg.run.out.clone();
    let cache = out.join("cache");
    let dir = out.join(label);
    let pool = thread_pool(cfg.run.workers)?;
    let mut stages = Vec::new();
    let mut artifacts = BTreeMap::new();
    let config_text = cfg.to_toml();
    let config_hash = config_hash(cfg);

    let t = Instant::now();
    let splits = load_data(cfg)?;
    let dhash = data_hash(&splits);
    log::info!("data: {} ({} train / {} test)", splits.source.describe(), splits.train.len(), splits.test.len());
    stages.push(StageRecord {
        stage: "data".into(),
        ok: true,
        cached: false,
        seconds: t.elapsed().as_secs_f64(),
        artifact: None,
        checksum: Some(dhash.clone()),
        detail: Some(splits.source.describe()),
    });

    // Models referenced by the grid, in roster order.
    let needed: Vec<&ModelEntry> = cfg
        .models
        .iter()
        .filter(|m| cfg.grid.sources.contains(&m.name) || cfg.grid.targets.contains(&m.name))
        .collect();
    let trained: Vec<(String, Result<(Classifier, String, PathBuf, bool), HarnessError>, f64)> = pool.install(|| {
        needed
            .par_iter()
            .map(|e| {
                let t = Instant::now();
                log::info!("model {}: start", e.name);
                let r = obtain_model(cfg, e, &splits, &dhash, &cache);
                (e.name.clone(), r, t.elapsed().as_secs_f64())
            })
            .collect()
    });
    let mut models = BTreeMap::new();
    let mut checksums = BTreeMap::new();
    let mut summaries = Vec::new();
    for (name, r, secs) in trained {
        match r {
            Ok((m, sum, path, cached)) => {
                log::info!("model {name}: {:?}{}", m.summary(), if cached { " (cached)" } else { "" });
                artifacts.insert(relative(&out, &path), sum.clone());
                summaries.push(ModelSummary {
                    name: name.clone(),
                    checksum: sum.clone(),
                    train_accuracy: m.summary().train_accuracy,
                    test_accuracy: m.summary().test_accuracy,
                });
                stages.push(StageRecord {
                    stage: format!("train:{name}"),
                    ok: true,
                    cached,
                    seconds: secs,
                    artifact: Some(relative(&out, &path)),
                    checksum: Some(sum.clone()),
                    detail: None,
                });
                checksums.insert(name.clone(), sum);
                models.insert(name, m);
            }
            Err(e) => {
                log::error!("model {name}: {e}");
                stages.push(StageRecord {
                    stage: format!("train:{name}"),
                    ok: false,
                    cached: false,
                    seconds: secs,
                    artifact: None,
                    checksum: None,
                    detail: Some(e.to_string()),
                });
            }
        }
    }

    let kinds = cfg.attack.kinds()?;
    let (images, labels) = attack_set(&splits.test, cfg.data.attack_images)?;
    let attack_seed = aetransfer_core::rng::derive(cfg.run.seed, &[aetransfer_core::rng::label("attack")]);
    let mut batches = BTreeMap::new();
    let mut audit = Audit::default();
    for src in &cfg.grid.sources {
        let Some(model) = models.get(src) else { continue };
        for &kind in &kinds {
            let t = Instant::now();
            let acfg = cfg.attack.to_config(kind, attack_seed);
            let stage = format!("attack:{src}:{kind}");
            let hash = hash_json(&serde_json::json!({
                "artifact": "adversarial-batch",
                "format": store::BATCH_FORMAT,
                "model": checksums[src],
                "data": dhash,
                "images": labels.len(),
                "attack": store::AttackRecord::from(&acfg),
                "chunk": cfg.attack.chunk,
            }));
            let bdir = cache.join("attacks").join(&hash);
            let cached = match store::load_batch(&bdir) {
                Ok((b, _)) => Some(b),
                Err(_) => None,
            };
            let was_cached = cached.is_some();
            let result = match cached {
                Some(b) => Ok(b),
                None => {
                    log::info!("{stage}: start");
                    attack_parallel(&pool, model, &images, &labels, &acfg, cfg.attack.chunk)
                        .map_err(HarnessError::from)
                        .and_then(|b| {
                            store::save_batch(&b, &checksums[src], &bdir)?;
                            Ok(b)
                        })
                }
            };
            match result {
                Ok(b) => {
                    let a = b.audit();
                    audit.merge(&a);
                    let sum = store::file_sha256(&bdir.join("manifest.json"))?;
                    artifacts.insert(relative(&out, &bdir.join("manifest.json")), sum.clone());
                    let fooled = b.success.iter().filter(|&&s| s).count();
                    log::info!("{stage}: {fooled}/{} fooled, audit {:?}", b.len(), a);
                    stages.push(StageRecord {
                        stage,
                        ok: true,
                        cached: was_cached,
                        seconds: t.elapsed().as_secs_f64(),
                        artifact: Some(relative(&out, &bdir)),
                        checksum: Some(sum),
                        detail: Some(format!("{fooled}/{} fooled on the source", b.len())),
                    });
                    batches.insert((src.clone(), kind), b);
                }
                Err(e) => {
                    log::warn!("{stage}: {e}");
                    stages.push(StageRecord {
                        stage,
                        ok: false,
                        cached: false,
                        seconds: t.elapsed().as_secs_f64(),
                        artifact: None,
                        checksum: None,
                        detail: Some(e.to_string()),
                    });
                }
            }
        }
    }

    let t = Instant::now();
    let report = evaluate_grid(cfg, &models, &kinds, &batches)?;
    stages.push(StageRecord {
        stage: "evaluate".into(),
        ok: true,
        cached: false,
        seconds: t.elapsed().as_secs_f64(),
        artifact: None,
        checksum: None,
        detail: None,
    });
    for p in report::emit_report(&report, &Format::ALL, &dir)? {
        artifacts.insert(relative(&out, &p), store::file_sha256(&p)?);
    }
    let ctx = Context {
        cfg,
        report: &report,
        models: &models,
    };
    let checks = trends(&ctx);
    let mut text = String::new();
    for c in &checks {
        text.push_str(&format!("{} {}: {}\n", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail));
    }
    let tpath = dir.join("trends.txt");
    store::write_atomic(&tpath, text.as_bytes())?;
    let manifest = RunManifest {
        tool_version: TOOL_VERSION.into(),
        experiment: label.into(),
        config_hash,
        config: config_text,
        data_source: splits.source.describe(),
        data_hash: dhash,
        stages,
        models: summaries,
        artifacts,
        audit: audit.into(),
        trends: checks,
    };
    store::write_atomic(
        &dir.join("manifest.json"),
        (serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n").as_bytes(),
    )?;
    Ok(RunOutput {
        manifest,
        report,
        splits,
        models,
        batches,
        dir,
    })
}

/// The transfer grid in roster order. Cells whose source batch or target
/// model is missing are absent.
pub fn evaluate_grid(
    cfg: &ExperimentConfig,
    models: &BTreeMap<String, Classifier>,
    kinds: &[AttackKind],
    batches: &BTreeMap<(String, AttackKind), AdversarialBatch>,
) -> Result<TransferReport, HarnessError> {
    let tags: BTreeMap<&str, ModelTag> = cfg.models.iter().map(|m| Ok((m.name.as_str(), m.tag()?))).collect::<Result<_, ConfigError>>()?;
    let grid = |names: &[String]| -> Vec<GridModel<'_, Classifier>> {
        names
            .iter()
            .filter_map(|n| {
                models.get(n).map(|m| GridModel {
                    tag: tags[n.as_str()].clone(),
                    model: m,
                })
            })
            .collect()
    };
    let mode: AsrMode = cfg.run.asr_mode.into();
    let computed = transfer_matrix(&grid(&cfg.grid.sources), &grid(&cfg.grid.targets), kinds, batches, mode)?;
    let mut cells = Vec::new();
    for s in &cfg.grid.sources {
        for &attack in kinds {
            for t in &cfg.grid.targets {
                let found = computed
                    .cells
                    .iter()
                    .find(|c| &c.source.name == s && &c.target.name == t && c.attack == attack);
                cells.push(found.cloned().unwrap_or_else(|| Cell {
                    source: tags[s.as_str()].clone(),
                    target: tags[t.as_str()].clone(),
                    attack,
                    metrics: None,
                }));
            }
        }
    }
    Ok(TransferReport { cells })
}

/// What trend checks can look at.
pub struct Context<'a> {
    pub cfg: &'a ExperimentConfig,
    pub report: &'a TransferReport,
    pub models: &'a BTreeMap<String, Classifier>,
}

impl Context<'_> {
    fn cell(&self, source: &str, target: &str) -> Result<&aetransfer_core::metrics::CellMetrics, String> {
        self.report
            .get(source, target, AttackKind::ApgdCe)
            .and_then(|c| c.metrics.as_ref())
            .ok_or_else(|| format!("no APGD-ce cell {source} -> {target}"))
    }

    fn asr(&self, source: &str, target: &str) -> Result<Percent, String> {
        match self.cell(source, target)?.asr {
            Asr::Defined(p) => Ok(p),
            Asr::Undefined => Err(format!("ASR {source} -> {target} is undefined (N_c = 0)")),
        }
    }
}

/// Exact test of `a <= b + margin` for percentages, `margin` in points.
pub fn at_most(a: Percent, b: Percent, margin: i64) -> bool {
    let (an, ad, bn, bd) = (a.num as i128, a.den as i128, b.num as i128, b.den as i128);
    100 * an * bd <= 100 * bn * ad + margin as i128 * ad * bd
}

fn check(name: &str, r: Result<(bool, String), String>) -> TrendCheck {
    match r {
        Ok((passed, detail)) => TrendCheck {
            name: name.into(),
            passed,
            detail,
        },
        Err(detail) => TrendCheck {
            name: name.into(),
            passed: false,
            detail,
        },
    }
}

/// Plain cnn_small with clean accuracy >= 60% keeps <= 5% accuracy under
/// white-box APGD-ce.
pub fn white_box_collapse(ctx: &Context, name: &str) -> TrendCheck {
    check("white-box-collapse", (|| {
        let model = ctx.models.get(name).ok_or_else(|| format!("model {name} missing"))?;
        let clean = model.summary().test_accuracy.ok_or("no clean test accuracy recorded")?;
        let m = ctx.cell(name, name)?;
        let robust = m.acc;
        let pass = clean >= 0.60 && at_most(robust, Percent { num: 5, den: 100 }, 0);
        Ok((pass, format!("{name}: clean test accuracy {:.2}%, APGD-ce robust accuracy {robust}% on {} images (need clean >= 60, robust <= 5)", 100.0 * clean, m.n)))
    })())
}

/// White-box ASR of every source against itself is at least 95%.
pub fn self_attack(ctx: &Context) -> TrendCheck {
    check("self-attack-asr", (|| {
        let mut pass = true;
        let mut parts = Vec::new();
        for s in &ctx.cfg.grid.sources {
            let a = ctx.asr(s, s)?;
            pass &= at_most(Percent { num: 95, den: 100 }, a, 0);
            parts.push(format!("{s} -> {s}: {a}"));
        }
        Ok((pass, format!("{} (need >= 95)", parts.join(", "))))
    })())
}

pub fn trends_tables_2_5(ctx: &Context) -> Vec<TrendCheck> {
    vec![
        white_box_collapse(ctx, "cnn_small"),
        self_attack(ctx),
        check("architecture-gap", (|| {
            let vit = ctx.asr("cnn_small", "vit_tiny")?;
            let deep = ctx.asr("cnn_small", "cnn_deep")?;
            let pass = !at_most(deep, vit, 0);
            Ok((pass, format!("ASR cnn_small -> vit_tiny {vit} vs -> cnn_deep {deep} (need vit < deep)")))
        })()),
    ]
}

pub fn trends_tables_6_7(ctx: &Context) -> Vec<TrendCheck> {
    let mut out = vec![white_box_collapse(ctx, "plain"), self_attack(ctx)];
    out.push(check("ffx16-below-shf4", (|| {
        let ffx = ctx.asr("plain", "FFX-16")?;
        let shf = ctx.asr("plain", "SHF-4")?;
        Ok((at_most(ffx, shf, -10), format!("ASR -> FFX-16 {ffx} vs -> SHF-4 {shf} (need FFX-16 <= SHF-4 - 10)")))
    })()));
    for t in Transform::ALL {
        out.push(check(&format!("{t}-non-increasing-in-block-size"), (|| {
            let v: Vec<Percent> = [4, 8, 16].iter().map(|m| ctx.asr("plain", &format!("{t}-{m}"))).collect::<Result<_, _>>()?;
            let pass = at_most(v[1], v[0], 5) && at_most(v[2], v[1], 5);
            Ok((pass, format!("ASR -> {t}-4 {}, -> {t}-8 {}, -> {t}-16 {} (each step may rise by at most 5)", v[0], v[1], v[2])))
        })()));
    }
    out
}

pub fn trends_tables_8_9(ctx: &Context) -> Vec<TrendCheck> {
    vec![
        self_attack(ctx),
        check("key-change", (|| {
            let same = ctx.asr("SHF-4", "SHF-4")?;
            let other = ctx.asr("SHF-4", "SHF-4-key1")?;
            Ok((at_most(other, same, -50), format!("ASR same key {same} vs independent key {other} (need a drop of >= 50)")))
        })()),
    ]
}

/// Runs one scripted experiment on top of the data, training, attack and run
/// settings of `base`.
pub fn reproduce(base: &ExperimentConfig, exp: Experiment) -> Result<RunOutput, HarnessError> {
    let mut cfg = base.clone();
    exp.apply(&mut cfg);
    let trends: fn(&Context) -> Vec<TrendCheck> = match exp {
        Experiment::Tables2To5 => trends_tables_2_5,
        Experiment::Tables6To7 => trends_tables_6_7,
        Experiment::Tables8To9 => trends_tables_8_9,
    };
    run_grid(&cfg, exp.as_str(), trends)
}

/// Runs the roster and grid exactly as configured; no trend checks.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput, HarnessError> {
    run_grid(cfg, "custom", |_| Vec::new())
}
