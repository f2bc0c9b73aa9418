use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aetransfer::config::{ExperimentConfig, ModelEntry};
use aetransfer::experiment::{self, Experiment, HarnessError, RunOutput};
use aetransfer::store;
use aetransfer_core::attack::AttackKind;
use aetransfer_core::crypto::{decrypt_image, encrypt_image, ImageU8, Transform};
use aetransfer_core::metrics::predict_labels;
use aetransfer_core::model::Architecture;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "aetransfer", version, about = "Adversarial transferability between plain and block-encrypted classifiers")]
struct Cli {
    /// TOML configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `run.out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed (overrides `run.seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads, 0 for all cores (overrides `run.workers`).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// More log output; repeat for more.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one classifier and write its checkpoint to `<out>/models/<name>.ckpt`.
    Train {
        #[arg(long, default_value = "cnn_small")]
        arch: String,
        /// SHF, NP or FFX; plain when omitted.
        #[arg(long)]
        transform: Option<String>,
        #[arg(long, default_value_t = 4)]
        block_size: usize,
        #[arg(long, default_value_t = 0)]
        key_index: u32,
        #[arg(long)]
        name: Option<String>,
    },
    /// Encrypt one image and write it as PNG (or raw HWC bytes for `.raw`).
    EncryptPreview {
        /// PNG image, or raw HWC bytes with `--raw-side`; the test image at
        /// `--index` when omitted.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        raw_side: Option<usize>,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        transform: String,
        #[arg(long, default_value_t = 4)]
        block_size: usize,
        #[arg(long, default_value_t = 0)]
        key_index: u32,
        #[arg(long)]
        output: PathBuf,
    },
    /// Attack a checkpoint on the first test images; writes an adversarial batch.
    Attack {
        #[arg(long)]
        checkpoint: PathBuf,
        /// APGD-ce, APGD-t, FAB-t or Square.
        #[arg(long)]
        attack: String,
        /// Defaults to `data.attack_images`.
        #[arg(long)]
        images: Option<usize>,
    },
    /// Clean test accuracy of a checkpoint, and its accuracy on a batch.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        batch: Option<PathBuf>,
    },
    /// Run the roster and grid of the configuration.
    TransferMatrix,
    /// Run a scripted experiment and check its trends.
    Reproduce {
        /// tables-2-5, tables-6-7 or tables-8-9.
        #[arg(long)]
        experiment: String,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(o) = &cli.out {
        cfg.run.out = o.clone();
    }
    if let Some(s) = cli.seed {
        cfg.run.seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.run.workers = w;
    }
    Ok(cfg)
}

fn invalid(msg: impl Into<String>) -> HarnessError {
    HarnessError::Other(msg.into())
}

fn entry(name: Option<&str>, arch: &str, transform: Option<&str>, block_size: usize, key_index: u32) -> Result<ModelEntry, HarnessError> {
    let arch: Architecture = arch.parse().map_err(|e| invalid(format!("{e}")))?;
    Ok(match transform {
        None => ModelEntry::plain(name.unwrap_or(arch.as_str()), arch),
        Some(t) => {
            let t: Transform = t.parse().map_err(|e| invalid(format!("{e}")))?;
            let default = format!("{t}-{block_size}");
            ModelEntry::encrypted(name.unwrap_or(&default), arch, t, block_size, key_index)
        }
    })
}

fn read_image(path: &Path, raw_side: Option<usize>) -> Result<ImageU8, HarnessError> {
    Ok(match raw_side {
        Some(s) => store::read_raw(path, s, s, 3)?,
        None => store::read_png(path)?,
    })
}

fn write_image(img: &ImageU8, path: &Path) -> Result<(), HarnessError> {
    if path.extension().is_some_and(|e| e == "raw") {
        store::write_raw(img, path)?;
    } else {
        store::write_png(img, path)?;
    }
    Ok(())
}

fn print_run(out: &RunOutput) {
    println!("{}", aetransfer::report::to_table(&out.report));
    for s in out.manifest.failed_stages() {
        println!("stage {} failed: {}", s.stage, s.detail.as_deref().unwrap_or(""));
    }
    println!("audit: {:?}", out.manifest.audit);
    for t in &out.manifest.trends {
        println!("{} {}: {}", if t.passed { "PASS" } else { "FAIL" }, t.name, t.detail);
    }
    println!("reports and manifest in {}", out.dir.display());
}

fn run(cli: &Cli) -> Result<ExitCode, HarnessError> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Train {
            arch,
            transform,
            block_size,
            key_index,
            name,
        } => {
            let e = entry(name.as_deref(), arch, transform.as_deref(), *block_size, *key_index)?;
            let splits = experiment::load_data(&cfg)?;
            let dhash = experiment::data_hash(&splits);
            let cache = cfg.run.out.join("cache");
            let (model, sum, cached_at, _) = experiment::obtain_model(&cfg, &e, &splits, &dhash, &cache)?;
            let path = cfg.run.out.join("models").join(format!("{}.ckpt", e.name));
            store::write_atomic(&path, &std::fs::read(&cached_at).map_err(|e| invalid(e.to_string()))?)?;
            println!("{}: {:?}", e.name, model.summary());
            println!("checkpoint {} sha256 {sum}", path.display());
        }
        Command::EncryptPreview {
            input,
            raw_side,
            index,
            transform,
            block_size,
            key_index,
            output,
        } => {
            let e = entry(None, "cnn_small", Some(transform), *block_size, *key_index)?;
            let key = e.key(cfg.run.seed)?.expect("encrypted entry has a key");
            let img = match input {
                Some(p) => read_image(p, *raw_side)?,
                None => {
                    let splits = experiment::load_data(&cfg)?;
                    splits
                        .test
                        .images()
                        .get(*index)
                        .cloned()
                        .ok_or_else(|| invalid(format!("test index {index} out of range")))?
                }
            };
            let enc = encrypt_image(&img, &key).map_err(|e| invalid(e.to_string()))?;
            let back = decrypt_image(&enc, &key).map_err(|e| invalid(e.to_string()))?;
            if back != img {
                return Err(invalid("decryption did not restore the input"));
            }
            write_image(&enc, output)?;
            println!("{} written ({}x{}, {} blocks of {}x{}); decryption round trip ok", output.display(), enc.width(), enc.height(), (enc.width() / block_size) * (enc.height() / block_size), block_size, block_size);
        }
        Command::Attack { checkpoint, attack, images } => {
            let kind: AttackKind = attack.parse().map_err(|e| invalid(format!("{e}")))?;
            let (model, sum) = store::load_checkpoint(checkpoint)?;
            let splits = experiment::load_data(&cfg)?;
            let (x, y) = experiment::attack_set(&splits.test, images.unwrap_or(cfg.data.attack_images))?;
            let seed = aetransfer_core::rng::derive(cfg.run.seed, &[aetransfer_core::rng::label("attack")]);
            let acfg = cfg.attack.to_config(kind, seed);
            let pool = experiment::thread_pool(cfg.run.workers)?;
            let batch = experiment::attack_parallel(&pool, &model, &x, &y, &acfg, cfg.attack.chunk)?;
            let dir = cfg.run.out.join("attacks").join(format!("{}-{}", kind.as_str(), &sum[..12]));
            store::save_batch(&batch, &sum, &dir)?;
            let audit = batch.audit();
            let fooled = batch.success.iter().filter(|&&s| s).count();
            println!("{kind}: {fooled}/{} fooled; audit {audit:?}", batch.len());
            println!("batch written to {}", dir.display());
            if !audit.is_clean() {
                return Ok(ExitCode::from(2));
            }
        }
        Command::Evaluate { checkpoint, batch } => {
            let (model, _) = store::load_checkpoint(checkpoint)?;
            let splits = experiment::load_data(&cfg)?;
            let acc = model.accuracy(&splits.test, 128)?;
            println!("clean test accuracy {:.2}% on {} images", 100.0 * acc, splits.test.len());
            if let Some(dir) = batch {
                let (b, _) = store::load_batch(dir)?;
                let clean = predict_labels(&model, &b.originals, 128)?;
                let adv = predict_labels(&model, &b.adversarials, 128)?;
                let c = clean.iter().zip(&b.labels).filter(|(p, l)| p == l).count();
                let a = adv.iter().zip(&b.labels).filter(|(p, l)| p == l).count();
                println!("batch ({}, {n} images): clean {c}/{n}, adversarial {a}/{n} correct", b.kind, n = b.len());
            }
        }
        Command::TransferMatrix => {
            let out = experiment::run_experiment(&cfg)?;
            print_run(&out);
        }
        Command::Reproduce { experiment: name } => {
            let exp: Experiment = name.parse().map_err(invalid)?;
            let out = experiment::reproduce(&cfg, exp)?;
            print_run(&out);
            if !out.manifest.trends_passed() || !out.manifest.audit.is_clean() {
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
