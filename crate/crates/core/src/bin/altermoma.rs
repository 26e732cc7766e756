use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use altermoma::baselines::Method;
use altermoma::compact::{compact, mac_report};
use altermoma::config::ExperimentConfig;
use altermoma::data::{redundancy_certificate, MultiModalDataset};
use altermoma::experiment::{self, Splits};
use altermoma::model::{ModalityMasks, Partition};
use altermoma::oracle::{run_suite, suite_passed};
use altermoma::report::{write_rows, write_rows_to, HASH_PREFIX};
use altermoma::{checkpoint, Error, FusionModel};

const EXIT_USAGE: u8 = 1;
const EXIT_VERIFY: u8 = 2;
const EXIT_IO: u8 = 3;

#[derive(Parser)]
#[command(
    name = "altermoma",
    version,
    about = "Alternating modality masking pruning lab"
)]
struct Cli {
    /// Experiment configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the pruning ratio.
    #[arg(long, global = true)]
    rho: Option<f64>,
    /// Prune whole output channels.
    #[arg(long, global = true)]
    structured: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the dataset and print its redundancy certificate.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain both backbones on their single-modal targets.
    Pretrain {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the fusion model from a pretrained checkpoint.
    TrainFusion {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Prune a trained model; writes the pruned checkpoint and its ledger.
    Prune {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        method: String,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Prune and fine-tune with every configured method, ratio and seed.
    Compare {
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep beta/alpha over the configured grid and seeds.
    Ablate {
        #[arg(long)]
        out: PathBuf,
    },
    /// Camera-backbone saliency under the camera-only and the full loss.
    GraddiffReport {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the oracle suite; exits with status 2 on any failure.
    Verify {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Verify(String),
    Io(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::UnknownMethod { .. } | Error::ModelTooLarge { .. } => {
                Failure::Usage(e.to_string())
            }
            _ => Failure::Io(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (code, msg) = match f {
                Failure::Usage(m) => (EXIT_USAGE, m),
                Failure::Verify(m) => (EXIT_VERIFY, m),
                Failure::Io(m) => (EXIT_IO, m),
            };
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Failure::Io(format!("{}: {e}", p.display())))?;
            ExperimentConfig::from_toml(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(r) = cli.rho {
        cfg.prune.rho = r;
    }
    if cli.structured {
        cfg.prune.structured = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dataset(cfg: &ExperimentConfig, path: &Option<PathBuf>) -> Result<MultiModalDataset, Failure> {
    match path {
        Some(p) => {
            let ds = MultiModalDataset::load(p)?;
            if ds.gen != cfg.data {
                return Err(Failure::Usage(format!(
                    "{} was generated with a different [data] section",
                    p.display()
                )));
            }
            if ds.seed != experiment::data_seed(cfg) {
                return Err(Failure::Usage(format!(
                    "{} was generated with a different root seed",
                    p.display()
                )));
            }
            Ok(ds)
        }
        None => Ok(experiment::dataset(cfg)?),
    }
}

fn splits(cfg: &ExperimentConfig, path: &Option<PathBuf>) -> Result<Splits, Failure> {
    Ok(experiment::splits(cfg, &dataset(cfg, path)?)?)
}

fn load_model(cfg: &ExperimentConfig, path: &Path) -> Result<FusionModel, Failure> {
    Ok(checkpoint::load(path, cfg.model.loss)?)
}

/// CSV table on stdout, ending with the config hash.
fn print_rows<R: Serialize>(header: &[&str], rows: &[R], hash: &str) -> Outcome {
    let stdout = std::io::stdout();
    write_rows(stdout.lock(), header, rows, hash)?;
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    let cfg = load_config(&cli)?;
    let hash = cfg.hash();
    match &cli.command {
        Command::GenData { out } => {
            let ds = experiment::dataset(&cfg)?;
            ds.save(out)?;
            let (from_lidar, from_camera) = redundancy_certificate(&ds);
            #[derive(Serialize)]
            struct Row {
                samples: usize,
                shared_mse_from_lidar: f64,
                shared_mse_from_camera: f64,
            }
            print_rows(
                &["samples", "shared_mse_from_lidar", "shared_mse_from_camera"],
                &[Row {
                    samples: ds.len(),
                    shared_mse_from_lidar: from_lidar,
                    shared_mse_from_camera: from_camera,
                }],
                &hash,
            )
        }
        Command::Pretrain { data, out } => {
            let s = splits(&cfg, data)?;
            let (model, losses) = experiment::pretrain(&cfg, &s)?;
            checkpoint::save(&model, out)?;
            #[derive(Serialize)]
            struct Row {
                partition: Partition,
                epoch: usize,
                train_loss: f64,
            }
            let rows: Vec<Row> = losses
                .iter()
                .flat_map(|(p, l)| {
                    l.iter().enumerate().map(|(e, &v)| Row {
                        partition: *p,
                        epoch: e + 1,
                        train_loss: v,
                    })
                })
                .collect();
            print_rows(&["partition", "epoch", "train_loss"], &rows, &hash)
        }
        Command::TrainFusion { model, data, out } => {
            let s = splits(&cfg, data)?;
            let pre = load_model(&cfg, model)?;
            let (trained, history, _) = experiment::train_fusion(&cfg, &s, pre)?;
            checkpoint::save(&trained, out)?;
            #[derive(Serialize)]
            struct Row {
                epoch: usize,
                train_loss: f64,
                val_loss: Option<f64>,
            }
            let rows: Vec<Row> = history
                .iter()
                .map(|r| Row {
                    epoch: r.epoch,
                    train_loss: r.train_loss,
                    val_loss: r.val_loss,
                })
                .collect();
            print_rows(&["epoch", "train_loss", "val_loss"], &rows, &hash)?;
            let masked = |m| trained.dataset_loss(&s.val, m);
            eprintln!(
                "val loss: fused {:.6}, LiDAR masked {:.6}, camera masked {:.6}",
                masked(ModalityMasks::UNMASKED)?,
                masked(ModalityMasks::without(Partition::Lidar))?,
                masked(ModalityMasks::without(Partition::Camera))?
            );
            Ok(())
        }
        Command::Prune {
            model,
            method,
            data,
            out,
        } => {
            let method: Method = method.parse()?;
            let s = splits(&cfg, data)?;
            let trained = load_model(&cfg, model)?;
            let mut outcome = experiment::prune(&cfg, &trained, &s.train, &s.val, method)?;
            checkpoint::save(&outcome.model, out)?;
            let mut ledger = Vec::new();
            outcome.ledger.write_csv(&mut ledger)?;
            writeln!(ledger, "{HASH_PREFIX}{hash}")?;
            std::fs::write(out.with_extension("ledger.csv"), ledger)?;
            let mut json = Vec::new();
            outcome.ledger.write_json(&mut json)?;
            std::fs::write(out.with_extension("ledger.json"), json)?;
            let macs = if cfg.prune.structured {
                compact(&outcome.model)
                    .ok()
                    .map(|c| mac_report(&outcome.model, &c))
            } else {
                None
            };
            let masked_val_loss = outcome.masked_val_loss;
            let records = experiment::finetune_pruned(&cfg, &mut outcome, &s.train, &s.val)?;
            #[derive(Serialize)]
            struct Row {
                method: Method,
                rho: f64,
                structured: bool,
                units: usize,
                k: usize,
                kept: usize,
                val_loss_pruned: f64,
                val_loss_finetuned: f64,
                mac_reduction: Option<f64>,
                mac_reduction_from_masks: Option<f64>,
                removed_channel_fraction: Option<f64>,
            }
            let row = Row {
                method,
                rho: cfg.prune.rho,
                structured: cfg.prune.structured,
                units: outcome.units,
                k: outcome.k,
                kept: outcome.kept,
                val_loss_pruned: masked_val_loss,
                val_loss_finetuned: experiment::final_val_loss(&outcome, &records),
                mac_reduction: macs.as_ref().map(|m| m.reduction),
                mac_reduction_from_masks: macs.as_ref().map(|m| m.reduction_from_masks),
                removed_channel_fraction: macs.as_ref().map(|m| m.removed_channel_fraction),
            };
            print_rows(
                &[
                    "method",
                    "rho",
                    "structured",
                    "units",
                    "k",
                    "kept",
                    "val_loss_pruned",
                    "val_loss_finetuned",
                    "mac_reduction",
                    "mac_reduction_from_masks",
                    "removed_channel_fraction",
                ],
                &[row],
                &hash,
            )
        }
        Command::Compare { out } => {
            #[derive(Serialize)]
            struct Row {
                seed: u64,
                method: Method,
                rho: f64,
                k: usize,
                kept: usize,
                val_loss_pruned: f64,
                val_loss_finetuned: f64,
            }
            let mut rows = Vec::new();
            for &seed in &cfg.compare.seeds {
                eprintln!("seed {seed}");
                let c = ExperimentConfig {
                    seed,
                    ..cfg.clone()
                };
                let prepared = experiment::prepare(&c)?;
                for r in
                    experiment::compare(&c, &prepared, &cfg.compare.methods, &cfg.compare.rhos)?
                {
                    rows.push(Row {
                        seed: r.seed,
                        method: r.method,
                        rho: r.rho,
                        k: r.k,
                        kept: r.kept,
                        val_loss_pruned: r.masked_val_loss,
                        val_loss_finetuned: r.val_loss,
                    });
                }
            }
            let header = [
                "seed",
                "method",
                "rho",
                "k",
                "kept",
                "val_loss_pruned",
                "val_loss_finetuned",
            ];
            Ok(write_rows_to(out, &header, &rows, &hash)?)
        }
        Command::Ablate { out } => {
            let mut rows = Vec::new();
            for &seed in &cfg.ablation.seeds {
                eprintln!("seed {seed}");
                let c = ExperimentConfig {
                    seed,
                    ..cfg.clone()
                };
                let prepared = experiment::prepare(&c)?;
                rows.extend(experiment::ablate_seed(&c, &prepared)?);
            }
            #[derive(Serialize)]
            struct Row {
                beta_over_alpha: f64,
                seed: u64,
                rho: f64,
                val_loss: f64,
            }
            let rows: Vec<Row> = rows
                .into_iter()
                .map(|r| Row {
                    beta_over_alpha: r.beta_over_alpha,
                    seed: r.seed,
                    rho: r.rho,
                    val_loss: r.val_loss,
                })
                .collect();
            Ok(write_rows_to(
                out,
                &["beta_over_alpha", "seed", "rho", "val_loss"],
                &rows,
                &hash,
            )?)
        }
        Command::GraddiffReport { model, data, out } => {
            let s = splits(&cfg, data)?;
            let trained = load_model(&cfg, model)?;
            #[derive(Serialize)]
            struct Row {
                id: String,
                channel: Option<String>,
                saliency_camera_only: f64,
                saliency_fusion: f64,
                ratio: f64,
            }
            let rows: Vec<Row> = experiment::graddiff(&cfg, &trained, &s.train)?
                .into_iter()
                .map(|r| Row {
                    ratio: r.ratio(),
                    id: r.id,
                    channel: r.channel,
                    saliency_camera_only: r.camera_only,
                    saliency_fusion: r.fusion,
                })
                .collect();
            let header = [
                "id",
                "channel",
                "saliency_camera_only",
                "saliency_fusion",
                "ratio",
            ];
            Ok(write_rows_to(out, &header, &rows, &hash)?)
        }
        Command::Verify { out } => {
            let checks = run_suite(&cfg.verify)?;
            let header = ["check", "seed", "value", "threshold", "pass", "required"];
            match out {
                Some(p) => write_rows_to(p, &header, &checks, &hash)?,
                None => print_rows(&header, &checks, &hash)?,
            }
            if suite_passed(&checks) {
                Ok(())
            } else {
                let failed: Vec<&str> = checks
                    .iter()
                    .filter(|c| c.required && !c.pass)
                    .map(|c| c.check.as_str())
                    .collect();
                Err(Failure::Verify(format!(
                    "failed checks: {}",
                    failed.join(", ")
                )))
            }
        }
    }
}
