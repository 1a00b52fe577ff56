//! `stconv` — command-line front end: model analysis, synthetic data
//! generation, training, inference, evaluation, and the built-in
//! verification suites.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage/config error.

use clap::{Parser, Subcommand, ValueEnum};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use stconv_core::config::{parse_config, render_config};
use stconv_core::data::{generate, Dataset, DatasetEntry, SceneSpec, Split};
use stconv_core::error::Error;
use stconv_core::io::{load_stsr, save_stsr};
use stconv_core::metrics::binarize_and_score;
use stconv_core::model::{
    build, count_model_flops, load_checkpoint, predict, save_checkpoint, ModelConfig,
};
use stconv_core::tensor::Dtype;
use stconv_core::train::{log_to_csv, train_loop, TrainConfig};
use stconv_core::verify::{all_passed, gradcheck_suite, selftest_suite, Corruption};

#[derive(Parser)]
#[command(
    name = "stconv",
    about = "Spatiotemporal convolution nowcasting kit",
    version
)]
struct Cli {
    /// Cap internal parallelism (default: all cores; env STCONV_THREADS)
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Default, ValueEnum)]
enum Preset {
    /// Two advecting blobs, mixed headings (training data)
    #[default]
    Default,
    /// One blob moving at exactly (1, 0) px/frame (motion probes)
    Motion,
}

#[derive(Subcommand)]
enum Command {
    /// Per-layer parameter and multiply-accumulate report, with the dense
    /// 3D-conv counterpart of every decomposed stage
    Analyze {
        /// key=value config file
        #[arg(long)]
        config: PathBuf,
        /// Input spatial extents as H,W (default 48,48)
        #[arg(long)]
        input_hw: Option<String>,
    },
    /// Generate a synthetic dataset directory
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Total sample count (train = count - val - test)
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: u64,
        /// Square grid extent
        #[arg(long, default_value_t = 48)]
        grid: usize,
        /// Samples tagged as validation split
        #[arg(long, default_value_t = 0)]
        val: usize,
        /// Samples tagged as test split
        #[arg(long, default_value_t = 0)]
        test: usize,
        #[arg(long, value_enum, default_value_t)]
        preset: Preset,
    },
    /// Train on a generated dataset; writes best.star and train_log.csv
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory from gen-data
        #[arg(long)]
        data: PathBuf,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        /// Override the config's epoch count
        #[arg(long)]
        epochs: Option<usize>,
        /// Override the config's seed
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a checkpoint on an input tensor; writes final-head logits
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        /// Input STSR tensor (N, C, T, H, W)
        #[arg(long)]
        input: PathBuf,
        /// Output STSR path for the logits
        #[arg(long)]
        output: PathBuf,
    },
    /// Score logits against a binary truth volume; prints one CSV line
    /// (tp,fp,fn,tn,precision,recall,f1,iou)
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Finite-difference gradient suite; nonzero exit on any failure
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Full verification: gradients, decomposition oracle, closed-form
    /// FLOPs, fold/crop and file-format round trips
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli
        .threads
        .or_else(|| std::env::var("STCONV_THREADS").ok().and_then(|v| v.parse().ok()))
    {
        if rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .is_err()
        {
            eprintln!("warning: thread pool already initialized");
        }
    }
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn read_config(path: &Path) -> Result<(ModelConfig, TrainConfig), Error> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::InvalidConfig(format!("cannot read config {}: {e}", path.display()))
    })?;
    parse_config(&text)
}

fn print_resolved(mc: &ModelConfig, tc: &TrainConfig) {
    for line in render_config(mc, tc).lines() {
        println!("# config {line}");
    }
}

fn run(cmd: Command) -> Result<ExitCode, Error> {
    match cmd {
        Command::Analyze { config, input_hw } => {
            let (mc, tc) = read_config(&config)?;
            let (h, w) = match input_hw {
                None => (48, 48),
                Some(s) => {
                    let parts: Vec<&str> = s.split(',').collect();
                    let parse = |v: &str| {
                        v.trim()
                            .parse::<usize>()
                            .map_err(|_| Error::InvalidArg(format!("bad extent {v}")))
                    };
                    match parts.as_slice() {
                        [h, w] => (parse(h)?, parse(w)?),
                        [hw] => {
                            let v = parse(hw)?;
                            (v, v)
                        }
                        _ => return Err(Error::InvalidArg("expected --input-hw H,W".into())),
                    }
                }
            };
            print_resolved(&mc, &tc);
            let report = count_model_flops(&mc, h, w)?;
            println!(
                "{:<22} {:>5} {:>5} {:>26} {:>5}x{:<5} {:>3} {:>12} {:>14} {:>14} {:>8}",
                "layer",
                "c_in",
                "c_out",
                "kernel",
                "h",
                "w",
                "t",
                "params",
                "macs",
                "dense_macs",
                "ratio"
            );
            for r in &report.rows {
                println!(
                    "{:<22} {:>5} {:>5} {:>26} {:>5}x{:<5} {:>3} {:>12} {:>14} {:>14} {:>8}",
                    r.name,
                    r.c_in,
                    r.c_out,
                    r.kernel,
                    r.h,
                    r.w,
                    r.t,
                    r.params,
                    r.macs,
                    r.dense_macs,
                    r.ratio
                );
            }
            println!("total_params {}", report.total_params);
            println!("total_macs {}", report.total_macs);
            println!("total_dense_macs {}", report.total_dense_macs);
            println!("dense_unet3d_params {}", report.dense_unet3d_params);
            println!("dense_equiv_params {}", report.dense_equiv_params);
            println!(
                "savings_vs_dense_macs {:.4}",
                report.total_macs as f64 / report.total_dense_macs as f64
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::GenData {
            out,
            count,
            seed,
            grid,
            val,
            test,
            preset,
        } => {
            if val + test > count {
                return Err(Error::InvalidArg(format!(
                    "val {val} + test {test} exceeds count {count}"
                )));
            }
            let spec = match preset {
                Preset::Default => SceneSpec::desk(grid),
                Preset::Motion => SceneSpec::motion(grid),
            };
            println!("# config out = {}", out.display());
            println!(
                "# config count = {count} (train {}, val {val}, test {test})",
                count - val - test
            );
            println!("# config seed = {seed}");
            println!("# config grid = {grid}");
            println!(
                "# config preset = {}",
                match preset {
                    Preset::Default => "default",
                    Preset::Motion => "motion",
                }
            );
            let samples = generate(&spec, seed, count)?;
            let train_n = count - val - test;
            let entries = samples
                .into_iter()
                .enumerate()
                .map(|(i, sample)| DatasetEntry {
                    id: format!("sample_{i:06}"),
                    split: if i < train_n {
                        Split::Train
                    } else if i < train_n + val {
                        Split::Val
                    } else {
                        Split::Test
                    },
                    sample,
                })
                .collect();
            stconv_core::data::write_dataset(&out, &Dataset { entries })?;
            println!("wrote {count} samples to {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Train {
            config,
            data,
            out,
            epochs,
            seed,
        } => {
            let (mc, mut tc) = read_config(&config)?;
            if let Some(e) = epochs {
                tc.epochs = e;
            }
            if let Some(s) = seed {
                tc.seed = s;
            }
            print_resolved(&mc, &tc);
            let ds = stconv_core::data::read_dataset(&data)?;
            let train: Vec<_> = ds.split(Split::Train).into_iter().cloned().collect();
            let val: Vec<_> = ds.split(Split::Val).into_iter().cloned().collect();
            println!("# dataset train {} val {}", train.len(), val.len());
            let mut store = build(&mc, tc.seed, Dtype::F32)?;
            let result = train_loop(&mc, &mut store, &train, &val, &tc)?;
            for r in &result.log {
                println!(
                    "epoch {} train_loss {:.6} val_loss {:.6} val_miou {:.6} lr {:.6e}",
                    r.epoch, r.train_loss, r.val_loss, r.val_miou, r.lr
                );
            }
            std::fs::create_dir_all(&out)?;
            save_checkpoint(out.join("best.star"), &mc, &result.best)?;
            std::fs::write(out.join("train_log.csv"), log_to_csv(&result.log))?;
            println!(
                "best epoch {}; wrote {} and {}",
                result.best_epoch,
                out.join("best.star").display(),
                out.join("train_log.csv").display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Predict {
            ckpt,
            input,
            output,
        } => {
            let (mc, store) = load_checkpoint(&ckpt)?;
            let tc = TrainConfig::desk();
            print_resolved(&mc, &tc);
            let x = load_stsr(&input)?;
            let (_, y_final) = predict(&store, &mc, &x)?;
            save_stsr(&output, &y_final)?;
            println!(
                "wrote logits {} with shape {}",
                output.display(),
                y_final.shape()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval {
            pred,
            truth,
            threshold,
        } => {
            println!("# config pred = {}", pred.display());
            println!("# config truth = {}", truth.display());
            println!("# config threshold = {threshold}");
            let p = load_stsr(&pred)?;
            let t = load_stsr(&truth)?;
            let m = binarize_and_score(&p, &t, threshold)?;
            println!("{}", m.to_csv_line());
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck { seed } => {
            println!("# config seed = {seed}");
            let reports = gradcheck_suite(seed, Corruption::None);
            print_reports(&reports);
            Ok(exit_for(&reports))
        }
        Command::Selftest { seed } => {
            println!("# config seed = {seed}");
            let reports = selftest_suite(seed);
            print_reports(&reports);
            Ok(exit_for(&reports))
        }
    }
}

fn print_reports(reports: &[stconv_core::verify::CheckReport]) {
    for r in reports {
        println!(
            "{} {} ({})",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.detail
        );
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    println!("{} checks, {} failed", reports.len(), failed);
}

fn exit_for(reports: &[stconv_core::verify::CheckReport]) -> ExitCode {
    if all_passed(reports) {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}
