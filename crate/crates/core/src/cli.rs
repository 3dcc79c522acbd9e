//! Command-line front end. Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::io::{read_cloud, write_cloud};
use crate::geometry::{chamfer_l1, fps, knn};
use crate::model::SymmCompletion;
use crate::selftest::random_cloud;
use crate::training::data::{gen_synthetic_with, SynthOptions};
use crate::training::trainer::LOG_HEADER;
use crate::training::{evaluate, load_dataset, save_dataset, split, train_with, ModelConfig};

pub const THREADS_ENV: &str = "SYMM_THREADS";

#[derive(Parser, Debug)]
#[command(name = "symmcomp", version, about = "Symmetry-guided point cloud completion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset of partial/complete pairs.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 2048)]
        resolution: usize,
        #[arg(long, default_value_t = 512)]
        partial_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes the checkpoint, `<out>.toml` and `<out>.log`.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint; writes metrics.csv and metrics.json.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Model configuration; defaults to the `<ckpt>.toml` written by `train`.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write mirror/init/fine1/fine2 clouds per sample under `<report>/clouds`.
        #[arg(long)]
        export: bool,
    },
    /// Complete a single partial cloud (XYZ or PCF1).
    Complete {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Stage::Fine2)]
        stage: Stage,
    },
    /// Time a geometry kernel and print operations per second.
    Bench {
        #[arg(long, value_enum)]
        op: BenchOp,
        #[arg(long)]
        n: usize,
    },
    /// Run the oracle and gradient checks.
    Selftest {
        /// Check every parameter in the end-to-end gradient test.
        #[arg(long)]
        full: bool,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Stage {
    Mirror,
    Init,
    Fine1,
    Fine2,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BenchOp {
    Knn,
    Chamfer,
    Fps,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    configure_threads();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

/// `SYMM_THREADS=n` caps the worker pool; 0 means a single thread.
fn configure_threads() {
    if let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        // Fails only if the pool already exists, e.g. on a second call in one process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

fn sidecar(ckpt: &Path, ext: &str) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(ext);
    PathBuf::from(s)
}

fn require_file(path: &Path) -> Result<()> {
    fs::metadata(path).map(|_| ()).map_err(|e| Error::io(path, e))
}

fn require_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => require_file(p),
        _ => Ok(()),
    }
}

fn write(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn load_model(ckpt: &Path, config: Option<PathBuf>) -> Result<SymmCompletion> {
    let cfg_path = config.unwrap_or_else(|| sidecar(ckpt, ".toml"));
    require_file(ckpt)?;
    let cfg = ModelConfig::load(&cfg_path)?;
    SymmCompletion::load(&cfg, ckpt)
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData {
            seed,
            count,
            resolution,
            partial_size,
            out,
        } => {
            let samples = gen_synthetic_with(
                seed,
                count,
                &SynthOptions {
                    resolution,
                    partial_size,
                },
            )?;
            save_dataset(&out, &samples)?;
            println!("wrote {} samples to {}", samples.len(), out.display());
        }
        Command::Train { config, data, out } => {
            let cfg = ModelConfig::load(&config)?;
            require_file(&data.join("manifest.csv"))?;
            require_parent(&out)?;
            let dataset = load_dataset(&data)?;
            let (train_set, val_set) = split(&dataset);
            println!("{} training and {} validation samples", train_set.len(), val_set.len());
            println!("{LOG_HEADER}");
            let (model, report) = train_with(&cfg, &train_set, &val_set, |row| println!("{}", row.line()))?;
            model.save(&out)?;
            cfg.save(&sidecar(&out, ".toml"))?;
            write(&sidecar(&out, ".log"), &report.to_csv())?;
            println!("parameters: {}", report.param_count);
        }
        Command::Eval {
            ckpt,
            data,
            report,
            config,
            export,
        } => {
            require_file(&data.join("manifest.csv"))?;
            let model = load_model(&ckpt, config)?;
            let dataset = load_dataset(&data)?;
            let clouds = report.join("clouds");
            let result = evaluate(&model, &dataset, export.then_some(clouds.as_path()))?;
            result.write(&report)?;
            let a = &result.aggregate;
            println!(
                "run {}: {} samples, cd_l1 {:.6e}, cd_l2 {:.6e}, f1 {:.4}, fd {:.6e}, mmd {:.6e}",
                result.run_id, result.samples, a.cd_l1, a.cd_l2, a.f1_at_1pct, a.fd, a.mmd
            );
        }
        Command::Complete {
            ckpt,
            input,
            out,
            config,
            stage,
        } => {
            let partial = read_cloud(&input)?;
            require_parent(&out)?;
            let model = load_model(&ckpt, config)?;
            let c = model.complete(&partial)?;
            let cloud = match stage {
                Stage::Mirror => &c.p_m,
                Stage::Init => &c.p_init,
                Stage::Fine1 => &c.fines[0],
                Stage::Fine2 => &c.fines[1],
            };
            write_cloud(&out, cloud)?;
            println!("wrote {} points to {}", cloud.len(), out.display());
        }
        Command::Bench { op, n } => bench(op, n)?,
        Command::Selftest { full } => {
            let checks = crate::selftest::run(!full)?;
            let failed = checks.iter().filter(|c| !c.passed).count();
            for c in &checks {
                println!("[{}] {}: {}", if c.passed { "pass" } else { "FAIL" }, c.name, c.detail);
            }
            if failed > 0 {
                return Err(Error::Domain(format!("{failed} self-test check(s) failed")));
            }
        }
    }
    Ok(())
}

fn bench(op: BenchOp, n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Size("--n must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random_cloud(&mut rng, n);
    let b = random_cloud(&mut rng, n);
    let mut runs = 0u32;
    let mut sink = 0.0;
    let t0 = Instant::now();
    while runs == 0 || t0.elapsed().as_secs_f64() < 0.5 {
        sink += match op {
            BenchOp::Knn => knn(&a, &b, 16.min(n))?.len() as f64,
            BenchOp::Chamfer => chamfer_l1(&a, &b),
            BenchOp::Fps => fps(&a, n.div_ceil(4), 0)?.len() as f64,
        };
        runs += 1;
    }
    let secs = t0.elapsed().as_secs_f64();
    std::hint::black_box(sink);
    println!("{op:?} n={n}: {:.2} ops/sec ({runs} runs in {secs:.3} s)", runs as f64 / secs);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_with_one() {
        assert_eq!(run(["symmcomp"]), 1);
        assert_eq!(run(["symmcomp", "frobnicate"]), 1);
        assert_eq!(run(["symmcomp", "bench", "--op", "sort", "--n", "4"]), 1);
        assert_eq!(run(["symmcomp", "gen-data", "--count", "x", "--out", "d"]), 1);
    }

    #[test]
    fn help_exits_with_zero() {
        assert_eq!(run(["symmcomp", "--help"]), 0);
        assert_eq!(run(["symmcomp", "train", "--help"]), 0);
    }

    #[test]
    fn missing_inputs_are_runtime_errors() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.xyz");
        let out = dir.path().join("out.xyz");
        let code = run([
            "symmcomp".as_ref(),
            "complete".as_ref(),
            "--ckpt".as_ref(),
            missing.as_os_str(),
            "--in".as_ref(),
            missing.as_os_str(),
            "--out".as_ref(),
            out.as_os_str(),
        ] as [&std::ffi::OsStr; 8]);
        assert_eq!(code, 2);
        assert!(!out.exists());
    }

    #[test]
    fn sidecar_appends_to_the_full_name() {
        assert_eq!(sidecar(Path::new("runs/m.symc"), ".toml"), PathBuf::from("runs/m.symc.toml"));
    }

    #[test]
    fn bench_rejects_empty_clouds() {
        assert!(matches!(bench(BenchOp::Knn, 0), Err(Error::Size(_))));
    }
}
