//! Command-line front end.
//!
//! Exit codes: 0 success, 1 I/O or internal error, 2 usage error,
//! 3 configuration error, 4 data or checkpoint format error, 5 numeric
//! failure, 6 verification failure.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::config::{DataSpec, RunConfig, RESOLVED_CONFIG_FILE};
use crate::coupling::Fault;
use crate::data_io::{load_checkpoint, write_pnm};
use crate::error::{JetError, Result};
use crate::flow::{build_jet, latent_seed};
use crate::numerics::{init_thread_pool_from_env, DType, Float};
use crate::training::{
    self, checkpoint_dtype, evaluate, restore_state, train, TrainOutputs, CHECKPOINT_FILE,
};
use crate::verify::{self, Level};

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_DATA: i32 = 4;
pub const EXIT_NUMERIC: i32 = 5;
pub const EXIT_VERIFY: i32 = 6;

pub fn exit_code(e: &JetError) -> i32 {
    match e {
        JetError::Config(_) => EXIT_CONFIG,
        JetError::Data(_) | JetError::Format { .. } | JetError::Version { .. } => EXIT_DATA,
        JetError::Numeric { .. } => EXIT_NUMERIC,
        JetError::Usage(_) => EXIT_USAGE,
        JetError::Shape { .. } | JetError::Io { .. } => EXIT_IO,
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "jet",
    version,
    about = "Train, evaluate and sample coupling flows"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train from a TOML run config.
    Train {
        config: PathBuf,
        /// Drop warmup and gradient clipping.
        #[arg(long)]
        paper_strict: bool,
    },
    /// Bits per dimension of a checkpoint on a dataset.
    Eval {
        checkpoint: PathBuf,
        /// `synth:<kind>[:n[:seed]]`, `cifar10:<dir>`, `cifar10-train:<dir>` or a CIFAR-10 directory.
        data: String,
        #[arg(long, default_value_t = 0)]
        noise_seed: u64,
        #[arg(long, default_value_t = 1)]
        repeats: u64,
        #[arg(long, default_value_t = 256)]
        batch_size: usize,
    },
    /// Draw images from a checkpoint.
    Sample {
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "samples")]
        out: PathBuf,
    },
    /// Run the built-in invariant suites.
    Verify {
        #[arg(long, value_enum, default_value_t = LevelArg::Fast)]
        level: LevelArg,
        #[arg(long, value_enum, hide = true)]
        inject_fault: Option<FaultArg>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LevelArg {
    Fast,
    Full,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FaultArg {
    SkipLogM,
}

/// Parse `args` (including the program name) and run. Returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = if e.use_stderr() {
                write!(err, "{e}")
            } else {
                write!(out, "{e}")
            };
            return code;
        }
    };
    init_thread_pool_from_env();
    let res = match cli.command {
        Command::Train {
            config,
            paper_strict,
        } => cmd_train(&config, paper_strict, out),
        Command::Eval {
            checkpoint,
            data,
            noise_seed,
            repeats,
            batch_size,
        } => cmd_eval(&checkpoint, &data, noise_seed, repeats, batch_size, out),
        Command::Sample {
            checkpoint,
            count,
            seed,
            out: dir,
        } => cmd_sample(&checkpoint, count, seed, &dir, out),
        Command::Verify {
            level,
            inject_fault,
        } => {
            let level = match level {
                LevelArg::Fast => Level::Fast,
                LevelArg::Full => Level::Full,
            };
            let fault = inject_fault.map(|FaultArg::SkipLogM| Fault::SkipLogM);
            let report = verify::run(level, fault);
            let _ = writeln!(out, "{report}");
            return if report.passed() {
                EXIT_OK
            } else {
                EXIT_VERIFY
            };
        }
    };
    match res {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> JetError + '_ {
    move |e| JetError::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

pub fn cmd_train(config: &Path, paper_strict: bool, out: &mut dyn Write) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let (resolved, train_cfg) = cfg.resolved(paper_strict);
    train_cfg.validate()?;
    let train_set = cfg.data.load(&cfg.model.geom, "data")?;
    let eval = match &cfg.eval {
        Some(e) => Some((e.data.load(&cfg.model.geom, "eval.data")?, e.noise_seed)),
        None => None,
    };
    fs::create_dir_all(&cfg.out_dir).map_err(io_err(&cfg.out_dir))?;
    let text = resolved.to_toml()?;
    let resolved_path = cfg.out_dir.join(RESOLVED_CONFIG_FILE);
    crate::data_io::write_atomic(&resolved_path, text.as_bytes())?;
    let outputs = TrainOutputs {
        dir: Some(cfg.out_dir.clone()),
        extra_config: format!("data: {}", train_set.provenance),
    };

    fn go<F: Float>(
        cfg: &RunConfig,
        tc: &training::TrainConfig,
        data: &crate::data_io::Dataset,
        eval: Option<(&crate::data_io::Dataset, u64)>,
        outputs: &TrainOutputs,
    ) -> Result<Option<training::MetricRecord>> {
        let mut model = build_jet::<F>(&cfg.model)?;
        let report = train(&mut model, data, tc, eval, outputs)?;
        Ok(report.metrics.last().cloned())
    }
    let eval_ref = eval.as_ref().map(|(d, s)| (d, *s));
    let last = match cfg.dtype {
        DType::F32 => go::<f32>(&cfg, &train_cfg, &train_set, eval_ref, &outputs)?,
        DType::F64 => go::<f64>(&cfg, &train_cfg, &train_set, eval_ref, &outputs)?,
    };
    let ck = cfg.out_dir.join(CHECKPOINT_FILE);
    match last {
        Some(rec) => writeln!(out, "{rec}").map_err(io_err(Path::new("<stdout>")))?,
        None => writeln!(out, "no training steps; wrote initial model")
            .map_err(io_err(Path::new("<stdout>")))?,
    }
    writeln!(out, "checkpoint={}", ck.display()).map_err(io_err(Path::new("<stdout>")))?;
    Ok(())
}

pub fn cmd_eval(
    ckpt: &Path,
    data: &str,
    noise_seed: u64,
    repeats: u64,
    batch: usize,
    out: &mut dyn Write,
) -> Result<()> {
    if repeats == 0 {
        return Err(JetError::Usage("--repeats must be at least 1".into()));
    }
    let spec = DataSpec::parse_arg(data)?;
    let ck = load_checkpoint(ckpt)?;

    fn go<F: Float>(
        ck: &crate::data_io::Checkpoint,
        path: &Path,
        spec: &DataSpec,
        seed: u64,
        repeats: u64,
        batch: usize,
    ) -> Result<Vec<f64>> {
        let state = restore_state::<F>(ck, path)?;
        let data = spec.load(state.model.geometry(), "data")?;
        (0..repeats)
            .map(|r| evaluate(&state.model, &data, seed, r, batch))
            .collect()
    }
    let values = match checkpoint_dtype(&ck, ckpt)? {
        DType::F32 => go::<f32>(&ck, ckpt, &spec, noise_seed, repeats, batch)?,
        DType::F64 => go::<f64>(&ck, ckpt, &spec, noise_seed, repeats, batch)?,
    };
    let w = |out: &mut dyn Write, s: String| {
        writeln!(out, "{s}").map_err(io_err(Path::new("<stdout>")))
    };
    if values.len() > 1 {
        for (r, v) in values.iter().enumerate() {
            w(out, format!("repeat={r} bpd={v}"))?;
        }
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    w(out, format!("mean_bpd={mean}"))
}

pub fn cmd_sample(
    ckpt: &Path,
    count: usize,
    seed: u64,
    dir: &Path,
    out: &mut dyn Write,
) -> Result<()> {
    let ck = load_checkpoint(ckpt)?;

    fn go<F: Float>(
        ck: &crate::data_io::Checkpoint,
        path: &Path,
        count: usize,
        seed: u64,
    ) -> Result<(Vec<u8>, (usize, usize, usize))> {
        let state = restore_state::<F>(ck, path)?;
        let g = *state.model.geometry();
        let s = state.model.sample(count, seed)?;
        Ok((s.images, (g.height, g.width, g.channels)))
    }
    let (images, (h, w, c)) = match checkpoint_dtype(&ck, ckpt)? {
        DType::F32 => go::<f32>(&ck, ckpt, count, seed)?,
        DType::F64 => go::<f64>(&ck, ckpt, count, seed)?,
    };
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let ext = if c == 1 { "pgm" } else { "ppm" };
    let mut seeds = String::from("# file latent_seed\n");
    for i in 0..count {
        let name = format!("sample_{i:04}.{ext}");
        let len = h * w * c;
        write_pnm(&dir.join(&name), h, w, c, &images[i * len..(i + 1) * len])?;
        seeds.push_str(&format!("{name} {}\n", latent_seed(seed, i)));
    }
    crate::data_io::write_atomic(&dir.join("latent_seeds.txt"), seeds.as_bytes())?;
    writeln!(out, "wrote {count} samples to {}", dir.display())
        .map_err(io_err(Path::new("<stdout>")))?;
    Ok(())
}
