use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{ensure, Context, Result};
use clap::{Parser, Subcommand};

use madf_core::checks::{self, SuiteResult};
use madf_core::losses::compose;
use madf_core::masks::{
    gen_freeform_mask, load_image, load_mask, save_image, save_mask, stack_masks, Bucket, MaskKind, MaskSpec,
};
use madf_core::metrics::evaluate_set;
use madf_core::model::{count_flops, dump_first_layer_kernels, Model, ModelConfig};
use madf_core::train::{derive_seed, Checkpoint, Dataset, Stream, TrainConfig, Trainer};
use madf_core::Tensor4;

/// Mask-aware dynamic filtering inpainting toolkit.
#[derive(Parser, Debug)]
#[command(name = "madf", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train from a `key = value` config file.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Inpaint one image. Writes the composed result; with
    /// --emit-intermediate also every decoder's raw output.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        emit_intermediate: bool,
    },
    /// Bucketed PSNR/SSIM on synthetic images and held-out free-form masks.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write free-form masks of one hole-ratio bucket as P5 files.
    GenMasks {
        /// Index 0-5 or an interval such as 0.2-0.3.
        #[arg(long)]
        bucket: Bucket,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = parse_hw, default_value = "64,64")]
        hw: (usize, usize),
    },
    /// Multiply counts per network component.
    Flops {
        #[arg(long, default_value = "desk")]
        preset: String,
        #[arg(long, value_parser = parse_hw)]
        hw: Option<(usize, usize)>,
        /// Refinement decoder count; defaults to the preset's.
        #[arg(long)]
        refinements: Option<usize>,
        /// Plain batch normalization in the refinement decoders.
        #[arg(long)]
        no_pn: bool,
    },
    /// Finite-difference gradient suites; exits nonzero if any fails.
    Gradcheck {
        #[arg(long)]
        module: Option<String>,
    },
    /// First-level generated kernels of the most valid and most damaged
    /// windows of a mask, as a grayscale grid.
    DumpKernels {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_hw(s: &str) -> std::result::Result<(usize, usize), String> {
    let parts: Vec<&str> = s.split([',', 'x']).collect();
    match parts.as_slice() {
        [h, w] => match (h.trim().parse(), w.trim().parse()) {
            (Ok(h), Ok(w)) if h > 0 && w > 0 => Ok((h, w)),
            _ => Err(format!("expected positive H,W, got '{s}'")),
        },
        _ => Err(format!("expected H,W, got '{s}'")),
    }
}

fn load_model(path: &Path) -> Result<Model<f32>> {
    Ok(Checkpoint::<f32>::load(path)?.model)
}

fn train(config_path: &Path) -> Result<()> {
    let text = fs::read_to_string(config_path).with_context(|| format!("reading {}", config_path.display()))?;
    let config = TrainConfig::parse(&text).with_context(|| format!("parsing {}", config_path.display()))?;
    let mut log: Box<dyn Write> = match &config.log {
        Some(p) => Box::new(
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .with_context(|| format!("opening log {}", p.display()))?,
        ),
        None => Box::new(io::stdout().lock()),
    };
    let mut trainer = Trainer::new(config)?;
    let summary = trainer.run(&mut log)?;
    log.flush()?;
    if let (Some(first), Some(last)) = (summary.losses.first(), summary.losses.last()) {
        eprintln!(
            "trained to iteration {}: loss {first:.6} -> {last:.6}",
            trainer.iteration()
        );
    }
    Ok(())
}

fn with_suffix(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let ext = out.extension().map(|e| format!(".{}", e.to_string_lossy())).unwrap_or_default();
    out.with_file_name(format!("{stem}{suffix}{ext}"))
}

fn infer(ckpt: &Path, image: &Path, mask: &Path, out: &Path, emit_intermediate: bool) -> Result<()> {
    let model = load_model(ckpt)?;
    let sample = load_image(image)?;
    let mask = load_mask(mask)?;
    ensure!(
        (mask.height(), mask.width()) == (sample.height(), sample.width()),
        "mask is {}x{} but image is {}x{}",
        mask.height(),
        mask.width(),
        sample.height(),
        sample.width()
    );
    let gt = sample.pixels;
    let m = stack_masks::<f64>(std::slice::from_ref(&mask))?;
    let damaged = compose(&Tensor4::zeros(gt.shape()), &gt, &m)?;
    let outs = model.infer(&damaged.cast(), &m.cast())?;
    let clamp = |t: &Tensor4<f32>| t.cast::<f64>().map(|v| v.clamp(0.0, 1.0));
    let last = clamp(outs.last().expect("at least one decoder"));
    save_image(&compose(&last, &gt, &m)?, 0, out)?;
    println!("wrote {}", out.display());
    if emit_intermediate {
        for (d, o) in outs.iter().enumerate() {
            let path = with_suffix(out, &format!("_d{d}"));
            save_image(&clamp(o), 0, &path)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn eval(ckpt: &Path, count: usize, seed: u64) -> Result<()> {
    let model = load_model(ckpt)?;
    if count == 0 {
        print!("{}", madf_core::metrics::EvalReport::default());
        return Ok(());
    }
    let (h, w) = model.config().input_hw;
    let (samples, masks) = Dataset::synthetic(h, w, count, seed, false).eval_set(count)?;
    let report = evaluate_set(&model, &samples, &masks)?;
    print!("{report}\n{}", report.to_csv());
    Ok(())
}

fn gen_masks(bucket: Bucket, count: usize, seed: u64, out: &Path, (h, w): (usize, usize)) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for i in 0..count {
        let spec = MaskSpec {
            kind: MaskKind::Freeform,
            bucket,
            seed: derive_seed(seed, Stream::EvalMasks, i as u64),
        };
        let mask = gen_freeform_mask(h, w, &spec)?;
        let path = out.join(format!("mask_{i:05}.pgm"));
        save_mask(&mask, &path)?;
        println!("{} ratio={:.6}", path.display(), mask.hole_ratio());
    }
    Ok(())
}

fn flops(preset: &str, hw: Option<(usize, usize)>, refinements: Option<usize>, no_pn: bool) -> Result<()> {
    let mut config = ModelConfig::preset(preset)?;
    if let Some(k) = refinements {
        config = config.with_refinements(k);
    }
    if no_pn {
        config = config.with_pn(false);
    }
    let (h, w) = hw.unwrap_or(config.input_hw);
    let report = count_flops(&config, h, w)?;
    print!("{report}\n{}", report.key_values());
    Ok(())
}

fn print_suite(r: &SuiteResult) {
    println!(
        "{:<24} {} max_rel_err={:.3e} tol={:.0e} checked={} kink_crossings={} unresolved={}",
        r.name,
        if r.passed() { "PASS" } else { "FAIL" },
        r.max_rel_err,
        r.tolerance,
        r.checked,
        r.kink_crossings,
        r.unresolved
    );
}

fn gradcheck(module: Option<&str>) -> Result<bool> {
    let results = match module {
        Some(m) => vec![checks::run_suite(m)?],
        None => checks::run_all()?,
    };
    results.iter().for_each(print_suite);
    Ok(results.iter().all(SuiteResult::passed))
}

fn dump_kernels(ckpt: &Path, mask: &Path, out: &Path) -> Result<()> {
    let model = load_model(ckpt)?;
    let mask = load_mask(mask)?;
    let dump = dump_first_layer_kernels(&model, &stack_masks::<f32>(std::slice::from_ref(&mask))?)?;
    save_image(&dump.grid, 0, out)?;
    for r in &dump.rows {
        println!(
            "window={},{} valid_fraction={:.4} energy={:.6e}",
            r.window.0, r.window.1, r.valid_fraction, r.energy
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train { config } => train(&config)?,
        Command::Infer {
            ckpt,
            image,
            mask,
            out,
            emit_intermediate,
        } => infer(&ckpt, &image, &mask, &out, emit_intermediate)?,
        Command::Eval { ckpt, count, seed } => eval(&ckpt, count, seed)?,
        Command::GenMasks {
            bucket,
            count,
            seed,
            out,
            hw,
        } => gen_masks(bucket, count, seed, &out, hw)?,
        Command::Flops {
            preset,
            hw,
            refinements,
            no_pn,
        } => flops(&preset, hw, refinements, no_pn)?,
        Command::Gradcheck { module } => return gradcheck(module.as_deref()),
        Command::DumpKernels { ckpt, mask, out } => dump_kernels(&ckpt, &mask, &out)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
