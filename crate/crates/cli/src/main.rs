use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use refill_core::pipeline::dump_intermediates;
use refill_core::raster::{HoleMask, Image};
use refill_core::{fill_only, io, run_pipeline_with_depth, PipelineConfig};
use refill_harness::{brush_hole, synth_pair, two_plane_scene, write_quadruple, BrushParams, Quadruple, Regime, SynthRegime, Texture, TwoPlaneParams};
use refill_service::{store_dir, ComputeMode, Store};

const EXIT_FAILURE: u8 = 1;
const EXIT_INPUT: u8 = 2;
const EXIT_DEGRADED: u8 = 3;

#[derive(Parser)]
#[command(name = "refill", version, about = "Reference-guided image inpainting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fill the masked hole of a target image using a source image.
    Inpaint(InpaintArgs),
    /// Write a synthetic (target, source, mask, gt) quadruple.
    Synth(SynthArgs),
    /// Evaluate every quadruple in a directory.
    Eval(EvalArgs),
    /// Run the HTTP session service.
    Serve(ServeArgs),
}

#[derive(Args)]
struct InpaintArgs {
    #[arg(long)]
    target: PathBuf,
    /// Single-channel PNG, values >= 128 are hole.
    #[arg(long)]
    mask: PathBuf,
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// JSON pipeline configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory receiving every intermediate image and JSON record.
    #[arg(long)]
    dump: Option<PathBuf>,
    /// Comma-separated proposal ids to switch off.
    #[arg(long, value_delimiter = ',')]
    disable: Vec<usize>,
    #[arg(long)]
    poisson: bool,
    #[arg(long)]
    posthoc_fill: bool,
    /// Skip proposals and composite the single-image fill only.
    #[arg(long)]
    fill_only: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Depth map for depth-file clustering.
    #[arg(long)]
    depth: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// CS, CSbar, CbarS or CbarSbar.
    #[arg(long, default_value = "CS")]
    regime: Regime,
    /// Defaults to 0, or to the golden scene's seed with `--two-plane`.
    #[arg(long)]
    seed: Option<u64>,
    /// Corpus directory; the quadruple goes into a subdirectory.
    #[arg(long)]
    out: PathBuf,
    /// Subdirectory name, default `<regime>_<seed>`.
    #[arg(long)]
    id: Option<String>,
    /// Ground-truth image; a procedural texture is used when absent.
    #[arg(long)]
    gt: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    width: usize,
    #[arg(long, default_value_t = 192)]
    height: usize,
    #[arg(long, default_value_t = 12.0)]
    max_corner_px: f64,
    #[arg(long, default_value_t = 0.0)]
    local_warp_px: f64,
    /// Write the two-plane parallax scene instead of a synthetic pair.
    #[arg(long)]
    two_plane: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of quadruple subdirectories.
    #[arg(long)]
    pairs: PathBuf,
    /// Report directory, or a .json/.csv path naming both report files.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// Session store directory (overrides REFILL_STORE).
    #[arg(long)]
    store: Option<PathBuf>,
}

/// Marks failures caused by the caller's inputs.
#[derive(Debug)]
struct InputError(String);

impl std::fmt::Display for InputError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

fn input_err(e: impl std::fmt::Display) -> anyhow::Error {
    InputError(e.to_string()).into()
}

fn is_input_error(e: &anyhow::Error) -> bool {
    use refill_core::Error as E;
    e.chain().any(|c| {
        c.is::<InputError>()
            || c.downcast_ref::<E>().is_some_and(|e| {
                matches!(
                    e,
                    E::DimensionMismatch { .. }
                        | E::ImageTooSmall { .. }
                        | E::InvalidImage(_)
                        | E::AllHole
                        | E::InvalidConfig(_)
                        | E::InvalidParameter(_)
                )
            })
            || c.downcast_ref::<refill_harness::Error>().is_some_and(|e| {
                matches!(
                    e,
                    refill_harness::Error::InvalidParameter(_)
                        | refill_harness::Error::DimensionMismatch(..)
                        | refill_harness::Error::EmptyCorpus(_)
                )
            })
    })
}

fn load_config(path: Option<&Path>) -> anyhow::Result<PipelineConfig> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| input_err(format!("{}: {e}", p.display())))?;
            PipelineConfig::from_json(&text).map_err(|e| input_err(format!("{}: {e}", p.display())))
        }
        None => Ok(PipelineConfig::default()),
    }
}

fn read_image(path: &Path) -> anyhow::Result<Image> {
    io::load_image(path, true).map_err(|e| input_err(format!("{}: {e}", path.display())))
}

fn read_mask(path: &Path) -> anyhow::Result<HoleMask> {
    io::load_mask(path).map_err(|e| input_err(format!("{}: {e}", path.display())))
}

fn inpaint(args: InpaintArgs) -> anyhow::Result<u8> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.rng_seed = seed;
    }
    cfg.poisson |= args.poisson;
    cfg.posthoc_fill |= args.posthoc_fill;
    for &i in &args.disable {
        if i == 0 {
            return Err(input_err("proposal ids start at 1"));
        }
        if cfg.proposal_toggles.len() < i {
            cfg.proposal_toggles.resize(i, true);
        }
        cfg.proposal_toggles[i - 1] = false;
    }
    let target = read_image(&args.target)?;
    let mask = read_mask(&args.mask)?;
    if mask.dims() != target.dims() {
        return Err(input_err(format!(
            "mask is {}x{} but target is {}x{}",
            mask.width(),
            mask.height(),
            target.width(),
            target.height()
        )));
    }
    let source = read_image(&args.source)?;
    let depth = match &args.depth {
        Some(p) => Some(io::load_image(p, false).map_err(|e| input_err(format!("{}: {e}", p.display())))?),
        None => None,
    };
    if args.fill_only {
        let out = fill_only(&target, &mask, &cfg)?;
        io::save_image(&out, &args.out).with_context(|| format!("writing {}", args.out.display()))?;
        return Ok(0);
    }
    let result = run_pipeline_with_depth(&target, &mask, &source, depth.as_ref(), &cfg)?;
    io::save_image(result.output(), &args.out).with_context(|| format!("writing {}", args.out.display()))?;
    if let Some(dir) = &args.dump {
        dump_intermediates(&result, dir).with_context(|| format!("writing {}", dir.display()))?;
    }
    for note in &result.prepared.notes {
        eprintln!("note: {note}");
    }
    if result.degraded() {
        eprintln!("degraded: no usable proposal, wrote the single-image fill");
        return Ok(EXIT_DEGRADED);
    }
    Ok(0)
}

fn synth(args: SynthArgs) -> anyhow::Result<u8> {
    let seed = match args.seed {
        Some(s) => s,
        None if args.two_plane => TwoPlaneParams::default().seed,
        None => 0,
    };
    let id = args.id.clone().unwrap_or_else(|| {
        if args.two_plane {
            format!("two_plane_{seed}")
        } else {
            format!("{}_{seed}", args.regime)
        }
    });
    let (quad, truth) = if args.two_plane {
        let scene = two_plane_scene(&TwoPlaneParams {
            seed,
            ..TwoPlaneParams::default()
        })?;
        let truth = serde_json::json!({
            "h_background": scene.h_background,
            "h_foreground": scene.h_foreground,
        });
        let q = Quadruple {
            id,
            target: scene.target,
            source: scene.source,
            mask: scene.mask,
            gt: scene.gt,
            depth: None,
        };
        (q, truth)
    } else {
        let gt = match &args.gt {
            Some(p) => read_image(p)?,
            None => Texture::new(seed, args.width as f64, args.height as f64).render(args.width, args.height),
        };
        let regime = SynthRegime {
            max_corner_px: args.max_corner_px,
            local_warp_px: args.local_warp_px,
            ..SynthRegime::new(args.regime, seed)
        };
        let (target, source, truth) = synth_pair(&gt, &regime)?;
        let mask = brush_hole(gt.dims(), &BrushParams::default(), seed)?;
        let q = Quadruple {
            id,
            target,
            source,
            mask,
            gt,
            depth: None,
        };
        (q, serde_json::to_value(truth)?)
    };
    let dir = write_quadruple(&args.out, &quad)?;
    std::fs::write(dir.join("truth.json"), serde_json::to_vec_pretty(&truth)?)?;
    println!("{}", dir.display());
    Ok(0)
}

fn eval(args: EvalArgs) -> anyhow::Result<u8> {
    let cfg = load_config(args.config.as_deref())?;
    if !args.pairs.is_dir() {
        return Err(input_err(format!("{} is not a directory", args.pairs.display())));
    }
    let report = refill_harness::eval_run(&args.pairs, &cfg, &args.out)?;
    println!("pair_id,psnr_hole,ssim_full,hole_fraction,n_proposals_used");
    for r in &report.rows {
        println!(
            "{},{:.3},{:.4},{:.4},{}",
            r.pair_id, r.psnr_hole, r.ssim_full, r.hole_fraction, r.n_proposals_used
        );
    }
    println!(
        "mean psnr_hole {:.3} dB, mean ssim_full {:.4} over {} pairs",
        report.psnr_hole.mean,
        report.ssim_full.mean,
        report.rows.len()
    );
    Ok(0)
}

fn serve(args: ServeArgs) -> anyhow::Result<u8> {
    let addr: SocketAddr = format!("{}:{}", args.host, args.port)
        .parse()
        .map_err(|e| input_err(format!("bad address: {e}")))?;
    let root = store_dir(args.store);
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(async move {
        let store = Store::open(&root, ComputeMode::Background).map_err(|e| anyhow::anyhow!("{e}"))?;
        eprintln!("serving on http://{addr} with store {}", root.display());
        refill_service::serve(addr, store).await?;
        anyhow::Ok(())
    })?;
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Inpaint(a) => inpaint(a),
        Command::Synth(a) => synth(a),
        Command::Eval(a) => eval(a),
        Command::Serve(a) => serve(a),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_input_error(&e) {
                ExitCode::from(EXIT_INPUT)
            } else {
                ExitCode::from(EXIT_FAILURE)
            }
        }
    }
}
