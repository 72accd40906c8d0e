use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rayprior::config::{RunConfig, Variant};
use rayprior::experiment::{self, Artifacts, Layout};
use rayprior::render::{render_image, DirectionSource, RenderOptions};
use rayprior::rrc::DepthCache;
use rayprior::train::Priors;
use rayprior::{Error, Result};

#[derive(Parser)]
#[command(name = "rayprior", about = "Radiance field training with ray-casting and ray-atlas priors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted override, e.g. `--set train.p_ra=0.25`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Replaces the top-level seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut o = self.overrides.clone();
        if let Some(s) = self.seed {
            o.push(format!("seed={s}"));
        }
        RunConfig::load(self.config.as_deref(), &o)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render the toy scene into a dataset with masks and a manifest.
    GenScene(Common),
    /// Re-tag test frames as close/middle/far by rotation distance.
    Split {
        #[command(flatten)]
        common: Common,
        /// Explicit `LO,HI` boundaries instead of tertiles.
        #[arg(long, value_parser = parse_pair)]
        boundaries: Option<(f64, f64)>,
    },
    /// Train stage 1 (also writes the depth cache) or fine-tune a variant.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        /// Prior combination for stage 2.
        #[arg(long, default_value = "rrc+ra", value_parser = parse_variant)]
        variant: Variant,
    },
    /// Extract a triangle mesh from the stage-1 density.
    ExtractMesh(Common),
    /// Average training ray directions onto the mesh vertices.
    BuildAtlas(Common),
    /// Render every test frame of a variant.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "baseline", value_parser = parse_variant)]
        variant: Variant,
    },
    /// Score saved checkpoints and write metric CSVs.
    Eval(Common),
    /// Sweep the cone half-angle of the full prior combination.
    Ablate(Common),
    /// Run the whole pipeline for every configured variant.
    Run(Common),
}

fn parse_pair(s: &str) -> std::result::Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or("expected LO,HI")?;
    let lo: f64 = a.trim().parse().map_err(|e| format!("{e}"))?;
    let hi: f64 = b.trim().parse().map_err(|e| format!("{e}"))?;
    if lo > hi {
        return Err("LO must not exceed HI".into());
    }
    Ok((lo, hi))
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    Variant::parse(s).map_err(|e| e.to_string())
}

fn print_report(report: &rayprior::metrics::MetricReport) {
    println!("variant,group,frames,psnr,ssim");
    for g in report.aggregates() {
        println!("{},{},{},{:.3},{:.4}", g.variant, g.group, g.frames, g.psnr, g.ssim);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenScene(c) => {
            let cfg = c.load()?;
            let layout = Layout::new(&cfg.out_dir);
            let ds = experiment::generate(&cfg, &layout, &mut Artifacts::default()).map_err(|e| e.in_stage("gen-scene"))?;
            println!("wrote {} frames to {}", ds.frames().len(), ds.root.display());
        }
        Command::Split { common, boundaries } => {
            let cfg = common.load()?;
            let layout = Layout::new(&cfg.out_dir);
            let mut ds = experiment::load_dataset(&layout).map_err(|e| e.in_stage("split"))?;
            ds.resplit(boundaries).and_then(|_| ds.save_manifest()).map_err(|e| e.in_stage("split"))?;
            println!("frame,split,d_y");
            for f in ds.frames() {
                println!("{},{},{:.6}", f.file_path, f.split.name(), f.d_y);
            }
        }
        Command::Train { common, stage, variant } => {
            let cfg = common.load()?;
            let layout = Layout::new(&cfg.out_dir);
            if stage == 2 && variant == Variant::Baseline {
                return Err(Error::Config("the baseline has no stage 2; pick ra, rrc or rrc+ra".into()));
            }
            let stage_name = if stage == 1 { "train-stage1" } else { "train-stage2" };
            let at = |e: Error| e.in_stage(stage_name);
            let data = experiment::load_dataset(&layout).and_then(|d| d.training_set()).map_err(at)?;
            if stage == 1 {
                let state = experiment::stage1(&cfg, &data, &layout, &mut Artifacts::default()).map_err(at)?;
                println!("stage 1 done at iteration {}", state.iteration);
            } else {
                let base = experiment::load_variant(&layout, Variant::Baseline).map_err(at)?;
                let depth = DepthCache::load(&layout.depth_dir(), data.views().len()).map_err(at)?;
                let atlas = if variant.uses_atlas() {
                    Some(experiment::load_atlas(&layout).map_err(at)?)
                } else {
                    None
                };
                let priors = Priors {
                    depth: Some(&depth),
                    atlas: atlas.as_ref(),
                };
                let state = experiment::stage2(
                    &variant.schedule(&cfg.train),
                    &base,
                    &data,
                    priors,
                    &layout.variant_checkpoint(variant),
                    &layout.variant_loss(variant),
                )
                .map_err(at)?;
                println!("stage 2 ({}) done at iteration {}", variant.name(), state.iteration);
            }
        }
        Command::ExtractMesh(c) => {
            let cfg = c.load()?;
            let layout = Layout::new(&cfg.out_dir);
            let at = |e: Error| e.in_stage("extract-mesh");
            let state = experiment::load_variant(&layout, Variant::Baseline).map_err(at)?;
            let mesh = experiment::extract(&cfg, &state, &layout, &mut Artifacts::default()).map_err(at)?;
            println!("{} vertices, {} triangles", mesh.vertices.len(), mesh.triangles.len());
        }
        Command::BuildAtlas(c) => {
            let cfg = c.load()?;
            let layout = Layout::new(&cfg.out_dir);
            let at = |e: Error| e.in_stage("build-atlas");
            let data = experiment::load_dataset(&layout).and_then(|d| d.training_set()).map_err(at)?;
            let mesh = experiment::load_mesh(&layout).map_err(at)?;
            let atlas = experiment::build_atlas(&cfg, mesh, &data, &layout, &mut Artifacts::default()).map_err(at)?;
            println!("{:.1}% of vertices seen by a training view", 100.0 * atlas.valid_fraction());
        }
        Command::Render { common, variant } => {
            let cfg = common.load()?;
            let layout = Layout::new(&cfg.out_dir);
            let at = |e: Error| e.in_stage("render");
            let ds = experiment::load_dataset(&layout).map_err(at)?;
            let state = experiment::load_variant(&layout, variant).map_err(at)?;
            let atlas = if variant.uses_atlas() {
                Some(experiment::load_atlas(&layout).map_err(at)?)
            } else {
                None
            };
            let m = &ds.manifest;
            let mut opts = RenderOptions::new(cfg.eval.samples, m.t_near, m.t_far);
            if let Some(a) = &atlas {
                opts.directions = DirectionSource::Prior(a);
            }
            let frames = ds.indices(|f| f.split != rayprior::dataset::SplitTag::Train);
            for &i in &frames {
                let name = std::path::Path::new(&ds.frames()[i].file_path)
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                let out = layout.render(variant, &name);
                render_image(&state.field, &ds.camera(i).map_err(at)?, &opts)
                    .and_then(|r| r.rgb.save_png(&out))
                    .map_err(at)?;
            }
            println!("rendered {} frames", frames.len());
        }
        Command::Eval(c) => {
            let cfg = c.load()?;
            let report = experiment::evaluate_saved(&cfg).map_err(|e| e.in_stage("eval"))?;
            print_report(&report);
        }
        Command::Ablate(c) => {
            let cfg = c.load()?;
            let rows = experiment::ablate(&cfg)?;
            println!("{}", experiment::SWEEP_HEADER);
            for r in rows {
                println!(
                    "{},rrc+ra,{:.3},{:.3},{:.4}",
                    r.eta_deg, r.interpolation_psnr, r.extrapolation_psnr, r.extrapolation_ssim
                );
            }
        }
        Command::Run(c) => {
            let cfg = c.load()?;
            let out = experiment::run_experiment(&cfg)?;
            print_report(&out.report);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
