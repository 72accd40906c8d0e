//! End-to-end orchestration: dataset generation, both training stages, mesh
//! and atlas construction, test renders and metrics.
//!
//! Output layout under `out_dir`:
//!
//! ```text
//! dataset/            transforms.json, images/, masks/
//! stage1/             field.ckpt, loss.csv, depth/depth_NNN.rfim
//! mesh/               mesh.obj, atlas.bin
//! variants/<name>/    field.ckpt, loss.csv
//! renders/<name>/     <frame>.png
//! metrics/            frames.csv, summary.csv, eta_sweep.csv
//! run_manifest.json
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::atlas::RayAtlas;
use crate::checkpoint;
use crate::config::{RunConfig, Variant};
use crate::dataset::{generate_dataset, Dataset, Regime, SplitTag};
use crate::error::{Error, Result};
use crate::imageio::{ensure_parent, Image};
use crate::mesh::{default_iso, extract_mesh, TriMesh};
use crate::metrics::{psnr, ssim, FrameMetric, MetricReport};
use crate::render::{render_image, DirectionSource, RenderOptions};
use crate::rrc::DepthCache;
use crate::train::{train_stage1, train_stage2, LossLog, Priors, TrainSchedule, TrainState, TrainingSet};

/// Paths of every artifact a run can produce.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset")
    }
    pub fn stage1_checkpoint(&self) -> PathBuf {
        self.root.join("stage1/field.ckpt")
    }
    pub fn stage1_loss(&self) -> PathBuf {
        self.root.join("stage1/loss.csv")
    }
    pub fn depth_dir(&self) -> PathBuf {
        self.root.join("stage1/depth")
    }
    pub fn mesh(&self) -> PathBuf {
        self.root.join("mesh/mesh.obj")
    }
    pub fn atlas(&self) -> PathBuf {
        self.root.join("mesh/atlas.bin")
    }
    pub fn variant_checkpoint(&self, v: Variant) -> PathBuf {
        match v {
            Variant::Baseline => self.stage1_checkpoint(),
            v => self.root.join("variants").join(v.slug()).join("field.ckpt"),
        }
    }
    pub fn variant_loss(&self, v: Variant) -> PathBuf {
        self.root.join("variants").join(v.slug()).join("loss.csv")
    }
    pub fn render(&self, v: Variant, frame: &str) -> PathBuf {
        self.root.join("renders").join(v.slug()).join(format!("{frame}.png"))
    }
    pub fn frame_metrics(&self) -> PathBuf {
        self.root.join("metrics/frames.csv")
    }
    pub fn summary_metrics(&self) -> PathBuf {
        self.root.join("metrics/summary.csv")
    }
    pub fn eta_sweep(&self) -> PathBuf {
        self.root.join("metrics/eta_sweep.csv")
    }
    pub fn run_manifest(&self) -> PathBuf {
        self.root.join("run_manifest.json")
    }
}

/// Files written by a pipeline step, relative to the run root when possible.
#[derive(Debug, Clone, Default, Serialize)]
pub struct Artifacts {
    pub files: Vec<PathBuf>,
}

impl Artifacts {
    fn add(&mut self, layout: &Layout, path: &Path) {
        let rel = path.strip_prefix(&layout.root).unwrap_or(path).to_owned();
        if !self.files.contains(&rel) {
            self.files.push(rel);
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Saves the last finite state next to the requested checkpoint when training
/// diverges, then passes the error on.
fn keep_on_divergence(result: Result<()>, state: &TrainState, path: &Path) -> Result<()> {
    if let Err(e @ Error::Diverged { .. }) = result {
        checkpoint::save(state, &path.with_extension("diverged.ckpt"))?;
        return Err(e);
    }
    result
}

pub fn generate(cfg: &RunConfig, layout: &Layout, art: &mut Artifacts) -> Result<Dataset> {
    let ds = generate_dataset(&cfg.scene.preset.build(), &cfg.dataset, &layout.dataset())?;
    for f in ds.frames() {
        art.add(layout, &ds.root.join(&f.file_path));
        art.add(layout, &ds.root.join(&f.mask_path));
    }
    art.add(layout, &ds.root.join(crate::dataset::MANIFEST_NAME));
    Ok(ds)
}

/// Expected depth and opacity of every training view under `field`.
pub fn compute_depth_cache(state: &TrainState, data: &TrainingSet, samples: usize) -> Result<DepthCache> {
    let opts = RenderOptions::new(samples, data.t_near, data.t_far);
    let mut depth = Vec::new();
    let mut opacity = Vec::new();
    for v in data.views() {
        let r = render_image(&state.field, &v.camera, &opts)?;
        depth.push(r.depth);
        opacity.push(r.opacity);
    }
    DepthCache::from_parts(&depth, &opacity)
}

/// Trains stage 1, then writes its checkpoint, loss curve and depth cache.
pub fn stage1(cfg: &RunConfig, data: &TrainingSet, layout: &Layout, art: &mut Artifacts) -> Result<TrainState> {
    let mut state = TrainState::new(cfg.field.clone(), &cfg.train)?;
    let mut log = LossLog::default();
    let result = train_stage1(&mut state, data, &cfg.train, &mut log);
    keep_on_divergence(result, &state, &layout.stage1_checkpoint())?;
    checkpoint::save(&state, &layout.stage1_checkpoint())?;
    log.write_csv(&layout.stage1_loss())?;
    art.add(layout, &layout.stage1_checkpoint());
    art.add(layout, &layout.stage1_loss());
    let cache = compute_depth_cache(&state, data, cfg.eval.samples)?;
    for p in cache.save(&layout.depth_dir())? {
        art.add(layout, &p);
    }
    Ok(state)
}

pub fn extract(cfg: &RunConfig, state: &TrainState, layout: &Layout, art: &mut Artifacts) -> Result<TriMesh> {
    let bounds = cfg.field.bounds;
    let iso = cfg.mesh.iso.unwrap_or_else(|| default_iso(&bounds, cfg.mesh.resolution));
    let mesh = extract_mesh(&state.field, bounds, cfg.mesh.resolution, iso)?;
    mesh.write_obj(&layout.mesh())?;
    art.add(layout, &layout.mesh());
    Ok(mesh)
}

/// Occlusion tolerance in world units.
pub fn visibility_eps(cfg: &RunConfig) -> f64 {
    let edge = 2.0 * cfg.field.bounds.half_extent().max() / (cfg.mesh.resolution - 1) as f64;
    cfg.mesh.visibility_eps_voxels * edge
}

pub fn build_atlas(cfg: &RunConfig, mesh: TriMesh, data: &TrainingSet, layout: &Layout, art: &mut Artifacts) -> Result<RayAtlas> {
    let atlas = RayAtlas::build(mesh, &data.cameras(), visibility_eps(cfg))?;
    atlas.save(&layout.atlas())?;
    art.add(layout, &layout.atlas());
    Ok(atlas)
}

/// Fine-tunes a copy of the stage-1 state with the priors of `variant`.
pub fn stage2(
    schedule: &TrainSchedule,
    base: &TrainState,
    data: &TrainingSet,
    priors: Priors<'_>,
    checkpoint_path: &Path,
    loss_path: &Path,
) -> Result<TrainState> {
    let mut state = base.clone();
    let mut log = LossLog::default();
    let result = train_stage2(&mut state, data, priors, schedule, &mut log);
    keep_on_divergence(result, &state, checkpoint_path)?;
    checkpoint::save(&state, checkpoint_path)?;
    log.write_csv(loss_path)?;
    Ok(state)
}

fn frame_name(file_path: &str) -> String {
    Path::new(file_path)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| file_path.to_owned())
}

/// Renders every non-training frame and scores it against the reference.
/// Models that use the atlas see its directions; the others the ray's own.
pub fn evaluate_model(
    cfg: &RunConfig,
    variant: Variant,
    state: &TrainState,
    ds: &Dataset,
    atlas: Option<&RayAtlas>,
    layout: &Layout,
    art: &mut Artifacts,
) -> Result<Vec<FrameMetric>> {
    let m = &ds.manifest;
    let mut opts = RenderOptions::new(cfg.eval.samples, m.t_near, m.t_far);
    if variant.uses_atlas() {
        let atlas = atlas.ok_or_else(|| Error::MissingArtifact {
            what: "ray atlas".into(),
            remedy: "run build-atlas before evaluating atlas variants".into(),
        })?;
        opts.directions = DirectionSource::Prior(atlas);
    }
    let frames = ds.indices(|f| f.split != SplitTag::Train);
    let scored = frames
        .par_iter()
        .map(|&i| -> Result<(FrameMetric, Image, PathBuf)> {
            let f = &ds.frames()[i];
            let r = render_image(&state.field, &ds.camera(i)?, &opts)?;
            let reference = ds.image(i)?;
            let p = psnr(&r.rgb, &reference)?;
            let name = frame_name(&f.file_path);
            let metric = FrameMetric {
                variant: variant.name().into(),
                frame: name.clone(),
                split: f.split.name().into(),
                regime: f.regime.name().into(),
                d_y: f.d_y,
                psnr: p.db,
                identical: p.identical,
                ssim: ssim(&r.rgb, &reference)?,
            };
            Ok((metric, r.rgb, layout.render(variant, &name)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(scored.len());
    for (metric, img, path) in scored {
        img.save_png(&path)?;
        art.add(layout, &path);
        rows.push(metric);
    }
    Ok(rows)
}

#[derive(Debug, Clone, Serialize)]
struct RunManifest<'a> {
    config_hash: String,
    config: &'a RunConfig,
    checkpoints: Vec<(String, String)>,
    artifacts: &'a [PathBuf],
}

fn write_run_manifest(cfg: &RunConfig, layout: &Layout, checkpoints: Vec<(String, String)>, art: &mut Artifacts) -> Result<()> {
    art.add(layout, &layout.run_manifest());
    let m = RunManifest {
        config_hash: cfg.hash(),
        config: cfg,
        checkpoints,
        artifacts: &art.files,
    };
    write_text(&layout.run_manifest(), &serde_json::to_string_pretty(&m).expect("manifest serializes"))
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: MetricReport,
    pub artifacts: Artifacts,
}

/// Everything after stage 1 that the priors need.
pub struct PriorInputs {
    pub depth: DepthCache,
    pub atlas: RayAtlas,
}

fn prepare_priors(cfg: &RunConfig, state: &TrainState, data: &TrainingSet, layout: &Layout, art: &mut Artifacts) -> Result<PriorInputs> {
    let depth = DepthCache::load(&layout.depth_dir(), data.views().len()).map_err(|e| e.in_stage("depth cache"))?;
    let mesh = extract(cfg, state, layout, art).map_err(|e| e.in_stage("extract-mesh"))?;
    let atlas = build_atlas(cfg, mesh, data, layout, art).map_err(|e| e.in_stage("build-atlas"))?;
    Ok(PriorInputs { depth, atlas })
}

/// Runs the whole pipeline for every enabled variant of `cfg.eval.variants`.
pub fn run_experiment(cfg: &RunConfig) -> Result<RunOutcome> {
    let layout = Layout::new(&cfg.out_dir);
    let mut art = Artifacts::default();
    let ds = generate(cfg, &layout, &mut art).map_err(|e| e.in_stage("gen-scene"))?;
    let data = ds.training_set().map_err(|e| e.in_stage("gen-scene"))?;
    let base = stage1(cfg, &data, &layout, &mut art).map_err(|e| e.in_stage("train-stage1"))?;

    let variants: Vec<Variant> = cfg.eval.variants.iter().copied().filter(|v| v.enabled(&cfg.train)).collect();
    let priors = if variants.iter().any(|&v| v != Variant::Baseline) {
        Some(prepare_priors(cfg, &base, &data, &layout, &mut art)?)
    } else {
        None
    };

    let mut report = MetricReport {
        config_hash: cfg.hash(),
        seed: cfg.train.seed,
        ..Default::default()
    };
    let mut checkpoints = Vec::new();
    for v in variants {
        let state = match (v, &priors) {
            (Variant::Baseline, _) => base.clone(),
            (v, Some(p)) => {
                let s = stage2(
                    &v.schedule(&cfg.train),
                    &base,
                    &data,
                    Priors {
                        depth: Some(&p.depth),
                        atlas: Some(&p.atlas),
                    },
                    &layout.variant_checkpoint(v),
                    &layout.variant_loss(v),
                )
                .map_err(|e| e.in_stage("train-stage2"))?;
                art.add(&layout, &layout.variant_checkpoint(v));
                art.add(&layout, &layout.variant_loss(v));
                s
            }
            (_, None) => unreachable!("priors are prepared whenever a fine-tuned variant runs"),
        };
        checkpoints.push((v.name().to_string(), checkpoint::fingerprint(&state)));
        let atlas = priors.as_ref().map(|p| &p.atlas);
        let rows = evaluate_model(cfg, v, &state, &ds, atlas, &layout, &mut art).map_err(|e| e.in_stage("eval"))?;
        report.rows.extend(rows);
    }
    report.checkpoint = checkpoints.iter().map(|(v, f)| format!("{v}:{f}")).collect::<Vec<_>>().join(";");
    report
        .write_csv(&layout.frame_metrics(), &layout.summary_metrics())
        .map_err(|e| e.in_stage("eval"))?;
    art.add(&layout, &layout.frame_metrics());
    art.add(&layout, &layout.summary_metrics());
    write_run_manifest(cfg, &layout, checkpoints, &mut art)?;
    Ok(RunOutcome { report, artifacts: art })
}

fn require(path: &Path, what: &str, remedy: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact {
            what: format!("{what} {}", path.display()),
            remedy: remedy.into(),
        })
    }
}

pub fn load_dataset(layout: &Layout) -> Result<Dataset> {
    let dir = layout.dataset();
    require(&dir.join(crate::dataset::MANIFEST_NAME), "dataset manifest", "run gen-scene first")?;
    Dataset::load(&dir)
}

pub fn load_mesh(layout: &Layout) -> Result<TriMesh> {
    require(&layout.mesh(), "mesh", "run extract-mesh first")?;
    TriMesh::read_obj(&layout.mesh())
}

pub fn load_atlas(layout: &Layout) -> Result<RayAtlas> {
    let mesh = load_mesh(layout)?;
    require(&layout.atlas(), "ray atlas", "run build-atlas first")?;
    RayAtlas::load(&layout.atlas(), mesh)
}

pub fn load_variant(layout: &Layout, v: Variant) -> Result<TrainState> {
    require(
        &layout.variant_checkpoint(v),
        &format!("{} checkpoint", v.name()),
        "train the corresponding stage first",
    )?;
    checkpoint::load(&layout.variant_checkpoint(v))
}

/// Scores the saved checkpoint of every enabled variant and writes the
/// metric CSVs.
pub fn evaluate_saved(cfg: &RunConfig) -> Result<MetricReport> {
    let layout = Layout::new(&cfg.out_dir);
    let ds = load_dataset(&layout)?;
    let variants: Vec<Variant> = cfg.eval.variants.iter().copied().filter(|v| v.enabled(&cfg.train)).collect();
    let atlas = if variants.iter().any(|v| v.uses_atlas()) {
        Some(load_atlas(&layout)?)
    } else {
        None
    };
    let mut report = MetricReport {
        config_hash: cfg.hash(),
        seed: cfg.train.seed,
        ..Default::default()
    };
    let mut ids = Vec::new();
    for v in variants {
        let state = load_variant(&layout, v)?;
        ids.push(format!("{}:{}", v.name(), checkpoint::fingerprint(&state)));
        report
            .rows
            .extend(evaluate_model(cfg, v, &state, &ds, atlas.as_ref(), &layout, &mut Artifacts::default())?);
    }
    report.checkpoint = ids.join(";");
    report.write_csv(&layout.frame_metrics(), &layout.summary_metrics())?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub eta_deg: f64,
    pub interpolation_psnr: f64,
    pub extrapolation_psnr: f64,
    pub extrapolation_ssim: f64,
}

pub const SWEEP_HEADER: &str = "eta_deg,variant,interp_psnr,extrap_psnr,extrap_ssim";

/// Fine-tunes the full prior combination once per cone half-angle in
/// `cfg.eval.eta_sweep_deg`, all from one stage-1 field.
pub fn ablate(cfg: &RunConfig) -> Result<Vec<SweepRow>> {
    let layout = Layout::new(&cfg.out_dir);
    let mut art = Artifacts::default();
    let ds = generate(cfg, &layout, &mut art).map_err(|e| e.in_stage("gen-scene"))?;
    let data = ds.training_set().map_err(|e| e.in_stage("gen-scene"))?;
    let base = stage1(cfg, &data, &layout, &mut art).map_err(|e| e.in_stage("train-stage1"))?;
    let p = prepare_priors(cfg, &base, &data, &layout, &mut art)?;

    let mut rows = Vec::new();
    let mut csv = format!("{SWEEP_HEADER}\n");
    let mut checkpoints = Vec::new();
    for &eta in &cfg.eval.eta_sweep_deg {
        let schedule = TrainSchedule {
            eta_deg: eta,
            ..Variant::RrcRa.schedule(&cfg.train)
        };
        let sweep_root = Layout::new(layout.root.join(format!("sweep/eta_{eta:.0}")));
        let ckpt = sweep_root.variant_checkpoint(Variant::RrcRa);
        let loss = sweep_root.variant_loss(Variant::RrcRa);
        let priors = Priors {
            depth: Some(&p.depth),
            atlas: Some(&p.atlas),
        };
        let state = stage2(&schedule, &base, &data, priors, &ckpt, &loss).map_err(|e| e.in_stage("train-stage2"))?;
        art.add(&layout, &ckpt);
        art.add(&layout, &loss);
        checkpoints.push((format!("eta_{eta}"), checkpoint::fingerprint(&state)));
        let metrics = evaluate_model(cfg, Variant::RrcRa, &state, &ds, Some(&p.atlas), &sweep_root, &mut Artifacts::default())
            .map_err(|e| e.in_stage("eval"))?;
        for m in &metrics {
            art.add(&layout, &sweep_root.render(Variant::RrcRa, &m.frame));
        }
        let report = MetricReport {
            rows: metrics,
            ..Default::default()
        };
        let name = Variant::RrcRa.name();
        let mean = |regime: Regime| report.mean_psnr(name, regime.name()).unwrap_or(f64::NAN);
        let ssim = report
            .aggregates()
            .into_iter()
            .find(|g| g.group == Regime::Extrapolation.name())
            .map_or(f64::NAN, |g| g.ssim);
        let row = SweepRow {
            eta_deg: eta,
            interpolation_psnr: mean(Regime::Interpolation),
            extrapolation_psnr: mean(Regime::Extrapolation),
            extrapolation_ssim: ssim,
        };
        csv.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6}\n",
            row.eta_deg, name, row.interpolation_psnr, row.extrapolation_psnr, row.extrapolation_ssim
        ));
        rows.push(row);
    }
    write_text(&layout.eta_sweep(), &csv).map_err(|e| e.in_stage("eval"))?;
    art.add(&layout, &layout.eta_sweep());
    write_run_manifest(cfg, &layout, checkpoints, &mut art)?;
    Ok(rows)
}
