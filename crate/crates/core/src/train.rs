//! Two-stage optimization. Stage 1 fits the field to the training pixels with
//! a photometric loss plus an opacity constraint. Stage 2 continues from the
//! stage-1 state and mixes in virtual rays (random ray casting) and
//! atlas-substituted color directions.
//!
//! Both stages share one iteration routine, and every random decision draws
//! from a stream keyed by the global iteration index. Disabling both priors in
//! stage 2 therefore reproduces a plain continuation of stage 1 bit for bit.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::atlas::RayAtlas;
use crate::error::{Error, Result};
use crate::field::{ColorRoute, FieldConfig, RadianceField, SampleBatch};
use crate::geometry::{Camera, Vec3};
use crate::imageio::{ensure_parent, Image};
use crate::nn::{Adam, AdamConfig};
use crate::render::{composite, composite_backward, stratified_sample, CompositeUpstream, SamplingMode};
use crate::rng::{keyed_rng, stream};
use crate::rrc::{make_rrc_batch, BatchRay, DepthCache, Granularity, PixelId, RrcParams, SurfaceSample, MIN_SURFACE_OPACITY};

/// Rays per gradient work unit. Fixed so the reduction order never depends
/// on the thread count.
const CHUNK_RAYS: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSchedule {
    pub stage1_iters: u64,
    pub stage2_iters: u64,
    pub batch_rays: usize,
    pub samples_per_ray: usize,
    /// Share of each batch drawn from foreground pixels.
    pub foreground_fraction: f64,
    pub p_rrc: f64,
    pub p_ra: f64,
    pub eta_deg: f64,
    pub rrc_granularity: Granularity,
    pub ra_granularity: Granularity,
    pub opacity_weight: f64,
    /// Stage 1 decays exponentially from `lr_start` to `lr_end`; stage 2 holds
    /// `lr_end`.
    pub lr_start: f64,
    pub lr_end: f64,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            stage1_iters: 15_000,
            stage2_iters: 15_000,
            batch_rays: 256,
            samples_per_ray: 32,
            foreground_fraction: 0.5,
            p_rrc: 0.7,
            p_ra: 0.5,
            eta_deg: 30.0,
            rrc_granularity: Granularity::PerRay,
            ra_granularity: Granularity::PerRay,
            opacity_weight: 0.1,
            lr_start: 5e-4,
            lr_end: 5e-5,
            seed: 0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {p} is not a probability")))
            }
        };
        prob("p_rrc", self.p_rrc)?;
        prob("p_ra", self.p_ra)?;
        prob("foreground_fraction", self.foreground_fraction)?;
        if !(0.0..90.0).contains(&self.eta_deg) {
            return Err(Error::Config(format!("eta_deg = {} outside [0, 90)", self.eta_deg)));
        }
        if self.batch_rays == 0 || self.samples_per_ray == 0 {
            return Err(Error::Config("batch_rays and samples_per_ray must be positive".into()));
        }
        if !(self.lr_start > 0.0 && self.lr_end > 0.0) || !(self.opacity_weight >= 0.0) {
            return Err(Error::Config("learning rates must be positive and opacity_weight non-negative".into()));
        }
        Ok(())
    }

    /// Learning rate at a global iteration index.
    pub fn learning_rate(&self, iteration: u64) -> f64 {
        if self.stage1_iters == 0 {
            return self.lr_start;
        }
        let frac = (iteration.min(self.stage1_iters) as f64) / self.stage1_iters as f64;
        self.lr_start * (self.lr_end / self.lr_start).powf(frac)
    }

    pub fn rrc_params(&self) -> RrcParams {
        RrcParams {
            eta: self.eta_deg.to_radians(),
            probability: self.p_rrc,
            granularity: self.rrc_granularity,
        }
    }
}

/// Mean squared error over rays and channels, with its gradient.
pub fn photometric_loss(pred: &[[f64; 3]], label: &[[f64; 3]]) -> Result<(f64, Vec<[f64; 3]>)> {
    if pred.len() != label.len() || pred.is_empty() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} labels", pred.len()),
            got: format!("{}", label.len()),
        });
    }
    let n = (3 * pred.len()) as f64;
    let mut sum = 0.0;
    let grads = pred
        .iter()
        .zip(label)
        .map(|(p, l)| {
            std::array::from_fn(|c| {
                let r = p[c] - l[c];
                sum += r * r;
                2.0 * r / n
            })
        })
        .collect();
    Ok((sum / n, grads))
}

/// Mean of `|m + T - 1|` with its subgradient in `T` (zero at the kink).
pub fn opacity_loss(final_transmittance: &[f64], mask: &[bool]) -> Result<(f64, Vec<f64>)> {
    if final_transmittance.len() != mask.len() || mask.is_empty() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} masks", final_transmittance.len()),
            got: format!("{}", mask.len()),
        });
    }
    let n = mask.len() as f64;
    let mut sum = 0.0;
    let grads = final_transmittance
        .iter()
        .zip(mask)
        .map(|(&t, &m)| {
            let r = if m { 1.0 } else { 0.0 } + t - 1.0;
            sum += r.abs();
            if r > 0.0 {
                1.0 / n
            } else if r < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    Ok((sum / n, grads))
}

#[derive(Debug, Clone)]
pub struct TrainView {
    pub camera: Camera,
    /// Linear RGB.
    pub rgb: Image,
    /// 1-channel, foreground where `>= 0.5`.
    pub mask: Image,
}

/// Training views with their pixel pools and the global ray bounds.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    views: Vec<TrainView>,
    foreground: Vec<PixelId>,
    background: Vec<PixelId>,
    pub t_near: f64,
    pub t_far: f64,
}

impl TrainingSet {
    pub fn new(views: Vec<TrainView>, t_near: f64, t_far: f64) -> Result<Self> {
        if views.is_empty() {
            return Err(Error::invalid("training set has no views"));
        }
        if !(t_near >= 0.0 && t_near < t_far && t_far.is_finite()) {
            return Err(Error::invalid(format!("ray bounds [{t_near}, {t_far}] are not a valid interval")));
        }
        let mut foreground = Vec::new();
        let mut background = Vec::new();
        for (i, v) in views.iter().enumerate() {
            let (w, h) = (v.camera.width, v.camera.height);
            if (v.rgb.width, v.rgb.height, v.rgb.channels) != (w, h, 3)
                || (v.mask.width, v.mask.height, v.mask.channels) != (w, h, 1)
            {
                return Err(Error::ShapeMismatch {
                    expected: format!("{w}x{h} RGB image and mask for view {i}"),
                    got: format!(
                        "{}x{}x{} image, {}x{}x{} mask",
                        v.rgb.width, v.rgb.height, v.rgb.channels, v.mask.width, v.mask.height, v.mask.channels
                    ),
                });
            }
            for y in 0..h {
                for x in 0..w {
                    let id = PixelId { image: i as u32, x, y };
                    if v.mask.pixel(x, y)[0] >= 0.5 {
                        foreground.push(id);
                    } else {
                        background.push(id);
                    }
                }
            }
        }
        Ok(Self {
            views,
            foreground,
            background,
            t_near,
            t_far,
        })
    }

    pub fn views(&self) -> &[TrainView] {
        &self.views
    }

    pub fn cameras(&self) -> Vec<Camera> {
        self.views.iter().map(|v| v.camera.clone()).collect()
    }

    fn sample(&self, p: PixelId, depth: Option<&DepthCache>) -> Result<(SurfaceSample, bool)> {
        let view = &self.views[p.image as usize];
        let ray = view.camera.pixel_center_ray(p.x, p.y)?.with_bounds(self.t_near, self.t_far);
        let c = view.rgb.pixel(p.x, p.y);
        let mask = view.mask.pixel(p.x, p.y)[0] >= 0.5;
        let (depth, eligible) = match depth {
            Some(d) if mask => (
                d.depth(p.image, p.x, p.y).clamp(self.t_near, self.t_far),
                d.opacity(p.image, p.x, p.y) >= MIN_SURFACE_OPACITY,
            ),
            _ => (0.0, false),
        };
        Ok((
            SurfaceSample {
                pixel: p,
                ray,
                depth,
                color: [c[0] as f64, c[1] as f64, c[2] as f64],
                mask,
            },
            eligible,
        ))
    }

    /// Draws the batch for one iteration: a fixed share from foreground pixels
    /// and the rest from background, uniformly with replacement.
    fn draw(&self, schedule: &TrainSchedule, iteration: u64) -> Vec<PixelId> {
        let mut rng = keyed_rng(schedule.seed, &[stream::BATCH, iteration]);
        let b = schedule.batch_rays;
        let n_fg = if self.background.is_empty() {
            b
        } else if self.foreground.is_empty() {
            0
        } else {
            (b as f64 * schedule.foreground_fraction).round() as usize
        };
        (0..b)
            .map(|i| {
                let pool = if i < n_fg { &self.foreground } else { &self.background };
                pool[rng.random_range(0..pool.len())]
            })
            .collect()
    }
}

/// Field, optimizer and the global iteration counter.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub field: RadianceField,
    pub optimizer: Adam<f32>,
    pub iteration: u64,
}

impl TrainState {
    pub fn new(config: FieldConfig, schedule: &TrainSchedule) -> Result<Self> {
        let field = RadianceField::new(config)?;
        let optimizer = Adam::new(
            &field,
            AdamConfig {
                lr: schedule.lr_start,
                ..AdamConfig::default()
            },
        );
        Ok(Self {
            field,
            optimizer,
            iteration: 0,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub iteration: u64,
    pub stage: u8,
    pub mse: f64,
    pub opacity: f64,
    pub total: f64,
    pub rrc_fraction: f64,
    pub ra_fraction: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossLog {
    pub reports: Vec<LossReport>,
}

impl LossLog {
    pub const HEADER: &'static str = "iteration,stage,mse,l_o,total,rrc_frac,ra_frac";

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        ensure_parent(path)?;
        let mut out = Vec::new();
        let io = |e| Error::io(format!("writing {}", path.display()), e);
        writeln!(out, "{}", Self::HEADER).map_err(io)?;
        for r in &self.reports {
            writeln!(
                out,
                "{},{},{:.9e},{:.9e},{:.9e},{:.6},{:.6}",
                r.iteration, r.stage, r.mse, r.opacity, r.total, r.rrc_fraction, r.ra_fraction
            )
            .map_err(io)?;
        }
        fs::write(path, out).map_err(io)
    }

    /// Mean MSE over the last `n` reports.
    pub fn recent_mse(&self, n: usize) -> f64 {
        let tail = &self.reports[self.reports.len().saturating_sub(n)..];
        tail.iter().map(|r| r.mse).sum::<f64>() / tail.len().max(1) as f64
    }
}

/// Inputs that only stage 2 uses.
#[derive(Clone, Copy)]
pub struct Priors<'a> {
    pub depth: Option<&'a DepthCache>,
    pub atlas: Option<&'a RayAtlas>,
}

/// One optimizer step at `state.iteration`; advances the counter.
fn iterate(
    state: &mut TrainState,
    data: &TrainingSet,
    schedule: &TrainSchedule,
    stage: u8,
    priors: Option<Priors<'_>>,
) -> Result<LossReport> {
    let it = state.iteration;
    let pixels = data.draw(schedule, it);
    let depth = priors.and_then(|p| p.depth);
    let (samples, eligible): (Vec<SurfaceSample>, Vec<bool>) =
        pixels.iter().map(|&p| data.sample(p, depth)).collect::<Result<Vec<_>>>()?.into_iter().unzip();

    let batch: Vec<BatchRay> = match priors {
        Some(_) if schedule.p_rrc > 0.0 => make_rrc_batch(&samples, &eligible, &schedule.rrc_params(), schedule.seed, it)?,
        _ => samples.iter().map(BatchRay::from_sample).collect(),
    };

    // color directions, with atlas substitution
    let mut color_dirs: Vec<Vec3> = batch.iter().map(|b| b.ray.dir).collect();
    let mut substituted = vec![false; batch.len()];
    if let Some(p) = priors {
        if schedule.p_ra > 0.0 {
            let atlas = p.atlas.ok_or_else(|| Error::MissingArtifact {
                what: "ray atlas".into(),
                remedy: "extract a mesh and build the atlas from the stage-1 field, or set p_ra = 0".into(),
            })?;
            let whole = match schedule.ra_granularity {
                Granularity::PerRay => None,
                Granularity::PerIteration => Some(keyed_rng(schedule.seed, &[stream::ATLAS, it]).random::<f64>() < schedule.p_ra),
            };
            for (slot, b) in batch.iter().enumerate() {
                let take = whole.unwrap_or_else(|| {
                    keyed_rng(schedule.seed, &[stream::ATLAS, it, slot as u64]).random::<f64>() < schedule.p_ra
                });
                if take {
                    if let Some(d) = atlas.lookup_ray(&b.ray) {
                        color_dirs[slot] = d;
                        substituted[slot] = true;
                    }
                }
            }
        }
    }

    // deferred layout: virtual rays train the diffuse head only, atlas rays
    // leave the specular head untouched, plain rays train both
    let routes: Vec<ColorRoute> = batch
        .iter()
        .zip(&substituted)
        .map(|(b, &s)| {
            if b.is_virtual() {
                ColorRoute::DiffuseOnly
            } else if s {
                ColorRoute::FrozenSpecular
            } else {
                ColorRoute::Full
            }
        })
        .collect();

    let spr = schedule.samples_per_ray;
    let mut rng = keyed_rng(schedule.seed, &[stream::SAMPLING, it]);
    let quads = batch
        .iter()
        .map(|b| stratified_sample(&b.ray, spr, SamplingMode::Stratified, &mut rng))
        .collect::<Result<Vec<_>>>()?;

    let n_rays = batch.len();
    let field = &state.field;
    let chunks: Vec<(usize, usize)> = (0..n_rays).step_by(CHUNK_RAYS).map(|s| (s, (s + CHUNK_RAYS).min(n_rays))).collect();
    let color_scale = 2.0 / (3 * n_rays) as f64;
    let opacity_scale = schedule.opacity_weight / n_rays as f64;

    let results = chunks
        .par_iter()
        .map(|&(s, e)| -> Result<_> {
            let points: Vec<Vec3> = (s..e).flat_map(|r| quads[r].points(&batch[r].ray).collect::<Vec<_>>()).collect();
            let (out, cache) = field.forward_train(SampleBatch {
                points: &points,
                ray_dirs: &color_dirs[s..e],
                routes: &routes[s..e],
                samples_per_ray: spr,
            })?;
            let mut d_sigma = Vec::with_capacity(points.len());
            let mut d_color = Vec::with_capacity(points.len());
            let mut sq = 0.0;
            let mut op = 0.0;
            for r in s..e {
                let k = (r - s) * spr..(r - s + 1) * spr;
                let comp = composite(&quads[r], &out.sigma[k.clone()], &out.color[k.clone()])?;
                let label = batch[r].label;
                let g: [f64; 3] = std::array::from_fn(|c| {
                    let res = comp.color[c] - label[c];
                    sq += res * res;
                    color_scale * res
                });
                let m = if batch[r].mask { 1.0 } else { 0.0 };
                let res = m + comp.final_transmittance - 1.0;
                op += res.abs();
                let g_t = if res > 0.0 {
                    opacity_scale
                } else if res < 0.0 {
                    -opacity_scale
                } else {
                    0.0
                };
                let back = composite_backward(
                    &quads[r],
                    &out.sigma[k.clone()],
                    &out.color[k],
                    &CompositeUpstream {
                        color: g,
                        final_transmittance: g_t,
                        depth: 0.0,
                    },
                )?;
                d_sigma.extend(back.sigma);
                d_color.extend(back.color);
            }
            let grads = field.backward(&cache, &d_sigma, &d_color)?;
            Ok((grads, sq, op))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut grads = state.field.zero_grads();
    let mut sq = 0.0;
    let mut op = 0.0;
    for (g, s, o) in &results {
        grads.add_assign(g);
        sq += s;
        op += o;
    }
    let mse = sq / (3 * n_rays) as f64;
    let l_o = op / n_rays as f64;
    let total = mse + schedule.opacity_weight * l_o;
    if !total.is_finite() {
        return Err(Error::Diverged { stage, iteration: it });
    }
    state.optimizer.set_lr(schedule.learning_rate(it));
    state.optimizer.step(&mut state.field, &grads).map_err(|e| match e {
        Error::NonFinite { .. } => Error::Diverged { stage, iteration: it },
        other => other,
    })?;
    state.iteration += 1;
    Ok(LossReport {
        iteration: it,
        stage,
        mse,
        opacity: l_o,
        total,
        rrc_fraction: batch.iter().filter(|b| b.is_virtual()).count() as f64 / n_rays as f64,
        ra_fraction: substituted.iter().filter(|&&s| s).count() as f64 / n_rays as f64,
    })
}

/// Runs stage-1 iterations until the global counter reaches
/// `schedule.stage1_iters`.
pub fn train_stage1(state: &mut TrainState, data: &TrainingSet, schedule: &TrainSchedule, log: &mut LossLog) -> Result<()> {
    schedule.validate()?;
    while state.iteration < schedule.stage1_iters {
        log.reports.push(iterate(state, data, schedule, 1, None)?);
    }
    Ok(())
}

/// `extra` further stage-1 iterations at the held final learning rate.
pub fn continue_stage1(
    state: &mut TrainState,
    data: &TrainingSet,
    schedule: &TrainSchedule,
    extra: u64,
    log: &mut LossLog,
) -> Result<()> {
    schedule.validate()?;
    for _ in 0..extra {
        log.reports.push(iterate(state, data, schedule, 1, None)?);
    }
    Ok(())
}

/// `schedule.stage2_iters` iterations with the priors mixed in.
pub fn train_stage2(
    state: &mut TrainState,
    data: &TrainingSet,
    priors: Priors<'_>,
    schedule: &TrainSchedule,
    log: &mut LossLog,
) -> Result<()> {
    schedule.validate()?;
    if schedule.p_rrc > 0.0 {
        let depth = priors.depth.ok_or_else(|| Error::MissingArtifact {
            what: "depth cache".into(),
            remedy: "run stage-1 training first; it writes the depth cache".into(),
        })?;
        if depth.images.len() != data.views.len() {
            return Err(Error::invalid(format!(
                "depth cache has {} images for {} training views",
                depth.images.len(),
                data.views.len()
            )));
        }
    }
    if schedule.p_ra > 0.0 && priors.atlas.is_none() {
        return Err(Error::MissingArtifact {
            what: "ray atlas".into(),
            remedy: "extract a mesh and build the atlas from the stage-1 field, or set p_ra = 0".into(),
        });
    }
    for _ in 0..schedule.stage2_iters {
        log.reports.push(iterate(state, data, schedule, 2, Some(priors))?);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn photometric_examples() {
        let p = vec![[0.2, 0.3, 0.4]; 4];
        assert_eq!(photometric_loss(&p, &p).unwrap().0, 0.0);
        let l: Vec<[f64; 3]> = p.iter().map(|c| c.map(|v| v - 0.1)).collect();
        assert!((photometric_loss(&p, &l).unwrap().0 - 0.01).abs() < 1e-12);
    }

    #[test]
    fn opacity_examples() {
        assert_eq!(opacity_loss(&[0.0], &[true]).unwrap().0, 0.0);
        assert_eq!(opacity_loss(&[1.0], &[false]).unwrap().0, 0.0);
        assert!((opacity_loss(&[0.3], &[true]).unwrap().0 - 0.3).abs() < 1e-15);
        assert_eq!(opacity_loss(&[0.0], &[true]).unwrap().1, vec![0.0]);
    }

    #[test]
    fn schedule_validation_and_lr() {
        let s = TrainSchedule::default();
        s.validate().unwrap();
        assert!((s.learning_rate(0) - 5e-4).abs() < 1e-15);
        assert!((s.learning_rate(15_000) - 5e-5).abs() < 1e-15);
        assert_eq!(s.learning_rate(20_000), s.learning_rate(15_000));
        let bad = TrainSchedule { p_rrc: 1.5, ..s.clone() };
        assert!(bad.validate().is_err());
        let bad = TrainSchedule { eta_deg: 90.0, ..s };
        assert!(bad.validate().is_err());
    }
}
