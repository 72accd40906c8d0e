//! Volume rendering: stratified samples along a ray, alpha compositing of
//! field outputs into color, residual transmittance and expected depth, and
//! the exact reverse pass of that quadrature.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::{ColorRoute, RadianceField, SampleBatch};
use crate::geometry::{Camera, Ray, Vec3};
use crate::imageio::Image;
use crate::rng::{keyed_rng, stream};

/// Sample depths along one ray and the spacing used by the quadrature.
#[derive(Debug, Clone, PartialEq)]
pub struct RayQuadrature {
    pub t: Vec<f64>,
    /// `delta[i] = t[i+1] - t[i]`; the last entry is capped at `t_far - t_near`.
    pub delta: Vec<f64>,
}

impl RayQuadrature {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn points(&self, ray: &Ray) -> impl Iterator<Item = Vec3> + '_ {
        let (o, d) = (ray.origin, ray.dir);
        self.t.iter().map(move |&t| o + d * t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingMode {
    /// One uniform draw inside each of the `N` equal bins.
    Stratified,
    /// Deterministic bin centers (evaluation).
    BinCenters,
}

pub fn stratified_sample<R: Rng + ?Sized>(
    ray: &Ray,
    n: usize,
    mode: SamplingMode,
    rng: &mut R,
) -> Result<RayQuadrature> {
    if n == 0 {
        return Err(Error::invalid("at least one sample per ray is required"));
    }
    if !(ray.t_near >= 0.0 && ray.t_near < ray.t_far && ray.t_far.is_finite()) {
        return Err(Error::invalid(format!(
            "ray bounds [{}, {}] cannot be sampled",
            ray.t_near, ray.t_far
        )));
    }
    let span = ray.t_far - ray.t_near;
    let width = span / n as f64;
    let t: Vec<f64> = (0..n)
        .map(|i| {
            let u = match mode {
                SamplingMode::Stratified => rng.random::<f64>(),
                SamplingMode::BinCenters => 0.5,
            };
            ray.t_near + (i as f64 + u) * width
        })
        .collect();
    let mut delta: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
    delta.push(span);
    Ok(RayQuadrature { t, delta })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompositeResult {
    pub color: [f64; 3],
    pub weights: Vec<f64>,
    /// Transmittance in front of each sample, `T_i`.
    pub transmittance: Vec<f64>,
    /// Light surviving the whole ray, `1 - opacity`.
    pub final_transmittance: f64,
    /// Weighted sample depth `sum w_i t_i` (not normalized by opacity).
    pub depth: f64,
}

impl CompositeResult {
    pub fn opacity(&self) -> f64 {
        1.0 - self.final_transmittance
    }
}

fn check_aligned(quad: &RayQuadrature, sigma: &[f64], n_color: usize) -> Result<()> {
    if sigma.len() != quad.len() || n_color != quad.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} samples", quad.len()),
            got: format!("{} densities, {} colors", sigma.len(), n_color),
        });
    }
    if let Some(i) = sigma.iter().position(|s| !(*s >= 0.0)) {
        return Err(Error::invalid(format!(
            "density at sample {i} is {}, densities must be non-negative",
            sigma[i]
        )));
    }
    Ok(())
}

pub fn composite(quad: &RayQuadrature, sigma: &[f64], color: &[[f64; 3]]) -> Result<CompositeResult> {
    check_aligned(quad, sigma, color.len())?;
    let n = quad.len();
    let mut weights = Vec::with_capacity(n);
    let mut transmittance = Vec::with_capacity(n);
    let mut optical = 0.0f64;
    let mut rgb = [0.0; 3];
    let mut depth = 0.0;
    for i in 0..n {
        let tau = sigma[i] * quad.delta[i];
        let t_i = (-optical).exp();
        let w = t_i * -(-tau).exp_m1();
        transmittance.push(t_i);
        weights.push(w);
        for c in 0..3 {
            rgb[c] += w * color[i][c];
        }
        depth += w * quad.t[i];
        optical += tau;
    }
    Ok(CompositeResult {
        color: rgb,
        weights,
        transmittance,
        final_transmittance: (-optical).exp(),
        depth,
    })
}

/// Upstream gradients of a loss with respect to the composite outputs.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CompositeUpstream {
    pub color: [f64; 3],
    pub final_transmittance: f64,
    pub depth: f64,
}

impl CompositeUpstream {
    pub fn color(g: [f64; 3]) -> Self {
        Self {
            color: g,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompositeGrads {
    pub sigma: Vec<f64>,
    pub color: Vec<[f64; 3]>,
}

/// Exact gradients of the composite with respect to every `sigma_i` and `c_i`.
///
/// With `T_{k+1} = T_k exp(-sigma_k delta_k)`, the color term is
/// `d/d sigma_k = delta_k (T_{k+1} g.c_k - sum_{i>k} w_i g.c_i)`; depth is the
/// same with `t_i` in place of `g.c_i`, and the final transmittance
/// contributes `-delta_k T_final`.
pub fn composite_backward(
    quad: &RayQuadrature,
    sigma: &[f64],
    color: &[[f64; 3]],
    upstream: &CompositeUpstream,
) -> Result<CompositeGrads> {
    let fwd = composite(quad, sigma, color)?;
    let n = quad.len();
    let g = upstream.color;
    let mut d_sigma = vec![0.0; n];
    let mut d_color = vec![[0.0; 3]; n];
    // suffix sums over i > k of w_i * (g . c_i + g_depth * t_i)
    let mut tail = 0.0;
    for k in (0..n).rev() {
        let value = g[0] * color[k][0] + g[1] * color[k][1] + g[2] * color[k][2]
            + upstream.depth * quad.t[k];
        let next_t = fwd.transmittance[k] * (-sigma[k] * quad.delta[k]).exp();
        d_sigma[k] = quad.delta[k] * (next_t * value - tail)
            - quad.delta[k] * fwd.final_transmittance * upstream.final_transmittance;
        tail += fwd.weights[k] * value;
        let w = fwd.weights[k];
        d_color[k] = [w * g[0], w * g[1], w * g[2]];
    }
    Ok(CompositeGrads {
        sigma: d_sigma,
        color: d_color,
    })
}

/// Supplies a substitute viewing direction for color prediction.
pub trait DirectionPrior: Sync {
    fn lookup(&self, ray: &Ray) -> Option<Vec3>;
}

/// Which direction the color head sees when rendering.
#[derive(Clone, Copy)]
pub enum DirectionSource<'a> {
    /// The pixel ray's own direction.
    Ray,
    /// The prior's direction where it answers, the ray direction elsewhere.
    Prior(&'a dyn DirectionPrior),
}

#[derive(Clone, Copy)]
pub struct RenderOptions<'a> {
    pub samples: usize,
    pub t_near: f64,
    pub t_far: f64,
    pub sampling: SamplingMode,
    pub seed: u64,
    pub directions: DirectionSource<'a>,
    pub route: ColorRoute,
    /// Image rows rendered per work unit.
    pub tile_rows: u32,
}

impl<'a> RenderOptions<'a> {
    pub fn new(samples: usize, t_near: f64, t_far: f64) -> Self {
        Self {
            samples,
            t_near,
            t_far,
            sampling: SamplingMode::BinCenters,
            seed: 0,
            directions: DirectionSource::Ray,
            route: ColorRoute::Full,
            tile_rows: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedImage {
    pub rgb: Image,
    pub depth: Image,
    pub opacity: Image,
}

/// Composite per ray, evaluating the field for all rays in one batch.
pub fn render_rays(
    field: &RadianceField,
    rays: &[Ray],
    color_dirs: &[Vec3],
    route: ColorRoute,
    samples: usize,
    sampling: SamplingMode,
    rng: &mut impl Rng,
) -> Result<Vec<CompositeResult>> {
    let quads = rays
        .iter()
        .map(|r| stratified_sample(r, samples, sampling, rng))
        .collect::<Result<Vec<_>>>()?;
    let points: Vec<Vec3> = rays
        .iter()
        .zip(&quads)
        .flat_map(|(r, q)| q.points(r).collect::<Vec<_>>())
        .collect();
    let routes = vec![route; rays.len()];
    let out = field.query(SampleBatch {
        points: &points,
        ray_dirs: color_dirs,
        routes: &routes,
        samples_per_ray: samples,
    })?;
    quads
        .iter()
        .enumerate()
        .map(|(i, q)| {
            let s = i * samples..(i + 1) * samples;
            composite(q, &out.sigma[s.clone()], &out.color[s])
        })
        .collect()
}

pub fn render_image(field: &RadianceField, cam: &Camera, opts: &RenderOptions<'_>) -> Result<RenderedImage> {
    if !(opts.t_near >= 0.0 && opts.t_near < opts.t_far && opts.t_far.is_finite()) {
        return Err(Error::invalid(format!(
            "render bounds [{}, {}] are not a valid interval",
            opts.t_near, opts.t_far
        )));
    }
    if field.config().bounds.contains(&cam.center()) {
        return Err(Error::invalid("camera center lies inside the scene bounds"));
    }
    if opts.samples == 0 || opts.tile_rows == 0 {
        return Err(Error::invalid("render needs at least one sample and one row per tile"));
    }
    let (w, h) = (cam.width, cam.height);
    let tiles: Vec<u32> = (0..h.div_ceil(opts.tile_rows)).collect();
    let rendered = tiles
        .par_iter()
        .map(|&tile| -> Result<Vec<CompositeResult>> {
            let y0 = tile * opts.tile_rows;
            let y1 = (y0 + opts.tile_rows).min(h);
            let mut rays = Vec::with_capacity(((y1 - y0) * w) as usize);
            for y in y0..y1 {
                for x in 0..w {
                    rays.push(cam.pixel_center_ray(x, y)?.with_bounds(opts.t_near, opts.t_far));
                }
            }
            let dirs: Vec<Vec3> = rays
                .iter()
                .map(|r| match opts.directions {
                    DirectionSource::Ray => r.dir,
                    DirectionSource::Prior(p) => p.lookup(r).unwrap_or(r.dir),
                })
                .collect();
            let mut rng = keyed_rng(opts.seed, &[stream::RENDER, tile as u64]);
            render_rays(field, &rays, &dirs, opts.route, opts.samples, opts.sampling, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rgb = Image::new(w, h, 3);
    let mut depth = Image::new(w, h, 1);
    let mut opacity = Image::new(w, h, 1);
    for (i, c) in rendered.into_iter().flatten().enumerate() {
        rgb.data[3 * i..3 * i + 3].copy_from_slice(&c.color.map(|v| v as f32));
        depth.data[i] = c.depth as f32;
        opacity.data[i] = c.opacity() as f32;
    }
    Ok(RenderedImage { rgb, depth, opacity })
}
