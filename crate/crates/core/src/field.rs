//! The radiance field: a density trunk `x -> (sigma, f)` followed by a color
//! head `(d, f) -> c`. The deferred layout splits color into a direction-free
//! diffuse head and a small specular head that sees the direction encoding;
//! the two are summed and clamped.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Aabb, Vec3};
use crate::nn::{
    encode_into, encoded_width, Activation, Mlp, MlpCache, MlpGrads, ParamTensors, Tensor2,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FieldMode {
    Standard,
    NoDirection,
    AtlasCapable,
    Deferred,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldConfig {
    pub mode: FieldMode,
    pub pos_freqs: usize,
    pub dir_freqs: usize,
    pub trunk_width: usize,
    pub trunk_depth: usize,
    pub feature_width: usize,
    pub color_width: usize,
    pub specular_width: usize,
    pub specular_depth: usize,
    /// Positions are normalized to `[-1, 1]` against this box (and clamped).
    pub bounds: Aabb,
    pub seed: u64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            mode: FieldMode::Standard,
            pos_freqs: 10,
            dir_freqs: 4,
            trunk_width: 64,
            trunk_depth: 4,
            feature_width: 64,
            color_width: 64,
            specular_width: 32,
            specular_depth: 2,
            bounds: Aabb::cube(1.5),
            seed: 0,
        }
    }
}

impl FieldConfig {
    pub fn pos_width(&self) -> usize {
        encoded_width(3, self.pos_freqs, true)
    }

    pub fn dir_width(&self) -> usize {
        encoded_width(3, self.dir_freqs, true)
    }

    pub fn validate(&self) -> Result<()> {
        if self.trunk_depth == 0 || self.trunk_width == 0 || self.feature_width == 0 {
            return Err(Error::Config("field trunk and feature widths must be positive".into()));
        }
        if self.color_width == 0 || (self.mode == FieldMode::Deferred && (self.specular_width == 0 || self.specular_depth == 0)) {
            return Err(Error::Config("field color head widths must be positive".into()));
        }
        if (0..3).any(|i| self.bounds.max[i] <= self.bounds.min[i]) {
            return Err(Error::Config("field bounds must have positive extent".into()));
        }
        Ok(())
    }
}

/// How a ray's samples obtain their color during a batched evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColorRoute {
    /// Regular color head (standard modes) or diffuse + specular (deferred).
    Full,
    /// Deferred only: diffuse color, no direction input.
    DiffuseOnly,
    /// Deferred only: diffuse + specular, but the specular term is treated as
    /// a constant when back-propagating.
    FrozenSpecular,
}

/// Per-sample density and color for a batch of rays.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldOutput {
    pub sigma: Vec<f64>,
    pub color: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeferredColors {
    pub diffuse: Vec<[f64; 3]>,
    pub specular: Vec<[f64; 3]>,
    pub combined: Vec<[f64; 3]>,
}

/// Query for `rays x samples_per_ray` points. `ray_dirs` are the directions fed
/// to the color head, one per ray (not necessarily the marching direction).
#[derive(Debug, Clone, Copy)]
pub struct SampleBatch<'a> {
    pub points: &'a [Vec3],
    pub ray_dirs: &'a [Vec3],
    pub routes: &'a [ColorRoute],
    pub samples_per_ray: usize,
}

impl SampleBatch<'_> {
    fn validate(&self) -> Result<()> {
        let rays = self.ray_dirs.len();
        if self.routes.len() != rays || self.points.len() != rays * self.samples_per_ray {
            return Err(Error::ShapeMismatch {
                expected: format!("{rays} rays x {} samples", self.samples_per_ray),
                got: format!("{} points, {} routes", self.points.len(), self.routes.len()),
            });
        }
        check_unit(self.ray_dirs)
    }
}

fn check_unit(dirs: &[Vec3]) -> Result<()> {
    for (i, d) in dirs.iter().enumerate() {
        if (d.norm() - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!(
                "direction {i} is not unit (norm {})",
                d.norm()
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
enum ColorNets {
    Single(Mlp<f32>),
    Deferred { diffuse: Mlp<f32>, specular: Mlp<f32> },
}

#[derive(Debug, Clone)]
pub struct RadianceField {
    config: FieldConfig,
    trunk: Mlp<f32>,
    color: ColorNets,
}

impl PartialEq for RadianceField {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.tensors() == other.tensors()
    }
}

fn softplus(x: f64) -> f64 {
    if x > 20.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl RadianceField {
    /// Freshly initialized field. The density output starts at `softplus(0) =
    /// ln 2` everywhere and, in deferred mode, the specular head starts at zero.
    pub fn new(config: FieldConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut widths = vec![config.pos_width()];
        widths.extend(std::iter::repeat_n(config.trunk_width, config.trunk_depth));
        widths.push(1 + config.feature_width);
        let mut acts = vec![Activation::Relu; config.trunk_depth];
        acts.push(Activation::Linear);
        let mut trunk = Mlp::new(&widths, &acts, &mut rng);
        {
            let last = trunk.layers_mut().last_mut().unwrap();
            for r in 0..last.weight.rows() {
                last.weight.set(r, 0, 0.0);
            }
            last.bias[0] = 0.0;
        }

        let f = config.feature_width;
        let color = match config.mode {
            FieldMode::Deferred => {
                let diffuse = Mlp::new(
                    &[f, config.color_width, 3],
                    &[Activation::Relu, Activation::Sigmoid],
                    &mut rng,
                );
                let mut w = vec![f + config.dir_width()];
                w.extend(std::iter::repeat_n(config.specular_width, config.specular_depth));
                w.push(3);
                let mut a = vec![Activation::Relu; config.specular_depth];
                a.push(Activation::Linear);
                let mut specular = Mlp::new(&w, &a, &mut rng);
                for t in specular.layers_mut().last_mut().map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()]).unwrap() {
                    t.fill(0.0);
                }
                ColorNets::Deferred { diffuse, specular }
            }
            mode => {
                let dir_w = if mode == FieldMode::NoDirection { 0 } else { config.dir_width() };
                ColorNets::Single(Mlp::new(
                    &[f + dir_w, config.color_width, 3],
                    &[Activation::Relu, Activation::Sigmoid],
                    &mut rng,
                ))
            }
        };
        Ok(Self { config, trunk, color })
    }

    pub fn config(&self) -> &FieldConfig {
        &self.config
    }

    pub fn mode(&self) -> FieldMode {
        self.config.mode
    }

    pub(crate) fn networks(&self) -> Vec<&Mlp<f32>> {
        let mut v = vec![&self.trunk];
        match &self.color {
            ColorNets::Single(c) => v.push(c),
            ColorNets::Deferred { diffuse, specular } => {
                v.push(diffuse);
                v.push(specular);
            }
        }
        v
    }

    /// Trainable networks in checkpoint order: trunk, then color or
    /// diffuse/specular heads.
    pub fn networks_mut(&mut self) -> Vec<&mut Mlp<f32>> {
        let mut v = vec![&mut self.trunk];
        match &mut self.color {
            ColorNets::Single(c) => v.push(c),
            ColorNets::Deferred { diffuse, specular } => {
                v.push(diffuse);
                v.push(specular);
            }
        }
        v
    }

    fn encode_points(&self, points: &[Vec3]) -> Tensor2<f32> {
        let width = self.config.pos_width();
        let center = self.config.bounds.center();
        let half = self.config.bounds.half_extent();
        let mut x = Tensor2::zeros(points.len(), width);
        for (i, p) in points.iter().enumerate() {
            let q = self.config.bounds.clamp(p) - center;
            let n = [q.x / half.x, q.y / half.y, q.z / half.z];
            encode_into(&n, self.config.pos_freqs, true, x.row_mut(i));
        }
        x
    }

    fn encode_dir(&self, d: &Vec3) -> Vec<f32> {
        let mut e = vec![0.0; self.config.dir_width()];
        encode_into(&[d.x, d.y, d.z], self.config.dir_freqs, true, &mut e);
        e
    }

    fn split_trunk(&self, out: &Tensor2<f32>) -> (Vec<f64>, Tensor2<f32>) {
        let f = self.config.feature_width;
        let mut sigma = Vec::with_capacity(out.rows());
        let mut features = Tensor2::zeros(out.rows(), f);
        for r in 0..out.rows() {
            let row = out.row(r);
            sigma.push(softplus(row[0] as f64));
            features.row_mut(r).copy_from_slice(&row[1..]);
        }
        (sigma, features)
    }

    /// Density and geometry feature per point. No direction enters this path.
    pub fn eval_sigma(&self, points: &[Vec3]) -> Result<(Vec<f64>, Tensor2<f32>)> {
        let out = self.trunk.infer(&self.encode_points(points))?;
        Ok(self.split_trunk(&out))
    }

    /// Color-head input rows `[f, enc(d)]`, with `dirs` given per row.
    fn color_input(&self, features: &Tensor2<f32>, dir_codes: &[Vec<f32>], row_dir: impl Fn(usize) -> usize) -> Tensor2<f32> {
        let f = features.cols();
        let dw = dir_codes.first().map_or(0, |c| c.len());
        let mut x = Tensor2::zeros(features.rows(), f + dw);
        for r in 0..features.rows() {
            let row = x.row_mut(r);
            row[..f].copy_from_slice(features.row(r));
            if dw > 0 {
                row[f..].copy_from_slice(&dir_codes[row_dir(r)]);
            }
        }
        x
    }

    fn check_features(&self, dirs: &[Vec3], features: &Tensor2<f32>) -> Result<()> {
        if features.cols() != self.config.feature_width || features.rows() != dirs.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} x {} features", dirs.len(), self.config.feature_width),
                got: format!("{} x {}", features.rows(), features.cols()),
            });
        }
        check_unit(dirs)
    }

    /// Color per (direction, feature) pair. In no-direction mode the direction
    /// is validated but otherwise ignored; in deferred mode this is the clamped
    /// diffuse + specular sum.
    pub fn eval_color(&self, dirs: &[Vec3], features: &Tensor2<f32>) -> Result<Vec<[f64; 3]>> {
        self.check_features(dirs, features)?;
        match &self.color {
            ColorNets::Single(net) => {
                let codes: Vec<Vec<f32>> = if self.config.mode == FieldMode::NoDirection {
                    Vec::new()
                } else {
                    dirs.iter().map(|d| self.encode_dir(d)).collect()
                };
                let out = net.infer(&self.color_input(features, &codes, |r| r))?;
                Ok(rgb_rows(&out))
            }
            ColorNets::Deferred { .. } => Ok(self.eval_deferred(dirs, features)?.combined),
        }
    }

    pub fn eval_deferred(&self, dirs: &[Vec3], features: &Tensor2<f32>) -> Result<DeferredColors> {
        let ColorNets::Deferred { diffuse, specular } = &self.color else {
            return Err(Error::invalid(format!(
                "deferred evaluation requested on a {:?} field",
                self.config.mode
            )));
        };
        self.check_features(dirs, features)?;
        let diffuse = rgb_rows(&diffuse.infer(features)?);
        let codes: Vec<Vec<f32>> = dirs.iter().map(|d| self.encode_dir(d)).collect();
        let specular = rgb_rows(&specular.infer(&self.color_input(features, &codes, |r| r))?);
        let combined = diffuse
            .iter()
            .zip(&specular)
            .map(|(a, b)| std::array::from_fn(|c| (a[c] + b[c]).clamp(0.0, 1.0)))
            .collect();
        Ok(DeferredColors {
            diffuse,
            specular,
            combined,
        })
    }

    /// Inference over a ray batch.
    pub fn query(&self, batch: SampleBatch<'_>) -> Result<FieldOutput> {
        Ok(self.run(batch, false)?.0)
    }

    /// Training forward pass; the returned cache feeds [`RadianceField::backward`].
    pub fn forward_train(&self, batch: SampleBatch<'_>) -> Result<(FieldOutput, FieldCache)> {
        let (out, cache) = self.run(batch, true)?;
        Ok((out, cache.unwrap()))
    }

    fn run(&self, batch: SampleBatch<'_>, record: bool) -> Result<(FieldOutput, Option<FieldCache>)> {
        batch.validate()?;
        let spr = batch.samples_per_ray;
        let x = self.encode_points(batch.points);
        let (trunk_out, trunk_cache) = if record {
            let (o, c) = self.trunk.forward(x)?;
            (o, Some(c))
        } else {
            (self.trunk.infer(&x)?, None)
        };
        let (sigma, features) = self.split_trunk(&trunk_out);
        let n = sigma.len();
        let ray_of = |r: usize| r / spr;

        match &self.color {
            ColorNets::Single(net) => {
                let codes: Vec<Vec<f32>> = if self.config.mode == FieldMode::NoDirection {
                    Vec::new()
                } else {
                    batch.ray_dirs.iter().map(|d| self.encode_dir(d)).collect()
                };
                let input = self.color_input(&features, &codes, ray_of);
                let (out, cache) = if record {
                    let (o, c) = net.forward(input)?;
                    (o, Some(c))
                } else {
                    (net.infer(&input)?, None)
                };
                let color = rgb_rows(&out);
                let cache = trunk_cache.map(|trunk| FieldCache {
                    trunk,
                    sigma: sigma.clone(),
                    color: ColorCache::Single(cache.unwrap()),
                });
                Ok((FieldOutput { sigma, color }, cache))
            }
            ColorNets::Deferred { diffuse, specular } => {
                let (dout, dcache) = if record {
                    let (o, c) = diffuse.forward(features.clone())?;
                    (o, Some(c))
                } else {
                    (diffuse.infer(&features)?, None)
                };
                let codes: Vec<Vec<f32>> = batch.ray_dirs.iter().map(|d| self.encode_dir(d)).collect();
                let sinput = self.color_input(&features, &codes, ray_of);
                let (sout, scache) = if record {
                    let (o, c) = specular.forward(sinput)?;
                    (o, Some(c))
                } else {
                    (specular.infer(&sinput)?, None)
                };
                let mut color = Vec::with_capacity(n);
                for r in 0..n {
                    let use_spec = batch.routes[ray_of(r)] != ColorRoute::DiffuseOnly;
                    let d = dout.row(r);
                    let s = sout.row(r);
                    color.push(std::array::from_fn(|c| {
                        let v = d[c] as f64 + if use_spec { s[c] as f64 } else { 0.0 };
                        v.clamp(0.0, 1.0)
                    }));
                }
                let cache = trunk_cache.map(|trunk| FieldCache {
                    trunk,
                    sigma: sigma.clone(),
                    color: ColorCache::Deferred {
                        diffuse: dcache.unwrap(),
                        specular: scache.unwrap(),
                        routes: batch.routes.to_vec(),
                        samples_per_ray: spr,
                    },
                });
                Ok((FieldOutput { sigma, color }, cache))
            }
        }
    }

    /// Parameter gradients of `sum(d_sigma * sigma + d_color . color)`.
    pub fn backward(&self, cache: &FieldCache, d_sigma: &[f64], d_color: &[[f64; 3]]) -> Result<FieldGrads> {
        let n = cache.sigma.len();
        if d_sigma.len() != n || d_color.len() != n {
            return Err(Error::ShapeMismatch {
                expected: format!("{n} sample gradients"),
                got: format!("{} / {}", d_sigma.len(), d_color.len()),
            });
        }
        let f = self.config.feature_width;
        let mut d_trunk = Tensor2::<f32>::zeros(n, 1 + f);

        let color_grads = match (&self.color, &cache.color) {
            (ColorNets::Single(net), ColorCache::Single(c)) => {
                let mut g = Tensor2::zeros(n, 3);
                for r in 0..n {
                    for ch in 0..3 {
                        g.set(r, ch, d_color[r][ch] as f32);
                    }
                }
                let back = net.backward(c, &g, true)?;
                let dx = back.input_grad.unwrap();
                for r in 0..n {
                    d_trunk.row_mut(r)[1..].copy_from_slice(&dx.row(r)[..f]);
                }
                vec![back.grads]
            }
            (
                ColorNets::Deferred { diffuse, specular },
                ColorCache::Deferred {
                    diffuse: dc,
                    specular: sc,
                    routes,
                    samples_per_ray,
                },
            ) => {
                let dy = dc.output();
                let sy = sc.output();
                let mut gd = Tensor2::zeros(n, 3);
                let mut gs = Tensor2::zeros(n, 3);
                for r in 0..n {
                    let route = routes[r / samples_per_ray];
                    for ch in 0..3 {
                        let spec = if route == ColorRoute::DiffuseOnly { 0.0 } else { sy.get(r, ch) as f64 };
                        let sum = dy.get(r, ch) as f64 + spec;
                        // clamp passes gradient only strictly inside (0, 1)
                        if sum > 0.0 && sum < 1.0 {
                            let g = d_color[r][ch] as f32;
                            gd.set(r, ch, g);
                            if route == ColorRoute::Full {
                                gs.set(r, ch, g);
                            }
                        }
                    }
                }
                let bd = diffuse.backward(dc, &gd, true)?;
                let bs = specular.backward(sc, &gs, true)?;
                let dxd = bd.input_grad.unwrap();
                let dxs = bs.input_grad.unwrap();
                for r in 0..n {
                    let row = &mut d_trunk.row_mut(r)[1..];
                    for k in 0..f {
                        row[k] = dxd.get(r, k) + dxs.get(r, k);
                    }
                }
                vec![bd.grads, bs.grads]
            }
            _ => return Err(Error::invalid("field cache does not match the field layout")),
        };

        let raw = cache.trunk.output();
        for r in 0..n {
            // d softplus(x) / dx = sigmoid(x)
            let ds = d_sigma[r] * sigmoid(raw.get(r, 0) as f64);
            d_trunk.set(r, 0, ds as f32);
        }
        let trunk = self.trunk.backward(&cache.trunk, &d_trunk, false)?;
        let mut nets = vec![trunk.grads];
        nets.extend(color_grads);
        Ok(FieldGrads { nets })
    }

    pub fn zero_grads(&self) -> FieldGrads {
        FieldGrads {
            nets: self.networks().iter().map(|m| m.zero_grads()).collect(),
        }
    }
}

fn rgb_rows(out: &Tensor2<f32>) -> Vec<[f64; 3]> {
    (0..out.rows())
        .map(|r| {
            let row = out.row(r);
            [row[0] as f64, row[1] as f64, row[2] as f64]
        })
        .collect()
}

#[derive(Debug, Clone)]
enum ColorCache {
    Single(MlpCache<f32>),
    Deferred {
        diffuse: MlpCache<f32>,
        specular: MlpCache<f32>,
        routes: Vec<ColorRoute>,
        samples_per_ray: usize,
    },
}

#[derive(Debug, Clone)]
pub struct FieldCache {
    trunk: MlpCache<f32>,
    sigma: Vec<f64>,
    color: ColorCache,
}

/// Gradients laid out like [`RadianceField`]'s parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldGrads {
    nets: Vec<MlpGrads<f32>>,
}

impl FieldGrads {
    pub fn add_assign(&mut self, other: &FieldGrads) {
        for (a, b) in self.nets.iter_mut().zip(&other.nets) {
            a.add_assign(b);
        }
    }
}

fn net_names(mode: FieldMode) -> &'static [&'static str] {
    match mode {
        FieldMode::Deferred => &["trunk", "diffuse", "specular"],
        _ => &["trunk", "color"],
    }
}

impl ParamTensors<f32> for RadianceField {
    fn tensors(&self) -> Vec<(String, &[f32])> {
        let names = net_names(self.config.mode);
        self.networks()
            .into_iter()
            .zip(names)
            .flat_map(|(m, n)| m.tensors().into_iter().map(move |(k, t)| (format!("{n}.{k}"), t)))
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f32]> {
        self.networks_mut().into_iter().flat_map(|m| m.tensors_mut()).collect()
    }
}

impl ParamTensors<f32> for FieldGrads {
    fn tensors(&self) -> Vec<(String, &[f32])> {
        let names: &[&str] = if self.nets.len() == 3 {
            &["trunk", "diffuse", "specular"]
        } else {
            &["trunk", "color"]
        };
        self.nets
            .iter()
            .zip(names)
            .flat_map(|(m, n)| m.tensors().into_iter().map(move |(k, t)| (format!("{n}.{k}"), t)))
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f32]> {
        self.nets.iter_mut().flat_map(|m| m.tensors_mut()).collect()
    }
}

/// Anything that can report volume density at world points.
pub trait DensityField: Sync {
    fn density(&self, points: &[Vec3]) -> Result<Vec<f64>>;
}

impl DensityField for RadianceField {
    fn density(&self, points: &[Vec3]) -> Result<Vec<f64>> {
        Ok(self.eval_sigma(points)?.0)
    }
}

/// Adapts a closure into a [`DensityField`].
pub struct FnDensity<F>(pub F);

impl<F: Fn(&Vec3) -> f64 + Sync> DensityField for FnDensity<F> {
    fn density(&self, points: &[Vec3]) -> Result<Vec<f64>> {
        Ok(points.iter().map(&self.0).collect())
    }
}
