//! Checks against independently written reference computations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rayprior::field::{ColorRoute, FieldConfig, FieldMode, FnDensity, RadianceField, SampleBatch};
use rayprior::geometry::{Aabb, Ray, Vec3};
use rayprior::imageio::Image;
use rayprior::mesh::extract_mesh;
use rayprior::metrics::ssim;
use rayprior::nn::ParamTensors;
use rayprior::render::{composite, stratified_sample, SamplingMode};
use rayprior::rrc::{make_rrc_batch, Granularity, PixelId, RrcParams, SurfaceSample};

/// SSIM written out directly: a full 2-D Gaussian window per position and
/// separately accumulated first and second moments.
fn ssim_oracle(a: &Image, b: &Image) -> f64 {
    let (w, h) = (a.width as usize, a.height as usize);
    let gray = |img: &Image, x: usize, y: usize| -> f64 {
        let p = img.pixel(x as u32, y as u32);
        p.iter().map(|&v| v as f64).sum::<f64>() / p.len() as f64
    };
    let mut win = [[0.0f64; 11]; 11];
    let mut total = 0.0;
    for (j, row) in win.iter_mut().enumerate() {
        for (i, v) in row.iter_mut().enumerate() {
            let r2 = (i as f64 - 5.0).powi(2) + (j as f64 - 5.0).powi(2);
            *v = (-r2 / (2.0 * 1.5 * 1.5)).exp();
            total += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut acc = 0.0;
    let mut count = 0;
    for oy in 0..=h - 11 {
        for ox in 0..=w - 11 {
            let mean = |f: &dyn Fn(usize, usize) -> f64| -> f64 {
                let mut s = 0.0;
                for j in 0..11 {
                    for i in 0..11 {
                        s += win[j][i] / total * f(ox + i, oy + j);
                    }
                }
                s
            };
            let mx = mean(&|x, y| gray(a, x, y));
            let my = mean(&|x, y| gray(b, x, y));
            let vx = mean(&|x, y| (gray(a, x, y) - mx).powi(2));
            let vy = mean(&|x, y| (gray(b, x, y) - my).powi(2));
            let cov = mean(&|x, y| (gray(a, x, y) - mx) * (gray(b, x, y) - my));
            acc += (2.0 * mx * my + c1) * (2.0 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    acc / count as f64
}

fn random_image(rng: &mut impl Rng, w: u32, h: u32) -> Image {
    Image::from_data(w, h, 3, (0..w * h * 3).map(|_| rng.random::<f32>()).collect()).unwrap()
}

#[test]
fn ssim_matches_direct_window_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..5 {
        let a = random_image(&mut rng, 17, 14);
        let mut b = a.clone();
        for v in b.data.iter_mut() {
            *v = (*v + rng.random_range(-0.2..0.2f32)).clamp(0.0, 1.0);
        }
        let got = ssim(&a, &b).unwrap();
        let want = ssim_oracle(&a, &b);
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }
}

#[test]
fn inverted_pattern_scores_low() {
    // checker of 0.1 / 0.9 has no mid-gray pixels
    let mut a = Image::new(24, 24, 3);
    for y in 0..24 {
        for x in 0..24 {
            let v = if (x / 3 + y / 3) % 2 == 0 { 0.1 } else { 0.9 };
            a.pixel_mut(x, y).fill(v);
        }
    }
    let mut inv = a.clone();
    for v in inv.data.iter_mut() {
        *v = 1.0 - *v;
    }
    let s = ssim(&a, &inv).unwrap();
    assert!(s < 0.5, "{s}");
    assert!((s - ssim_oracle(&a, &inv)).abs() < 1e-9);
}

/// Transmittance as a running product of per-interval survival factors,
/// evaluated in extended precision through compensated summation of the
/// weights.
#[test]
fn composite_matches_product_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..500 {
        let n = rng.random_range(1..80);
        let ray = Ray::new(Vec3::zeros(), Vec3::y(), 0.5, rng.random_range(1.0..6.0)).unwrap();
        let q = stratified_sample(&ray, n, SamplingMode::Stratified, &mut rng).unwrap();
        let sigma: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..20.0)).collect();
        let color: Vec<[f64; 3]> = (0..n).map(|_| std::array::from_fn(|_| rng.random::<f64>())).collect();
        let r = composite(&q, &sigma, &color).unwrap();
        let mut t = 1.0f64;
        let mut rgb = [0.0f64; 3];
        let mut depth = 0.0;
        for i in 0..n {
            let alpha = 1.0 - (-sigma[i] * q.delta[i]).exp();
            let w = t * alpha;
            for c in 0..3 {
                rgb[c] += w * color[i][c];
            }
            depth += w * q.t[i];
            t *= 1.0 - alpha;
        }
        assert!((r.final_transmittance - t).abs() < 1e-12);
        assert!((r.depth - depth).abs() < 1e-10);
        for c in 0..3 {
            assert!((r.color[c] - rgb[c]).abs() < 1e-12);
        }
    }
}

#[test]
fn virtual_ray_fraction_is_binomial() {
    let n = 100_000;
    let samples: Vec<SurfaceSample> = (0..n)
        .map(|i| SurfaceSample {
            pixel: PixelId {
                image: (i % 7) as u32,
                x: (i % 64) as u32,
                y: (i / 64 % 64) as u32,
            },
            ray: Ray::new(Vec3::new(0.0, -4.0, 0.5), Vec3::y(), 2.0, 6.0).unwrap(),
            depth: 4.0,
            color: [0.5; 3],
            mask: true,
        })
        .collect();
    let params = RrcParams {
        eta: 30f64.to_radians(),
        probability: 0.7,
        granularity: Granularity::PerRay,
    };
    let batch = make_rrc_batch(&samples, &vec![true; n], &params, 9, 123).unwrap();
    let frac = batch.iter().filter(|b| b.is_virtual()).count() as f64 / n as f64;
    assert!((frac - 0.7).abs() < 0.01, "{frac}");
}

fn sphere_errors(res: usize) -> (f64, f64) {
    let sphere = FnDensity(|p: &Vec3| 10.0 * (1.0 - p.norm()));
    let mesh = extract_mesh(&sphere, Aabb::cube(1.2), res, 0.0 + 1e-9).unwrap();
    let r: Vec<f64> = mesh.vertices.iter().map(|v| v.norm() - 1.0).collect();
    let rms = (r.iter().map(|e| e * e).sum::<f64>() / r.len() as f64).sqrt();
    let worst = r.iter().map(|e| e.abs()).fold(0.0, f64::max);
    (rms, worst)
}

#[test]
fn sphere_mesh_converges() {
    let (rms64, worst64) = sphere_errors(64);
    let (rms128, worst128) = sphere_errors(128);
    assert!(rms128 < 0.05, "{rms128}");
    assert!(rms128 <= rms64, "{rms128} > {rms64}");
    assert!(worst128 <= worst64, "{worst128} > {worst64}");
}

/// `sum a.sigma + sum b.color`.
fn objective(field: &RadianceField, batch: SampleBatch<'_>, a: &[f64], b: &[[f64; 3]]) -> f64 {
    let out = field.query(batch).unwrap();
    let s: f64 = out.sigma.iter().zip(a).map(|(x, y)| x * y).sum();
    let c: f64 = out.color.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| x * y).sum();
    s + c
}

/// Finite differences in single precision: a parameter subset, compared as
/// one vector.
#[test]
fn field_backward_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for (mode, routes) in [
        (FieldMode::Standard, vec![ColorRoute::Full; 3]),
        (FieldMode::NoDirection, vec![ColorRoute::Full; 3]),
        (FieldMode::Deferred, vec![ColorRoute::Full, ColorRoute::DiffuseOnly, ColorRoute::Full]),
    ] {
        let cfg = FieldConfig {
            mode,
            trunk_width: 12,
            trunk_depth: 2,
            feature_width: 8,
            color_width: 8,
            specular_width: 6,
            specular_depth: 2,
            seed: 4,
            ..FieldConfig::default()
        };
        let mut field = RadianceField::new(cfg).unwrap();
        // non-zero specular output so every path carries gradient
        for t in field.tensors_mut() {
            for v in t.iter_mut() {
                *v += rng.random_range(-0.05..0.05f32);
            }
        }
        let spr = 4;
        let points: Vec<Vec3> = (0..3 * spr)
            .map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let dirs: Vec<Vec3> = (0..3)
            .map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.5).normalize())
            .collect();
        let batch = SampleBatch {
            points: &points,
            ray_dirs: &dirs,
            routes: &routes,
            samples_per_ray: spr,
        };
        let a: Vec<f64> = (0..points.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<[f64; 3]> = (0..points.len()).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect();
        let (_, cache) = field.forward_train(batch).unwrap();
        let grads = field.backward(&cache, &a, &b).unwrap();
        let analytic: Vec<Vec<f32>> = grads.tensors().iter().map(|(_, t)| t.to_vec()).collect();
        let tensor_count = field.tensors().len();

        let h = 1e-2f32;
        let mut num = Vec::new();
        let mut ana = Vec::new();
        for ti in 0..tensor_count {
            let len = analytic[ti].len();
            for k in (0..len).step_by((len / 6).max(1)) {
                let orig = field.tensors()[ti].1[k];
                field.tensors_mut()[ti][k] = orig + h;
                let up = objective(&field, batch, &a, &b);
                field.tensors_mut()[ti][k] = orig - h;
                let down = objective(&field, batch, &a, &b);
                field.tensors_mut()[ti][k] = orig;
                let fd = (up - down) / (2.0 * h as f64);
                num.push(fd);
                ana.push(analytic[ti][k] as f64);
            }
        }
        let diff: f64 = num.iter().zip(&ana).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = ana.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(scale > 0.0);
        assert!(diff / scale < 2e-2, "{mode:?}: relative error {}", diff / scale);
    }
}

/// With the sum away from the clamp, a frozen specular term is an additive
/// constant: parameter gradients equal those of the diffuse-only route.
#[test]
fn frozen_specular_back_propagates_like_diffuse_only() {
    let cfg = FieldConfig {
        mode: FieldMode::Deferred,
        trunk_width: 12,
        trunk_depth: 2,
        feature_width: 8,
        color_width: 8,
        specular_width: 6,
        seed: 8,
        ..FieldConfig::default()
    };
    let mut field = RadianceField::new(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for t in field.tensors_mut() {
        for v in t.iter_mut() {
            *v += rng.random_range(-0.02..0.02f32);
        }
    }
    let spr = 5;
    let points: Vec<Vec3> = (0..2 * spr).map(|i| Vec3::new(0.1 * i as f64 - 0.4, 0.2, -0.3)).collect();
    let dirs = vec![Vec3::new(0.0, 0.6, 0.8), Vec3::new(0.8, 0.0, -0.6)];
    let a: Vec<f64> = (0..points.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let b: Vec<[f64; 3]> = (0..points.len()).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect();
    let grads = |route: ColorRoute| {
        let routes = vec![route; 2];
        let batch = SampleBatch {
            points: &points,
            ray_dirs: &dirs,
            routes: &routes,
            samples_per_ray: spr,
        };
        let (out, cache) = field.forward_train(batch).unwrap();
        assert!(out.color.iter().flatten().all(|c| *c > 0.0 && *c < 1.0));
        field.backward(&cache, &a, &b).unwrap()
    };
    let frozen = grads(ColorRoute::FrozenSpecular);
    let diffuse = grads(ColorRoute::DiffuseOnly);
    for ((name, x), (_, y)) in frozen.tensors().iter().zip(diffuse.tensors().iter()) {
        for (u, v) in x.iter().zip(y.iter()) {
            assert!((u - v).abs() <= 1e-5 * (1.0 + v.abs()), "{name}: {u} vs {v}");
        }
    }
}
