//! Property tests over randomly generated inputs.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rayprior::geometry::{dir_from_spherical, so3_exp, so3_log, spherical_from_dir, Ray, Vec3};
use rayprior::imageio::Image;
use rayprior::metrics::{psnr, MetricReport, FrameMetric};
use rayprior::render::{composite, stratified_sample, SamplingMode};
use rayprior::rrc::{perturb_ray, PixelId, SurfaceSample};
use rayprior::train::{opacity_loss, photometric_loss};

fn unit() -> impl Strategy<Value = Vec3> {
    (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0)
        .prop_filter("not degenerate", |(x, y, z)| (x * x + y * y + z * z).sqrt() > 0.1)
        .prop_map(|(x, y, z)| Vec3::new(x, y, z).normalize())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn weights_and_residual_sum_to_one(
        sigma in prop::collection::vec(prop_oneof![Just(0.0), 0.0f64..50.0], 1..64),
        near in 0.0f64..2.0,
        span in 0.01f64..8.0,
        seed in any::<u64>(),
    ) {
        let n = sigma.len();
        let ray = Ray::new(Vec3::zeros(), Vec3::x(), near, near + span).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let quad = stratified_sample(&ray, n, SamplingMode::Stratified, &mut rng).unwrap();
        let r = composite(&quad, &sigma, &vec![[0.3; 3]; n]).unwrap();
        prop_assert!((r.weights.iter().sum::<f64>() + r.final_transmittance - 1.0).abs() < 1e-9);
        prop_assert!(r.weights.iter().all(|w| (0.0..=1.0).contains(w)));
        // transmittance never increases along the ray
        prop_assert!(r.transmittance.windows(2).all(|w| w[1] <= w[0]));
        // depth is a sub-convex combination of the sample depths
        prop_assert!(r.depth <= (1.0 - r.final_transmittance) * quad.t[n - 1] + 1e-9);
    }

    #[test]
    fn samples_stay_sorted_inside_bounds(near in 0.0f64..3.0, span in 0.01f64..5.0, n in 1usize..100, seed in any::<u64>()) {
        let ray = Ray::new(Vec3::zeros(), Vec3::z(), near, near + span).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = stratified_sample(&ray, n, SamplingMode::Stratified, &mut rng).unwrap();
        prop_assert!(q.t.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(q.t.iter().all(|&t| t >= near && t <= near + span));
        let width = ray.t_far - ray.t_near;
        prop_assert!(q.delta.iter().all(|&d| d >= 0.0 && d <= width));
    }

    #[test]
    fn rotation_vector_round_trip(axis in unit(), angle in 0.0f64..3.14) {
        let w = axis * angle;
        let r = so3_exp(&w);
        prop_assert!((r * r.transpose() - nalgebra::Matrix3::identity()).norm() < 1e-12);
        prop_assert!((r.determinant() - 1.0).abs() < 1e-12);
        let back = so3_log(&r).unwrap();
        prop_assert!((back - w).norm() < 1e-8, "{back:?} vs {w:?}");
    }

    #[test]
    fn spherical_round_trip(d in unit()) {
        let s = spherical_from_dir(&d).unwrap();
        prop_assert!((dir_from_spherical(s) - d).norm() < 1e-12);
        prop_assert!(s.theta.abs() <= std::f64::consts::FRAC_PI_2);
    }

    #[test]
    fn virtual_rays_pass_through_the_surface_point(
        dir in unit().prop_filter("away from poles", |d| d.z.abs() < 0.95),
        depth in 0.2f64..6.0,
        eta_deg in 0.0f64..89.0,
        seed in any::<u64>(),
    ) {
        let s = SurfaceSample {
            pixel: PixelId { image: 0, x: 0, y: 0 },
            ray: Ray::new(Vec3::new(0.5, -1.0, 2.0), dir, 0.1, 10.0).unwrap(),
            depth,
            color: [0.2, 0.4, 0.6],
            mask: true,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eta = eta_deg.to_radians();
        let v = perturb_ray(&s, eta, &mut rng).unwrap();
        let p = s.surface_point();
        prop_assert!(((v.ray.origin - p).norm() - depth).abs() < 1e-9);
        prop_assert!((v.ray.at(depth) - p).norm() < 1e-9);
        prop_assert!((v.ray.dir.norm() - 1.0).abs() < 1e-12);
        prop_assert!(v.d_theta.abs() <= eta && v.d_phi.abs() <= eta);
        prop_assert_eq!(v.label, s.color);
    }

    #[test]
    fn photometric_loss_matches_two_pass_sum(
        pairs in prop::collection::vec(((0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0), (0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0)), 1..50)
    ) {
        let pred: Vec<[f64; 3]> = pairs.iter().map(|(a, _)| [a.0, a.1, a.2]).collect();
        let label: Vec<[f64; 3]> = pairs.iter().map(|(_, b)| [b.0, b.1, b.2]).collect();
        let (mse, grads) = photometric_loss(&pred, &label).unwrap();
        // first pass: residuals; second pass: mean of squares
        let residuals: Vec<f64> = pred.iter().flatten().zip(label.iter().flatten()).map(|(p, l)| p - l).collect();
        let oracle = residuals.iter().map(|r| r * r).sum::<f64>() / residuals.len() as f64;
        prop_assert!((mse - oracle).abs() < 1e-7);
        for (g, r) in grads.iter().flatten().zip(&residuals) {
            prop_assert!((g - 2.0 * r / residuals.len() as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn opacity_loss_is_mean_abs(ts in prop::collection::vec((0.0f64..=1.0, any::<bool>()), 1..50)) {
        let t: Vec<f64> = ts.iter().map(|p| p.0).collect();
        let m: Vec<bool> = ts.iter().map(|p| p.1).collect();
        let (l, g) = opacity_loss(&t, &m).unwrap();
        let oracle = ts.iter().map(|&(t, m)| (if m { 1.0 } else { 0.0 } + t - 1.0f64).abs()).sum::<f64>() / ts.len() as f64;
        prop_assert!((l - oracle).abs() < 1e-12);
        prop_assert!(g.iter().all(|v| v.abs() <= 1.0 / ts.len() as f64 + 1e-15));
    }

    #[test]
    fn psnr_matches_reference_mse(a in prop::collection::vec(0.0f32..1.0, 48), b in prop::collection::vec(0.0f32..1.0, 48)) {
        let x = Image::from_data(4, 4, 3, a.clone()).unwrap();
        let y = Image::from_data(4, 4, 3, b.clone()).unwrap();
        let p = psnr(&x, &y).unwrap();
        let diffs: Vec<f64> = a.iter().zip(&b).map(|(u, v)| *u as f64 - *v as f64).collect();
        let mse = diffs.iter().map(|d| d * d).sum::<f64>() / diffs.len() as f64;
        if mse > 0.0 {
            let oracle = (-10.0 * mse.log10()).min(99.0);
            prop_assert!((p.db - oracle).abs() < 1e-6);
        } else {
            prop_assert!(p.identical);
        }
    }

    #[test]
    fn group_means_are_frame_means(psnrs in prop::collection::vec(5.0f64..60.0, 1..30)) {
        let rows: Vec<FrameMetric> = psnrs
            .iter()
            .enumerate()
            .map(|(i, &p)| FrameMetric {
                variant: "v".into(),
                frame: format!("f{i}"),
                split: ["test-close", "test-far"][i % 2].into(),
                regime: "extrapolation".into(),
                d_y: 0.0,
                psnr: p,
                identical: false,
                ssim: 0.5,
            })
            .collect();
        let report = MetricReport { rows, ..Default::default() };
        let mean = psnrs.iter().sum::<f64>() / psnrs.len() as f64;
        prop_assert!((report.mean_psnr("v", "extrapolation").unwrap() - mean).abs() < 1e-9);
    }
}
