use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use specklenav::geometry::pose_error;
use specklenav::handeye::{
    plan_poses, reprojection_error, solve_ax_xb, synthetic_samples, CalibrationSample, HandEyeResult,
    ObservationBox, PoseNoise, ReprojectionGate,
};
use specklenav::scene::CameraModel;
use specklenav::{Point, Transform};

fn truth() -> (Transform, Transform) {
    let x = Transform::from_translation(32.0, -18.5, 95.0)
        .compose(&Transform::from_axis_angle_deg(Point::new(0.3, -1.0, 0.2), 12.0));
    let w = Transform::from_translation(40.0, 25.0, -10.0).compose(&Transform::rot_z_deg(35.0));
    (x, w)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[test]
fn noiseless_recovery_is_exact() {
    let (x, w) = truth();
    let samples = synthetic_samples(&x, &w, 10, PoseNoise::default(), 7);
    let r = solve_ax_xb(&samples).unwrap();
    let e = pose_error(&r.camera_in_flange, &x);
    assert!(e.translation_error < 1e-6, "{e:?}");
    assert!(e.rotation_error < 1e-6, "{e:?}");
    assert_eq!(r.pair_count, 45);
    assert_eq!(r.solver, "park-martin");
    assert!(r.rotation_residual < 1e-6 && r.translation_residual < 1e-6);

    // every motion pair closes
    for i in 0..samples.len() {
        for j in (i + 1)..samples.len() {
            let a = samples[i].flange_in_base.inverse().compose(&samples[j].flange_in_base);
            let b = samples[i].target_in_camera.compose(&samples[j].target_in_camera.inverse());
            let e = pose_error(&a.compose(&r.camera_in_flange), &r.camera_in_flange.compose(&b));
            assert!(e.rotation_error < 1e-6 && e.translation_error < 1e-6);
        }
    }
}

#[test]
fn identity_hand_eye_when_target_pose_is_inverse_flange_pose() {
    // target at the base origin and X = I give B_i = A_i⁻¹
    let poses = [
        Transform::from_translation(10.0, 0.0, 400.0).compose(&Transform::rot_x_deg(20.0)),
        Transform::from_translation(-30.0, 15.0, 380.0).compose(&Transform::rot_y_deg(-25.0)),
        Transform::from_translation(5.0, 40.0, 420.0).compose(&Transform::rot_z_deg(40.0)),
    ];
    let samples: Vec<_> = poses
        .iter()
        .map(|a| CalibrationSample {
            flange_in_base: *a,
            target_in_camera: a.inverse(),
        })
        .collect();
    let r = solve_ax_xb(&samples).unwrap();
    let e = pose_error(&r.camera_in_flange, &Transform::identity());
    assert!(e.rotation_error < 1e-9 && e.translation_error < 1e-9, "{e:?}");
}

#[test]
fn noisy_recovery_median_over_fifty_seeds() {
    let (x, w) = truth();
    let noise = PoseNoise {
        rotation_deg: 0.05,
        translation_mm: 0.1,
    };
    let mut terr = Vec::new();
    let mut resid = Vec::new();
    for seed in 0..50 {
        let r = solve_ax_xb(&synthetic_samples(&x, &w, 10, noise, 1000 + seed)).unwrap();
        terr.push(pose_error(&r.camera_in_flange, &x).translation_error);
        resid.push(r.translation_residual);
    }
    let (mt, mr) = (median(terr), median(resid));
    eprintln!("median X translation error {mt:.4}, residual {mr:.4}");
    assert!(mt < 0.3, "median X translation error {mt}");
    assert!(mr < 0.5, "median translation residual {mr}");
}

#[test]
fn residuals_shrink_with_noise() {
    let (x, w) = truth();
    let levels = [1.0, 0.1, 0.01, 0.0];
    let mut last = (f64::INFINITY, f64::INFINITY);
    for s in levels {
        let noise = PoseNoise {
            rotation_deg: 0.05 * s,
            translation_mm: 0.1 * s,
        };
        let r = solve_ax_xb(&synthetic_samples(&x, &w, 10, noise, 99)).unwrap();
        assert!(r.rotation_residual < last.0 && r.translation_residual < last.1);
        last = (r.rotation_residual, r.translation_residual);
    }
}

#[test]
fn pose_noise_is_zero_mean_sized() {
    // oracle: per-axis translation std of the perturbation equals the setting
    let noise = PoseNoise {
        rotation_deg: 0.0,
        translation_mm: 0.1,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let xs: Vec<f64> = (0..4000)
        .map(|_| noise.perturb(&Transform::identity(), &mut rng).translation.x)
        .collect();
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    let sd = (xs.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / xs.len() as f64).sqrt();
    assert!(m.abs() < 0.01 && (sd - 0.1).abs() < 0.01, "{m} {sd}");
}

#[test]
fn planned_poses_are_separated_and_in_view() {
    let cam = CameraModel::default();
    let b = ObservationBox {
        min: Point::new(-60.0, -40.0, 0.0),
        max: Point::new(60.0, 40.0, 30.0),
    };
    let center = b.center();
    for count in [3usize, 6, 12] {
        let poses = plan_poses(&b, count, 20.0, &cam).unwrap();
        assert_eq!(poses.len(), count);
        assert_eq!(poses, plan_poses(&b, count, 20.0, &cam).unwrap());
        let mut axes = Vec::new();
        for p in &poses {
            let local = p.inverse().transform_point(center);
            assert!(local.x.abs() < 1e-9 && local.y.abs() < 1e-9 && local.z > 0.0);
            for c in b.corners() {
                assert!(cam.fov_table.contains(p.inverse().transform_point(c)));
            }
        }
        for k in 1..poses.len() {
            let v = poses[k - 1].rotation.conjugate().mul_quat(&poses[k].rotation).log();
            assert!(v.norm() > 0.5f64.to_radians());
            axes.push(v);
        }
        for i in 0..axes.len() {
            for j in (i + 1)..axes.len() {
                let a = axes[i].angle_deg(axes[j]);
                assert!(a.min(180.0 - a) >= 10.0, "count {count}: axes {i},{j} only {a:.2} deg apart");
            }
        }
        let d: Vec<f64> = poses.iter().map(|p| p.translation.distance(center)).collect();
        let spread = d.iter().cloned().fold(f64::MIN, f64::max) - d.iter().cloned().fold(f64::MAX, f64::min);
        assert!(spread > 50.0, "standoffs {d:?}");
    }
}

#[test]
fn degenerate_box_still_plans() {
    let p = Point::new(10.0, -5.0, 0.0);
    let poses = plan_poses(&ObservationBox { min: p, max: p }, 4, 30.0, &CameraModel::default()).unwrap();
    for pose in poses {
        let local = pose.inverse().transform_point(p);
        assert!(local.x.abs() < 1e-9 && local.y.abs() < 1e-9);
    }
}

#[test]
fn planned_poses_calibrate() {
    let cam = CameraModel::default();
    let b = ObservationBox {
        min: Point::new(-60.0, -40.0, 0.0),
        max: Point::new(60.0, 40.0, 30.0),
    };
    let (x, _) = truth();
    let w = Transform::from_translation(0.0, 0.0, 15.0);
    let samples: Vec<_> = plan_poses(&b, 8, 25.0, &cam)
        .unwrap()
        .iter()
        .map(|cam_pose| {
            let a = cam_pose.compose(&x.inverse());
            CalibrationSample {
                flange_in_base: a,
                target_in_camera: cam_pose.inverse().compose(&w),
            }
        })
        .collect();
    let r = solve_ax_xb(&samples).unwrap();
    let e = pose_error(&r.camera_in_flange, &x);
    assert!(e.translation_error < 1e-6 && e.rotation_error < 1e-6, "{e:?}");
}

fn exact_grid() -> Vec<[f64; 2]> {
    // offsets of +0.3/+0.4 are exact in binary for these coordinates
    let xs = [-0.75, -0.625, -0.5, -0.375, -0.25, -0.125, 0.0, 0.125];
    let ys = [-1.375, -1.25, -1.125, -1.0, -0.875, -0.75, -0.625, -0.5];
    xs.iter().flat_map(|x| ys.iter().map(move |y| [*x, *y])).collect()
}

#[test]
fn uniform_three_four_five_offset() {
    let reference = exact_grid();
    let observed: Vec<[f64; 2]> = reference.iter().map(|[x, y]| [x + 0.3, y + 0.4]).collect();
    let s = reprojection_error(&observed, &reference).unwrap();
    assert_eq!(s.mean, 0.5);
    assert_eq!(s.max, 0.5);
    assert_eq!(s.std, 0.0);
    assert!(!ReprojectionGate::default().passes(&s));
}

#[test]
fn rayleigh_mean_of_gaussian_corner_noise() {
    let sigma = 0.2;
    let expected = sigma * (std::f64::consts::PI / 2.0).sqrt();
    let n = Normal::new(0.0, sigma).unwrap();
    let mut means = Vec::new();
    for seed in 0..200 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let reference: Vec<[f64; 2]> = (0..100).map(|i| [(i % 10) as f64 * 30.0, (i / 10) as f64 * 30.0]).collect();
        let observed: Vec<[f64; 2]> = reference
            .iter()
            .map(|[x, y]| [x + n.sample(&mut rng), y + n.sample(&mut rng)])
            .collect();
        let s = reprojection_error(&observed, &reference).unwrap();
        assert!(s.mean <= s.max && s.mean >= 0.0);
        assert!(ReprojectionGate::default().passes(&s));
        means.push(s.mean);
    }
    let m = median(means);
    assert!((m - expected).abs() < 0.15 * expected, "{m} vs {expected}");
}

#[test]
fn calibration_files_round_trip() {
    let (x, w) = truth();
    let samples = synthetic_samples(&x, &w, 4, PoseNoise::default(), 3);
    let text = serde_json::to_string(&samples).unwrap();
    let back: Vec<CalibrationSample<f64>> = serde_json::from_str(&text).unwrap();
    assert_eq!(back.len(), 4);
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert!(v[0]["flange_in_base"]["q"].is_array());
    assert!(v[0]["target_in_camera"]["t"].is_array());

    let r = solve_ax_xb(&samples).unwrap();
    let back: HandEyeResult<f64> = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
    assert_eq!(back.solver, r.solver);
    assert_eq!(back.sample_count, 4);
}
