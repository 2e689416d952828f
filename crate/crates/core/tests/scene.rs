use proptest::prelude::*;
use specklenav::scene::{render_cloud, CameraModel, RingMarker, SurfaceShape, TorsoPhantom};
use specklenav::{Point, Transform};

fn std_dev(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

#[test]
fn depth_noise_matches_table_at_every_knot() {
    let ph = TorsoPhantom::default();
    let cam0 = CameraModel::default();
    for (i, row) in cam0.fov_table.rows().iter().enumerate() {
        // a hair inside the end knots so noisy points are not clipped by near/far
        let d = row.distance.clamp(250.0 + 4.0 * 0.033, 700.0 - 4.0 * 0.359);
        let cam = CameraModel {
            mount_pose: CameraModel::looking_down_from(d),
            ..cam0.clone()
        };
        let cloud = render_cloud(&ph, None, &cam, 0.0, 500 + i as u64).unwrap();
        assert!(cloud.len() >= 10_000, "{}", cloud.len());
        let z: Vec<f64> = cloud.points.iter().map(|p| p.z).collect();
        let measured = std_dev(&z);
        let want = cam.sigma_z(d).value;
        assert!((measured / want - 1.0).abs() < 0.10, "{d}: {measured} vs {want}");
    }
}

#[test]
fn breathing_is_periodic_on_curved_skin() {
    let ph = TorsoPhantom {
        base_surface: SurfaceShape::Dome {
            crown_mm: 40.0,
            semi_axis_x_mm: 350.0,
            semi_axis_y_mm: 250.0,
        },
        breathing_amplitude: 5.0,
        breathing_period: 4.0,
        ..TorsoPhantom::default()
    };
    let cam = CameraModel {
        mount_pose: CameraModel::looking_down_from(420.0),
        ..CameraModel::default()
    };
    let m = RingMarker::on_surface(&ph.base_surface, 0.0, 0.0);
    let a = render_cloud(&ph, Some(&m), &cam, 1.3, 8).unwrap();
    let b = render_cloud(&ph, Some(&m), &cam, 5.3, 8).unwrap();
    assert_eq!(a.len(), b.len());
    for (p, q) in a.points.iter().zip(&b.points) {
        assert!(p.distance(*q) < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn points_stay_in_frustum(
        seed in any::<u64>(),
        d in 265.0f64..640.0,
        tilt in -25.0f64..25.0,
        noise in 0.0f64..4.0,
        dome in any::<bool>(),
    ) {
        let ph = TorsoPhantom {
            base_surface: if dome {
                SurfaceShape::Dome { crown_mm: 40.0, semi_axis_x_mm: 350.0, semi_axis_y_mm: 250.0 }
            } else {
                SurfaceShape::Flat
            },
            ..TorsoPhantom::default()
        };
        let cam = CameraModel {
            mount_pose: Transform::from_axis_angle_deg(Point::new(1.0, 0.3, 0.0), tilt)
                .compose(&CameraModel::looking_down_from(d + ph.base_surface.height(0.0, 0.0))),
            noise_scale: noise,
            ..CameraModel::default()
        };
        let table = &cam.fov_table;
        let cloud = render_cloud(&ph, Some(&RingMarker::on_surface(&ph.base_surface, 0.0, 0.0)), &cam, 0.0, seed).unwrap();
        for p in &cloud.points {
            let (fx, fy) = table.field_of_view(p.z).value;
            prop_assert!(p.z >= table.near() && p.z <= table.far());
            prop_assert!(p.x.abs() <= 0.5 * fx + 1e-9 && p.y.abs() <= 0.5 * fy + 1e-9);
        }
        let again = render_cloud(&ph, Some(&RingMarker::on_surface(&ph.base_surface, 0.0, 0.0)), &cam, 0.0, seed).unwrap();
        prop_assert_eq!(cloud, again);
    }
}
