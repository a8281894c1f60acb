use nalgebra::{UnitQuaternion, Vector2, Vector3};
use orthofuse::eval::ErrorStats;
use orthofuse::geometry::{nadir_camera_rotation, transfer_pixel};
use orthofuse::matching::{homogenize, FeatureSet, Keypoint, MatchPair};
use orthofuse::ortho::compute_score;
use orthofuse::terrain::{idw, percentile_member};
use orthofuse::{CameraIntrinsics, Frame, Metric, RigidTransform};
use proptest::prelude::*;

fn transform() -> impl Strategy<Value = RigidTransform> {
    (prop::array::uniform3(-3.2f64..3.2), prop::array::uniform3(-100.0f64..100.0)).prop_map(|(r, t)| {
        RigidTransform::new(
            UnitQuaternion::from_euler_angles(r[0], r[1], r[2]),
            Vector3::from(t),
            Frame::Camera,
            Frame::World,
        )
    })
}

proptest! {
    #[test]
    fn inverse_composes_to_identity(t in transform(), p in prop::array::uniform3(-50.0f64..50.0)) {
        let p = Vector3::from(p);
        let back = t.inverse().transform_point(&t.transform_point(&p));
        prop_assert!((back - p).norm() < 1e-9);
        let id = t.compose(&t.inverse()).unwrap();
        prop_assert!(id.translation().norm() < 1e-9 && id.rotation().angle() < 1e-9);
    }

    #[test]
    fn transfer_to_same_view_is_identity(
        t in transform(),
        u in 0.0f64..479.0,
        v in 0.0f64..269.0,
        depth in 0.5f64..200.0,
    ) {
        let k = CameraIntrinsics::centered(400.0, 480, 270).unwrap();
        let px = Vector2::new(u, v);
        let out = transfer_pixel(&px, &k, &t, &t, depth).unwrap();
        prop_assert!((out - px).norm() < 1e-9);
    }

    #[test]
    fn transfer_round_trips_between_nadir_views(
        a in prop::array::uniform3(-20.0f64..20.0),
        b in prop::array::uniform3(-20.0f64..20.0),
        u in 0.0f64..479.0,
        v in 0.0f64..269.0,
    ) {
        let k = CameraIntrinsics::centered(400.0, 480, 270).unwrap();
        let pose = |t: [f64; 3]| RigidTransform::new(nadir_camera_rotation(), Vector3::new(t[0], t[1], 60.0 + t[2]), Frame::Camera, Frame::World);
        let (pa, pb) = (pose(a), pose(b));
        let depth_a = 60.0 + a[2];
        let px = Vector2::new(u, v);
        let there = transfer_pixel(&px, &k, &pa, &pb, depth_a).unwrap();
        let back = transfer_pixel(&there, &k, &pb, &pa, 60.0 + b[2]).unwrap();
        prop_assert!((back - px).norm() < 1e-6);
    }

    #[test]
    fn score_is_a_cosine(p in prop::array::uniform3(-1e3f64..1e3), c in prop::array::uniform3(-1e3f64..1e3)) {
        let (p, c) = (Vector3::from(p), Vector3::from(c));
        prop_assume!((p - c).norm() > 1e-6);
        let s = compute_score(&p, &c).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert!((s - (c.z - p.z) / (c - p).norm()).abs() < 1e-12);
    }

    #[test]
    fn percentile_member_is_the_sorted_index(mut v in prop::collection::vec(-1e3f64..1e3, 1..200), q in 0.0f64..=1.0) {
        let mut sorted = v.clone();
        sorted.sort_by(f64::total_cmp);
        let want = sorted[(q * (sorted.len() - 1) as f64).floor() as usize];
        prop_assert_eq!(percentile_member(&mut v, q), Some(want));
    }

    #[test]
    fn idw_stays_within_neighbor_range(n in prop::collection::vec((1e-3f64..100.0, -50.0f64..50.0), 1..20)) {
        let h = idw(n.iter().copied());
        let lo = n.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        let hi = n.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(h >= lo - 1e-9 && h <= hi + 1e-9);
    }

    #[test]
    fn error_stats_are_ordered(e in prop::collection::vec(0.0f64..10.0, 1..100)) {
        let s = ErrorStats::from_errors(&e);
        prop_assert!(s.rmse + 1e-12 >= s.mean);
        prop_assert!(s.max >= s.median && s.max >= s.mean);
    }

    #[test]
    fn homogenize_caps_blocks_and_keeps_a_subset(
        pts in prop::collection::vec((0.0f64..479.0, 0.0f64..269.0, 0.0f32..2.0), 1..300),
        cap in 1usize..6,
        blocksize in 20.0f64..200.0,
    ) {
        let mut fa = FeatureSet::new("a", 480, 270, Metric::L2, 2);
        let mut matches = Vec::new();
        for (i, (x, y, d)) in pts.iter().enumerate() {
            fa.push(Keypoint { position: Vector2::new(*x, *y), response: 1.0 }, &[1.0, 0.0]).unwrap();
            matches.push(MatchPair { index_a: i, index_b: i, distance: *d });
        }
        let kept = homogenize(&matches, &fa, blocksize, cap).unwrap();
        let mut census = std::collections::HashMap::new();
        for m in &kept {
            prop_assert!(matches.contains(m));
            let p = fa.position(m.index_a);
            *census.entry(((p.x / blocksize).floor() as i64, (p.y / blocksize).floor() as i64)).or_insert(0usize) += 1;
        }
        prop_assert!(census.values().all(|&c| c <= cap));
        // no block is cut below its cap
        let mut all = std::collections::HashMap::new();
        for m in &matches {
            let p = fa.position(m.index_a);
            *all.entry(((p.x / blocksize).floor() as i64, (p.y / blocksize).floor() as i64)).or_insert(0usize) += 1;
        }
        for (k, n) in all {
            prop_assert_eq!(census.get(&k).copied().unwrap_or(0), n.min(cap));
        }
    }
}
