//! Property tests over the geometry kernel.

use std::collections::BTreeMap;

use proptest::prelude::*;
use spatialgen_core::geometry::{
    backproject, bounding_cube, reproject, spatial_relation, BoundingCube, CameraIntrinsics,
    DepthMap, PointCloud, SegmentationMask,
};

fn depth_map_strategy() -> impl Strategy<Value = DepthMap> {
    // 6x6 rasters with a mixture of valid and invalid pixels
    (
        proptest::collection::vec(0.05f64..20.0, 36),
        proptest::collection::vec(any::<bool>(), 36),
    )
        .prop_map(|(values, validity)| {
            let values = values
                .iter()
                .zip(&validity)
                .map(|(&v, &ok)| if ok { v } else { 0.0 })
                .collect();
            DepthMap::new(6, 6, values, validity).unwrap()
        })
}

fn mask_6x6() -> SegmentationMask {
    let mut descriptions = BTreeMap::new();
    descriptions.insert(1, "thing".to_string());
    SegmentationMask::new(6, 6, vec![1; 36], descriptions).unwrap()
}

proptest! {
    #[test]
    fn round_trip_reproduces_valid_depths(depth in depth_map_strategy()) {
        let intr = CameraIntrinsics::new(30.0, 28.0, 3.0, 2.5, 6, 6).unwrap();
        prop_assume!(depth.valid_count() > 0);
        let cloud = backproject(&depth, &mask_6x6(), &intr).unwrap();
        let back = reproject(&cloud, &intr).unwrap();
        for v in 0..6 {
            for u in 0..6 {
                if let Some(d) = depth.value_at(u, v) {
                    let r = back.value_at(u, v).expect("valid pixel must survive");
                    prop_assert!((r - d).abs() <= 1e-6);
                }
            }
        }
    }

    #[test]
    fn cube_contains_points_and_touches_faces(
        points in proptest::collection::vec(
            (-10.0f64..10.0, -10.0f64..10.0, 0.1f64..10.0),
            1..200,
        )
    ) {
        let pts: Vec<[f64; 3]> = points.iter().map(|&(x, y, z)| [x, y, z]).collect();
        let cloud = PointCloud::new(pts.clone(), vec![1; pts.len()]).unwrap();
        let cube = bounding_cube(&cloud, 1).unwrap();
        // containment
        for p in &pts {
            for ((&coord, &lo), &hi) in p.iter().zip(&cube.min_corner).zip(&cube.max_corner) {
                prop_assert!(lo <= coord);
                prop_assert!(coord <= hi);
            }
        }
        // minimality: every face is touched by at least one point
        for axis in 0..3 {
            prop_assert!(pts.iter().any(|p| p[axis] == cube.min_corner[axis]));
            prop_assert!(pts.iter().any(|p| p[axis] == cube.max_corner[axis]));
        }
    }

    #[test]
    fn axis_predicates_are_antisymmetric(
        ca in (-5.0f64..5.0, -5.0f64..5.0, 0.1f64..10.0),
        cb in (-5.0f64..5.0, -5.0f64..5.0, 0.1f64..10.0),
    ) {
        let eps = 0.02;
        let cube = |c: (f64, f64, f64)| BoundingCube {
            object_id: 1,
            min_corner: [c.0 - 0.05, c.1 - 0.05, c.2 - 0.05],
            max_corner: [c.0 + 0.05, c.1 + 0.05, c.2 + 0.05],
        };
        let ab = spatial_relation(&cube(ca), &cube(cb), eps);
        let ba = spatial_relation(&cube(cb), &cube(ca), eps);

        // swapping arguments swaps each axis pair
        prop_assert_eq!(ab.left_of, ba.right_of);
        prop_assert_eq!(ab.right_of, ba.left_of);
        prop_assert_eq!(ab.above, ba.below);
        prop_assert_eq!(ab.below, ba.above);
        prop_assert_eq!(ab.in_front_of, ba.behind);
        prop_assert_eq!(ab.behind, ba.in_front_of);

        // beyond the dead zone exactly one side of each pair holds
        if (ca.0 - cb.0).abs() > eps {
            prop_assert!(ab.left_of ^ ab.right_of);
        }
        if (ca.1 - cb.1).abs() > eps {
            prop_assert!(ab.above ^ ab.below);
        }
        if (ca.2 - cb.2).abs() > eps {
            prop_assert!(ab.in_front_of ^ ab.behind);
        }
        // never both sides of a pair
        prop_assert!(!(ab.left_of && ab.right_of));
        prop_assert!(!(ab.above && ab.below));
        prop_assert!(!(ab.in_front_of && ab.behind));
    }

    #[test]
    fn center_distance_is_a_metric_on_triples(
        ca in (-5.0f64..5.0, -5.0f64..5.0, 0.1f64..10.0),
        cb in (-5.0f64..5.0, -5.0f64..5.0, 0.1f64..10.0),
        cc in (-5.0f64..5.0, -5.0f64..5.0, 0.1f64..10.0),
    ) {
        let cube = |c: (f64, f64, f64)| BoundingCube {
            object_id: 1,
            min_corner: [c.0, c.1, c.2],
            max_corner: [c.0, c.1, c.2],
        };
        let (a, b, c) = (cube(ca), cube(cb), cube(cc));
        let ab = spatial_relation(&a, &b, 0.0).center_distance;
        let ba = spatial_relation(&b, &a, 0.0).center_distance;
        let bc = spatial_relation(&b, &c, 0.0).center_distance;
        let ac = spatial_relation(&a, &c, 0.0).center_distance;
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(ab, ba);
        prop_assert!(ac <= ab + bc + 1e-9);
    }
}
