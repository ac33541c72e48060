use pcac::pcio::{
    farthest_point_sample, knn_indices, parse_ply, resample, rgb_to_yuv, voxelize, write_blocks, write_ply, yuv_to_rgb8,
    PlyFormat, PointCloud, RawPointCloud, ResampleConfig,
};
use proptest::prelude::*;

fn d2(a: [i32; 3], b: [i32; 3]) -> i64 {
    (0..3).map(|k| ((a[k] - b[k]) as i64).pow(2)).sum()
}

/// Quadratic-time FPS straight from the max-min definition.
fn naive_fps(coords: &[[i32; 3]], k: usize) -> Vec<usize> {
    let mut chosen = vec![0usize];
    while chosen.len() < k {
        let mut best: Option<(i64, usize)> = None;
        for (i, &p) in coords.iter().enumerate() {
            let d = chosen.iter().map(|&c| d2(coords[c], p)).min().unwrap();
            if best.is_none_or(|(bd, _)| d > bd) {
                best = Some((d, i));
            }
        }
        chosen.push(best.unwrap().1);
    }
    chosen
}

fn cloud_strategy(max: usize) -> impl Strategy<Value = PointCloud> {
    prop::collection::btree_set((0i32..20, 0i32..20, 0i32..20), 1..max).prop_map(|set| {
        let coords: Vec<[i32; 3]> = set.into_iter().map(|(x, y, z)| [x, y, z]).collect();
        let n = coords.len();
        PointCloud {
            coords,
            attrs: (0..n).map(|i| rgb_to_yuv([(i * 37 % 256) as f64, 80.0, 200.0])).collect(),
            bit_depth: 5,
        }
    })
}

fn raw_strategy() -> impl Strategy<Value = RawPointCloud> {
    prop::collection::vec(
        (
            prop_oneof![(-1e4f64..1e4).prop_map(|v| v.round()), -1e4f64..1e4],
            -1e4f64..1e4,
            -1e4f64..1e4,
            any::<[u8; 3]>(),
        ),
        0..60,
    )
    .prop_map(|pts| RawPointCloud {
        positions: pts.iter().map(|&(x, y, z, _)| [x, y, z]).collect(),
        colors: pts.iter().map(|p| p.3).collect(),
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn binary_ply_round_trips(raw in raw_strategy()) {
        let back = parse_ply(&write_ply(&raw, PlyFormat::BinaryLittleEndian)).unwrap();
        prop_assert_eq!(back, raw);
    }

    #[test]
    fn ascii_ply_round_trips(raw in raw_strategy()) {
        let back = parse_ply(&write_ply(&raw, PlyFormat::Ascii)).unwrap();
        prop_assert_eq!(back.colors, raw.colors);
        for (a, b) in back.positions.iter().zip(&raw.positions) {
            for k in 0..3 {
                prop_assert!((a[k] - b[k]).abs() <= 1e-6 * b[k].abs().max(1.0));
            }
        }
    }

    #[test]
    fn voxelized_clouds_are_sorted_unique_and_in_range(raw in raw_strategy(), depth in 4u32..12) {
        prop_assume!(!raw.is_empty());
        let pc = voxelize(&raw, depth).unwrap();
        prop_assert!(pc.len() <= raw.len());
        prop_assert!(pc.coords.windows(2).all(|w| w[0] < w[1]));
        let hi = (1 << depth) - 1;
        prop_assert!(pc.coords.iter().flatten().all(|&v| (0..=hi).contains(&v)));
        prop_assert!(pc.attrs.iter().flatten().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn fps_matches_naive_definition(pc in cloud_strategy(80), frac in 0.0f64..1.0) {
        let k = 1 + ((pc.len() - 1) as f64 * frac) as usize;
        let fast = farthest_point_sample(&pc, k).unwrap();
        prop_assert_eq!(&fast, &naive_fps(&pc.coords, k));
        let mut sorted = fast.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), k);
    }

    #[test]
    fn knn_matches_full_sort(pc in cloud_strategy(80), c in 0usize..80, frac in 0.0f64..1.0) {
        let c = c % pc.len();
        let m = 1 + ((pc.len() - 1) as f64 * frac) as usize;
        let got = knn_indices(&pc, &[c], m).unwrap();
        let mut all: Vec<(i64, usize)> = pc.coords.iter().enumerate().map(|(i, &p)| (d2(pc.coords[c], p), i)).collect();
        all.sort();
        let want: Vec<usize> = all[..m].iter().map(|p| p.1).collect();
        prop_assert_eq!(&got[0], &want);
    }

    #[test]
    fn resample_block_shape(pc in cloud_strategy(120), m in 1usize..50) {
        let cfg = ResampleConfig { cluster_point_count: m };
        let blocks = resample(&pc, &cfg).unwrap();
        prop_assert_eq!(blocks.len(), pc.len().div_ceil(m));
        for b in &blocks {
            prop_assert_eq!(b.cloud.len(), m.min(pc.len()));
            prop_assert!(b.cloud.coords.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(b.cloud.coords.contains(&pc.coords[b.center_index]));
        }
    }

    #[test]
    fn rgb_survives_yuv(rgb in any::<[u8; 3]>()) {
        let yuv = rgb_to_yuv(rgb.map(f64::from));
        prop_assert_eq!(yuv_to_rgb8(yuv), rgb);
    }
}

#[test]
fn written_blocks_parse_back() {
    let mut coords: Vec<[i32; 3]> = (0..30).map(|i| [i % 4, (i / 4) % 4, i / 16]).collect();
    coords.sort();
    let pc = PointCloud {
        attrs: coords.iter().map(|c| rgb_to_yuv([c[0] as f64 * 60.0, 10.0, 250.0])).collect(),
        coords,
        bit_depth: 4,
    };
    let blocks = resample(&pc, &ResampleConfig { cluster_point_count: 12 }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let index = write_blocks(dir.path(), "src.ply", 3, &blocks, 7).unwrap();
    assert_eq!(index.len(), 3);
    assert_eq!(index[0].file, "block_00007.ply");
    for (e, b) in index.iter().zip(&blocks) {
        let raw = parse_ply(&std::fs::read(dir.path().join(&e.file)).unwrap()).unwrap();
        let back = voxelize(&raw, 4).unwrap();
        assert_eq!(e.point_count, b.cloud.len());
        assert_eq!(raw.len(), b.cloud.len());
        assert_eq!(raw.colors, b.cloud.to_raw().colors);
        // the written positions keep the source grid up to the min-shift
        let lo = b.cloud.coords.iter().fold([i32::MAX; 3], |m, c| [0, 1, 2].map(|k| m[k].min(c[k])));
        let shifted: Vec<[i32; 3]> = b.cloud.coords.iter().map(|c| [0, 1, 2].map(|k| c[k] - lo[k])).collect();
        assert_eq!(back.coords, shifted);
    }
}

#[test]
fn empty_and_oversized_requests_fail() {
    let pc = PointCloud {
        coords: vec![[0, 0, 0]],
        attrs: vec![[0.5; 3]],
        bit_depth: 4,
    };
    assert!(farthest_point_sample(&pc, 2).is_err());
    assert!(farthest_point_sample(&pc, 0).is_err());
    assert!(knn_indices(&pc, &[0], 2).is_err());
    let empty = PointCloud {
        coords: vec![],
        attrs: vec![],
        bit_depth: 4,
    };
    assert!(resample(&empty, &ResampleConfig::default()).is_err());
    assert!(resample(&pc, &ResampleConfig { cluster_point_count: 0 }).is_err());
}
