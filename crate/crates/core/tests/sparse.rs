mod common;

use std::sync::Arc;

use common::{dense_grid_conv, random_coords, random_mat, random_tensor, rng};
use pcac::sparse::{
    build_coord_index, channel_avg_pool, sparse_conv, sparse_conv_transpose, spatial_avg_pool, ConvWeights, CoordSet,
    SparseTensor,
};
use pcac::tensor::Mat;
use proptest::prelude::*;
use rand::Rng;

fn weights(r: &mut rand_chacha::ChaCha8Rng, kernel: usize, c_in: usize, c_out: usize) -> ConvWeights<f64> {
    ConvWeights::new(kernel, random_mat(r, kernel.pow(3) * c_in, c_out, 1.0), None).unwrap()
}

#[test]
fn same_stride_conv_matches_dense_grid() {
    let mut r = rng(50);
    for t in 0..60 {
        let kernel = if t % 2 == 0 { 3 } else { 1 };
        let n = r.random_range(1..=60);
        let x = random_tensor(&mut r, n, 6, 3);
        let w = weights(&mut r, kernel, 3, 4);
        let got = sparse_conv(&x, &w, 1).unwrap();
        let want = dense_grid_conv(x.coords.coords(), 1, &x.feats, &w.weight, kernel, x.coords.coords());
        assert!(got.feats.max_abs_diff(&want) <= 1e-12);
    }
}

#[test]
fn strided_conv_matches_dense_grid() {
    let mut r = rng(51);
    for _ in 0..30 {
        let n = r.random_range(1..=100);
        let x = random_tensor(&mut r, n, 8, 2);
        let w = weights(&mut r, 3, 2, 3);
        let got = sparse_conv(&x, &w, 2).unwrap();
        assert_eq!(got.stride(), 2);
        assert!(got.coords.coords().iter().flatten().all(|v| v % 2 == 0));
        let want = dense_grid_conv(x.coords.coords(), 1, &x.feats, &w.weight, 3, got.coords.coords());
        assert!(got.feats.max_abs_diff(&want) <= 1e-12);
    }
}

/// `<conv(x), y> == <x, conv_t(y)>` when the transpose uses block-transposed weights.
#[test]
fn transpose_is_the_adjoint() {
    let mut r = rng(52);
    for _ in 0..20 {
        let n = r.random_range(1..=80);
        let x = random_tensor(&mut r, n, 8, 3);
        let w = weights(&mut r, 3, 3, 2);
        let down = sparse_conv(&x, &w, 2).unwrap();
        let y = SparseTensor::new(down.coords.clone(), random_mat(&mut r, down.len(), 2, 1.0)).unwrap();
        let up = sparse_conv_transpose(&y, &w.transposed_blocks(), x.coords.clone()).unwrap();
        let dot = |a: &Mat<f64>, b: &Mat<f64>| a.as_slice().iter().zip(b.as_slice()).map(|(p, q)| p * q).sum::<f64>();
        let (lhs, rhs) = (dot(&down.feats, &y.feats), dot(&x.feats, &up.feats));
        assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0), "{lhs} {rhs}");
    }
}

#[test]
fn transpose_rejects_wrong_stride() {
    let mut r = rng(53);
    let x = random_tensor(&mut r, 10, 6, 2);
    let w = weights(&mut r, 3, 2, 2);
    assert!(sparse_conv_transpose(&x, &w, x.coords.clone()).is_err());
    assert!(sparse_conv(&x, &w, 4).is_err());
}

#[test]
fn pooling_matches_sums() {
    let mut r = rng(54);
    let x = random_tensor(&mut r, 20, 6, 5);
    let s = spatial_avg_pool(&x).unwrap();
    let c = channel_avg_pool(&x).unwrap();
    for ch in 0..5 {
        let want: f64 = (0..20).map(|i| x.feats[(i, ch)]).sum::<f64>() / 20.0;
        assert!((s[(0, ch)] - want).abs() < 1e-14);
    }
    for i in 0..20 {
        let want: f64 = x.feats.row(i).iter().sum::<f64>() / 5.0;
        assert!((c[(i, 0)] - want).abs() < 1e-14);
    }
}

#[test]
fn duplicate_coordinates_are_rejected() {
    assert!(build_coord_index(&[[1, 2, 3], [1, 2, 3]]).is_err());
    assert!(CoordSet::new(vec![[0, 0, 0], [0, 0, 0]], 1).is_err());
    assert!(CoordSet::new(vec![[1, 0, 0]], 2).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_is_linear(seed in any::<u64>(), n in 1usize..50, a in -3.0f64..3.0, b in -3.0f64..3.0, k in prop::sample::select(vec![1usize, 3])) {
        let mut r = rng(seed);
        let coords = Arc::new(CoordSet::new(random_coords(&mut r, n, 6), 1).unwrap());
        let x = random_mat(&mut r, n, 3, 1.0);
        let y = random_mat(&mut r, n, 3, 1.0);
        let w = weights(&mut r, k, 3, 2);
        let f = |m: Mat<f64>| sparse_conv(&SparseTensor::new(coords.clone(), m).unwrap(), &w, 1).unwrap().feats;
        let lhs = f(x.zip_map(&y, |p, q| a * p + b * q));
        let rhs = f(x.clone()).zip_map(&f(y.clone()), |p, q| a * p + b * q);
        prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-5);
    }

    #[test]
    fn conv_commutes_with_row_permutation(seed in any::<u64>(), n in 1usize..50) {
        let mut r = rng(seed);
        let x = random_tensor(&mut r, n, 6, 2);
        let w = weights(&mut r, 3, 2, 2);
        let mut perm: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut r);
        let px = SparseTensor::new(
            Arc::new(x.coords.permuted(&perm).unwrap()),
            Mat::from_fn(n, 2, |i, c| x.feats[(perm[i], c)]),
        ).unwrap();
        let a = sparse_conv(&x, &w, 1).unwrap().feats;
        let b = sparse_conv(&px, &w, 1).unwrap().feats;
        for i in 0..n {
            for c in 0..2 {
                prop_assert!((b[(i, c)] - a[(perm[i], c)]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn downsample_is_floor_aligned(seed in any::<u64>(), n in 1usize..80) {
        let mut r = rng(seed);
        let coords = random_coords(&mut r, n, 9);
        let cs = CoordSet::new(coords.clone(), 1).unwrap();
        let d = cs.downsample();
        prop_assert_eq!(d.stride(), 2);
        for c in &coords {
            prop_assert!(d.row_of(c.map(|v| v.div_euclid(2) * 2)).is_some());
        }
        prop_assert!(d.len() <= cs.len());
        prop_assert!(d.coords().windows(2).all(|w| w[0] < w[1]));
    }
}
