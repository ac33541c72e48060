mod common;

use std::sync::Arc;

use common::{random_mat, random_tensor, rng};
use pcac::autodiff::{grad_check_params, Graph, ParamStore, Var};
use pcac::blocks::{
    window_partition, zero_params, Conv, Init, LocalAttention, ResidualBlock, SparseLevel, Tscm, TscmConfig,
    VoxelGlobalBlock,
};
use pcac::sparse::{kernel_offsets, Coord, CoordSet, SparseTensor};
use pcac::tensor::Mat;

// ---- brute-force oracles, written against plain coordinate lists ----

fn mat_mul(a: &Mat<f64>, b: &Mat<f64>) -> Mat<f64> {
    Mat::from_fn(a.rows(), b.cols(), |r, c| (0..a.cols()).map(|k| a[(r, k)] * b[(k, c)]).sum())
}

fn add_bias(mut m: Mat<f64>, b: &Mat<f64>) -> Mat<f64> {
    for r in 0..m.rows() {
        for c in 0..m.cols() {
            m.as_mut_slice()[r * b.cols() + c] += b[(0, c)];
        }
    }
    m
}

fn dense_conv(coords: &[Coord], stride: i32, x: &Mat<f64>, w: &Mat<f64>, b: &Mat<f64>, kernel: usize) -> Mat<f64> {
    let c_in = x.cols();
    let offsets = kernel_offsets(kernel);
    let mut out = Mat::zeros(coords.len(), w.cols());
    for (o, u) in coords.iter().enumerate() {
        for (i, off) in offsets.iter().enumerate() {
            let q = [u[0] + off[0] * stride, u[1] + off[1] * stride, u[2] + off[2] * stride];
            if let Some(src) = coords.iter().position(|c| *c == q) {
                for co in 0..w.cols() {
                    let mut s = 0.0;
                    for ci in 0..c_in {
                        s += x[(src, ci)] * w[(i * c_in + ci, co)];
                    }
                    out.as_mut_slice()[o * w.cols() + co] += s;
                }
            }
        }
    }
    add_bias(out, b)
}

fn conv_oracle(store: &ParamStore<f64>, conv: &Conv, coords: &[Coord], stride: i32, x: &Mat<f64>) -> Mat<f64> {
    let b = conv.bias.map(|id| store.value(id).clone()).unwrap_or_else(|| Mat::zeros(1, conv.c_out));
    dense_conv(coords, stride, x, store.value(conv.weight), &b, conv.kernel)
}

fn residual_oracle(store: &ParamStore<f64>, blk: &ResidualBlock, coords: &[Coord], stride: i32, x: &Mat<f64>) -> Mat<f64> {
    let h = conv_oracle(store, &blk.conv1, coords, stride, x).map(|v| v.max(0.0));
    let h = conv_oracle(store, &blk.conv2, coords, stride, &h);
    x.zip_map(&h, |a, b| a + b)
}

fn attention_oracle(
    store: &ParamStore<f64>,
    att: &LocalAttention,
    coords: &[Coord],
    stride: i32,
    side: i32,
    x: &Mat<f64>,
) -> Mat<f64> {
    let q = mat_mul(x, store.value(att.wq));
    let k = mat_mul(x, store.value(att.wk));
    let v = mat_mul(x, store.value(att.wv));
    let c = x.cols();
    let d = c / att.heads;
    let cell = (stride * side) as f64;
    let key = |p: &Coord| p.map(|t| (t as f64 / cell).floor() as i64);
    let mut a = Mat::zeros(x.rows(), c);
    for r in 0..x.rows() {
        let peers: Vec<usize> = (0..x.rows()).filter(|&s| key(&coords[s]) == key(&coords[r])).collect();
        for h in 0..att.heads {
            let cols = h * d..(h + 1) * d;
            let scores: Vec<f64> = peers
                .iter()
                .map(|&s| cols.clone().map(|t| q[(r, t)] * k[(s, t)]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for t in cols.clone() {
                a.as_mut_slice()[r * c + t] = peers.iter().zip(&e).map(|(&s, w)| w / z * v[(s, t)]).sum();
            }
        }
    }
    mat_mul(&a, store.value(att.wo))
}

fn global_oracle(store: &ParamStore<f64>, blk: &VoxelGlobalBlock, coords: &[Coord], x: &Mat<f64>) -> Mat<f64> {
    let h = conv_oracle(store, &blk.pre, coords, 1, x);
    let (n, c) = h.shape();
    let fos: Vec<f64> = (0..c).map(|j| (0..n).map(|i| h[(i, j)]).sum::<f64>() / n as f64).collect();
    let foc: Vec<f64> = (0..n)
        .map(|i| {
            let m = (0..c).map(|j| h[(i, j)]).sum::<f64>() / c as f64;
            m.signum() * m.abs().sqrt()
        })
        .collect();
    let sharpened = Mat::from_fn(n, c, |i, j| h[(i, j)] - foc[i] * fos[j]);
    conv_oracle(store, &blk.post, coords, 1, &sharpened)
}

fn halves(x: &Mat<f64>) -> (Mat<f64>, Mat<f64>) {
    let h = x.cols() / 2;
    (x.cols_range(0, h), x.cols_range(h, h))
}

fn tscm_oracle(store: &ParamStore<f64>, t: &Tscm, coords: &[Coord], stride: i32, x: &Mat<f64>) -> Mat<f64> {
    let s = conv_oracle(store, &t.split, coords, stride, x);
    let (a, b) = halves(&s);
    let att = attention_oracle(store, &t.attention, coords, stride, t.config.window_side, &a);
    let cnn = residual_oracle(store, &t.local_residual, coords, stride, &b);
    let fused = conv_oracle(store, &t.fuse1, coords, stride, &Mat::hcat(&[&att, &cnn]));
    let out1 = x.zip_map(&fused, |p, q| p + q);
    let (a, b) = halves(&out1);
    let glo = global_oracle(store, &t.global, coords, &a);
    let cnn = residual_oracle(store, &t.global_residual, coords, stride, &b);
    let fused = conv_oracle(store, &t.fuse2, coords, stride, &Mat::hcat(&[&glo, &cnn]));
    out1.zip_map(&fused, |p, q| p + q)
}

fn randomize(store: &mut ParamStore<f64>, seed: u64, scale: f64) {
    let mut r = rng(seed);
    for p in store.iter_mut() {
        let (rows, cols) = p.value.shape();
        p.value = random_mat(&mut r, rows, cols, scale);
    }
}

fn run<F>(store: &ParamStore<f64>, x: &Mat<f64>, f: F) -> Mat<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Var,
{
    let mut g = Graph::with_params(store);
    let xi = g.constant(x.clone());
    let y = f(&mut g, xi);
    g.value(y).clone()
}

// ---- tests ----

#[test]
fn residual_with_zero_weights_is_skip() {
    let mut store = ParamStore::<f64>::new();
    let blk = ResidualBlock::new(&mut store, &mut Init::new(0), "r", 4, 3).unwrap();
    zero_params(&mut store);
    let x = random_tensor(&mut rng(1), 20, 5, 4);
    let level = SparseLevel::new(x.coords.clone(), 3, 8);
    let y = run(&store, &x.feats, |g, v| blk.forward(g, v, &level).unwrap());
    assert_eq!(y, x.feats);
}

#[test]
fn residual_matches_dense_oracle() {
    let mut store = ParamStore::<f64>::new();
    let blk = ResidualBlock::new(&mut store, &mut Init::new(2), "r", 5, 3).unwrap();
    randomize(&mut store, 3, 0.5);
    let x = random_tensor(&mut rng(4), 40, 5, 5);
    let level = SparseLevel::new(x.coords.clone(), 3, 8);
    let y = run(&store, &x.feats, |g, v| blk.forward(g, v, &level).unwrap());
    let want = residual_oracle(&store, &blk, x.coords.coords(), 1, &x.feats);
    assert!(y.max_abs_diff(&want) < 1e-12);
}

#[test]
fn singleton_window_attention_is_value_projection() {
    let mut store = ParamStore::<f64>::new();
    let att = LocalAttention::new(&mut store, &mut Init::new(5), "a", 4, 2).unwrap();
    let x = random_mat(&mut rng(6), 1, 4, 1.0);
    let groups = Arc::new(vec![vec![0u32]]);
    let y = run(&store, &x, |g, v| att.forward(g, v, &groups).unwrap());
    let want = mat_mul(&mat_mul(&x, store.value(att.wv)), store.value(att.wo));
    assert!(y.max_abs_diff(&want) < 1e-12);
}

#[test]
fn attention_matches_dense_oracle() {
    let mut store = ParamStore::<f64>::new();
    let att = LocalAttention::new(&mut store, &mut Init::new(7), "a", 8, 4).unwrap();
    let x = random_tensor(&mut rng(8), 60, 8, 8);
    for side in [1, 2, 4, 100] {
        let groups = Arc::new(window_partition(x.coords.coords(), 1, side));
        let y = run(&store, &x.feats, |g, v| att.forward(g, v, &groups).unwrap());
        let want = attention_oracle(&store, &att, x.coords.coords(), 1, side, &x.feats);
        assert!(y.max_abs_diff(&want) < 1e-12, "window side {side}");
    }
}

#[test]
fn global_block_single_voxel_by_hand() {
    let mut store = ParamStore::<f64>::new();
    let blk = VoxelGlobalBlock::new(&mut store, &mut Init::new(9), "g", 2).unwrap();
    *store.value_mut(blk.pre.weight) = Mat::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
    *store.value_mut(blk.pre.bias.unwrap()) = Mat::from_vec(1, 2, vec![0.0, 0.0]);
    *store.value_mut(blk.post.weight) = Mat::from_vec(2, 2, vec![2.0, 0.0, 0.0, 1.0]);
    *store.value_mut(blk.post.bias.unwrap()) = Mat::from_vec(1, 2, vec![0.5, 0.0]);
    // h = (3, 6); F_OS = h; F_OC = sqrt(4.5); h - F_OC h = h (1 - sqrt(4.5))
    let x = Mat::from_vec(1, 2, vec![3.0, 6.0]);
    let y = run(&store, &x, |g, v| blk.forward(g, v).unwrap());
    let k = 1.0 - 4.5f64.sqrt();
    let want = [2.0 * 3.0 * k + 0.5, 6.0 * k];
    assert!((y[(0, 0)] - want[0]).abs() < 1e-12);
    assert!((y[(0, 1)] - want[1]).abs() < 1e-12);
}

#[test]
fn global_block_matches_dense_oracle() {
    let mut store = ParamStore::<f64>::new();
    let blk = VoxelGlobalBlock::new(&mut store, &mut Init::new(10), "g", 6).unwrap();
    randomize(&mut store, 11, 0.7);
    let x = random_tensor(&mut rng(12), 30, 6, 6);
    let y = run(&store, &x.feats, |g, v| blk.forward(g, v).unwrap());
    let want = global_oracle(&store, &blk, x.coords.coords(), &x.feats);
    assert!(y.max_abs_diff(&want) < 1e-12);
}

#[test]
fn tscm_matches_composed_oracle_at_stride_two() {
    let mut store = ParamStore::<f64>::new();
    let cfg = TscmConfig {
        channels: 8,
        heads: 2,
        window_side: 2,
        kernel: 3,
    };
    let t = Tscm::new(&mut store, &mut Init::new(13), "t", cfg).unwrap();
    randomize(&mut store, 14, 0.4);
    let coords: Vec<Coord> = common::random_coords(&mut rng(15), 40, 6).iter().map(|c| c.map(|v| 2 * v)).collect();
    let set = Arc::new(CoordSet::new(coords, 2).unwrap());
    let x = SparseTensor::new(set.clone(), random_mat(&mut rng(16), 40, 8, 1.0)).unwrap();
    let y = t.apply(&store, &x).unwrap();
    let want = tscm_oracle(&store, &t, set.coords(), 2, &x.feats);
    assert!(y.feats.max_abs_diff(&want) < 1e-11);
}

#[test]
fn tscm_zero_weights_is_identity_and_shape_checked() {
    let mut store = ParamStore::<f32>::new();
    let t = Tscm::new(&mut store, &mut Init::new(0), "t", TscmConfig::new(16)).unwrap();
    zero_params(&mut store);
    let coords = Arc::new(CoordSet::new(vec![[0, 0, 0], [3, 1, 2]], 1).unwrap());
    let x = SparseTensor::new(coords.clone(), Mat::from_fn(2, 16, |r, c| (r + c) as f32)).unwrap();
    assert_eq!(t.apply(&store, &x).unwrap().feats, x.feats);
    let wrong = SparseTensor::new(coords, Mat::<f32>::zeros(2, 8)).unwrap();
    assert!(t.apply(&store, &wrong).is_err());
}

#[test]
fn tscm_is_permutation_equivariant() {
    use rand::seq::SliceRandom;
    let mut store = ParamStore::<f64>::new();
    let t = Tscm::new(&mut store, &mut Init::new(17), "t", TscmConfig::new(16)).unwrap();
    let x = random_tensor(&mut rng(18), 120, 12, 16);
    let mut perm: Vec<usize> = (0..x.len()).collect();
    perm.shuffle(&mut rng(19));
    let px = SparseTensor::new(
        Arc::new(x.coords.permuted(&perm).unwrap()),
        Mat::from_fn(x.len(), 16, |r, c| x.feats[(perm[r], c)]),
    )
    .unwrap();
    let y = t.apply(&store, &x).unwrap();
    let py = t.apply(&store, &px).unwrap();
    let want = Mat::from_fn(x.len(), 16, |r, c| y.feats[(perm[r], c)]);
    assert!(py.feats.max_abs_diff(&want) < 1e-10);
}

fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Var {
    let (r, c) = g.shape(y);
    let w = g.constant(random_mat(&mut rng(seed), r, c, 1.0));
    let p = g.mul(y, w).unwrap();
    g.sum(p).unwrap()
}

fn assert_grads<F>(store: &mut ParamStore<f64>, x: &Mat<f64>, f: F)
where
    F: Fn(&mut Graph<f64>, Var) -> Var,
{
    let reports = grad_check_params(store, |g, v| Ok(f(g, v)), x, 1e-6, 1e-4, 12).unwrap();
    for (name, r) in reports {
        assert!(r.passed, "{name}: {r:?}");
    }
    let input = pcac::autodiff::grad_check_with(store, |g, v| Ok(f(g, v)), x, 1e-6, 1e-4).unwrap();
    assert!(input.passed, "input: {input:?}");
}

#[test]
fn block_gradients_match_finite_differences() {
    let x = random_tensor(&mut rng(20), 24, 4, 8);
    let level = SparseLevel::new(x.coords.clone(), 3, 2);

    let mut store = ParamStore::<f64>::new();
    let blk = ResidualBlock::new(&mut store, &mut Init::new(21), "r", 8, 3).unwrap();
    assert_grads(&mut store, &x.feats, |g, v| {
        let y = blk.forward(g, v, &level).unwrap();
        weighted_sum(g, y, 1)
    });

    let mut store = ParamStore::<f64>::new();
    let att = LocalAttention::new(&mut store, &mut Init::new(22), "a", 8, 2).unwrap();
    assert_grads(&mut store, &x.feats, |g, v| {
        let y = att.forward(g, v, &level.windows).unwrap();
        weighted_sum(g, y, 2)
    });

    let mut store = ParamStore::<f64>::new();
    let glo = VoxelGlobalBlock::new(&mut store, &mut Init::new(23), "g", 8).unwrap();
    assert_grads(&mut store, &x.feats, |g, v| {
        let y = glo.forward(g, v).unwrap();
        weighted_sum(g, y, 3)
    });

    let mut store = ParamStore::<f64>::new();
    let cfg = TscmConfig {
        channels: 8,
        heads: 2,
        window_side: 2,
        kernel: 3,
    };
    let t = Tscm::new(&mut store, &mut Init::new(24), "t", cfg).unwrap();
    assert_grads(&mut store, &x.feats, |g, v| {
        let y = t.forward(g, v, &level).unwrap();
        weighted_sum(g, y, 4)
    });
}
