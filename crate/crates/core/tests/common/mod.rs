#![allow(dead_code)]

use std::sync::Arc;

use pcac::eval::RdPoint;
use pcac::network::CodecConfig;
use pcac::pcio::{rgb_to_yuv, PointCloud};
use pcac::sparse::{Coord, CoordSet, SparseTensor};
use pcac::tensor::Mat;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Narrow configuration for fast structural tests.
pub fn tiny_config() -> CodecConfig {
    CodecConfig {
        feature_channels: 16,
        latent_channels: 16,
        hyper_channels: 8,
        context_channels: 8,
        slice_count: 4,
        head_count: 2,
        window_side: 4,
        ..CodecConfig::default()
    }
}

/// `n` distinct random coordinates in `[0, side)^3`, sorted.
pub fn random_coords(r: &mut ChaCha8Rng, n: usize, side: i32) -> Vec<Coord> {
    let mut all: Vec<Coord> = Vec::new();
    for x in 0..side {
        for y in 0..side {
            for z in 0..side {
                all.push([x, y, z]);
            }
        }
    }
    all.shuffle(r);
    all.truncate(n);
    all.sort();
    all
}

pub fn random_mat(r: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Mat<f64> {
    Mat::from_fn(rows, cols, |_, _| r.random_range(-scale..scale))
}

pub fn random_tensor(r: &mut ChaCha8Rng, n: usize, side: i32, channels: usize) -> SparseTensor<f64> {
    let coords = Arc::new(CoordSet::new(random_coords(r, n, side), 1).unwrap());
    let feats = random_mat(r, n, channels, 1.0);
    SparseTensor::new(coords, feats).unwrap()
}

/// Voxelized sphere shell of radius `radius` with smooth colors.
pub fn sphere_cloud(radius: f64) -> PointCloud {
    let m = radius.ceil() as i32 + 1;
    let mut coords = Vec::new();
    for x in -m..=m {
        for y in -m..=m {
            for z in -m..=m {
                let d = ((x * x + y * y + z * z) as f64).sqrt();
                if (d - radius).abs() < 0.5 {
                    coords.push([x + m, y + m, z + m]);
                }
            }
        }
    }
    coords.sort();
    let attrs = coords
        .iter()
        .map(|c| {
            let f = |a: f64| 127.5 + 100.0 * a.sin();
            rgb_to_yuv([
                f(c[0] as f64 / 5.0),
                f(c[1] as f64 / 7.0 + 1.0),
                f((c[0] + c[2]) as f64 / 9.0),
            ])
        })
        .collect();
    PointCloud {
        coords,
        attrs,
        bit_depth: 10,
    }
}

/// Convolution evaluated on a zero-filled dense grid, read back at `outputs`.
///
/// Inputs live at `coords` with spacing `stride`; output `u` sums
/// `x(u + i * stride) W_i` over the full `K^3` offset cube.
pub fn dense_grid_conv(
    coords: &[Coord],
    stride: i32,
    x: &Mat<f64>,
    weight: &Mat<f64>,
    kernel: usize,
    outputs: &[Coord],
) -> Mat<f64> {
    let c_in = x.cols();
    let c_out = weight.cols();
    let r = (kernel / 2) as i32 * stride;
    let all = coords.iter().chain(outputs);
    let lo = all.clone().fold([i32::MAX; 3], |m, c| [0, 1, 2].map(|k| m[k].min(c[k]))).map(|v| v - r);
    let hi = all.fold([i32::MIN; 3], |m, c| [0, 1, 2].map(|k| m[k].max(c[k]))).map(|v| v + r);
    let dims = [0, 1, 2].map(|k| (hi[k] - lo[k] + 1) as usize);
    let at = |c: [i32; 3]| {
        let p = [0, 1, 2].map(|k| (c[k] - lo[k]) as usize);
        (p[0] * dims[1] + p[1]) * dims[2] + p[2]
    };
    let mut grid = vec![0.0f64; dims[0] * dims[1] * dims[2] * c_in];
    for (row, c) in coords.iter().enumerate() {
        grid[at(*c) * c_in..][..c_in].copy_from_slice(x.row(row));
    }
    let r = (kernel / 2) as i32;
    let mut out = Mat::zeros(outputs.len(), c_out);
    for (o, u) in outputs.iter().enumerate() {
        let mut i = 0;
        for dx in -r..=r {
            for dy in -r..=r {
                for dz in -r..=r {
                    let q = [u[0] + dx * stride, u[1] + dy * stride, u[2] + dz * stride];
                    let cell = &grid[at(q) * c_in..][..c_in];
                    for co in 0..c_out {
                        let mut s = 0.0;
                        for (ci, &v) in cell.iter().enumerate() {
                            s += v * weight[(i * c_in + ci, co)];
                        }
                        out[(o, co)] += s;
                    }
                    i += 1;
                }
            }
        }
    }
    out
}

/// Cubic least squares on raw abscissae through the normal equations.
pub fn normal_cubic(x: &[f64], y: &[f64]) -> [f64; 4] {
    let mut a = [[0.0f64; 5]; 4];
    for (&xi, &yi) in x.iter().zip(y) {
        for r in 0..4 {
            for c in 0..4 {
                a[r][c] += xi.powi((r + c) as i32);
            }
            a[r][4] += yi * xi.powi(r as i32);
        }
    }
    // Gauss-Jordan with partial pivoting
    for col in 0..4 {
        let p = (col..4).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, p);
        for r in 0..4 {
            if r != col {
                let f = a[r][col] / a[col][col];
                for c in col..5 {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
    }
    [0, 1, 2, 3].map(|i| a[i][4] / a[i][i])
}

pub fn trapezoid(c: &[f64; 4], lo: f64, hi: f64) -> f64 {
    let n = 20_000;
    let h = (hi - lo) / n as f64;
    let p = |x: f64| c[0] + c[1] * x + c[2] * x * x + c[3] * x * x * x;
    (0..n).map(|i| 0.5 * h * (p(lo + i as f64 * h) + p(lo + (i + 1) as f64 * h))).sum()
}

pub fn oracle_bd_br(a: &[RdPoint], b: &[RdPoint]) -> f64 {
    let (pa, ra): (Vec<f64>, Vec<f64>) = a.iter().map(|p| (p.psnr_y, p.bpp.log10())).unzip();
    let (pb, rb): (Vec<f64>, Vec<f64>) = b.iter().map(|p| (p.psnr_y, p.bpp.log10())).unzip();
    let hi = pa.iter().cloned().fold(f64::MIN, f64::max).min(pb.iter().cloned().fold(f64::MIN, f64::max));
    let lo = pa.iter().cloned().fold(f64::MAX, f64::min).max(pb.iter().cloned().fold(f64::MAX, f64::min));
    let (ca, cb) = (normal_cubic(&pa, &ra), normal_cubic(&pb, &rb));
    let avg = (trapezoid(&cb, lo, hi) - trapezoid(&ca, lo, hi)) / (hi - lo);
    (10f64.powf(avg) - 1.0) * 100.0
}

pub fn oracle_bd_psnr(a: &[RdPoint], b: &[RdPoint]) -> f64 {
    let (ra, pa): (Vec<f64>, Vec<f64>) = a.iter().map(|p| (p.bpp.log10(), p.psnr_y)).unzip();
    let (rb, pb): (Vec<f64>, Vec<f64>) = b.iter().map(|p| (p.bpp.log10(), p.psnr_y)).unzip();
    let hi = ra.iter().cloned().fold(f64::MIN, f64::max).min(rb.iter().cloned().fold(f64::MIN, f64::max));
    let lo = ra.iter().cloned().fold(f64::MAX, f64::min).max(rb.iter().cloned().fold(f64::MAX, f64::min));
    let (ca, cb) = (normal_cubic(&ra, &pa), normal_cubic(&rb, &pb));
    (trapezoid(&cb, lo, hi) - trapezoid(&ca, lo, hi)) / (hi - lo)
}

/// Concave, increasing PSNR over four or five rates.
pub fn smooth_curve(r: &mut impl Rng, shift: f64) -> Vec<RdPoint> {
    let n = r.random_range(4..=5);
    let a = r.random_range(25.0..35.0) + shift;
    let b = r.random_range(6.0..12.0);
    let mut rate = r.random_range(0.05..0.15);
    (0..n)
        .map(|_| {
            rate *= r.random_range(1.5..2.2);
            RdPoint {
                bpp: rate,
                psnr_y: a + b * rate.ln() - 0.3 * rate.ln().powi(2) * 0.1,
            }
        })
        .collect()
}
