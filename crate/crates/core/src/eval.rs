//! Quality and rate metrics and RD reports.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pcio::PointCloud;

/// Reported in place of an infinite PSNR.
pub const PSNR_CAP: f64 = 99.99;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("clouds have different geometry")]
    CoordMismatch,
    #[error("bits per point of an empty cloud")]
    ZeroPoints,
    #[error("an RD curve needs at least 4 points, got {0}")]
    TooFewPoints(usize),
    #[error("RD curve rates must be finite, positive and distinct")]
    BadCurve,
    #[error("RD curves do not overlap")]
    NoOverlap,
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

type Res<T> = Result<T, EvalError>;

/// Luma PSNR with peak 255 over clouds whose YUV lies in `[0, 1]`.
pub fn psnr_y(a: &PointCloud, b: &PointCloud) -> Res<f64> {
    if a.coords != b.coords {
        return Err(EvalError::CoordMismatch);
    }
    if a.is_empty() {
        return Err(EvalError::ZeroPoints);
    }
    let se: f64 = a
        .attrs
        .iter()
        .zip(&b.attrs)
        .map(|(p, q)| {
            let d = 255.0 * (p[0] - q[0]);
            d * d
        })
        .sum();
    Ok(psnr_from_mse(se / a.len() as f64))
}

/// `10 log10(255^2 / mse)` in 8-bit units, capped at [`PSNR_CAP`].
pub fn psnr_from_mse(mse_8bit: f64) -> f64 {
    if mse_8bit <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (255.0f64 * 255.0 / mse_8bit).log10()).min(PSNR_CAP)
}

pub fn bpp(total_bits: f64, point_count: usize) -> Res<f64> {
    if point_count == 0 {
        return Err(EvalError::ZeroPoints);
    }
    Ok(total_bits / point_count as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdPoint {
    pub bpp: f64,
    pub psnr_y: f64,
}

/// At least four points with strictly increasing rate.
#[derive(Clone, Debug, PartialEq)]
pub struct RdCurve {
    points: Vec<RdPoint>,
}

impl RdCurve {
    pub fn new(mut points: Vec<RdPoint>) -> Res<Self> {
        if points.len() < 4 {
            return Err(EvalError::TooFewPoints(points.len()));
        }
        if points.iter().any(|p| !(p.bpp > 0.0 && p.bpp.is_finite() && p.psnr_y.is_finite())) {
            return Err(EvalError::BadCurve);
        }
        points.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
        if points.windows(2).any(|w| w[0].bpp == w[1].bpp) {
            return Err(EvalError::BadCurve);
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[RdPoint] {
        &self.points
    }

    fn log_rates(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.bpp.log10()).collect()
    }

    fn psnrs(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.psnr_y).collect()
    }
}

/// Least-squares cubic on centered, scaled abscissae.
struct Cubic {
    coef: [f64; 4],
    center: f64,
    scale: f64,
}

impl Cubic {
    fn fit(x: &[f64], y: &[f64]) -> Self {
        let n = x.len();
        let center = x.iter().sum::<f64>() / n as f64;
        let spread = x.iter().map(|v| (v - center).abs()).fold(0.0, f64::max);
        let scale = if spread > 0.0 { spread } else { 1.0 };
        let a = DMatrix::from_fn(n, 4, |r, c| ((x[r] - center) / scale).powi(c as i32));
        let b = DVector::from_column_slice(y);
        let sol = a
            .svd(true, true)
            .solve(&b, 1e-14)
            .expect("SVD was computed with both factors");
        Self {
            coef: [sol[0], sol[1], sol[2], sol[3]],
            center,
            scale,
        }
    }

    /// `int_lo^hi p(x) dx`.
    fn integral(&self, lo: f64, hi: f64) -> f64 {
        let anti = |x: f64| {
            let u = (x - self.center) / self.scale;
            self.coef
                .iter()
                .enumerate()
                .map(|(k, c)| c * u.powi(k as i32 + 1) / (k + 1) as f64)
                .sum::<f64>()
        };
        self.scale * (anti(hi) - anti(lo))
    }
}

fn overlap(a: &[f64], b: &[f64]) -> Res<(f64, f64)> {
    let min = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);
    let max = |v: &[f64]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = min(a).max(min(b));
    let hi = max(a).min(max(b));
    if hi <= lo {
        return Err(EvalError::NoOverlap);
    }
    Ok((lo, hi))
}

/// Average rate difference of `test` against `reference` in percent at equal
/// quality; negative means `test` needs fewer bits.
pub fn bd_br(reference: &RdCurve, test: &RdCurve) -> Res<f64> {
    let (pr, pt) = (reference.psnrs(), test.psnrs());
    let (lo, hi) = overlap(&pr, &pt)?;
    let fr = Cubic::fit(&pr, &reference.log_rates());
    let ft = Cubic::fit(&pt, &test.log_rates());
    let avg = (ft.integral(lo, hi) - fr.integral(lo, hi)) / (hi - lo);
    Ok((10f64.powf(avg) - 1.0) * 100.0)
}

/// Average PSNR difference of `test` against `reference` in dB at equal rate.
pub fn bd_psnr(reference: &RdCurve, test: &RdCurve) -> Res<f64> {
    let (rr, rt) = (reference.log_rates(), test.log_rates());
    let (lo, hi) = overlap(&rr, &rt)?;
    let fr = Cubic::fit(&rr, &reference.psnrs());
    let ft = Cubic::fit(&rt, &test.psnrs());
    Ok((ft.integral(lo, hi) - fr.integral(lo, hi)) / (hi - lo))
}

/// One CSV row: `codec,lambda,sequence,bpp,psnr_y`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdRow {
    pub codec: String,
    pub lambda: f64,
    pub sequence: String,
    pub bpp: f64,
    pub psnr_y: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BdEntry {
    pub codec: String,
    pub sequence: String,
    pub bd_br: Option<f64>,
    pub bd_psnr: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdReport {
    pub reference: String,
    pub rows: Vec<RdRow>,
    pub bd: Vec<BdEntry>,
}

pub fn rows_to_csv(rows: &[RdRow]) -> Res<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(["codec", "lambda", "sequence", "bpp", "psnr_y"])?;
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| EvalError::Csv(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn rows_from_csv(text: &str) -> Res<Vec<RdRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    Ok(r.deserialize().collect::<Result<Vec<RdRow>, _>>()?)
}

/// CSV of all rows and a JSON report with BD tables of every other codec
/// against `reference`, per sequence.
pub fn emit_rd_report(rows: &[RdRow], reference: &str) -> Res<(String, String)> {
    let csv = rows_to_csv(rows)?;
    let mut curves: BTreeMap<(String, String), Vec<RdPoint>> = BTreeMap::new();
    for r in rows {
        curves
            .entry((r.codec.clone(), r.sequence.clone()))
            .or_default()
            .push(RdPoint {
                bpp: r.bpp,
                psnr_y: r.psnr_y,
            });
    }
    let mut bd = Vec::new();
    for ((codec, sequence), points) in &curves {
        if codec == reference {
            continue;
        }
        let Some(ref_points) = curves.get(&(reference.to_string(), sequence.clone())) else {
            continue;
        };
        let result = RdCurve::new(ref_points.clone()).and_then(|rc| {
            let tc = RdCurve::new(points.clone())?;
            Ok((bd_br(&rc, &tc)?, bd_psnr(&rc, &tc)?))
        });
        bd.push(match result {
            Ok((br, ps)) => BdEntry {
                codec: codec.clone(),
                sequence: sequence.clone(),
                bd_br: Some(br),
                bd_psnr: Some(ps),
                error: None,
            },
            Err(e) => BdEntry {
                codec: codec.clone(),
                sequence: sequence.clone(),
                bd_br: None,
                bd_psnr: None,
                error: Some(e.to_string()),
            },
        });
    }
    let report = RdReport {
        reference: reference.to_string(),
        rows: rows.to_vec(),
        bd,
    };
    Ok((csv, serde_json::to_string_pretty(&report)?))
}
