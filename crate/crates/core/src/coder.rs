//! Range coding of integer latents under discretized Gaussian models, and the
//! bitstream container.
//!
//! Each symbol `k` is coded as the residual `r = k - round(mu)`. Residuals in
//! `[-S, S]` get their own frequency; anything else takes an escape symbol
//! followed by the raw 32-bit value. The frequency table of one symbol is
//!
//! ```text
//! C(j) = j + floor(M * G(j)),  j = 0..=511,   C(512) = 2^16,   M = 2^16 - 512
//! ```
//!
//! where `G(j)` is the Gaussian mass of residuals below `j - S`, so every
//! symbol including the escape gets at least one unit.

use thiserror::Error;

use crate::mathfn;

/// Residual support half-width.
pub const SUPPORT: i32 = 255;
pub const PRECISION_BITS: u32 = 16;
pub const SIGMA_MIN: f64 = 0.04;
/// Upper clamp applied to scales before building tables.
pub const SIGMA_MAX: f64 = 1.0e4;
/// Means are clamped to this magnitude so residuals stay in range.
pub const MU_LIMIT: f64 = (1 << 24) as f64;
/// Escape symbol (<= 16 bits) plus the raw value.
pub const ESCAPE_BITS: f64 = 48.0;

const TOTAL: u32 = 1 << PRECISION_BITS;
const ALPHABET: u32 = 2 * SUPPORT as u32 + 2;
const ESCAPE: u32 = ALPHABET - 1;
const SPREAD: f64 = (TOTAL - ALPHABET) as f64;
const TOP: u32 = 1 << 24;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CoderError {
    #[error("{symbols} symbols but {models} models")]
    Count { symbols: usize, models: usize },
    #[error("bitstream magic mismatch")]
    BadMagic,
    #[error("unsupported bitstream version {0}")]
    UnsupportedVersion(u8),
    #[error("bitstream is truncated")]
    Truncated,
    #[error("bitstream length fields do not match the payload ({0} trailing bytes)")]
    TrailingBytes(usize),
    #[error("a bitstream needs between 1 and 255 slices, got {0}")]
    SliceCount(usize),
}

/// Probability that `N(mu, sigma^2)` rounds to `k`.
pub fn discretize(mu: f64, sigma: f64, k: i64) -> f64 {
    mathfn::discretized_gaussian(k as f64, mu, sigma)
}

/// Per-symbol Gaussian parameters as 32-bit reals.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiscretizedGaussianModel {
    pub mu: f32,
    pub sigma: f32,
}

impl DiscretizedGaussianModel {
    pub fn new(mu: f32, sigma: f32) -> Self {
        Self { mu, sigma }
    }

    /// Finite mean within `MU_LIMIT`, scale within `[SIGMA_MIN, SIGMA_MAX]`.
    fn sanitized(&self) -> (f64, f64) {
        let mu = if self.mu.is_finite() {
            (self.mu as f64).clamp(-MU_LIMIT, MU_LIMIT)
        } else {
            0.0
        };
        let sigma = if self.sigma.is_finite() {
            (self.sigma as f64).clamp(SIGMA_MIN, SIGMA_MAX)
        } else {
            SIGMA_MIN
        };
        (mu, sigma)
    }

    /// Estimated cost of `k` in bits, capped at [`ESCAPE_BITS`].
    pub fn bits(&self, k: i32) -> f64 {
        let (mu, sigma) = self.sanitized();
        let p = discretize(mu, sigma, k as i64);
        if p > 0.0 {
            (-p.log2()).min(ESCAPE_BITS)
        } else {
            ESCAPE_BITS
        }
    }
}

pub fn models_from(mu: &[f32], sigma: &[f32]) -> Vec<DiscretizedGaussianModel> {
    mu.iter().zip(sigma).map(|(&m, &s)| DiscretizedGaussianModel::new(m, s)).collect()
}

/// Sum of capped `-log2 p` over all symbols.
pub fn estimate_rate(symbols: &[i32], models: &[DiscretizedGaussianModel]) -> Result<f64, CoderError> {
    check_counts(symbols.len(), models.len())?;
    Ok(symbols.iter().zip(models).map(|(&k, m)| m.bits(k)).sum())
}

fn check_counts(symbols: usize, models: usize) -> Result<(), CoderError> {
    if symbols != models {
        return Err(CoderError::Count { symbols, models });
    }
    Ok(())
}

/// Quantized CDF of one symbol; the Gaussian is truncated to a window of
/// residuals `lo..=hi` around the mean.
struct Table {
    center: i64,
    delta: f64,
    sigma: f64,
    lo: i32,
    hi: i32,
    /// tail at the window's lower boundary
    lower: (f64, bool),
}

/// Normal tail on the near side: `Phi(b)` for `b <= 0`, else `1 - Phi(b)`.
fn tail(b: f64) -> (f64, bool) {
    if b <= 0.0 {
        (mathfn::normal_cdf(b), false)
    } else {
        (mathfn::normal_cdf(-b), true)
    }
}

/// Mass between two boundaries `a <= b` given their tails; exact in both tails.
fn mass_between(a: (f64, bool), b: (f64, bool)) -> f64 {
    let m = match (a.1, b.1) {
        (false, false) => b.0 - a.0,
        (true, true) => a.0 - b.0,
        (false, true) => 1.0 - a.0 - b.0,
        (true, false) => 0.0,
    };
    m.max(0.0)
}

impl Table {
    fn new() -> Self {
        Self {
            center: 0,
            delta: 0.0,
            sigma: 1.0,
            lo: 0,
            hi: 0,
            lower: (0.0, false),
        }
    }

    fn build(&mut self, model: &DiscretizedGaussianModel) {
        let (mu, sigma) = model.sanitized();
        let center = mu.round();
        let delta = mu - center;
        // beyond 12 sigma the mass is far below one frequency unit
        let reach = (12.0 * sigma).ceil() + 1.0;
        self.lo = ((delta - reach).floor() as i64).max(-(SUPPORT as i64)) as i32;
        self.hi = ((delta + reach).ceil() as i64).min(SUPPORT as i64) as i32;
        self.center = center as i64;
        self.delta = delta;
        self.sigma = sigma;
        self.lower = self.boundary(self.lo);
    }

    /// Tail at the lower boundary of residual `r`.
    fn boundary(&self, r: i32) -> (f64, bool) {
        tail((r as f64 - 0.5 - self.delta) / self.sigma)
    }

    /// Cumulative frequency below alphabet index `j` (`0..=ALPHABET`).
    fn cum(&self, j: u32) -> u32 {
        if j >= ALPHABET {
            return TOTAL;
        }
        let r = (j as i64 - SUPPORT as i64) as i32;
        let mass = if r <= self.lo {
            0.0
        } else {
            mass_between(self.lower, self.boundary(r.min(self.hi + 1)))
        };
        j + (SPREAD * mass.min(1.0)).floor() as u32
    }

    /// Alphabet index of `k`, or `ESCAPE`.
    fn index_of(&self, k: i32) -> u32 {
        let r = k as i64 - self.center;
        if r.abs() <= SUPPORT as i64 {
            (r + SUPPORT as i64) as u32
        } else {
            ESCAPE
        }
    }

    /// Largest `j` with `cum(j) <= v`.
    fn find(&self, v: u32) -> u32 {
        let (mut lo, mut hi) = (0u32, ALPHABET);
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if self.cum(mid) <= v {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }
}

fn zigzag(k: i32) -> u32 {
    ((k << 1) ^ (k >> 31)) as u32
}

fn unzigzag(u: u32) -> i32 {
    ((u >> 1) as i32) ^ -((u & 1) as i32)
}

/// 32-bit range encoder with carry propagation through a cached byte.
pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    started: bool,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self {
            low: 0,
            range: u32::MAX,
            cache: 0,
            cache_size: 1,
            started: false,
            out: Vec::new(),
        }
    }

    /// Narrow to `[cum, cum + freq)` out of `2^16`.
    pub fn encode(&mut self, cum: u32, freq: u32) {
        debug_assert!(freq > 0 && cum + freq <= TOTAL);
        let r = self.range >> PRECISION_BITS;
        self.low += r as u64 * cum as u64;
        self.range = r * freq;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut temp = self.cache;
            loop {
                // the very first cached byte is always zero; leave it out
                if self.started {
                    self.out.push(temp.wrapping_add(carry));
                }
                self.started = true;
                temp = 0xFF;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = (self.low >> 24) as u8;
        }
        self.cache_size += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    /// Flush the shortest byte string that still decodes: `low` rounded up
    /// to a multiple of `2^24` stays inside the interval because
    /// `range >= 2^24`, and trailing zeros are implied by the decoder.
    pub fn finish(mut self) -> Vec<u8> {
        self.low = (self.low + 0x00FF_FFFF) & !0x00FF_FFFF;
        for _ in 0..5 {
            self.shift_low();
        }
        while self.out.last() == Some(&0) {
            self.out.pop();
        }
        self.out
    }
}

pub struct RangeDecoder<'a> {
    code: u32,
    range: u32,
    r: u32,
    input: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(input: &'a [u8]) -> Self {
        let mut d = Self {
            code: 0,
            range: u32::MAX,
            r: 0,
            input,
            pos: 0,
        };
        for _ in 0..4 {
            d.code = (d.code << 8) | d.next_byte() as u32;
        }
        d
    }

    // reading past the end yields zeros; corruption surfaces as wrong symbols
    fn next_byte(&mut self) -> u8 {
        let b = self.input.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    /// Scaled target value in `[0, 2^16)`.
    pub fn peek(&mut self) -> u32 {
        self.r = self.range >> PRECISION_BITS;
        (self.code / self.r.max(1)).min(TOTAL - 1)
    }

    /// Consume the symbol `[cum, cum + freq)` found from [`RangeDecoder::peek`].
    pub fn consume(&mut self, cum: u32, freq: u32) {
        self.code = self.code.wrapping_sub(self.r.wrapping_mul(cum));
        self.range = self.r.wrapping_mul(freq);
        while self.range < TOP {
            self.code = (self.code << 8) | self.next_byte() as u32;
            self.range <<= 8;
        }
    }
}

/// Encode `symbols[i]` under `models[i]`.
pub fn range_encode(symbols: &[i32], models: &[DiscretizedGaussianModel]) -> Result<Vec<u8>, CoderError> {
    check_counts(symbols.len(), models.len())?;
    let mut enc = RangeEncoder::new();
    let mut table = Table::new();
    for (&k, m) in symbols.iter().zip(models) {
        table.build(m);
        let j = table.index_of(k);
        let (c0, c1) = (table.cum(j), table.cum(j + 1));
        enc.encode(c0, c1 - c0);
        if j == ESCAPE {
            let u = zigzag(k);
            enc.encode(u >> 16, 1);
            enc.encode(u & 0xFFFF, 1);
        }
    }
    Ok(enc.finish())
}

/// Decode one symbol per model.
pub fn range_decode(bytes: &[u8], models: &[DiscretizedGaussianModel]) -> Vec<i32> {
    let mut dec = RangeDecoder::new(bytes);
    let mut table = Table::new();
    let mut out = Vec::with_capacity(models.len());
    for m in models {
        table.build(m);
        let v = dec.peek();
        let j = table.find(v);
        let (c0, c1) = (table.cum(j), table.cum(j + 1));
        dec.consume(c0, c1 - c0);
        if j == ESCAPE {
            let hi = dec.peek();
            dec.consume(hi, 1);
            let lo = dec.peek();
            dec.consume(lo, 1);
            out.push(unzigzag((hi << 16) | lo));
        } else {
            let r = j as i64 - SUPPORT as i64;
            out.push((table.center + r).clamp(i32::MIN as i64, i32::MAX as i64) as i32);
        }
    }
    out
}

pub const MAGIC: [u8; 4] = *b"TSCP";
pub const BITSTREAM_VERSION: u8 = 1;
const FLAG_CONTEXT: u8 = 1;

/// Per-cloud header fields.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamHeader {
    pub context_enabled: bool,
    pub config_digest: [u8; 8],
    pub point_count: u32,
    pub lambda: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bitstream {
    pub header: StreamHeader,
    pub z: Vec<u8>,
    pub slices: Vec<Vec<u8>>,
}

/// Size of the fixed header plus length table for `slices` slices.
pub fn header_len(slices: usize) -> usize {
    4 + 1 + 1 + 8 + 4 + 4 + 1 + 4 + 4 * slices
}

/// Little-endian layout:
///
/// ```text
/// magic "TSCP" | version u8 | flags u8 | config digest [8] | point_count u32
/// | lambda f32 | slice_count u8 | z_len u32 | slice_len u32 * slice_count
/// | z payload | slice payloads in order
/// ```
pub fn pack(bs: &Bitstream) -> Result<Vec<u8>, CoderError> {
    let c = bs.slices.len();
    if c == 0 || c > 255 {
        return Err(CoderError::SliceCount(c));
    }
    let body: usize = bs.z.len() + bs.slices.iter().map(Vec::len).sum::<usize>();
    let mut out = Vec::with_capacity(header_len(c) + body);
    out.extend_from_slice(&MAGIC);
    out.push(BITSTREAM_VERSION);
    out.push(if bs.header.context_enabled { FLAG_CONTEXT } else { 0 });
    out.extend_from_slice(&bs.header.config_digest);
    out.extend_from_slice(&bs.header.point_count.to_le_bytes());
    out.extend_from_slice(&bs.header.lambda.to_le_bytes());
    out.push(c as u8);
    out.extend_from_slice(&(bs.z.len() as u32).to_le_bytes());
    for s in &bs.slices {
        out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    }
    out.extend_from_slice(&bs.z);
    for s in &bs.slices {
        out.extend_from_slice(s);
    }
    Ok(out)
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CoderError> {
        let end = self.pos.checked_add(n).ok_or(CoderError::Truncated)?;
        let s = self.data.get(self.pos..end).ok_or(CoderError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CoderError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CoderError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn unpack(bytes: &[u8]) -> Result<Bitstream, CoderError> {
    let mut cur = Cursor { data: bytes, pos: 0 };
    if cur.take(4).map_err(|_| CoderError::BadMagic)? != MAGIC {
        return Err(CoderError::BadMagic);
    }
    let version = cur.u8()?;
    if version != BITSTREAM_VERSION {
        return Err(CoderError::UnsupportedVersion(version));
    }
    let flags = cur.u8()?;
    let config_digest: [u8; 8] = cur.take(8)?.try_into().expect("8 bytes");
    let point_count = cur.u32()?;
    let lambda = f32::from_le_bytes(cur.take(4)?.try_into().expect("4 bytes"));
    let c = cur.u8()? as usize;
    if c == 0 {
        return Err(CoderError::SliceCount(0));
    }
    let z_len = cur.u32()? as usize;
    let lens = (0..c).map(|_| cur.u32().map(|v| v as usize)).collect::<Result<Vec<_>, _>>()?;
    let z = cur.take(z_len)?.to_vec();
    let slices = lens
        .iter()
        .map(|&n| cur.take(n).map(<[u8]>::to_vec))
        .collect::<Result<Vec<_>, _>>()?;
    if cur.pos != bytes.len() {
        return Err(CoderError::TrailingBytes(bytes.len() - cur.pos));
    }
    Ok(Bitstream {
        header: StreamHeader {
            context_enabled: flags & FLAG_CONTEXT != 0,
            config_digest,
            point_count,
            lambda,
        },
        z,
        slices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zigzag_round_trip() {
        for k in [0, 1, -1, 255, -256, i32::MAX, i32::MIN] {
            assert_eq!(unzigzag(zigzag(k)), k);
        }
    }

    #[test]
    fn table_is_strictly_increasing() {
        let mut t = Table::new();
        for (mu, sigma) in [(0.0, 0.04), (0.49, 0.04), (-3.3, 1.0), (7.5, 40.0), (0.0, 1e4)] {
            t.build(&DiscretizedGaussianModel::new(mu, sigma));
            let mut prev = t.cum(0);
            assert_eq!(prev, 0);
            for j in 1..=ALPHABET {
                let c = t.cum(j);
                assert!(c > prev, "mu {mu} sigma {sigma} j {j}");
                prev = c;
            }
            assert_eq!(prev, TOTAL);
        }
    }

    #[test]
    fn empty_stream_is_flush_only() {
        let bytes = range_encode(&[], &[]).unwrap();
        assert!(bytes.is_empty());
        assert!(range_decode(&bytes, &[]).is_empty());
    }

    #[test]
    fn escapes_round_trip() {
        let m = DiscretizedGaussianModel::new(0.0, 1.0);
        let syms = vec![0, 300, -1000, i32::MAX, i32::MIN, 255, -255, 256, 2];
        let models = vec![m; syms.len()];
        let bytes = range_encode(&syms, &models).unwrap();
        assert_eq!(range_decode(&bytes, &models), syms);
    }

    #[test]
    fn collapsed_gaussian_is_nearly_free() {
        let m = DiscretizedGaussianModel::new(0.0, 0.04);
        assert!(m.bits(0) < 1e-9);
        assert_eq!(m.bits(1000), ESCAPE_BITS);
    }

    #[test]
    fn header_rejections() {
        let bs = Bitstream {
            header: StreamHeader {
                context_enabled: true,
                config_digest: [1; 8],
                point_count: 10,
                lambda: 400.0,
            },
            z: vec![1, 2],
            slices: vec![vec![3], vec![]],
        };
        let mut bytes = pack(&bs).unwrap();
        assert_eq!(bytes.len(), header_len(2) + 3);
        assert_eq!(unpack(&bytes).unwrap(), bs);
        bytes[4] = 2;
        assert_eq!(unpack(&bytes), Err(CoderError::UnsupportedVersion(2)));
        bytes[0] = b'X';
        assert_eq!(unpack(&bytes), Err(CoderError::BadMagic));
        assert_eq!(unpack(&[]), Err(CoderError::BadMagic));
        let empty = Bitstream { slices: vec![], ..bs };
        assert_eq!(pack(&empty), Err(CoderError::SliceCount(0)));
    }
}
