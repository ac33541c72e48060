//! BT.709 full-range RGB <-> YUV.
//!
//! YUV values are normalized: Y in [0,1], U and V offset by 0.5 into [0,1].

const KR: f64 = 0.2126;
const KB: f64 = 0.0722;
const KG: f64 = 1.0 - KR - KB;
const CB_SCALE: f64 = 2.0 * (1.0 - KB);
const CR_SCALE: f64 = 2.0 * (1.0 - KR);

/// Identifier recorded in weight manifests.
pub const COLOR_MATRIX_ID: &str = "bt709-full";

pub fn rgb_to_yuv(rgb: [f64; 3]) -> [f64; 3] {
    let [r, g, b] = rgb.map(|c| c.clamp(0.0, 255.0) / 255.0);
    let y = KR * r + KG * g + KB * b;
    let u = (b - y) / CB_SCALE + 0.5;
    let v = (r - y) / CR_SCALE + 0.5;
    [y, u, v].map(|c| c.clamp(0.0, 1.0))
}

pub fn yuv_to_rgb(yuv: [f64; 3]) -> [f64; 3] {
    let [y, u, v] = yuv;
    let r = y + CR_SCALE * (v - 0.5);
    let b = y + CB_SCALE * (u - 0.5);
    let g = (y - KR * r - KB * b) / KG;
    [r, g, b].map(|c| (c * 255.0).clamp(0.0, 255.0))
}

/// `yuv_to_rgb` rounded to 8-bit components.
pub fn yuv_to_rgb8(yuv: [f64; 3]) -> [u8; 3] {
    yuv_to_rgb(yuv).map(|c| c.round() as u8)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn black_and_white() {
        assert_eq!(rgb_to_yuv([0.0; 3]), [0.0, 0.5, 0.5]);
        let w = rgb_to_yuv([255.0; 3]);
        assert!((w[0] - 1.0).abs() < 1e-12);
        assert!((w[1] - 0.5).abs() < 1e-12 && (w[2] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn round_trip_on_coarse_grid() {
        let levels: Vec<u32> = (0..=255).step_by(8).chain([255]).collect();
        for &r in &levels {
            for &g in &levels {
                for &b in &levels {
                    let rgb = [r as f64, g as f64, b as f64];
                    let back = yuv_to_rgb(rgb_to_yuv(rgb));
                    for k in 0..3 {
                        // within 1/255 in normalized units, i.e. one code value
                        assert!((back[k] - rgb[k]).abs() <= 1.0, "{rgb:?} -> {back:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn yuv_stays_in_unit_range() {
        for rgb in [[255.0, 0.0, 0.0], [0.0, 255.0, 0.0], [0.0, 0.0, 255.0], [255.0, 255.0, 0.0]] {
            assert!(rgb_to_yuv(rgb).iter().all(|c| (0.0..=1.0).contains(c)));
        }
    }
}
