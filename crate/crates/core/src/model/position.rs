//! Fixed 2D sine positional encoding over a feature-map grid.
//!
//! The first `d/2` channels encode the row, the last `d/2` the column. Within
//! each half, channel `i` uses frequency `T^(2⌊i/2⌋/(d/2))`, sine for even `i`
//! and cosine for odd `i`. Coordinates are normalized to `(0, 2π]`.

use std::f64::consts::TAU;

use candle_core::{DType, Device, Tensor};

use crate::error::{MgtrError, Result};

pub const TEMPERATURE: f64 = 10000.0;

/// Encoding as a row-major `[H·W, d]` table (token-major, i.e. the transpose
/// of the `[d, H·W]` channel layout).
pub fn positional_encoding(h: usize, w: usize, d: usize) -> Result<Vec<f64>> {
    if d == 0 || d % 2 != 0 {
        return Err(MgtrError::Config(format!("positional encoding needs an even width, got {d}")));
    }
    let half = d / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| TEMPERATURE.powf(2.0 * (i / 2) as f64 / half as f64))
        .collect();
    let mut out = Vec::with_capacity(h * w * d);
    for r in 0..h {
        let y = (r + 1) as f64 / (h as f64 + 1e-6) * TAU;
        for c in 0..w {
            let x = (c + 1) as f64 / (w as f64 + 1e-6) * TAU;
            for coord in [y, x] {
                for (i, f) in freqs.iter().enumerate() {
                    let v = coord / f;
                    out.push(if i % 2 == 0 { v.sin() } else { v.cos() });
                }
            }
        }
    }
    Ok(out)
}

pub fn positional_tensor(h: usize, w: usize, d: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let data = positional_encoding(h, w, d)?;
    Ok(Tensor::from_vec(data, (h * w, d), device)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bounded_and_deterministic() {
        let a = positional_encoding(5, 7, 32).unwrap();
        let b = positional_encoding(5, 7, 32).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 5 * 7 * 32);
        assert!(a.iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn neighbouring_columns_differ_only_in_x_channels() {
        let (h, w, d) = (4, 6, 16);
        let pe = positional_encoding(h, w, d).unwrap();
        let at = |r: usize, c: usize| &pe[(r * w + c) * d..(r * w + c + 1) * d];
        let (p00, p01) = (at(0, 0), at(0, 1));
        assert_eq!(p00[..d / 2], p01[..d / 2]);
        for i in d / 2..d {
            // cos channels of the lowest frequencies still move, sines too
            if i < d / 2 + 2 {
                assert_ne!(p00[i], p01[i]);
            }
        }
        assert!(p00[d / 2..].iter().zip(&p01[d / 2..]).any(|(a, b)| a != b));
        let p10 = at(1, 0);
        assert_eq!(p00[d / 2..], p10[d / 2..]);
    }

    #[test]
    fn odd_width_rejected() {
        assert!(positional_encoding(2, 2, 7).is_err());
    }
}
