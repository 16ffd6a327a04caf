//! Structure maps: the prior the SPE consumes and is supervised on.

use super::StructurePrior;
use crate::tensor::{Result, Scalar, Tensor, TensorError};

/// Derive a structure map from a `(B, H, W, 3)` image in `[0, 1]`.
/// The default is the gradient magnitude: per channel, |forward
/// difference along x| + |forward difference along y|, zero on the last
/// column/row. Values land in `[0, 2]`. Plain data computation; inputs
/// are never differentiated through.
pub fn extract_structure<F: Scalar>(img: &Tensor<F>, prior: StructurePrior) -> Result<Tensor<F>> {
    if img.rank() != 4 {
        return Err(TensorError::InvalidArgument {
            op: "extract_structure",
            msg: format!("expected (B, H, W, C), got {:?}", img.shape()),
        });
    }
    let s = img.shape();
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let src = img.data();
    match prior {
        StructurePrior::Gradient => {
            let mut out = vec![F::zero(); src.len()];
            let at = |bi: usize, r: usize, col: usize, ch: usize| -> F {
                src[((bi * h + r) * w + col) * c + ch]
            };
            for bi in 0..b {
                for r in 0..h {
                    for col in 0..w {
                        for ch in 0..c {
                            let here = at(bi, r, col, ch);
                            let dx = if col + 1 < w {
                                (at(bi, r, col + 1, ch) - here).abs()
                            } else {
                                F::zero()
                            };
                            let dy = if r + 1 < h {
                                (at(bi, r + 1, col, ch) - here).abs()
                            } else {
                                F::zero()
                            };
                            out[((bi * h + r) * w + col) * c + ch] = dx + dy;
                        }
                    }
                }
            }
            Tensor::from_vec(s, out)
        }
        StructurePrior::Highpass => {
            // |img - 3x3 box blur| with clamped borders.
            let mut out = vec![F::zero(); src.len()];
            let ninth = F::from_f64(1.0 / 9.0);
            for bi in 0..b {
                for r in 0..h {
                    for col in 0..w {
                        for ch in 0..c {
                            let mut acc = F::zero();
                            for dr in -1i64..=1 {
                                for dc in -1i64..=1 {
                                    let rr = (r as i64 + dr).clamp(0, h as i64 - 1) as usize;
                                    let cc = (col as i64 + dc).clamp(0, w as i64 - 1) as usize;
                                    acc = acc + src[((bi * h + rr) * w + cc) * c + ch];
                                }
                            }
                            let here = src[((bi * h + r) * w + col) * c + ch];
                            out[((bi * h + r) * w + col) * c + ch] = (here - acc * ninth).abs();
                        }
                    }
                }
            }
            Tensor::from_vec(s, out)
        }
        StructurePrior::Image => Tensor::from_vec(s, src.to_vec()),
        StructurePrior::Off => Err(TensorError::InvalidArgument {
            op: "extract_structure",
            msg: "no structure prior configured".into(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_has_zero_structure() {
        let img = Tensor::<f32>::full(&[1, 4, 4, 3], 0.7).unwrap();
        let s = extract_structure(&img, StructurePrior::Gradient).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn vertical_step_lands_one_column_early() {
        // 0 for columns < 2, 1 for columns >= 2: response exactly at
        // column 1, zero elsewhere.
        let mut data = vec![0.0f32; 4 * 4];
        for r in 0..4 {
            for c in 2..4 {
                data[r * 4 + c] = 1.0;
            }
        }
        let img = Tensor::from_vec(&[1, 4, 4, 1], data).unwrap();
        let s = extract_structure(&img, StructurePrior::Gradient).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                let expect = if c == 1 { 1.0 } else { 0.0 };
                assert_eq!(s.data()[r * 4 + c], expect, "({r},{c})");
            }
        }
    }

    #[test]
    fn unit_range_image_stays_under_two() {
        let data: Vec<f32> = (0..48).map(|v| ((v * 31) % 7) as f32 / 6.0).collect();
        let img = Tensor::from_vec(&[1, 4, 4, 3], data).unwrap();
        let s = extract_structure(&img, StructurePrior::Gradient).unwrap();
        assert!(s.data().iter().all(|&v| (0.0..=2.0).contains(&v)));
    }

    #[test]
    fn image_prior_is_the_image() {
        let img = Tensor::<f32>::full(&[1, 2, 2, 3], 0.3).unwrap();
        let s = extract_structure(&img, StructurePrior::Image).unwrap();
        assert_eq!(s.data(), img.data());
    }

    #[test]
    fn highpass_flat_image_is_zero() {
        let img = Tensor::<f32>::full(&[1, 5, 5, 1], 0.4).unwrap();
        let s = extract_structure(&img, StructurePrior::Highpass).unwrap();
        assert!(s.data().iter().all(|&v| v.abs() < 1e-7));
    }
}
