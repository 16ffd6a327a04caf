//! Spatial token plumbing: patch embedding and its inverse, patch
//! merging/combining between stages, window partition/reverse, cyclic
//! shifts and the shifted-window attention mask.
//!
//! Token grids are `(B, H', W', C)` tensors. A 2x2 patch embed on a
//! 128x128 crop yields stage grids 64/32/16/8, each divisible by the
//! largest window (8). Smaller inputs are legal; attention layers
//! shrink their windows to fit (see [`effective_window`]).

use rand::Rng;

use crate::nn::{LayerNorm, Linear, ParameterStore};
use crate::tensor::{Result, Scalar, Tensor, TensorError};

pub const MASKED: f64 = -1e9;

/// Feature map plus its downsample factor relative to the input image.
#[derive(Debug)]
pub struct TokenGrid<F: Scalar> {
    pub tensor: Tensor<F>,
    pub stage_scale: usize,
}

impl<F: Scalar> TokenGrid<F> {
    pub fn new(tensor: Tensor<F>, stage_scale: usize) -> Self {
        debug_assert_eq!(tensor.rank(), 4, "token grids are (B, H, W, C)");
        TokenGrid { tensor, stage_scale }
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.tensor.shape();
        (s[0], s[1], s[2], s[3])
    }
}

/// Windows of one grid: `(B * nW, k*k, C)` plus enough metadata to
/// reverse the partition exactly.
pub struct WindowSet<F: Scalar> {
    pub tensor: Tensor<F>,
    pub window_size: usize,
    pub grid_dims: (usize, usize),
}

/// Additive attention bias per window: 0 within a pre-shift region,
/// -1e9 across regions. Shape `(nW, k*k, k*k)`, no gradient.
pub struct ShiftMask<F: Scalar> {
    pub tensor: Tensor<F>,
}

/// Largest window size `<= k` that tiles an `h x w` grid, with the
/// shift to use for the shifted branch (0 when one window covers the
/// whole grid, where shifting would be a no-op).
pub fn effective_window(k: usize, h: usize, w: usize) -> (usize, usize) {
    let mut k_eff = k.min(h).min(w);
    while k_eff > 1 && (h % k_eff != 0 || w % k_eff != 0) {
        k_eff -= 1;
    }
    let shift = if k_eff < h.min(w) { k_eff / 2 } else { 0 };
    (k_eff, shift)
}

pub fn window_partition<F: Scalar>(grid: &TokenGrid<F>, k: usize) -> Result<WindowSet<F>> {
    let (_, h, w, _) = grid.dims();
    Ok(WindowSet {
        tensor: grid.tensor.window_partition(k)?,
        window_size: k,
        grid_dims: (h, w),
    })
}

pub fn window_reverse<F: Scalar>(ws: &WindowSet<F>, stage_scale: usize) -> Result<TokenGrid<F>> {
    let (h, w) = ws.grid_dims;
    Ok(TokenGrid::new(
        ws.tensor.window_reverse(ws.window_size, h, w)?,
        stage_scale,
    ))
}

pub fn cyclic_shift<F: Scalar>(grid: &TokenGrid<F>, sy: i64, sx: i64) -> Result<TokenGrid<F>> {
    Ok(TokenGrid::new(
        grid.tensor.cyclic_shift2d(sy, sx)?,
        grid.stage_scale,
    ))
}

/// Region-id mask for shifted windows: tokens are labeled by which of
/// the up-to-nine pre-shift slabs they came from, the label grid is
/// partitioned like the features, and pairs with differing labels are
/// blocked.
pub fn build_shift_mask<F: Scalar>(
    h: usize,
    w: usize,
    k: usize,
    shift: usize,
) -> Result<ShiftMask<F>> {
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(TensorError::InvalidArgument {
            op: "build_shift_mask",
            msg: format!("grid {h}x{w} not divisible by window size {k}"),
        });
    }
    let (nh, nw) = (h / k, w / k);
    let n = k * k;
    let nwin = nh * nw;
    let mut mask = vec![F::zero(); nwin * n * n];
    if shift > 0 {
        let mut ids = vec![0i32; h * w];
        let bounds = |dim: usize| [0, dim - k, dim - shift, dim];
        let hb = bounds(h);
        let wb = bounds(w);
        let mut region = 0i32;
        for hs in 0..3 {
            for ws in 0..3 {
                for r in hb[hs]..hb[hs + 1] {
                    for c in wb[ws]..wb[ws + 1] {
                        ids[r * w + c] = region;
                    }
                }
                region += 1;
            }
        }
        let neg = F::from_f64(MASKED);
        for wr in 0..nh {
            for wc in 0..nw {
                let win = wr * nw + wc;
                for i in 0..n {
                    let (ri, ci) = (wr * k + i / k, wc * k + i % k);
                    for j in 0..n {
                        let (rj, cj) = (wr * k + j / k, wc * k + j % k);
                        if ids[ri * w + ci] != ids[rj * w + cj] {
                            mask[(win * n + i) * n + j] = neg;
                        }
                    }
                }
            }
        }
    }
    Ok(ShiftMask {
        tensor: Tensor::from_vec(&[nwin, n, n], mask)?,
    })
}

/// Learned 2x2 patch projection: `(B, H, W, Cin) -> (B, H/2, W/2, C)`.
pub struct PatchEmbed<F: Scalar> {
    proj: Linear<F>,
    in_channels: usize,
}

impl<F: Scalar> PatchEmbed<F> {
    pub fn new(in_channels: usize, dim: usize, rng: &mut impl Rng) -> Self {
        PatchEmbed {
            proj: Linear::new(4 * in_channels, dim, rng),
            in_channels,
        }
    }

    pub fn forward(&self, img: &Tensor<F>) -> Result<TokenGrid<F>> {
        if img.rank() != 4 || img.shape()[3] != self.in_channels {
            return Err(TensorError::ShapeMismatch {
                op: "patch_embed",
                lhs: img.shape().to_vec(),
                rhs: vec![self.in_channels],
            });
        }
        let (h, w) = (img.shape()[1], img.shape()[2]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::InvalidArgument {
                op: "patch_embed",
                msg: format!(
                    "image dims {h}x{w} not divisible by the 2x2 patch; pad the input first"
                ),
            });
        }
        let packed = img.space_to_depth2()?;
        Ok(TokenGrid::new(self.proj.forward(&packed)?, 2))
    }

    pub fn register(&self, prefix: &str, store: &mut ParameterStore<F>) {
        self.proj.register(&format!("{prefix}.proj"), store);
    }
}

/// Inverse projection back to pixel space:
/// `(B, H', W', C) -> (B, 2H', 2W', Cout)`.
pub struct PatchUnembed<F: Scalar> {
    proj: Linear<F>,
    out_channels: usize,
}

impl<F: Scalar> PatchUnembed<F> {
    pub fn new(dim: usize, out_channels: usize, rng: &mut impl Rng) -> Self {
        PatchUnembed {
            proj: Linear::new(dim, 4 * out_channels, rng),
            out_channels,
        }
    }

    pub fn forward(&self, grid: &TokenGrid<F>) -> Result<Tensor<F>> {
        if grid.stage_scale != 2 {
            return Err(TensorError::InvalidArgument {
                op: "patch_unembed",
                msg: format!(
                    "expected a stage-scale-2 grid, got scale {}",
                    grid.stage_scale
                ),
            });
        }
        let _ = self.out_channels;
        self.proj.forward(&grid.tensor)?.depth_to_space2()
    }

    pub fn register(&self, prefix: &str, store: &mut ParameterStore<F>) {
        self.proj.register(&format!("{prefix}.proj"), store);
    }
}

/// 2x2 token fold (concat order TL, BL, TR, BR), LayerNorm, then a
/// 4C -> 2C reduction. Doubles the stage scale.
pub struct PatchMerge<F: Scalar> {
    norm: LayerNorm<F>,
    reduce: Linear<F>,
}

impl<F: Scalar> PatchMerge<F> {
    pub fn new(dim: usize, rng: &mut impl Rng) -> Self {
        PatchMerge {
            norm: LayerNorm::new(4 * dim),
            reduce: Linear::new(4 * dim, 2 * dim, rng),
        }
    }

    pub fn forward(&self, grid: &TokenGrid<F>) -> Result<TokenGrid<F>> {
        let (_, h, w, _) = grid.dims();
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::InvalidArgument {
                op: "patch_merge",
                msg: format!("grid dims {h}x{w} must be even"),
            });
        }
        let folded = grid.tensor.space_to_depth2()?;
        let out = self.reduce.forward(&self.norm.forward(&folded)?)?;
        Ok(TokenGrid::new(out, grid.stage_scale * 2))
    }

    pub fn register(&self, prefix: &str, store: &mut ParameterStore<F>) {
        self.norm.register(&format!("{prefix}.norm"), store);
        self.reduce.register(&format!("{prefix}.reduce"), store);
    }
}

/// Exact shape inverse of [`PatchMerge`]: expand 2C -> 4C, then unfold
/// channels into the 2x2 spatial neighborhood, halving the stage scale.
pub struct PatchCombine<F: Scalar> {
    expand: Linear<F>,
}

impl<F: Scalar> PatchCombine<F> {
    pub fn new(in_dim: usize, rng: &mut impl Rng) -> Self {
        PatchCombine {
            expand: Linear::new(in_dim, 2 * in_dim, rng),
        }
    }

    pub fn forward(&self, grid: &TokenGrid<F>) -> Result<TokenGrid<F>> {
        let expanded = self.expand.forward(&grid.tensor)?;
        Ok(TokenGrid::new(
            expanded.depth_to_space2()?,
            grid.stage_scale / 2,
        ))
    }

    pub fn register(&self, prefix: &str, store: &mut ParameterStore<F>) {
        self.expand.register(&format!("{prefix}.expand"), store);
    }
}

/// Reflect-pad the bottom/right spatial edges of `(B, H, W, C)` up to a
/// multiple of `mult`. Mirrors without repeating the edge row/column,
/// which needs `H, W >= mult` to stay in bounds. Plain data helper for
/// inference; nothing is recorded.
pub fn reflect_pad_to_multiple<F: Scalar>(img: &Tensor<F>, mult: usize) -> Result<Tensor<F>> {
    let s = img.shape();
    if img.rank() != 4 {
        return Err(TensorError::InvalidArgument {
            op: "reflect_pad",
            msg: format!("expected (B, H, W, C), got {s:?}"),
        });
    }
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let oh = h.div_ceil(mult) * mult;
    let ow = w.div_ceil(mult) * mult;
    if oh == h && ow == w {
        return Ok(img.detach());
    }
    if oh - h >= h || ow - w >= w {
        return Err(TensorError::InvalidArgument {
            op: "reflect_pad",
            msg: format!("image {h}x{w} too small to pad to a multiple of {mult}"),
        });
    }
    let src = img.data();
    let mut out = vec![F::zero(); b * oh * ow * c];
    for bi in 0..b {
        for r in 0..oh {
            let sr = if r < h { r } else { 2 * h - 2 - r };
            for col in 0..ow {
                let sc = if col < w { col } else { 2 * w - 2 - col };
                let d = ((bi * oh + r) * ow + col) * c;
                let ssrc = ((bi * h + sr) * w + sc) * c;
                out[d..d + c].copy_from_slice(&src[ssrc..ssrc + c]);
            }
        }
    }
    Tensor::from_vec(&[b, oh, ow, c], out)
}

/// Crop the top-left `h x w` region back out of a padded `(B, H, W, C)`.
pub fn crop<F: Scalar>(img: &Tensor<F>, h: usize, w: usize) -> Result<Tensor<F>> {
    img.narrow(1, 0, h)?.narrow(2, 0, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_check_params, no_grad};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(42)
    }

    fn random_img(shape: &[usize], seed: u64) -> Tensor<f32> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| r.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn patch_embed_shape_contract() {
        let mut r = rng();
        let embed = PatchEmbed::<f32>::new(3, 32, &mut r);
        let img = random_img(&[1, 128, 128, 3], 0);
        let grid = embed.forward(&img).unwrap();
        assert_eq!(grid.tensor.shape(), &[1, 64, 64, 32]);
        assert_eq!(grid.stage_scale, 2);

        let small = random_img(&[1, 16, 16, 3], 1);
        let embed8 = PatchEmbed::<f32>::new(3, 8, &mut r);
        assert_eq!(embed8.forward(&small).unwrap().tensor.shape(), &[1, 8, 8, 8]);
    }

    #[test]
    fn patch_embed_zero_image_zero_tokens() {
        let mut r = rng();
        let embed = PatchEmbed::<f32>::new(3, 16, &mut r);
        let img = Tensor::zeros(&[1, 8, 8, 3]).unwrap();
        let grid = embed.forward(&img).unwrap();
        assert!(grid.tensor.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn patch_embed_odd_dims_error_mentions_padding() {
        let mut r = rng();
        let embed = PatchEmbed::<f32>::new(3, 16, &mut r);
        let img = Tensor::zeros(&[1, 7, 8, 3]).unwrap();
        let err = embed.forward(&img).unwrap_err();
        assert!(err.to_string().contains("pad"), "{err}");
    }

    #[test]
    fn patch_unembed_inverts_embed_shape() {
        let mut r = rng();
        let unembed = PatchUnembed::<f32>::new(32, 3, &mut r);
        let grid = TokenGrid::new(random_img(&[1, 64, 64, 32], 2), 2);
        let img = unembed.forward(&grid).unwrap();
        assert_eq!(img.shape(), &[1, 128, 128, 3]);

        let zeros = TokenGrid::new(Tensor::zeros(&[1, 4, 4, 32]).unwrap(), 2);
        assert!(unembed
            .forward(&zeros)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn patch_unembed_rejects_wrong_scale() {
        let mut r = rng();
        let unembed = PatchUnembed::<f32>::new(32, 3, &mut r);
        let grid = TokenGrid::new(random_img(&[1, 8, 8, 32], 3), 4);
        assert!(unembed.forward(&grid).is_err());
    }

    #[test]
    fn merge_shape_recursion_64_to_8() {
        let mut r = rng();
        let mut grid = TokenGrid::new(random_img(&[1, 64, 64, 32], 4), 2);
        let mut dim = 32;
        for expected in [32usize, 16, 8] {
            let merge = PatchMerge::<f32>::new(dim, &mut r);
            grid = merge.forward(&grid).unwrap();
            dim *= 2;
            let (_, h, w, c) = grid.dims();
            assert_eq!((h, w, c), (expected, expected, dim));
        }
    }

    #[test]
    fn merge_then_combine_restores_shape() {
        let mut r = rng();
        let merge = PatchMerge::<f32>::new(16, &mut r);
        let combine = PatchCombine::<f32>::new(32, &mut r);
        let grid = TokenGrid::new(random_img(&[2, 8, 8, 16], 5), 4);
        let merged = merge.forward(&grid).unwrap();
        assert_eq!(merged.tensor.shape(), &[2, 4, 4, 32]);
        assert_eq!(merged.stage_scale, 8);
        let back = combine.forward(&merged).unwrap();
        assert_eq!(back.tensor.shape(), grid.tensor.shape());
        assert_eq!(back.stage_scale, grid.stage_scale);
    }

    #[test]
    fn combine_shape_contract() {
        let mut r = rng();
        let combine = PatchCombine::<f32>::new(256, &mut r);
        let grid = TokenGrid::new(random_img(&[1, 8, 8, 256], 6), 16);
        let out = combine.forward(&grid).unwrap();
        assert_eq!(out.tensor.shape(), &[1, 16, 16, 128]);
    }

    #[test]
    fn window_round_trips_all_sizes() {
        for k in [2usize, 4, 8] {
            let grid = TokenGrid::new(random_img(&[2, 16, 16, 4], k as u64), 2);
            let ws = window_partition(&grid, k).unwrap();
            let (_, h, w, _) = grid.dims();
            assert_eq!(ws.tensor.shape()[0], 2 * (h / k) * (w / k));
            let back = window_reverse(&ws, grid.stage_scale).unwrap();
            assert!(back.tensor.bit_eq(&grid.tensor), "k={k}");
        }
    }

    #[test]
    fn shift_unshift_round_trip() {
        let grid = TokenGrid::new(random_img(&[1, 8, 8, 3], 9), 2);
        let there = cyclic_shift(&grid, -2, -2).unwrap();
        let back = cyclic_shift(&there, 2, 2).unwrap();
        assert!(back.tensor.bit_eq(&grid.tensor));
    }

    #[test]
    fn mask_zero_shift_is_all_zero() {
        let mask = build_shift_mask::<f32>(8, 8, 4, 0).unwrap();
        assert!(mask.tensor.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mask_region_enumeration_8x8_k4_shift2() {
        let mask = build_shift_mask::<f32>(8, 8, 4, 2).unwrap();
        assert_eq!(mask.tensor.shape(), &[4, 16, 16]);
        // Window 0 sits away from the wrap boundary: one region, all zero.
        let m = mask.tensor.data();
        assert!(m[..256].iter().all(|&v| v == 0.0));
        // The corner window (bottom-right) mixes four regions; check the
        // blocked-pair pattern against a direct region-id enumeration.
        let region = |r: usize, c: usize| -> i32 {
            let rb = if r < 4 { 0 } else if r < 6 { 1 } else { 2 };
            let cb = if c < 4 { 0 } else if c < 6 { 1 } else { 2 };
            rb * 3 + cb
        };
        let mut distinct = std::collections::HashSet::new();
        for i in 0..16 {
            let (ri, ci) = (4 + i / 4, 4 + i % 4);
            distinct.insert(region(ri, ci));
            for j in 0..16 {
                let (rj, cj) = (4 + j / 4, 4 + j % 4);
                let blocked = region(ri, ci) != region(rj, cj);
                let v = m[(3 * 16 + i) * 16 + j];
                assert_eq!(v != 0.0, blocked, "corner window pair ({i},{j})");
                if blocked {
                    assert_eq!(v, -1e9);
                }
            }
        }
        assert_eq!(distinct.len(), 4);
    }

    #[test]
    fn effective_window_clamps_and_disables_shift() {
        assert_eq!(effective_window(8, 64, 64), (8, 4));
        assert_eq!(effective_window(8, 8, 8), (8, 0)); // single window
        assert_eq!(effective_window(8, 4, 4), (4, 0));
        assert_eq!(effective_window(4, 6, 6), (3, 1));
        assert_eq!(effective_window(8, 12, 12), (6, 3));
        assert_eq!(effective_window(2, 3, 3), (1, 0));
        // Window spans the short side: shifting is disabled.
        assert_eq!(effective_window(8, 8, 16), (8, 0));
    }

    #[test]
    fn reflect_pad_and_crop_invert() {
        let img = random_img(&[1, 20, 23, 3], 11);
        let padded = reflect_pad_to_multiple(&img, 16).unwrap();
        assert_eq!(padded.shape(), &[1, 32, 32, 3]);
        let back = crop(&padded, 20, 23).unwrap();
        assert!(back.bit_eq(&img));

        // Mirrored values: row h is row h-2 reflected.
        assert_eq!(
            padded.data()[(20 * 32) * 3],
            img.data()[(18 * 23) * 3]
        );
    }

    #[test]
    fn reflect_pad_noop_when_aligned() {
        let img = random_img(&[1, 32, 32, 3], 12);
        let padded = reflect_pad_to_multiple(&img, 16).unwrap();
        assert!(padded.bit_eq(&img));
    }

    #[test]
    fn merge_and_combine_gradients() {
        let mut r = rng();
        let merge = PatchMerge::<f64>::new(2, &mut r);
        let combine = PatchCombine::<f64>::new(4, &mut r);
        let x = no_grad(|| {
            let mut rr = ChaCha8Rng::seed_from_u64(77);
            let data: Vec<f64> = (0..32).map(|_| rr.random::<f64>() - 0.5).collect();
            Tensor::from_vec(&[1, 4, 4, 2], data).unwrap()
        });
        let mut store = ParameterStore::new();
        merge.register("m", &mut store);
        combine.register("c", &mut store);
        let report = finite_diff_check_params(
            &store.named_params(),
            || {
                let g = TokenGrid::new(x.clone(), 2);
                let out = combine.forward(&merge.forward(&g)?)?;
                out.tensor.mul(&out.tensor)?.sum_all()
            },
            1e-5,
            None,
            0,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn embed_unembed_gradients() {
        let mut r = rng();
        let embed = PatchEmbed::<f64>::new(3, 4, &mut r);
        let unembed = PatchUnembed::<f64>::new(4, 3, &mut r);
        let img = {
            let mut rr = ChaCha8Rng::seed_from_u64(78);
            let data: Vec<f64> = (0..48).map(|_| rr.random::<f64>()).collect();
            Tensor::from_vec(&[1, 4, 4, 3], data).unwrap()
        };
        let mut store = ParameterStore::new();
        embed.register("e", &mut store);
        unembed.register("u", &mut store);
        let report = finite_diff_check_params(
            &store.named_params(),
            || {
                let out = unembed.forward(&embed.forward(&img)?)?;
                out.mul(&out)?.sum_all()
            },
            1e-5,
            None,
            0,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "rel err {}", report.max_rel_err);
    }
}
