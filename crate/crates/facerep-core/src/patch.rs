//! Face patch preprocessing and training-time augmentation.
//!
//! Inputs are pre-aligned `(3, 120, 120)` images with values in
//! `[0, 255]` (240 in doubled mode); outputs are `[-1, 1]` patches of
//! side 112 (224).

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Side of the source image the aligner produces.
pub const SOURCE_SIDE: usize = 120;
/// Side of the center patch fed to the network.
pub const PATCH_SIDE: usize = 112;
/// Crop slack per axis: jitter draws offsets in `0..=2*CROP_MARGIN`.
pub const CROP_MARGIN: usize = (SOURCE_SIDE - PATCH_SIDE) / 2;
/// Rotation bound for augmentation, degrees.
pub const ROTATION_LIMIT_DEG: f64 = 5.0;

/// One preprocessed input patch.
#[derive(Clone, Debug, PartialEq)]
pub struct FacePatch {
    pub data: Tensor<f32>,
    pub source_id: u32,
    pub flipped: bool,
}

fn expect_side(image: &Tensor<f32>, side: usize) -> Result<(usize, usize, usize)> {
    let (c, h, w) = image.dims3()?;
    if c != 3 || h != side || w != side {
        return Err(Error::Geometry(format!(
            "expected (3, {side}, {side}) image, got ({c}, {h}, {w})"
        )));
    }
    Ok((c, h, w))
}

fn crop(image: &Tensor<f32>, top: usize, left: usize, out_side: usize) -> Tensor<f32> {
    let (c, h, w) = image.dims3().expect("caller validated");
    debug_assert!(top + out_side <= h && left + out_side <= w);
    let src = image.data();
    let mut out = Vec::with_capacity(c * out_side * out_side);
    for ch in 0..c {
        for r in 0..out_side {
            let base = ch * h * w + (top + r) * w + left;
            out.extend_from_slice(&src[base..base + out_side]);
        }
    }
    Tensor::new(&[c, out_side, out_side], out).expect("crop extents")
}

#[inline]
fn scale_pixel(v: f32) -> f32 {
    (v - 127.5) / 128.0
}

/// Center crop and `[-1, 1]` scaling. `doubled` expects a 240-side
/// source and yields a 224-side patch.
pub fn preprocess(image: &Tensor<f32>, doubled: bool, source_id: u32) -> Result<FacePatch> {
    let (src_side, out_side) = if doubled {
        (2 * SOURCE_SIDE, 2 * PATCH_SIDE)
    } else {
        (SOURCE_SIDE, PATCH_SIDE)
    };
    expect_side(image, src_side)?;
    let margin = (src_side - out_side) / 2;
    let data = crop(image, margin, margin, out_side).map(scale_pixel);
    Ok(FacePatch { data, source_id, flipped: false })
}

/// One augmentation draw, in sampling order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraw {
    /// Crop offsets in `0..=2*CROP_MARGIN`; `(CROP_MARGIN, CROP_MARGIN)`
    /// is the center crop.
    pub dx: usize,
    pub dy: usize,
    pub flip: bool,
    pub angle_deg: f64,
}

impl AugmentDraw {
    pub const IDENTITY: AugmentDraw =
        AugmentDraw { dx: CROP_MARGIN, dy: CROP_MARGIN, flip: false, angle_deg: 0.0 };

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        AugmentDraw {
            dx: rng.random_range(0..=2 * CROP_MARGIN),
            dy: rng.random_range(0..=2 * CROP_MARGIN),
            flip: rng.random::<f64>() < 0.5,
            angle_deg: rng.random::<f64>() * 2.0 * ROTATION_LIMIT_DEG - ROTATION_LIMIT_DEG,
        }
    }
}

/// Rotates a square map about its center by `angle_deg`, bilinear with
/// edge-clamped sampling. A 0-degree angle is an exact identity.
fn rotate(map: &Tensor<f32>, angle_deg: f64) -> Tensor<f32> {
    if angle_deg == 0.0 {
        return map.clone();
    }
    let (c, h, w) = map.dims3().expect("caller validated");
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let src = map.data();
    let clamp = |v: f64, hi: usize| (v.max(0.0) as usize).min(hi - 1);
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for r in 0..h {
            for col in 0..w {
                // inverse map: sample the source at the un-rotated position
                let dy = r as f64 - cy;
                let dx = col as f64 - cx;
                let sy = cy + cos * dy - sin * dx;
                let sx = cx + sin * dy + cos * dx;
                let y0 = clamp(sy.floor(), h);
                let x0 = clamp(sx.floor(), w);
                let y1 = (y0 + 1).min(h - 1);
                let x1 = (x0 + 1).min(w - 1);
                let fy = (sy - y0 as f64).clamp(0.0, 1.0);
                let fx = (sx - x0 as f64).clamp(0.0, 1.0);
                let top = plane[y0 * w + x0] as f64 * (1.0 - fx) + plane[y0 * w + x1] as f64 * fx;
                let bot = plane[y1 * w + x0] as f64 * (1.0 - fx) + plane[y1 * w + x1] as f64 * fx;
                out.push((top * (1.0 - fy) + bot * fy) as f32);
            }
        }
    }
    Tensor::new(&[c, h, w], out).expect("rotate extents")
}

/// Applies one explicit draw: jittered crop, optional flip, rotation.
pub fn augment_with(image: &Tensor<f32>, draw: &AugmentDraw) -> Result<Tensor<f32>> {
    expect_side(image, SOURCE_SIDE)?;
    if draw.dx > 2 * CROP_MARGIN || draw.dy > 2 * CROP_MARGIN {
        return Err(Error::Argument(format!(
            "crop offsets must be <= {}, got ({}, {})",
            2 * CROP_MARGIN,
            draw.dx,
            draw.dy
        )));
    }
    let mut out = crop(image, draw.dy, draw.dx, PATCH_SIDE).map(scale_pixel);
    if draw.flip {
        out = out.mirror_width()?;
    }
    Ok(rotate(&out, draw.angle_deg))
}

/// Samples a draw from `rng` and applies it.
pub fn augment<R: Rng + ?Sized>(image: &Tensor<f32>, rng: &mut R) -> Result<Tensor<f32>> {
    augment_with(image, &AugmentDraw::sample(rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn source_image(f: impl Fn(usize, usize, usize) -> f32) -> Tensor<f32> {
        Tensor::from_fn(&[3, SOURCE_SIDE, SOURCE_SIDE], |i| {
            let ch = i / (SOURCE_SIDE * SOURCE_SIDE);
            let r = (i / SOURCE_SIDE) % SOURCE_SIDE;
            let c = i % SOURCE_SIDE;
            f(ch, r, c)
        })
    }

    #[test]
    fn midpoint_image_maps_to_zero() {
        let img = source_image(|_, _, _| 127.5);
        let patch = preprocess(&img, false, 0).unwrap();
        assert_eq!(patch.data.shape(), &[3, 112, 112]);
        assert!(patch.data.data().iter().all(|&v| v.abs() < 1e-6));
    }

    #[test]
    fn center_crop_offset_is_four() {
        // encode (row, col) in the pixel so the crop origin is readable
        let img = source_image(|_, r, c| (r * SOURCE_SIDE + c) as f32 % 251.0);
        let patch = preprocess(&img, false, 0).unwrap();
        let expect = scale_pixel((4 * SOURCE_SIDE + 4) as f32 % 251.0);
        assert_eq!(patch.data.data()[0], expect);
    }

    #[test]
    fn output_bounds_cover_byte_range() {
        // bounds of v -> (v - 127.5) / 128 over [0, 255]
        let bound = (255.0f32 - 127.5) / 128.0;
        let img = source_image(|_, r, _| if r % 2 == 0 { 0.0 } else { 255.0 });
        let patch = preprocess(&img, false, 0).unwrap();
        let lo = patch.data.data().iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = patch.data.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        assert_eq!(lo, -bound);
        assert_eq!(hi, bound);
        assert!((bound - 0.996).abs() < 1e-3);
    }

    #[test]
    fn wrong_side_is_geometry_error() {
        let img = Tensor::<f32>::zeros(&[3, 100, 100]);
        assert!(matches!(preprocess(&img, false, 0), Err(Error::Geometry(_))));
        assert!(matches!(preprocess(&img, true, 0), Err(Error::Geometry(_))));
    }

    #[test]
    fn doubled_mode_crops_to_224() {
        let img = Tensor::<f32>::full(&[3, 240, 240], 127.5);
        let patch = preprocess(&img, true, 7).unwrap();
        assert_eq!(patch.data.shape(), &[3, 224, 224]);
        assert_eq!(patch.source_id, 7);
    }

    #[test]
    fn identity_draw_matches_preprocess() {
        let img = source_image(|ch, r, c| ((ch * 31 + r * 7 + c) % 256) as f32);
        let plain = preprocess(&img, false, 0).unwrap();
        let drawn = augment_with(&img, &AugmentDraw::IDENTITY).unwrap();
        assert_eq!(plain.data, drawn);
    }

    #[test]
    fn forced_double_flip_restores_crop() {
        let img = source_image(|ch, r, c| ((ch * 11 + r * 3 + c * 5) % 256) as f32);
        let draw = AugmentDraw { dx: 2, dy: 6, flip: true, angle_deg: 0.0 };
        let flipped = augment_with(&img, &draw).unwrap();
        let unflipped = augment_with(&img, &AugmentDraw { flip: false, ..draw }).unwrap();
        assert_eq!(flipped.mirror_width().unwrap(), unflipped);
    }

    #[test]
    fn flip_frequency_is_binomial() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 10_000;
        let flips = (0..n).filter(|_| AugmentDraw::sample(&mut rng).flip).count();
        let freq = flips as f64 / n as f64;
        assert!((freq - 0.5).abs() < 0.02, "{freq}");
    }

    #[test]
    fn draws_stay_in_declared_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10_000 {
            let d = AugmentDraw::sample(&mut rng);
            assert!(d.dx <= 8 && d.dy <= 8);
            assert!(d.angle_deg.abs() <= ROTATION_LIMIT_DEG);
        }
    }

    #[test]
    fn rotation_keeps_values_in_bounds() {
        let img = source_image(|_, r, c| if (r + c) % 2 == 0 { 0.0 } else { 255.0 });
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..8 {
            let out = augment(&img, &mut rng).unwrap();
            assert_eq!(out.shape(), &[3, 112, 112]);
            for &v in out.data() {
                assert!(v.is_finite() && (-1.0..=1.0).contains(&v), "{v}");
            }
        }
    }

    #[test]
    fn augmentation_is_seed_deterministic() {
        let img = source_image(|ch, r, c| ((ch + r * c) % 256) as f32);
        let a = augment(&img, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        let b = augment(&img, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        assert_eq!(a, b);
    }
}
