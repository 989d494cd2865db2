//! Seeded two-view generation: random resized crop, horizontal flip,
//! intensity jitter, and additive Gaussian noise over `[C,28,28]` images.
//!
//! Each view consumes the rng in a fixed documented order (crop scale, crop
//! top, crop left, flip draw, intensity factor, one noise draw per pixel),
//! and disabled transforms consume nothing, so identical streams produce
//! bit-identical views.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Output side length; every view is resized back to this.
pub const VIEW_SIDE: usize = 28;

/// Per-transform toggles and strengths for view generation.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    /// Crop side length as a fraction of the input side, sampled uniformly
    /// from this closed range.
    pub crop_scale: (f64, f64),
    pub flip_prob: f64,
    /// Multiplicative intensity factor sampled from `1 ± intensity_jitter`.
    pub intensity_jitter: f64,
    pub noise_std: f64,
    pub crop_enabled: bool,
    pub flip_enabled: bool,
    pub jitter_enabled: bool,
    pub noise_enabled: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop_scale: (0.6, 1.0),
            flip_prob: 0.5,
            intensity_jitter: 0.2,
            noise_std: 0.02,
            crop_enabled: true,
            flip_enabled: true,
            jitter_enabled: true,
            noise_enabled: true,
        }
    }
}

impl AugmentConfig {
    /// Identity pipeline: every transform disabled.
    pub fn disabled() -> Self {
        AugmentConfig {
            crop_enabled: false,
            flip_enabled: false,
            jitter_enabled: false,
            noise_enabled: false,
            ..AugmentConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!(
                "crop_scale must satisfy 0 < lo <= hi <= 1, got ({lo}, {hi})"
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!(
                "flip_prob must be in [0,1], got {}",
                self.flip_prob
            )));
        }
        if !(0.0..1.0).contains(&self.intensity_jitter) {
            return Err(Error::Config(format!(
                "intensity_jitter must be in [0,1), got {}",
                self.intensity_jitter
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!(
                "noise_std must be finite and nonnegative, got {}",
                self.noise_std
            )));
        }
        Ok(())
    }
}

fn image_dims(image: &Tensor) -> Result<(usize, usize, usize)> {
    let shape = image.shape();
    if shape.len() != 3 {
        return Err(Error::contract(
            "augment",
            format!("expected [C,H,W] image, got rank {}", shape.len()),
        ));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if h != VIEW_SIDE || w != VIEW_SIDE {
        return Err(Error::contract(
            "augment",
            format!("expected {VIEW_SIDE}x{VIEW_SIDE} image, got {h}x{w}"),
        ));
    }
    Ok((c, h, w))
}

/// Crop the `side`-length window at (top, left) and resize it back to
/// `VIEW_SIDE` with corner-aligned bilinear sampling:
/// `src = origin + out_index * (side - 1) / (VIEW_SIDE - 1)`,
/// interpolating the four surrounding window pixels. A window the same size
/// as the image reproduces it exactly.
fn crop_resize(channel: &[f64], top: usize, left: usize, side: usize) -> Vec<f64> {
    let step = if side > 1 {
        (side - 1) as f64 / (VIEW_SIDE - 1) as f64
    } else {
        0.0
    };
    let mut out = Vec::with_capacity(VIEW_SIDE * VIEW_SIDE);
    for r in 0..VIEW_SIDE {
        let sy = top as f64 + r as f64 * step;
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(top + side - 1);
        let fy = sy - y0 as f64;
        for c in 0..VIEW_SIDE {
            let sx = left as f64 + c as f64 * step;
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(left + side - 1);
            let fx = sx - x0 as f64;
            let v = (1.0 - fy) * (1.0 - fx) * channel[y0 * VIEW_SIDE + x0]
                + (1.0 - fy) * fx * channel[y0 * VIEW_SIDE + x1]
                + fy * (1.0 - fx) * channel[y1 * VIEW_SIDE + x0]
                + fy * fx * channel[y1 * VIEW_SIDE + x1];
            out.push(v);
        }
    }
    out
}

fn one_view(image: &Tensor, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let (channels, h, _) = image_dims(image)?;
    let plane = h * h;

    let (top, left, side) = if cfg.crop_enabled {
        let (lo, hi) = cfg.crop_scale;
        let scale = if lo < hi { rng.random_range(lo..=hi) } else { lo };
        let side = ((scale * h as f64).round() as usize).clamp(1, h);
        let top = if side < h { rng.random_range(0..=h - side) } else { 0 };
        let left = if side < h { rng.random_range(0..=h - side) } else { 0 };
        (top, left, side)
    } else {
        (0, 0, h)
    };
    let flip = cfg.flip_enabled && rng.random_bool(cfg.flip_prob);
    let factor = if cfg.jitter_enabled {
        rng.random_range(1.0 - cfg.intensity_jitter..=1.0 + cfg.intensity_jitter)
    } else {
        1.0
    };

    let mut data = Vec::with_capacity(image.numel());
    for ch in 0..channels {
        let channel = &image.data()[ch * plane..(ch + 1) * plane];
        let mut resized = if side == h {
            channel.to_vec()
        } else {
            crop_resize(channel, top, left, side)
        };
        if flip {
            for row in resized.chunks_mut(VIEW_SIDE) {
                row.reverse();
            }
        }
        data.extend_from_slice(&resized);
    }

    if cfg.jitter_enabled {
        for v in &mut data {
            *v *= factor;
        }
    }
    if cfg.noise_enabled {
        let normal = Normal::new(0.0, cfg.noise_std)
            .map_err(|e| Error::Config(format!("invalid noise_std: {e}")))?;
        for v in &mut data {
            *v += normal.sample(rng);
        }
    }
    for v in &mut data {
        *v = v.clamp(0.0, 1.0);
    }
    Tensor::new(image.shape().to_vec(), data)
}

/// Two independent augmented views of one image.
pub fn two_views(
    image: &Tensor,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Tensor)> {
    cfg.validate()?;
    let a = one_view(image, cfg, rng)?;
    let b = one_view(image, cfg, rng)?;
    Ok((a, b))
}

/// Two view batches from a `[N,C,28,28]` batch, augmenting images in index
/// order from the single stream.
pub fn two_view_batch(
    images: &Tensor,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Tensor)> {
    cfg.validate()?;
    let shape = images.shape();
    if shape.len() != 4 {
        return Err(Error::contract(
            "augment",
            format!("expected [N,C,H,W] batch, got rank {}", shape.len()),
        ));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let stride = c * h * w;
    let mut data_a = Vec::with_capacity(images.numel());
    let mut data_b = Vec::with_capacity(images.numel());
    for i in 0..n {
        let img = Tensor::new(
            vec![c, h, w],
            images.data()[i * stride..(i + 1) * stride].to_vec(),
        )?;
        let a = one_view(&img, cfg, rng)?;
        let b = one_view(&img, cfg, rng)?;
        data_a.extend_from_slice(a.data());
        data_b.extend_from_slice(b.data());
    }
    Ok((
        Tensor::new(shape.to_vec(), data_a)?,
        Tensor::new(shape.to_vec(), data_b)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn test_image(tag: u64) -> Tensor {
        let mut rng = stream(31, "augment-test", &[tag]);
        let data: Vec<f64> = (0..VIEW_SIDE * VIEW_SIDE)
            .map(|_| rng.random_range(0.0..1.0))
            .collect();
        Tensor::new(vec![1, VIEW_SIDE, VIEW_SIDE], data).unwrap()
    }

    #[test]
    fn disabled_pipeline_is_identity() {
        let img = test_image(0);
        let mut rng = stream(32, "augment", &[0]);
        let (a, b) = two_views(&img, &AugmentConfig::disabled(), &mut rng).unwrap();
        assert_eq!(a.data(), img.data());
        assert_eq!(b.data(), img.data());
    }

    #[test]
    fn same_seed_gives_bit_identical_views() {
        let img = test_image(1);
        let cfg = AugmentConfig::default();
        let run = || {
            let mut rng = stream(33, "augment", &[7]);
            two_views(&img, &cfg, &mut rng).unwrap()
        };
        let (a1, b1) = run();
        let (a2, b2) = run();
        assert_eq!(a1.data(), a2.data());
        assert_eq!(b1.data(), b2.data());
        assert_ne!(a1.data(), b1.data(), "views should differ from each other");
    }

    #[test]
    fn full_crop_with_forced_flip_mirrors_input() {
        let img = test_image(2);
        let cfg = AugmentConfig {
            crop_scale: (1.0, 1.0),
            flip_prob: 1.0,
            jitter_enabled: false,
            noise_enabled: false,
            ..AugmentConfig::default()
        };
        let mut rng = stream(34, "augment", &[0]);
        let (a, _) = two_views(&img, &cfg, &mut rng).unwrap();
        for r in 0..VIEW_SIDE {
            for c in 0..VIEW_SIDE {
                assert_eq!(
                    a.data()[r * VIEW_SIDE + c],
                    img.data()[r * VIEW_SIDE + (VIEW_SIDE - 1 - c)]
                );
            }
        }
    }

    #[test]
    fn outputs_stay_in_unit_range() {
        let img = test_image(3);
        let cfg = AugmentConfig::default();
        let mut rng = stream(35, "augment", &[0]);
        for _ in 0..50 {
            let (a, b) = two_views(&img, &cfg, &mut rng).unwrap();
            for v in a.data().iter().chain(b.data()) {
                assert!((0.0..=1.0).contains(v), "pixel {v} out of range");
            }
        }
    }

    #[test]
    fn flip_frequency_is_near_half() {
        // Flip-only pipeline on an asymmetric image; count mirrored outputs.
        let mut img_data = vec![0.0; VIEW_SIDE * VIEW_SIDE];
        img_data[0] = 1.0;
        let img = Tensor::new(vec![1, VIEW_SIDE, VIEW_SIDE], img_data).unwrap();
        let cfg = AugmentConfig {
            crop_enabled: false,
            jitter_enabled: false,
            noise_enabled: false,
            ..AugmentConfig::default()
        };
        let mut rng = stream(36, "augment", &[0]);
        let mut flips = 0usize;
        let draws = 10_000usize;
        for _ in 0..draws / 2 {
            let (a, b) = two_views(&img, &cfg, &mut rng).unwrap();
            for view in [a, b] {
                if view.data()[VIEW_SIDE - 1] == 1.0 {
                    flips += 1;
                } else {
                    assert_eq!(view.data()[0], 1.0);
                }
            }
        }
        let freq = flips as f64 / draws as f64;
        assert!((freq - 0.5).abs() <= 0.02, "flip frequency {freq}");
    }

    #[test]
    fn batch_views_match_per_image_views() {
        let img0 = test_image(4);
        let img1 = test_image(5);
        let mut batch_data = img0.data().to_vec();
        batch_data.extend_from_slice(img1.data());
        let batch = Tensor::new(vec![2, 1, VIEW_SIDE, VIEW_SIDE], batch_data).unwrap();
        let cfg = AugmentConfig::default();

        let mut rng_batch = stream(37, "augment", &[0]);
        let (a, b) = two_view_batch(&batch, &cfg, &mut rng_batch).unwrap();

        let mut rng_single = stream(37, "augment", &[0]);
        let (a0, b0) = two_views(&img0, &cfg, &mut rng_single).unwrap();
        let (a1, b1) = two_views(&img1, &cfg, &mut rng_single).unwrap();

        let plane = VIEW_SIDE * VIEW_SIDE;
        assert_eq!(&a.data()[..plane], a0.data());
        assert_eq!(&a.data()[plane..], a1.data());
        assert_eq!(&b.data()[..plane], b0.data());
        assert_eq!(&b.data()[plane..], b1.data());
    }

    #[test]
    fn rejects_bad_config() {
        let img = test_image(6);
        let mut rng = stream(38, "augment", &[0]);
        let bad = AugmentConfig {
            crop_scale: (0.0, 1.0),
            ..AugmentConfig::default()
        };
        assert!(two_views(&img, &bad, &mut rng).is_err());
        let bad = AugmentConfig {
            flip_prob: 1.5,
            ..AugmentConfig::default()
        };
        assert!(two_views(&img, &bad, &mut rng).is_err());
    }
}
