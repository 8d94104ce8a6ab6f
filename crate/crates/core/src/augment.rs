//! Clip augmentation: per-frame color jitter, spatial crops and horizontal
//! flips. Spatial transforms draw one offset/decision per clip so motion
//! between frames is preserved.

use crate::corpus::{PixelData, VideoTensor};
use crate::error::{Error, Result};
use crate::pacer::Clip;
use crate::rng::StreamRng;

/// Half-widths of the jitter ranges. A draw for contrast is a scale in
/// `[1 - contrast, 1 + contrast]`; hue is a fraction of the hue circle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JitterParams {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    /// Fresh draws for every frame instead of once per clip.
    pub per_frame: bool,
}

impl Default for JitterParams {
    fn default() -> Self {
        Self {
            brightness: 0.25,
            contrast: 0.25,
            saturation: 0.25,
            hue: 0.04,
            per_frame: true,
        }
    }
}

impl JitterParams {
    pub const IDENTITY: JitterParams = JitterParams {
        brightness: 0.0,
        contrast: 0.0,
        saturation: 0.0,
        hue: 0.0,
        per_frame: true,
    };

    /// Always consumes four uniforms so streams stay aligned whatever the ranges.
    pub fn draw(&self, rng: &mut StreamRng) -> JitterDraw {
        let b = rng.uniform_range(-1.0, 1.0) * self.brightness;
        let c = 1.0 + rng.uniform_range(-1.0, 1.0) * self.contrast;
        let s = 1.0 + rng.uniform_range(-1.0, 1.0) * self.saturation;
        let h = rng.uniform_range(-1.0, 1.0) * self.hue;
        JitterDraw {
            brightness: b as f32,
            contrast: c as f32,
            saturation: s as f32,
            hue: h as f32,
        }
    }
}

/// One concrete set of jitter factors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JitterDraw {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub hue: f32,
}

#[inline]
fn luma(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = (h6.floor() as i32).rem_euclid(6);
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Applies brightness, contrast, saturation and hue (in that order) to one
/// channel-last frame in place. Sub-transforms at their identity value are
/// skipped so zero ranges leave the frame bit-identical.
pub fn jitter_frame(frame: &mut [f32], channels: usize, draw: &JitterDraw) {
    if draw.brightness != 0.0 {
        for x in frame.iter_mut() {
            *x = (*x + draw.brightness).clamp(0.0, 1.0);
        }
    }
    if draw.contrast != 1.0 {
        let mean = if channels == 3 {
            let n = frame.len() / 3;
            frame
                .chunks_exact(3)
                .map(|p| luma(p[0], p[1], p[2]) as f64)
                .sum::<f64>()
                / n as f64
        } else {
            frame.iter().map(|&x| x as f64).sum::<f64>() / frame.len() as f64
        } as f32;
        for x in frame.iter_mut() {
            *x = (mean + draw.contrast * (*x - mean)).clamp(0.0, 1.0);
        }
    }
    if channels != 3 {
        return;
    }
    if draw.saturation != 1.0 {
        for p in frame.chunks_exact_mut(3) {
            let l = luma(p[0], p[1], p[2]);
            for x in p.iter_mut() {
                *x = (l + draw.saturation * (*x - l)).clamp(0.0, 1.0);
            }
        }
    }
    if draw.hue != 0.0 {
        for p in frame.chunks_exact_mut(3) {
            let (h, s, v) = rgb_to_hsv(p[0], p[1], p[2]);
            let (r, g, b) = hsv_to_rgb(h + draw.hue, s, v);
            p[0] = r.clamp(0.0, 1.0);
            p[1] = g.clamp(0.0, 1.0);
            p[2] = b.clamp(0.0, 1.0);
        }
    }
}

pub fn color_jitter(clip: &Clip, params: &JitterParams, rng: &mut StreamRng) -> Clip {
    let channels = clip.frames.channels();
    let frame_len = clip.frames.frame_len();
    let mut frames = clip.frames.to_f32();
    let data = frames.f32_data_mut();
    let mut draw = params.draw(rng);
    for (t, frame) in data.chunks_exact_mut(frame_len).enumerate() {
        if params.per_frame && t > 0 {
            draw = params.draw(rng);
        }
        jitter_frame(frame, channels, &draw);
    }
    Clip {
        frames,
        source_indices: clip.source_indices.clone(),
    }
}

/// Crops every frame to the window at `(top, left)`.
pub fn crop_at(clip: &Clip, top: usize, left: usize, out_h: usize, out_w: usize) -> Result<Clip> {
    let v = &clip.frames;
    if out_h == 0 || out_w == 0 || top + out_h > v.height() || left + out_w > v.width() {
        return Err(Error::Argument(format!(
            "crop {out_h}x{out_w} at ({top}, {left}) does not fit a {}x{} frame",
            v.height(),
            v.width()
        )));
    }
    let c = v.channels();
    let row = out_w * c;
    let mut idx = Vec::with_capacity(v.frames() * out_h * row);
    for t in 0..v.frames() {
        for y in top..top + out_h {
            let base = v.index(t, y, left, 0);
            idx.extend(base..base + row);
        }
    }
    let data = match v.data() {
        PixelData::U8(d) => PixelData::U8(idx.iter().map(|&i| d[i]).collect()),
        PixelData::F32(d) => PixelData::F32(idx.iter().map(|&i| d[i]).collect()),
    };
    Ok(Clip {
        frames: VideoTensor::new(v.frames(), out_h, out_w, c, data)?,
        source_indices: clip.source_indices.clone(),
    })
}

fn check_crop(clip: &Clip, out_h: usize, out_w: usize) -> Result<()> {
    let (h, w) = (clip.frames.height(), clip.frames.width());
    if out_h > h || out_w > w || out_h == 0 || out_w == 0 {
        return Err(Error::Argument(format!(
            "crop {out_h}x{out_w} larger than frame {h}x{w} (or empty)"
        )));
    }
    Ok(())
}

/// One random window per clip, shared by all frames.
pub fn random_crop(clip: &Clip, out_h: usize, out_w: usize, rng: &mut StreamRng) -> Result<Clip> {
    check_crop(clip, out_h, out_w)?;
    let top = rng.below(clip.frames.height() - out_h + 1);
    let left = rng.below(clip.frames.width() - out_w + 1);
    crop_at(clip, top, left, out_h, out_w)
}

pub fn center_crop(clip: &Clip, out_h: usize, out_w: usize) -> Result<Clip> {
    check_crop(clip, out_h, out_w)?;
    let top = (clip.frames.height() - out_h) / 2;
    let left = (clip.frames.width() - out_w) / 2;
    crop_at(clip, top, left, out_h, out_w)
}

/// Mirrors every frame along the width axis.
pub fn flip_horizontal(clip: &Clip) -> Clip {
    let v = &clip.frames;
    let (t_len, h, w, c) = (v.frames(), v.height(), v.width(), v.channels());
    let mut idx = Vec::with_capacity(v.data().len());
    for t in 0..t_len {
        for y in 0..h {
            for x in (0..w).rev() {
                let base = v.index(t, y, x, 0);
                idx.extend(base..base + c);
            }
        }
    }
    let data = match v.data() {
        PixelData::U8(d) => PixelData::U8(idx.iter().map(|&i| d[i]).collect()),
        PixelData::F32(d) => PixelData::F32(idx.iter().map(|&i| d[i]).collect()),
    };
    Clip {
        frames: VideoTensor::new(t_len, h, w, c, data).expect("same dims"),
        source_indices: clip.source_indices.clone(),
    }
}

/// Flips the whole clip with the given probability (one draw per clip).
pub fn hflip(clip: &Clip, rng: &mut StreamRng, probability: f64) -> Clip {
    if rng.bernoulli(probability) {
        flip_horizontal(clip)
    } else {
        clip.clone()
    }
}

/// Training-time augmentation pipeline: random crop, flip, then jitter.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub crop: (usize, usize),
    pub flip_probability: f64,
    pub jitter: Option<JitterParams>,
}

impl AugmentConfig {
    pub fn new(crop_h: usize, crop_w: usize) -> Self {
        Self {
            crop: (crop_h, crop_w),
            flip_probability: 0.5,
            jitter: Some(JitterParams::default()),
        }
    }
}

pub fn augment_clip(clip: &Clip, config: &AugmentConfig, rng: &mut StreamRng) -> Result<Clip> {
    let cropped = random_crop(clip, config.crop.0, config.crop.1, rng)?;
    let flipped = hflip(&cropped, rng, config.flip_probability);
    Ok(match &config.jitter {
        Some(params) => color_jitter(&flipped, params, rng),
        None => Clip {
            frames: flipped.frames.to_f32(),
            source_indices: flipped.source_indices,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f32_clip(frames: usize, h: usize, w: usize, c: usize, f: impl Fn(usize, usize, usize, usize) -> f32) -> Clip {
        let mut data = Vec::with_capacity(frames * h * w * c);
        for t in 0..frames {
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        data.push(f(t, y, x, ch));
                    }
                }
            }
        }
        Clip {
            frames: VideoTensor::new(frames, h, w, c, PixelData::F32(data)).unwrap(),
            source_indices: (0..frames).collect(),
        }
    }

    /// Pixel value encodes its own (y, x) coordinate.
    fn coordinate_clip(frames: usize, h: usize, w: usize) -> Clip {
        f32_clip(frames, h, w, 1, |_, y, x, _| (y * w + x) as f32 / (h * w) as f32)
    }

    fn values(clip: &Clip) -> Vec<f32> {
        match clip.frames.to_f32().data() {
            PixelData::F32(v) => v.clone(),
            PixelData::U8(_) => unreachable!(),
        }
    }

    #[test]
    fn zero_ranges_are_identity() {
        let clip = f32_clip(4, 5, 6, 3, |t, y, x, c| ((t + 2 * y + 3 * x + c) % 11) as f32 / 10.0);
        let out = color_jitter(&clip, &JitterParams::IDENTITY, &mut StreamRng::new(1));
        assert_eq!(values(&out), values(&clip));
    }

    #[test]
    fn brightness_is_additive() {
        let mut frame = vec![0.5f32; 12];
        let draw = JitterDraw {
            brightness: 0.1,
            contrast: 1.0,
            saturation: 1.0,
            hue: 0.0,
        };
        jitter_frame(&mut frame, 3, &draw);
        assert!(frame.iter().all(|&x| (x - 0.6).abs() < 1e-6));
    }

    #[test]
    fn per_frame_jitter_varies_across_frames() {
        let clip = f32_clip(8, 4, 4, 3, |_, _, _, c| 0.3 + 0.2 * c as f32);
        for seed in 0..50 {
            let out = color_jitter(&clip, &JitterParams::default(), &mut StreamRng::new(seed));
            let v = values(&out);
            let fl = 4 * 4 * 3;
            assert!((1..8).any(|t| v[t * fl..(t + 1) * fl] != v[..fl]), "seed {seed}");
        }
        let once = JitterParams {
            per_frame: false,
            ..JitterParams::default()
        };
        let v = values(&color_jitter(&clip, &once, &mut StreamRng::new(3)));
        let fl = 4 * 4 * 3;
        assert!((1..8).all(|t| v[t * fl..(t + 1) * fl] == v[..fl]));
    }

    #[test]
    fn jitter_keeps_range_and_hue_round_trips() {
        let clip = f32_clip(3, 6, 6, 3, |t, y, x, c| ((t * 7 + y * 5 + x * 3 + c) % 13) as f32 / 12.0);
        let strong = JitterParams {
            brightness: 0.5,
            contrast: 0.9,
            saturation: 0.9,
            hue: 0.5,
            per_frame: true,
        };
        let out = values(&color_jitter(&clip, &strong, &mut StreamRng::new(5)));
        assert!(out.iter().all(|x| (0.0..=1.0).contains(x)));
        for (r, g, b) in [(0.2, 0.5, 0.9), (0.9, 0.1, 0.3), (0.4, 0.4, 0.4), (0.0, 1.0, 0.2)] {
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r - r2).abs() < 1e-6 && (g - g2).abs() < 1e-6 && (b - b2).abs() < 1e-6);
        }
    }

    #[test]
    fn crops() {
        let clip = coordinate_clip(3, 4, 4);
        let same = random_crop(&clip, 4, 4, &mut StreamRng::new(0)).unwrap();
        assert_eq!(values(&same), values(&clip));

        let center = center_crop(&clip, 2, 2).unwrap();
        let expected: Vec<f32> = [(1, 1), (1, 2), (2, 1), (2, 2)]
            .iter()
            .map(|&(y, x)| (y * 4 + x) as f32 / 16.0)
            .collect();
        assert_eq!(&values(&center)[..4], &expected[..]);

        assert!(matches!(center_crop(&clip, 5, 2), Err(Error::Argument(_))));
    }

    #[test]
    fn random_crop_uses_one_window_for_all_frames() {
        let clip = coordinate_clip(6, 9, 11);
        for seed in 0..20 {
            let out = random_crop(&clip, 4, 5, &mut StreamRng::new(seed)).unwrap();
            let v = values(&out);
            let fl = 4 * 5;
            for t in 1..6 {
                assert_eq!(v[t * fl..(t + 1) * fl], v[..fl]);
            }
            // Decoding the top-left pixel gives the window offset; the rest must follow.
            let code = (v[0] * 99.0).round() as usize;
            let (top, left) = (code / 11, code % 11);
            for y in 0..4 {
                for x in 0..5 {
                    let want = ((top + y) * 11 + left + x) as f32 / 99.0;
                    assert_eq!(v[y * 5 + x], want);
                }
            }
        }
    }

    #[test]
    fn flips() {
        let clip = coordinate_clip(2, 3, 5);
        let twice = flip_horizontal(&flip_horizontal(&clip));
        assert_eq!(values(&twice), values(&clip));
        let kept = hflip(&clip, &mut StreamRng::new(9), 0.0);
        assert_eq!(values(&kept), values(&clip));

        let mut rng = StreamRng::new(77);
        let n = 10_000;
        let flips = (0..n).filter(|_| rng.bernoulli(0.5)).count();
        let rate = flips as f64 / n as f64;
        assert!((0.48..=0.52).contains(&rate), "flip rate {rate}");
    }

    #[test]
    fn crop_then_flip_is_flip_then_mirrored_crop() {
        let clip = coordinate_clip(2, 6, 10);
        let (top, left, oh, ow) = (1, 2, 3, 4);
        let a = flip_horizontal(&crop_at(&clip, top, left, oh, ow).unwrap());
        let b = crop_at(&flip_horizontal(&clip), top, 10 - left - ow, oh, ow).unwrap();
        assert_eq!(values(&a), values(&b));
    }
}
