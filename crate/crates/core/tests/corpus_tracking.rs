//! Motion checks on generated videos using a brute-force centroid tracker
//! that knows nothing about the generator beyond the pixels.

use pace_core::corpus::{generate_corpus, read_video, write_video, CorpusSpec, PixelData, VideoTensor};
use proptest::prelude::*;

fn median(mut xs: Vec<f32>) -> f32 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs[xs.len() / 2]
}

/// Intensity-weighted centroid of pixels that stand out from the frame's
/// median color by more than `threshold` (summed over channels).
fn centroid(video: &VideoTensor, t: usize, threshold: f32) -> (f64, f64) {
    let (h, w, c) = (video.height(), video.width(), video.channels());
    let bg: Vec<f32> = (0..c)
        .map(|ch| {
            let mut xs = Vec::with_capacity(h * w);
            for y in 0..h {
                for x in 0..w {
                    xs.push(video.get(t, y, x, ch));
                }
            }
            median(xs)
        })
        .collect();
    let (mut sw, mut sy, mut sx) = (0.0f64, 0.0f64, 0.0f64);
    for y in 0..h {
        for x in 0..w {
            let d: f32 = (0..c).map(|ch| (video.get(t, y, x, ch) - bg[ch]).abs()).sum();
            let weight = (d - threshold).max(0.0) as f64;
            sw += weight;
            sy += weight * (y as f64 + 0.5);
            sx += weight * (x as f64 + 0.5);
        }
    }
    (sy / sw, sx / sw)
}

#[test]
fn centroid_moves_at_base_speed() {
    let spec = CorpusSpec {
        num_videos: 12,
        frames: 40,
        height: 48,
        width: 48,
        base_speed: 2.0,
        seed: 31,
        ..CorpusSpec::default()
    };
    let corpus = generate_corpus(&spec).unwrap();
    let threshold = 0.2 * spec.channels as f32;
    let mut worst = 0.0f64;
    for video in &corpus.videos {
        let track: Vec<(f64, f64)> = (0..video.frames()).map(|t| centroid(video, t, threshold)).collect();
        for pair in track.windows(2) {
            let step = ((pair[1].0 - pair[0].0).powi(2) + (pair[1].1 - pair[0].1).powi(2)).sqrt();
            worst = worst.max((step - spec.base_speed).abs());
        }
    }
    assert!(worst <= 0.5, "worst displacement error {worst} px");
}

fn arb_video() -> impl Strategy<Value = VideoTensor> {
    (1usize..4, 1usize..5, 1usize..5, prop::bool::ANY, prop::bool::ANY).prop_flat_map(|(t, h, w, rgb, float)| {
        let c = if rgb { 3 } else { 1 };
        let n = t * h * w * c;
        let data = if float {
            prop::collection::vec(0.0f32..=1.0, n).prop_map(PixelData::F32).boxed()
        } else {
            prop::collection::vec(any::<u8>(), n).prop_map(PixelData::U8).boxed()
        };
        data.prop_map(move |d| VideoTensor::new(t, h, w, c, d).unwrap())
    })
}

proptest! {
    #[test]
    fn vpc1_round_trip(video in arb_video()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.vpc");
        write_video(&video, &path).unwrap();
        prop_assert_eq!(read_video(&path).unwrap(), video);
    }
}
