//! Pace-controlled clip sampling.
//!
//! A clip of length `L` sampled at integer pace `n` takes every `n`-th source
//! frame; at pace `1/q` each source frame is held for `q` clip positions.
//! Indices wrap modulo the video length when the clip runs past the end.

use std::fmt;

use crate::corpus::VideoTensor;
use crate::error::{Error, Result};
use crate::rng::StreamRng;

/// A sampling pace `numerator / denominator`; at most one of the two exceeds 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Pace {
    numerator: usize,
    denominator: usize,
}

impl Pace {
    pub const NORMAL: Pace = Pace {
        numerator: 1,
        denominator: 1,
    };

    pub fn new(numerator: usize, denominator: usize) -> Result<Self> {
        if numerator == 0 || denominator == 0 {
            return Err(Error::Argument(format!(
                "pace {numerator}/{denominator} must have positive terms"
            )));
        }
        if numerator > 1 && denominator > 1 {
            return Err(Error::Argument(format!(
                "pace {numerator}/{denominator} must be an integer or a unit fraction"
            )));
        }
        Ok(Self {
            numerator,
            denominator,
        })
    }

    pub fn fast(n: usize) -> Result<Self> {
        Self::new(n, 1)
    }

    pub fn slow(q: usize) -> Result<Self> {
        Self::new(1, q)
    }

    pub fn numerator(self) -> usize {
        self.numerator
    }

    pub fn denominator(self) -> usize {
        self.denominator
    }

    pub fn value(self) -> f64 {
        self.numerator as f64 / self.denominator as f64
    }

    pub fn is_fast(self) -> bool {
        self.numerator > 1
    }

    pub fn is_slow(self) -> bool {
        self.denominator > 1
    }

    /// Source-frame offset (relative to `start`, before wrapping) used at
    /// clip position `t`.
    #[inline]
    pub fn offset(self, t: usize) -> usize {
        t * self.numerator / self.denominator
    }
}

impl fmt::Display for Pace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.denominator == 1 {
            write!(f, "{}", self.numerator)
        } else {
            write!(f, "1/{}", self.denominator)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PaceMode {
    /// Paces `1, 2, ..., max`.
    Relative { max: usize },
    /// `1/3, 1/2, 1, 2, 3`.
    Absolute,
    /// `1/4, 1/3, 1/2, 1`.
    SlowOnly,
    /// `1, 1+s, 1+2s, 1+3s`.
    Stepped { step: usize },
}

impl PaceMode {
    pub fn paces(self) -> Result<Vec<Pace>> {
        match self {
            PaceMode::Relative { max } => {
                if max < 2 {
                    return Err(Error::config("pace.max", "relative mode needs max >= 2"));
                }
                (1..=max).map(Pace::fast).collect()
            }
            PaceMode::Absolute => Ok(vec![
                Pace::slow(3)?,
                Pace::slow(2)?,
                Pace::NORMAL,
                Pace::fast(2)?,
                Pace::fast(3)?,
            ]),
            PaceMode::SlowOnly => Ok(vec![
                Pace::slow(4)?,
                Pace::slow(3)?,
                Pace::slow(2)?,
                Pace::NORMAL,
            ]),
            PaceMode::Stepped { step } => {
                if step < 1 {
                    return Err(Error::config("pace.step", "step must be at least 1"));
                }
                (0..4).map(|k| Pace::fast(1 + k * step)).collect()
            }
        }
    }
}

/// The ordered candidate paces; list position is the class index.
#[derive(Clone, Debug, PartialEq)]
pub struct PaceConfig {
    mode: Option<PaceMode>,
    paces: Vec<Pace>,
}

impl PaceConfig {
    pub fn new(mode: PaceMode) -> Result<Self> {
        Ok(Self {
            mode: Some(mode),
            paces: mode.paces()?,
        })
    }

    pub fn relative(max: usize) -> Result<Self> {
        Self::new(PaceMode::Relative { max })
    }

    /// An explicit pace list (distinct, at least two).
    pub fn custom(paces: Vec<Pace>) -> Result<Self> {
        if paces.len() < 2 {
            return Err(Error::config("pace.list", "need at least two paces"));
        }
        for (i, p) in paces.iter().enumerate() {
            if paces[..i].contains(p) {
                return Err(Error::config("pace.list", format!("duplicate pace {p}")));
            }
        }
        Ok(Self { mode: None, paces })
    }

    pub fn mode(&self) -> Option<PaceMode> {
        self.mode
    }

    pub fn paces(&self) -> &[Pace] {
        &self.paces
    }

    pub fn num_classes(&self) -> usize {
        self.paces.len()
    }

    pub fn pace(&self, label: PaceLabel) -> Pace {
        self.paces[label.0]
    }

    /// Largest pace value, used to bound corpus speed.
    pub fn max_pace(&self) -> f64 {
        self.paces.iter().map(|p| p.value()).fold(0.0, f64::max)
    }
}

/// Canonical pace list and class count for a mode.
pub fn pace_set(mode: PaceMode) -> Result<(Vec<Pace>, usize)> {
    let paces = mode.paces()?;
    let m = paces.len();
    Ok((paces, m))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PaceLabel(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub frames: VideoTensor,
    pub source_indices: Vec<usize>,
}

impl Clip {
    pub fn len(&self) -> usize {
        self.source_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source_indices.is_empty()
    }
}

/// Source frame indices for a clip; see [`sample_clip`].
pub fn clip_indices(num_frames: usize, pace: Pace, start: usize, len: usize) -> Result<Vec<usize>> {
    if len == 0 {
        return Err(Error::Argument("clip length must be at least 1".into()));
    }
    if start >= num_frames {
        return Err(Error::Argument(format!(
            "start frame {start} out of range for a {num_frames}-frame video"
        )));
    }
    Ok((0..len)
        .map(|t| (start + pace.offset(t) % num_frames) % num_frames)
        .collect())
}

/// Samples `len` frames starting at `start` at the given pace. Slow paces
/// hold each fresh source frame for `1/pace` positions (position 0 is always
/// fresh); all indices wrap modulo the video length.
pub fn sample_clip(video: &VideoTensor, pace: Pace, start: usize, len: usize) -> Result<Clip> {
    let source_indices = clip_indices(video.frames(), pace, start, len)?;
    Ok(Clip {
        frames: video.gather_frames(&source_indices),
        source_indices,
    })
}

/// Draws a pace class uniformly, then a start frame uniformly, and samples.
pub fn random_clip(
    video: &VideoTensor,
    config: &PaceConfig,
    len: usize,
    rng: &mut StreamRng,
) -> Result<(Clip, PaceLabel, usize)> {
    let label = PaceLabel(rng.below(config.num_classes()));
    let start = rng.below(video.frames());
    let clip = sample_clip(video, config.pace(label), start, len)?;
    Ok((clip, label, start))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::PixelData;
    use proptest::prelude::*;

    /// A 1x1 grayscale video whose frame `t` holds the value `t`.
    fn numbered_video(frames: usize) -> VideoTensor {
        VideoTensor::new(
            frames,
            1,
            1,
            1,
            PixelData::U8((0..frames).map(|t| t as u8).collect()),
        )
        .unwrap()
    }

    fn frame_values(clip: &Clip) -> Vec<usize> {
        match clip.frames.data() {
            PixelData::U8(v) => v.iter().map(|&x| x as usize).collect(),
            PixelData::F32(_) => unreachable!(),
        }
    }

    #[test]
    fn pace_sets() {
        let (p, m) = pace_set(PaceMode::Relative { max: 4 }).unwrap();
        assert_eq!(m, 4);
        assert_eq!(p.iter().map(|p| p.value()).collect::<Vec<_>>(), [1.0, 2.0, 3.0, 4.0]);

        let (p, m) = pace_set(PaceMode::Absolute).unwrap();
        assert_eq!(m, 5);
        let names: Vec<String> = p.iter().map(|p| p.to_string()).collect();
        assert_eq!(names, ["1/3", "1/2", "1", "2", "3"]);

        let (p, _) = pace_set(PaceMode::Stepped { step: 2 }).unwrap();
        assert_eq!(p.iter().map(|p| p.numerator()).collect::<Vec<_>>(), [1, 3, 5, 7]);

        let (p, _) = pace_set(PaceMode::SlowOnly).unwrap();
        assert_eq!(p.iter().map(|p| p.to_string()).collect::<Vec<_>>(), ["1/4", "1/3", "1/2", "1"]);

        assert!(matches!(pace_set(PaceMode::Stepped { step: 0 }), Err(Error::Config { .. })));
        assert!(pace_set(PaceMode::Relative { max: 1 }).is_err());
        assert!(Pace::new(2, 3).is_err());
        assert!(PaceConfig::custom(vec![Pace::NORMAL, Pace::NORMAL]).is_err());
    }

    #[test]
    fn worked_examples() {
        // Frames numbered 1..25 are indices 0..24.
        let video = numbered_video(25);
        let clip = sample_clip(&video, Pace::fast(3).unwrap(), 10, 5).unwrap();
        let one_based: Vec<usize> = clip.source_indices.iter().map(|i| i + 1).collect();
        assert_eq!(one_based, [11, 14, 17, 20, 23]);
        assert_eq!(frame_values(&clip), [10, 13, 16, 19, 22]);

        let clip = sample_clip(&video, Pace::slow(2).unwrap(), 0, 5).unwrap();
        let one_based: Vec<usize> = clip.source_indices.iter().map(|i| i + 1).collect();
        assert_eq!(one_based, [1, 1, 2, 2, 3]);

        let clip = sample_clip(&numbered_video(10), Pace::NORMAL, 7, 5).unwrap();
        assert_eq!(clip.source_indices, [7, 8, 9, 0, 1]);
    }

    #[test]
    fn argument_errors() {
        let video = numbered_video(5);
        assert!(matches!(sample_clip(&video, Pace::NORMAL, 0, 0), Err(Error::Argument(_))));
        assert!(matches!(sample_clip(&video, Pace::NORMAL, 5, 3), Err(Error::Argument(_))));
    }

    #[test]
    fn random_clip_is_reproducible() {
        let video = numbered_video(20);
        let config = PaceConfig::relative(4).unwrap();
        let a = random_clip(&video, &config, 8, &mut StreamRng::new(11)).unwrap();
        let b = random_clip(&video, &config, 8, &mut StreamRng::new(11)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn random_clip_label_and_start_distribution() {
        let t = 12;
        let video = numbered_video(t);
        let config = PaceConfig::relative(4).unwrap();
        let mut rng = StreamRng::new(2024);
        let mut classes = [0usize; 4];
        let mut starts = vec![0usize; t];
        let draws = 10_000;
        for _ in 0..draws {
            let (clip, label, start) = random_clip(&video, &config, 4, &mut rng).unwrap();
            classes[label.0] += 1;
            starts[start] += 1;
            assert_eq!(clip.source_indices[0], start);
        }
        for c in classes {
            let f = c as f64 / draws as f64;
            assert!((0.23..=0.27).contains(&f), "class frequency {f}");
        }
        assert!(starts.iter().all(|&n| n > 0));
    }

    fn any_pace() -> impl Strategy<Value = Pace> {
        prop_oneof![
            (1usize..6).prop_map(|n| Pace::fast(n).unwrap()),
            (2usize..6).prop_map(|q| Pace::slow(q).unwrap()),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn index_formula(t in 1usize..40, pace in any_pace(), start_frac in 0.0f64..1.0, len in 1usize..40) {
            let start = ((t as f64) * start_frac) as usize % t;
            let video = numbered_video(t);
            let before = video.clone();
            let clip = sample_clip(&video, pace, start, len).unwrap();
            prop_assert_eq!(video, before);
            prop_assert_eq!(clip.len(), len);
            prop_assert!(clip.source_indices.iter().all(|&i| i < t));
            prop_assert_eq!(frame_values(&clip), clip.source_indices.clone());
            if pace.is_slow() {
                let q = pace.denominator();
                for (pos, &idx) in clip.source_indices.iter().enumerate() {
                    prop_assert_eq!(idx, (start + pos / q) % t);
                }
                // ceil(L/q) distinct consecutive source frames when no wrap collides.
                if len.div_ceil(q) <= t {
                    let mut distinct = clip.source_indices.clone();
                    distinct.dedup();
                    prop_assert_eq!(distinct.len(), len.div_ceil(q));
                }
            } else {
                let n = pace.numerator();
                prop_assert_eq!(clip.source_indices[0], start);
                for w in clip.source_indices.windows(2) {
                    prop_assert_eq!((w[0] + n) % t, w[1]);
                }
            }
        }

        #[test]
        fn doubling_pace_matches_even_positions(t in 8usize..60, n in 1usize..4, len in 2usize..12, start in 0usize..8) {
            let start = start % t;
            prop_assume!(start + 2 * n * (len - 1) < t);
            let video = numbered_video(t);
            let slow = sample_clip(&video, Pace::fast(n).unwrap(), start, 2 * len).unwrap();
            let fast = sample_clip(&video, Pace::fast(2 * n).unwrap(), start, len).unwrap();
            let evens: Vec<usize> = slow.source_indices.iter().step_by(2).copied().collect();
            prop_assert_eq!(evens, fast.source_indices);
        }
    }
}
