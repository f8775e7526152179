//! Keyframe selection from adjacent-frame fc-feature differences.
//!
//! A frame becomes a candidate when the jump into it from the previous frame
//! is among the `m = ceil(rate * duration)` largest jumps of the video. Frame 0
//! is always a candidate. Candidates falling in the same integral second are
//! then reduced to the one with the largest jump.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{NdvrError, Result};
use crate::feature_store::VideoFeatures;

pub const DEFAULT_RATE: f64 = 2.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyframeSet {
    pub video_id: String,
    /// Positions into `VideoFeatures::frames`, strictly increasing.
    pub selected: Vec<usize>,
    #[serde(skip)]
    pub difference_sequence: Vec<f64>,
}

/// Euclidean distances between consecutive fc vectors, length `n - 1`.
pub fn frame_differences(video: &VideoFeatures) -> Result<Vec<f64>> {
    if video.frames.is_empty() {
        return Err(NdvrError::EmptyVideo);
    }
    Ok(video
        .frames
        .windows(2)
        .map(|pair| {
            pair[0]
                .fc_vector
                .iter()
                .zip(&pair[1].fc_vector)
                .map(|(&a, &b)| {
                    let d = f64::from(b) - f64::from(a);
                    d * d
                })
                .sum::<f64>()
                .sqrt()
        })
        .collect())
}

/// Number of keyframes to threshold at: `ceil(rate * n / fps)` clamped to `[1, n - 1]`.
fn target_count(video: &VideoFeatures, rate: f64) -> usize {
    let n = video.frames.len();
    let raw = (rate * video.duration()).ceil();
    let upper = n.saturating_sub(1).max(1);
    if raw.is_finite() {
        (raw as usize).clamp(1, upper)
    } else {
        upper
    }
}

pub fn select_keyframes(video: &VideoFeatures, rate: f64) -> Result<KeyframeSet> {
    if !(rate.is_finite() && rate > 0.0) {
        return Err(NdvrError::Parameter(format!("keyframe rate must be positive, got {rate}")));
    }
    let differences = frame_differences(video)?;
    let n = video.frames.len();
    if n == 1 {
        return Ok(KeyframeSet {
            video_id: video.video_id.clone(),
            selected: vec![0],
            difference_sequence: differences,
        });
    }

    let m = target_count(video, rate);

    // Descending by difference, ties toward the earlier frame. Taking exactly
    // the first m keeps the candidate count bounded when differences tie.
    let mut order: Vec<usize> = (0..differences.len()).collect();
    order.sort_by(|&a, &b| {
        differences[b]
            .partial_cmp(&differences[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });

    // (frame position, jump into it); frame 0 carries -inf.
    let mut candidates: Vec<(usize, f64)> = Vec::with_capacity(m + 1);
    candidates.push((0, f64::NEG_INFINITY));
    candidates.extend(order.iter().take(m).map(|&i| (i + 1, differences[i])));

    let mut per_second: BTreeMap<i64, (usize, f64)> = BTreeMap::new();
    for (pos, diff) in candidates {
        let bucket = video.frames[pos].timestamp.floor() as i64;
        per_second
            .entry(bucket)
            .and_modify(|best| {
                if diff > best.1 || (diff == best.1 && pos < best.0) {
                    *best = (pos, diff);
                }
            })
            .or_insert((pos, diff));
    }
    let mut selected: Vec<usize> = per_second.values().map(|&(pos, _)| pos).collect();
    selected.sort_unstable();

    // Frame 0 is only a fallback; it yields its slot when the budget is full.
    let budget = ((rate * video.duration()).ceil() as usize).max(1);
    if selected.len() > budget && selected.first() == Some(&0) {
        selected.remove(0);
    }

    Ok(KeyframeSet {
        video_id: video.video_id.clone(),
        selected,
        difference_sequence: differences,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_store::FrameFeature;
    use proptest::prelude::*;

    fn video(fps: f64, fcs: Vec<Vec<f32>>) -> VideoFeatures {
        let frames = fcs
            .into_iter()
            .enumerate()
            .map(|(i, fc)| FrameFeature::new(i as u32, fps, fc, vec![vec![0.0]]))
            .collect();
        VideoFeatures::new("v", fps, frames).unwrap()
    }

    /// A video whose consecutive fc differences are exactly `diffs` (1-D fc).
    fn video_with_diffs(fps: f64, diffs: &[f32]) -> VideoFeatures {
        let mut x = 0.0f32;
        let mut fcs = vec![vec![x]];
        for d in diffs {
            x += d;
            fcs.push(vec![x]);
        }
        video(fps, fcs)
    }

    #[test]
    fn differences_edge_cases() {
        assert!(frame_differences(&video(1.0, vec![vec![1.0, 2.0]])).unwrap().is_empty());
        assert_eq!(
            frame_differences(&video(1.0, vec![vec![1.0, 2.0], vec![1.0, 2.0]])).unwrap(),
            vec![0.0]
        );
        let d = frame_differences(&video(1.0, vec![vec![0.0, 0.0], vec![3.0, 4.0], vec![3.0, 4.0]]))
            .unwrap();
        assert_eq!(d, vec![5.0, 0.0]);
    }

    #[test]
    fn empty_video_errors() {
        let v = VideoFeatures::new("e", 1.0, vec![]).unwrap();
        assert!(matches!(frame_differences(&v), Err(NdvrError::EmptyVideo)));
        assert!(matches!(select_keyframes(&v, 2.5), Err(NdvrError::EmptyVideo)));
    }

    #[test]
    fn single_frame() {
        let ks = select_keyframes(&video(30.0, vec![vec![1.0]]), 2.5).unwrap();
        assert_eq!(ks.selected, vec![0]);
    }

    #[test]
    fn identical_frames_one_per_second() {
        let v = video(1.0, vec![vec![0.5, 0.5]; 10]);
        let ks = select_keyframes(&v, 2.5).unwrap();
        assert_eq!(ks.selected, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn hand_traced_four_frames() {
        let v = video_with_diffs(2.0, &[9.0, 1.0, 5.0]);
        let ks = select_keyframes(&v, 2.5).unwrap();
        assert_eq!(ks.difference_sequence, vec![9.0, 1.0, 5.0]);
        assert_eq!(ks.selected, vec![1, 3]);
    }

    #[test]
    fn frame_zero_yields_when_budget_full() {
        // 4 frames at 2 fps, rate 0.25: budget ceil(0.5) = 1. The largest jump
        // lands in second 1, frame 0 sits alone in second 0.
        let v = video_with_diffs(2.0, &[0.0, 3.0, 0.0]);
        let ks = select_keyframes(&v, 0.25).unwrap();
        assert_eq!(ks.selected, vec![2]);
    }

    #[test]
    fn bad_rate() {
        let v = video(1.0, vec![vec![0.0]; 3]);
        assert!(select_keyframes(&v, 0.0).is_err());
        assert!(select_keyframes(&v, f64::NAN).is_err());
    }

    fn arb_video() -> impl Strategy<Value = (VideoFeatures, f64)> {
        (
            prop::collection::vec(prop::collection::vec(-3.0f32..3.0, 3), 1..40),
            prop::sample::select(vec![1.0, 2.0, 5.0, 8.0, 25.0]),
            0.1f64..10.0,
        )
            .prop_map(|(fcs, fps, rate)| (video(fps, fcs), rate))
    }

    proptest! {
        #[test]
        fn selection_invariants((v, rate) in arb_video()) {
            let ks = select_keyframes(&v, rate).unwrap();
            let n = v.frames.len();
            prop_assert!(!ks.selected.is_empty());
            prop_assert!(ks.selected.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(ks.selected.iter().all(|&p| p < n));
            let mut seconds: Vec<i64> = ks.selected.iter().map(|&p| v.frames[p].timestamp.floor() as i64).collect();
            seconds.dedup();
            prop_assert_eq!(seconds.len(), ks.selected.len());
            prop_assert!(ks.selected.len() <= ((rate * v.duration()).ceil() as usize).max(1));
            prop_assert_eq!(&ks, &select_keyframes(&v, rate).unwrap());
        }

        #[test]
        fn candidate_count_monotone_in_rate((v, rate) in arb_video(), bump in 0.0f64..5.0) {
            prop_assert!(target_count(&v, rate) <= target_count(&v, rate + bump));
        }
    }
}
