//! Temporal cut-and-paste augmentation.
//!
//! A window of clips from each foreground video is pasted over a background
//! video drawn from the same batch. The clip mask records which clips came
//! from the foreground, and the soft positive weights `Wv` (video → caption)
//! split each blended video's target between its own caption and the
//! background's in proportion to the foreground fraction β.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::AugConfig;
use crate::error::{Error, Result};
use crate::synthcorpus::VideoTensor;

/// Inclusive clip window `[start, end]` over `clips` clips of `clip_len` frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PasteWindow {
    pub start: usize,
    pub end: usize,
    pub clips: usize,
    pub clip_len: usize,
}

impl PasteWindow {
    pub fn new(start: usize, end: usize, clips: usize, clip_len: usize) -> Result<Self> {
        if clip_len == 0 || start > end || end >= clips {
            return Err(Error::arg(format!(
                "window [{start}, {end}] invalid for {clips} clips of {clip_len} frames"
            )));
        }
        Ok(Self {
            start,
            end,
            clips,
            clip_len,
        })
    }

    pub fn frames(&self) -> usize {
        self.clips * self.clip_len
    }
}

/// Per-clip foreground indicator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipMask(pub Vec<bool>);

impl ClipMask {
    pub fn all_foreground(clips: usize) -> Self {
        ClipMask(vec![true; clips])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn count_foreground(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn has_both_classes(&self) -> bool {
        let f = self.count_foreground();
        f > 0 && f < self.len()
    }

    pub fn as_u8(&self) -> Vec<u8> {
        self.0.iter().map(|&b| u8::from(b)).collect()
    }
}

/// Uniform over all `0 <= s <= e < clips` except the full window.
pub fn sample_window<R: Rng + ?Sized>(clips: usize, clip_len: usize, rng: &mut R) -> Result<PasteWindow> {
    if clips < 2 {
        return Err(Error::config(format!(
            "cut-and-paste needs at least 2 clips per video, got {clips}"
        )));
    }
    let admissible = clips * (clips + 1) / 2 - 1;
    let mut r = rng.gen_range(0..admissible);
    for s in 0..clips {
        for e in s..clips {
            if s == 0 && e == clips - 1 {
                continue;
            }
            if r == 0 {
                return PasteWindow::new(s, e, clips, clip_len);
            }
            r -= 1;
        }
    }
    unreachable!("window enumeration exhausted")
}

pub fn make_mask(window: &PasteWindow) -> ClipMask {
    ClipMask(
        (0..window.clips)
            .map(|j| (window.start..=window.end).contains(&j))
            .collect(),
    )
}

/// Row-major `n × n` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightMatrix {
    pub n: usize,
    pub data: Vec<f64>,
}

impl WeightMatrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                t.data[j * self.n + i] = self.get(i, j);
            }
        }
        t
    }

    /// Simultaneous row and column permutation: `out[i][j] = self[perm[i]][perm[j]]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut m = Self::zeros(self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                m.data[i * self.n + j] = self.get(perm[i], perm[j]);
            }
        }
        m
    }
}

/// Foreground ratio of a mask. The default is the inclusive fraction
/// `(e − s + 1)/N_t`; `literal` gives `(e − s)/N_t`.
pub fn foreground_ratio(window: &PasteWindow, literal: bool) -> f64 {
    let span = window.end - window.start + usize::from(!literal);
    span as f64 / window.clips as f64
}

/// `Wv[i][i] = β_i`, `Wv[i][p_i] = 1 − β_i` (summed when `p_i = i`);
/// `Wc = Wvᵀ`.
pub fn weight_matrices(betas: &[f64], partners: &[usize]) -> Result<(WeightMatrix, WeightMatrix)> {
    let n = betas.len();
    if partners.len() != n {
        return Err(Error::arg("one partner per item required"));
    }
    let mut wv = WeightMatrix::zeros(n);
    for (i, (&b, &p)) in betas.iter().zip(partners).enumerate() {
        if p >= n {
            return Err(Error::arg(format!("partner {p} out of range for batch {n}")));
        }
        if !(0.0..=1.0).contains(&b) {
            return Err(Error::arg(format!("foreground ratio {b} outside [0,1]")));
        }
        wv.data[i * n + i] += b;
        wv.data[i * n + p] += 1.0 - b;
    }
    let wc = wv.transpose();
    Ok((wv, wc))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlendedBatch {
    pub videos: Vec<VideoTensor>,
    pub partners: Vec<usize>,
    pub masks: Vec<ClipMask>,
    pub windows: Vec<Option<PasteWindow>>,
    pub betas: Vec<f64>,
    pub wv: WeightMatrix,
    pub wc: WeightMatrix,
}

impl BlendedBatch {
    /// The unaugmented batch: every mask all-foreground, β = 1, `Wv = I`.
    pub fn identity(videos: &[&VideoTensor], clip_len: usize) -> Result<Self> {
        let first = videos
            .first()
            .ok_or_else(|| Error::arg("empty batch"))?;
        if videos.iter().any(|v| !v.same_shape(first)) {
            return Err(Error::arg("all videos in a batch must share T, H, W"));
        }
        let b = videos.len();
        let clips = first.frames / clip_len.max(1);
        Ok(Self {
            videos: videos.iter().map(|&v| v.clone()).collect(),
            partners: (0..b).collect(),
            masks: vec![ClipMask::all_foreground(clips); b],
            windows: vec![None; b],
            betas: vec![1.0; b],
            wv: WeightMatrix::identity(b),
            wc: WeightMatrix::identity(b),
        })
    }
}

/// Blends each video with a partner from the batch. With augmentation
/// disabled this is [`BlendedBatch::identity`].
pub fn cut_and_paste<R: Rng + ?Sized>(
    videos: &[&VideoTensor],
    cfg: &AugConfig,
    rng: &mut R,
) -> Result<BlendedBatch> {
    let first = videos.first().ok_or_else(|| Error::arg("empty batch"))?;
    if videos.iter().any(|v| !v.same_shape(first)) {
        return Err(Error::arg("all videos in a batch must share T, H, W"));
    }
    let t = cfg.window_size_t;
    if t == 0 || first.frames % t != 0 {
        return Err(Error::config(format!(
            "{} frames cannot be split into clips of {t}",
            first.frames
        )));
    }
    if !cfg.enabled {
        return BlendedBatch::identity(videos, t);
    }
    let b = videos.len();
    let clips = first.frames / t;
    let mut partners = Vec::with_capacity(b);
    let mut windows = Vec::with_capacity(b);
    let mut masks = Vec::with_capacity(b);
    let mut betas = Vec::with_capacity(b);
    let mut blended = Vec::with_capacity(b);
    for (i, fg) in videos.iter().enumerate() {
        let p = if b == 1 {
            0
        } else {
            let r = rng.gen_range(0..b - 1);
            if r >= i {
                r + 1
            } else {
                r
            }
        };
        let w = sample_window(clips, t, rng)?;
        let mask = make_mask(&w);
        let mut v = videos[p].clone();
        for (j, &on) in mask.0.iter().enumerate() {
            if on {
                for f in j * t..(j + 1) * t {
                    v.frame_mut(f).copy_from_slice(fg.frame(f));
                }
            }
        }
        partners.push(p);
        betas.push(foreground_ratio(&w, cfg.literal_beta));
        windows.push(Some(w));
        masks.push(mask);
        blended.push(v);
    }
    let (wv, wc) = weight_matrices(&betas, &partners)?;
    Ok(BlendedBatch {
        videos: blended,
        partners,
        masks,
        windows,
        betas,
        wv,
        wc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn video(frames: usize, fill: f32) -> VideoTensor {
        let mut v = VideoTensor::zeros(frames, 2, 2);
        for t in 0..frames {
            v.frame_mut(t).iter_mut().for_each(|x| *x = fill + t as f32 * 0.01);
        }
        v
    }

    #[test]
    fn mask_examples() {
        let m = make_mask(&PasteWindow::new(1, 6, 8, 1).unwrap());
        assert_eq!(m.as_u8(), vec![0, 1, 1, 1, 1, 1, 1, 0]);
        let m = make_mask(&PasteWindow::new(0, 0, 4, 2).unwrap());
        assert_eq!(m.as_u8(), vec![1, 0, 0, 0]);
        let m = make_mask(&PasteWindow::new(2, 3, 4, 2).unwrap());
        assert_eq!(m.as_u8(), vec![0, 0, 1, 1]);
    }

    #[test]
    fn two_clips_admit_only_single_clip_windows() {
        // admissible pairs for N_t = 2: (0,0), (1,1); (0,1) is the excluded full window
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut counts = [0usize; 2];
        let n = 20_000;
        for _ in 0..n {
            let w = sample_window(2, 1, &mut rng).unwrap();
            assert_eq!(w.start, w.end);
            counts[w.start] += 1;
        }
        // binomial(20000, 1/2): sd ~ 71
        for c in counts {
            assert!((c as f64 - n as f64 / 2.0).abs() < 5.0 * 71.0, "{counts:?}");
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let a = sample_window(8, 1, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = sample_window(8, 1, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn one_clip_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(sample_window(1, 2, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn sampled_masks_are_never_degenerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for clips in 2..=8 {
            for _ in 0..500 {
                let m = make_mask(&sample_window(clips, 1, &mut rng).unwrap());
                assert!(m.has_both_classes());
            }
        }
    }

    #[test]
    fn weight_matrix_example() {
        let (wv, wc) = weight_matrices(&[0.75, 0.5], &[1, 0]).unwrap();
        assert_eq!(wv.data, vec![0.75, 0.25, 0.5, 0.5]);
        assert_eq!(wc.data, vec![0.75, 0.5, 0.25, 0.5]);
    }

    #[test]
    fn unit_betas_give_identity() {
        let (wv, _) = weight_matrices(&[1.0, 1.0, 1.0], &[1, 2, 0]).unwrap();
        assert_eq!(wv, WeightMatrix::identity(3));
    }

    #[test]
    fn fig2_window_gives_three_quarters() {
        let w = PasteWindow::new(1, 6, 8, 1).unwrap();
        assert_eq!(foreground_ratio(&w, false), 0.75);
        assert_eq!(foreground_ratio(&w, true), 0.625);
    }

    #[test]
    fn batch_of_one_is_the_identity() {
        let v = video(8, 0.2);
        let cfg = AugConfig {
            window_size_t: 1,
            ..AugConfig::default()
        };
        let b = cut_and_paste(&[&v], &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(b.partners, vec![0]);
        assert_eq!(b.videos[0], v);
        assert_eq!(b.wv.data, vec![1.0]);
    }

    #[test]
    fn blended_frames_come_from_the_right_source() {
        let vids: Vec<VideoTensor> = (0..4).map(|i| video(8, i as f32)).collect();
        let refs: Vec<&VideoTensor> = vids.iter().collect();
        let cfg = AugConfig {
            window_size_t: 2,
            ..AugConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let b = cut_and_paste(&refs, &cfg, &mut rng).unwrap();
            for i in 0..4 {
                let p = b.partners[i];
                assert_ne!(p, i);
                for (j, &fg) in b.masks[i].0.iter().enumerate() {
                    for f in 2 * j..2 * j + 2 {
                        let src = if fg { &vids[i] } else { &vids[p] };
                        assert_eq!(b.videos[i].frame(f), src.frame(f));
                    }
                }
                let fg = b.masks[i].count_foreground() as f64;
                assert_eq!(b.betas[i] * 4.0, fg);
                let row = b.wv.row(i);
                assert_eq!(row[i], b.betas[i]);
                assert_eq!(row[p], 1.0 - b.betas[i]);
            }
        }
    }

    #[test]
    fn disabled_augmentation_is_identity() {
        let vids: Vec<VideoTensor> = (0..3).map(|i| video(8, i as f32)).collect();
        let refs: Vec<&VideoTensor> = vids.iter().collect();
        let cfg = AugConfig {
            enabled: false,
            ..AugConfig::default()
        };
        let b = cut_and_paste(&refs, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(b.wv, WeightMatrix::identity(3));
        assert!(b.masks.iter().all(|m| m.count_foreground() == 4));
        assert_eq!(b.betas, vec![1.0; 3]);
        assert_eq!(b.videos, vids);
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let a = video(8, 0.0);
        let b = video(4, 0.0);
        let err = cut_and_paste(&[&a, &b], &AugConfig::default(), &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(err, Err(Error::Argument(_))));
    }
}
