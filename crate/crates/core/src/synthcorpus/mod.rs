//! Procedurally generated video-caption corpus with exact ground truth:
//! per-object region masks, noun-phrase spans, and scene labels for
//! two-scene probe videos.

mod caption;
mod format;
mod render;
mod scene;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use caption::{caption_for, grammar_words, NounSpan};
pub use format::{read_corpus, write_corpus, FORMAT_VERSION};
pub use render::{render_video, RegionMask, VideoTensor};
pub use scene::{Color, Motion, ObjectSpec, SceneSpec, ShapeClass, MAX_SIZE, MIN_SIZE, SPEED};

use crate::config::Patch;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
    /// Two-scene videos reserved for temporal evaluation.
    Probe,
}

impl Split {
    pub fn tag(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
            Split::Probe => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        Ok(match tag {
            0 => Split::Train,
            1 => Split::Val,
            2 => Split::Test,
            3 => Split::Probe,
            _ => return Err(Error::format(format!("unknown split tag {tag}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionedVideo {
    pub video: VideoTensor,
    pub caption: String,
    pub noun_spans: Vec<NounSpan>,
    /// One mask per object id.
    pub region_masks: Vec<RegionMask>,
    /// Scene id of every frame (all zero for single-scene videos).
    pub scene_label: Vec<u8>,
}

impl CaptionedVideo {
    pub fn nouns(&self) -> Vec<&str> {
        self.noun_spans.iter().map(|s| s.text(&self.caption)).collect()
    }

    pub fn num_scenes(&self) -> usize {
        let mut seen = self.scene_label.clone();
        seen.sort_unstable();
        seen.dedup();
        seen.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    /// Number of single-scene items (train + val + test).
    pub size: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub patch: Patch,
    pub min_objects: usize,
    pub max_objects: usize,
    pub val_frac: f64,
    pub test_frac: f64,
    /// Extra two-scene probe items, as a fraction of `size`.
    pub twoscene_frac: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            size: 320,
            frames: 8,
            height: 32,
            width: 32,
            patch: Patch::new(2, 8, 8),
            min_objects: 2,
            max_objects: 3,
            val_frac: 0.1,
            test_frac: 0.1,
            twoscene_frac: 0.1,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 {
            return Err(Error::config("corpus size must be at least 1"));
        }
        for (name, n, p) in [
            ("frames", self.frames, self.patch.t),
            ("height", self.height, self.patch.h),
            ("width", self.width, self.patch.w),
        ] {
            if p == 0 || n == 0 || n % p != 0 {
                return Err(Error::config(format!(
                    "{name} {n} is not divisible by patch dimension {p}"
                )));
            }
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects || self.max_objects > 3 {
            return Err(Error::config("object count range must lie within 1..=3"));
        }
        let fracs = [self.val_frac, self.test_frac, self.twoscene_frac];
        if fracs.iter().any(|f| !(0.0..=1.0).contains(f)) || self.val_frac + self.test_frac > 1.0
        {
            return Err(Error::config("split fractions must lie in [0,1]"));
        }
        Ok(())
    }

    pub fn split_sizes(&self) -> (usize, usize, usize) {
        let val = (self.size as f64 * self.val_frac).round() as usize;
        let test = (self.size as f64 * self.test_frac).round() as usize;
        let val = val.min(self.size);
        let test = test.min(self.size - val);
        (self.size - val - test, val, test)
    }

    pub fn num_probes(&self) -> usize {
        (self.size as f64 * self.twoscene_frac).round() as usize
    }

    pub(crate) fn to_kv(&self) -> String {
        format!(
            "size = {}\nframes = {}\nheight = {}\nwidth = {}\npatch = {}\nmin_objects = {}\nmax_objects = {}\nval_frac = {}\ntest_frac = {}\ntwoscene_frac = {}\n",
            self.size,
            self.frames,
            self.height,
            self.width,
            self.patch,
            self.min_objects,
            self.max_objects,
            self.val_frac,
            self.test_frac,
            self.twoscene_frac
        )
    }

    pub(crate) fn from_kv(text: &str) -> Result<Self> {
        let mut s = CorpusSpec::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(format!("bad spec line {line:?}")))?;
            let v = v.trim();
            let bad = || Error::format(format!("bad spec value {v:?}"));
            match k.trim() {
                "size" => s.size = v.parse().map_err(|_| bad())?,
                "frames" => s.frames = v.parse().map_err(|_| bad())?,
                "height" => s.height = v.parse().map_err(|_| bad())?,
                "width" => s.width = v.parse().map_err(|_| bad())?,
                "patch" => s.patch = v.parse().map_err(|_| bad())?,
                "min_objects" => s.min_objects = v.parse().map_err(|_| bad())?,
                "max_objects" => s.max_objects = v.parse().map_err(|_| bad())?,
                "val_frac" => s.val_frac = v.parse().map_err(|_| bad())?,
                "test_frac" => s.test_frac = v.parse().map_err(|_| bad())?,
                "twoscene_frac" => s.twoscene_frac = v.parse().map_err(|_| bad())?,
                other => return Err(Error::format(format!("unknown spec key {other:?}"))),
            }
        }
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub items: Vec<CaptionedVideo>,
    pub splits: Vec<Split>,
    pub seed: u64,
    pub spec: CorpusSpec,
    pub version: u32,
}

impl Corpus {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.splits
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn split_items(&self, split: Split) -> Vec<&CaptionedVideo> {
        self.indices(split).into_iter().map(|i| &self.items[i]).collect()
    }

    /// Hex SHA-256 of the serialized corpus.
    pub fn content_hash(&self) -> String {
        let mut buf = Vec::new();
        format::encode(self, &mut buf);
        let tail = buf.len() - format::CHECKSUM_LEN;
        crate::config::hex(&buf[tail..])
    }
}

/// SplitMix64 finaliser over (seed, index): independent per-item streams.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Every object is visible in at least half the frames it is meant to be on
/// screen for (occlusion can hide small objects).
fn visible_enough(masks: &[RegionMask], frames: usize) -> bool {
    masks.iter().all(|m| {
        let seen = (0..frames).filter(|&t| m.count_in_frame(t) > 0).count();
        2 * seen >= frames
    })
}

fn single_scene(spec: &CorpusSpec, item_seed: u64) -> Result<(SceneSpec, CaptionedVideo)> {
    for attempt in 0..1000 {
        let s = derive_seed(item_seed, attempt);
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let n = rng.gen_range(spec.min_objects..=spec.max_objects);
        let scene = SceneSpec::random(s, n, spec.frames, spec.height, spec.width)?;
        let (video, masks) = render_video(&scene);
        if !visible_enough(&masks, spec.frames) {
            continue;
        }
        let (caption, noun_spans) = caption_for(&scene);
        let item = CaptionedVideo {
            video,
            caption,
            noun_spans,
            region_masks: masks,
            scene_label: vec![0; spec.frames],
        };
        return Ok((scene, item));
    }
    Err(Error::config(
        "could not place objects without heavy occlusion; enlarge the frame",
    ))
}

/// Deterministic corpus: `size` single-scene items split train/val/test in
/// order, followed by the two-scene probe items.
pub fn generate_corpus(spec: &CorpusSpec, seed: u64) -> Result<Corpus> {
    spec.validate()?;
    let (n_train, n_val, n_test) = spec.split_sizes();
    let mut items = Vec::with_capacity(spec.size + spec.num_probes());
    let mut splits = Vec::with_capacity(items.capacity());
    for i in 0..spec.size {
        let (_, item) = single_scene(spec, derive_seed(seed, i as u64))?;
        items.push(item);
        splits.push(if i < n_train {
            Split::Train
        } else if i < n_train + n_val {
            Split::Val
        } else {
            debug_assert!(i < n_train + n_val + n_test);
            Split::Test
        });
    }
    for j in 0..spec.num_probes() {
        let base = derive_seed(seed, (spec.size + j) as u64);
        let (a, _) = single_scene(spec, derive_seed(base, 0))?;
        let (b, _) = single_scene(spec, derive_seed(base, 1))?;
        items.push(make_twoscene(&a, &b, spec.frames / 2)?);
        splits.push(Split::Probe);
    }
    Ok(Corpus {
        items,
        splits,
        seed,
        spec: spec.clone(),
        version: FORMAT_VERSION,
    })
}

/// Frames `[0, cut)` from `a`, `[cut, T)` from `b`. The caption joins both
/// scene captions with "then"; object ids of `b` follow those of `a`.
pub fn make_twoscene(a: &SceneSpec, b: &SceneSpec, cut_frame: usize) -> Result<CaptionedVideo> {
    let t_n = a.frames();
    if (a.frames(), a.height(), a.width()) != (b.frames(), b.height(), b.width()) {
        return Err(Error::arg("two-scene parts must share frames, height and width"));
    }
    if cut_frame == 0 || cut_frame >= t_n {
        return Err(Error::arg(format!(
            "cut frame {cut_frame} must lie strictly inside (0, {t_n})"
        )));
    }
    let (va, ma) = render_video(a);
    let (vb, mb) = render_video(b);
    let mut video = va;
    for t in cut_frame..t_n {
        video.frame_mut(t).copy_from_slice(vb.frame(t));
    }
    let plane = a.height() * a.width();
    let mut masks = Vec::with_capacity(ma.len() + mb.len());
    for mut m in ma {
        m.bits[cut_frame * plane..].iter_mut().for_each(|b| *b = false);
        masks.push(m);
    }
    for mut m in mb {
        m.bits[..cut_frame * plane].iter_mut().for_each(|b| *b = false);
        masks.push(m);
    }
    let (cap_a, mut spans) = caption::caption_with_offset(a, 0);
    let (cap_b, spans_b) = caption::caption_with_offset(b, a.objects().len());
    let caption = format!("{cap_a} then {cap_b}");
    let shift = cap_a.len() + " then ".len();
    spans.extend(spans_b.into_iter().map(|s| NounSpan {
        start: s.start + shift,
        end: s.end + shift,
        object: s.object,
    }));
    let scene_label = (0..t_n).map(|t| u8::from(t >= cut_frame)).collect();
    Ok(CaptionedVideo {
        video,
        caption,
        noun_spans: spans,
        region_masks: masks,
        scene_label,
    })
}
