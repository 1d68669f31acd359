//! Video and text encoders.
//!
//! The video side voxelizes a clip into `N` tokens and runs an `L`-layer
//! transformer. Grouping blocks read snapshots of the token stream after
//! selected layers and update `M` learned group tokens in a parallel branch;
//! they never write back, so the last-layer token features stay intact for
//! the temporal loss. The text side is a small transformer read out at the
//! `[CLS]` position. Both project into a shared unit-norm space.

mod layers;
mod params;
mod tokenizer;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gumbel};

pub use layers::AssignMode;
pub use params::ParamStore;
pub use tokenizer::{
    extract_nouns, fill_template, normalize_words, prompt_noun, real_len, Vocab, CLS, PAD, TEMPLATES, UNK,
};

use layers::{Block, GroupingBlock, LayerNorm, Linear};

use crate::autograd::{Graph, Scalar, Tensor, Var};
use crate::config::{ModelConfig, Patch};
use crate::error::{Error, Result};
use crate::synthcorpus::VideoTensor;

/// Voxel layout of a video: patch extent and the resulting token grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    pub patch: Patch,
    pub frames: usize,
    pub rows: usize,
    pub cols: usize,
}

impl PatchGrid {
    pub fn new(frames: usize, height: usize, width: usize, patch: Patch) -> Result<Self> {
        for (name, size, p) in [("T", frames, patch.t), ("H", height, patch.h), ("W", width, patch.w)] {
            if p == 0 || size == 0 || size % p != 0 {
                return Err(Error::config(format!(
                    "{name} = {size} is not divisible by patch size {p}"
                )));
            }
        }
        Ok(Self {
            patch,
            frames: frames / patch.t,
            rows: height / patch.h,
            cols: width / patch.w,
        })
    }

    pub fn for_model(cfg: &ModelConfig) -> Result<Self> {
        Self::new(cfg.frames, cfg.height, cfg.width, cfg.patch)
    }

    pub fn num_tokens(&self) -> usize {
        self.frames * self.rows * self.cols
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.rows * self.cols
    }

    pub fn voxel_dim(&self) -> usize {
        self.patch.t * self.patch.h * self.patch.w * 3
    }
}

/// Flattens a video into `N × voxel_dim` rows. Tokens are row-major over
/// (T', H', W'); inside a voxel the order is (t, y, x, channel).
pub fn patchify<F: Scalar>(video: &VideoTensor, grid: &PatchGrid) -> Result<Vec<F>> {
    let expect = (
        grid.frames * grid.patch.t,
        grid.rows * grid.patch.h,
        grid.cols * grid.patch.w,
    );
    if (video.frames, video.height, video.width) != expect {
        return Err(Error::arg(format!(
            "video is {}x{}x{}, encoder expects {}x{}x{}",
            video.frames, video.height, video.width, expect.0, expect.1, expect.2
        )));
    }
    let p = grid.patch;
    let mut out = Vec::with_capacity(grid.num_tokens() * grid.voxel_dim());
    for ti in 0..grid.frames {
        for yi in 0..grid.rows {
            for xi in 0..grid.cols {
                for dt in 0..p.t {
                    for dy in 0..p.h {
                        let t = ti * p.t + dt;
                        let y = yi * p.h + dy;
                        let start = ((t * video.height + y) * video.width + xi * p.w) * 3;
                        out.extend(video.data[start..start + p.w * 3].iter().map(|&v| F::cast_from(v as f64)));
                    }
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
struct Arch {
    patch_embed: Linear,
    video_pos: usize,
    video_blocks: Vec<Block>,
    video_ln: LayerNorm,
    group_tokens: usize,
    grouping: Vec<(usize, GroupingBlock)>,
    group_ln: LayerNorm,
    proj_v: Linear,
    tok_emb: usize,
    text_pos: usize,
    text_blocks: Vec<Block>,
    text_ln: LayerNorm,
    proj_t: Linear,
}

/// Encoder parameters plus the fixed architecture and vocabulary.
#[derive(Debug, Clone)]
pub struct Model<F> {
    cfg: ModelConfig,
    grid: PatchGrid,
    vocab: Vocab,
    arch: Arch,
    pub params: ParamStore<F>,
}

/// Options for one video forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncodeOptions {
    pub assign: AssignMode,
    /// Add Gumbel noise to the assignment logits.
    pub noise: bool,
}

impl EncodeOptions {
    /// Training: noisy straight-through assignment.
    pub fn train(temp: f64) -> Self {
        Self {
            assign: AssignMode { hard: true, temp },
            noise: true,
        }
    }

    /// Evaluation: noiseless argmax assignment.
    pub fn eval(temp: f64) -> Self {
        Self {
            assign: AssignMode { hard: true, temp },
            noise: false,
        }
    }
}

/// Graph handles for a batch of encoded videos.
#[derive(Debug, Clone)]
pub struct VideoVars {
    /// `[B, N, d]` last-layer tokens after the final norm.
    pub z_v: Var,
    /// `[B, M, d]` final group tokens.
    pub groups: Var,
    /// `[B, M, d_c]` unit-norm projected group tokens.
    pub group_embed: Var,
    /// `[B, d_c]` unit-norm video embedding.
    pub f_v: Var,
    /// Per grouping block, the argmax group of every token, `B·N` entries.
    pub assignments: Vec<Vec<usize>>,
}

/// Final group tokens and the last block's hard assignment for one video.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupState {
    pub m: usize,
    pub dim: usize,
    pub tokens: Vec<f64>,
    pub assignment: Vec<usize>,
}

impl GroupState {
    pub fn population(&self) -> Vec<usize> {
        let mut c = vec![0; self.m];
        for &a in &self.assignment {
            c[a] += 1;
        }
        c
    }
}

/// Encoder outputs for one video and, when requested, its caption and nouns.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub z_v: Vec<f64>,
    pub groups: GroupState,
    /// `M × d_c` unit-norm projected group tokens.
    pub group_embed: Vec<f64>,
    pub f_v: Vec<f64>,
    pub f_c: Option<Vec<f64>>,
    pub nouns: Vec<Vec<f64>>,
    /// Assignments from every grouping block in order.
    pub block_assignments: Vec<Vec<usize>>,
}

impl<F: Scalar> Model<F> {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let grid = PatchGrid::for_model(cfg)?;
        let vocab = Vocab::standard(cfg.text_max_len);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let (d, std, r) = (cfg.dim, cfg.init_std, cfg.mlp_ratio);
        let n = grid.num_tokens();
        let patch_embed = Linear::new(&mut p, "video.patch_embed", grid.voxel_dim(), d, true, std, &mut rng);
        let video_pos = p.normal("video.pos", &[n, d], std, &mut rng);
        let video_blocks = (0..cfg.layers)
            .map(|l| Block::new(&mut p, &format!("video.block{l}"), d, cfg.heads, r, std, &mut rng))
            .collect();
        let video_ln = LayerNorm::new(&mut p, "video.ln", d);
        let group_tokens = p.normal("group.tokens", &[cfg.groups_m, d], std, &mut rng);
        let mut layers = cfg.grouping_layers.clone();
        layers.sort_unstable();
        let grouping = layers
            .iter()
            .enumerate()
            .map(|(i, &l)| (l, GroupingBlock::new(&mut p, &format!("group.block{i}"), d, r, std, &mut rng)))
            .collect();
        let group_ln = LayerNorm::new(&mut p, "group.ln", d);
        let proj_v = Linear::new(&mut p, "video.proj", d, cfg.common_dim, false, std, &mut rng);
        let tok_emb = p.normal("text.tok_emb", &[vocab.len(), d], std, &mut rng);
        let text_pos = p.normal("text.pos", &[cfg.text_max_len, d], std, &mut rng);
        let text_blocks = (0..cfg.text_layers)
            .map(|l| Block::new(&mut p, &format!("text.block{l}"), d, cfg.heads, r, std, &mut rng))
            .collect();
        let text_ln = LayerNorm::new(&mut p, "text.ln", d);
        let proj_t = Linear::new(&mut p, "text.proj", d, cfg.common_dim, false, std, &mut rng);
        Ok(Self {
            cfg: cfg.clone(),
            grid,
            vocab,
            arch: Arch {
                patch_embed,
                video_pos,
                video_blocks,
                video_ln,
                group_tokens,
                grouping,
                group_ln,
                proj_v,
                tok_emb,
                text_pos,
                text_blocks,
                text_ln,
                proj_t,
            },
            params: p,
        })
    }

    /// Rebuilds a model around existing parameters, checking names and shapes.
    pub fn from_params(cfg: &ModelConfig, params: ParamStore<F>) -> Result<Self> {
        let mut m = Self::new(cfg, 0)?;
        if m.params.len() != params.len() {
            return Err(Error::format(format!(
                "expected {} parameter tensors, found {}",
                m.params.len(),
                params.len()
            )));
        }
        for ((na, ta), (nb, tb)) in m.params.iter().zip(params.iter()) {
            if na != nb || ta.shape() != tb.shape() {
                return Err(Error::format(format!(
                    "parameter {nb} {:?} does not match expected {na} {:?}",
                    tb.shape(),
                    ta.shape()
                )));
            }
        }
        m.params = params;
        Ok(m)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn grid(&self) -> &PatchGrid {
        &self.grid
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    /// Index of the shared group-token parameter in [`Model::params`].
    pub fn group_token_param(&self) -> usize {
        self.arch.group_tokens
    }

    pub fn cast<G: Scalar>(&self) -> Model<G> {
        Model {
            cfg: self.cfg.clone(),
            grid: self.grid,
            vocab: self.vocab.clone(),
            arch: self.arch.clone(),
            params: self.params.cast(),
        }
    }

    /// Voxel embedding plus positional embedding, `[B, N, d]`.
    pub fn patchify_embed(&self, g: &mut Graph<F>, v: &[Var], videos: &[&VideoTensor]) -> Result<Var> {
        let n = self.grid.num_tokens();
        let vd = self.grid.voxel_dim();
        let mut raw = Vec::with_capacity(videos.len() * n * vd);
        for vid in videos {
            raw.extend(patchify::<F>(vid, &self.grid)?);
        }
        let x = g.constant(Tensor::new(&[videos.len() * n, vd], raw));
        let x = self.arch.patch_embed.forward(g, v, x);
        let x = g.add_bcast(x, v[self.arch.video_pos]);
        Ok(g.reshape(x, &[videos.len(), n, self.cfg.dim]))
    }

    /// Runs the token stream only and returns the raw output of every layer
    /// (index `l` is the output of layer `l + 1`), each `[B·N, d]`.
    fn video_stream(&self, g: &mut Graph<F>, v: &[Var], videos: &[&VideoTensor]) -> Result<Vec<Var>> {
        let b = videos.len();
        let n = self.grid.num_tokens();
        let x = self.patchify_embed(g, v, videos)?;
        let mut x = g.reshape(x, &[b * n, self.cfg.dim]);
        let seqs: Vec<(usize, usize)> = (0..b).map(|i| (i * n, n)).collect();
        let mut outs = Vec::with_capacity(self.arch.video_blocks.len());
        for blk in &self.arch.video_blocks {
            x = blk.forward(g, v, x, &seqs);
            outs.push(x);
        }
        Ok(outs)
    }

    /// Last-layer video tokens `[B, N, d]` without running the grouping branch.
    pub fn video_tokens(&self, g: &mut Graph<F>, v: &[Var], videos: &[&VideoTensor]) -> Result<Var> {
        let outs = self.video_stream(g, v, videos)?;
        let last = *outs.last().expect("at least one layer");
        let z = self.arch.video_ln.forward(g, v, last);
        Ok(g.reshape(z, &[videos.len(), self.grid.num_tokens(), self.cfg.dim]))
    }

    pub fn video_forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<F>,
        v: &[Var],
        videos: &[&VideoTensor],
        opts: EncodeOptions,
        rng: &mut R,
    ) -> Result<VideoVars> {
        if videos.is_empty() {
            return Err(Error::arg("no videos to encode"));
        }
        let (b, n, d, m) = (videos.len(), self.grid.num_tokens(), self.cfg.dim, self.cfg.groups_m);
        let outs = self.video_stream(g, v, videos)?;
        let last = *outs.last().expect("at least one layer");
        let z = self.arch.video_ln.forward(g, v, last);
        let z_v = g.reshape(z, &[b, n, d]);

        let ids: Vec<usize> = (0..b).flat_map(|_| 0..m).collect();
        let groups = g.gather_rows(v[self.arch.group_tokens], &ids);
        let mut groups = g.reshape(groups, &[b, m, d]);
        let gumbel = Gumbel::new(0.0, 1.0).expect("unit Gumbel");
        let mut assignments = Vec::with_capacity(self.arch.grouping.len());
        for (layer, blk) in &self.arch.grouping {
            let snap = g.reshape(outs[layer - 1], &[b, n, d]);
            let noise = opts
                .noise
                .then(|| (0..b * n * m).map(|_| F::cast_from(gumbel.sample(rng))).collect());
            let (next, assign) = blk.forward(g, v, groups, snap, opts.assign, noise);
            groups = next;
            assignments.push(assign);
        }
        let gl = self.arch.group_ln.forward(g, v, groups);
        let proj = self.arch.proj_v.forward(g, v, gl);
        let flat = g.reshape(proj, &[b * m, self.cfg.common_dim]);
        let pooled_idx: Vec<Vec<usize>> = (0..b).map(|i| (i * m..(i + 1) * m).collect()).collect();
        let pooled = g.row_mean(flat, pooled_idx, &[b, self.cfg.common_dim]);
        let f_v = g.l2_normalize(pooled);
        let ge = g.l2_normalize(proj);
        Ok(VideoVars {
            z_v,
            groups,
            group_embed: ge,
            f_v,
            assignments,
        })
    }

    /// Unit-norm `[S, d_c]` embeddings of token-id sequences. Only the ids
    /// before the first `[PAD]` take part in attention.
    pub fn text_forward(&self, g: &mut Graph<F>, v: &[Var], seqs: &[Vec<usize>]) -> Result<Var> {
        if seqs.is_empty() {
            return Err(Error::arg("no text to encode"));
        }
        let mut ids = Vec::new();
        let mut pos = Vec::new();
        let mut spans = Vec::with_capacity(seqs.len());
        for s in seqs {
            if s.first() != Some(&CLS) {
                return Err(Error::arg("token sequence must start with [CLS]"));
            }
            let len = real_len(s).min(self.cfg.text_max_len);
            if s[..len].iter().any(|&i| i >= self.vocab.len()) {
                return Err(Error::arg("token id outside vocabulary"));
            }
            spans.push((ids.len(), len));
            ids.extend_from_slice(&s[..len]);
            pos.extend(0..len);
        }
        let e = g.gather_rows(v[self.arch.tok_emb], &ids);
        let p = g.gather_rows(v[self.arch.text_pos], &pos);
        let mut x = g.add(e, p);
        for blk in &self.arch.text_blocks {
            x = blk.forward(g, v, x, &spans);
        }
        let cls: Vec<Vec<usize>> = spans.iter().map(|&(s, _)| vec![s]).collect();
        let cls = g.row_mean(x, cls, &[seqs.len(), self.cfg.dim]);
        let cls = self.arch.text_ln.forward(g, v, cls);
        let f = self.arch.proj_t.forward(g, v, cls);
        Ok(g.l2_normalize(f))
    }

    /// Inference for a batch of videos.
    pub fn encode_videos<R: Rng + ?Sized>(
        &self,
        videos: &[&VideoTensor],
        opts: EncodeOptions,
        rng: &mut R,
    ) -> Result<Vec<EncoderOutput>> {
        let mut g = Graph::new();
        let v = self.params.bind(&mut g, false);
        let out = self.video_forward(&mut g, &v, videos, opts, rng)?;
        let (n, d, m, dc) = (self.grid.num_tokens(), self.cfg.dim, self.cfg.groups_m, self.cfg.common_dim);
        let z = g.value(out.z_v).to_f64_vec();
        let gt = g.value(out.groups).to_f64_vec();
        let ge = g.value(out.group_embed).to_f64_vec();
        let fv = g.value(out.f_v).to_f64_vec();
        Ok((0..videos.len())
            .map(|i| EncoderOutput {
                z_v: z[i * n * d..(i + 1) * n * d].to_vec(),
                groups: GroupState {
                    m,
                    dim: d,
                    tokens: gt[i * m * d..(i + 1) * m * d].to_vec(),
                    assignment: out.assignments.last().expect("grouping block")[i * n..(i + 1) * n].to_vec(),
                },
                group_embed: ge[i * m * dc..(i + 1) * m * dc].to_vec(),
                f_v: fv[i * dc..(i + 1) * dc].to_vec(),
                f_c: None,
                nouns: Vec::new(),
                block_assignments: out.assignments.iter().map(|a| a[i * n..(i + 1) * n].to_vec()).collect(),
            })
            .collect())
    }

    pub fn encode_video<R: Rng + ?Sized>(
        &self,
        video: &VideoTensor,
        opts: EncodeOptions,
        rng: &mut R,
    ) -> Result<EncoderOutput> {
        Ok(self.encode_videos(&[video], opts, rng)?.remove(0))
    }

    /// Unit-norm common-space embeddings of token-id sequences.
    pub fn encode_texts(&self, seqs: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let v = self.params.bind(&mut g, false);
        let f = self.text_forward(&mut g, &v, seqs)?;
        let dc = self.cfg.common_dim;
        Ok(g.value(f).to_f64_vec().chunks(dc).map(<[f64]>::to_vec).collect())
    }

    pub fn encode_text(&self, ids: &[usize]) -> Result<Vec<f64>> {
        Ok(self.encode_texts(&[ids.to_vec()])?.remove(0))
    }

    /// Video, caption and prompted-noun embeddings for one corpus item.
    pub fn encode_item<R: Rng + ?Sized>(
        &self,
        item: &crate::synthcorpus::CaptionedVideo,
        opts: EncodeOptions,
        rng: &mut R,
    ) -> Result<EncoderOutput> {
        let mut out = self.encode_video(&item.video, opts, rng)?;
        let mut seqs = vec![self.vocab.tokenize(&item.caption)];
        for noun in extract_nouns(item, self.cfg.nouns_k)? {
            seqs.push(self.vocab.tokenize(&prompt_noun(&noun, rng)));
        }
        let mut emb = self.encode_texts(&seqs)?;
        out.nouns = emb.split_off(1);
        out.f_c = emb.pop();
        Ok(out)
    }
}
