//! Retrieval, temporal and grounding diagnostics on a trained model, plus
//! the files they are reported in.
//!
//! Every function here takes the model by shared reference; evaluation runs
//! with hard, noiseless assignments and never touches the parameters.

mod report;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Scalar;
use crate::encoders::{fill_template, EncodeOptions, Model, PatchGrid, TEMPLATES};
use crate::error::{Error, Result};
use crate::synthcorpus::{CaptionedVideo, Corpus, RegionMask, Split};

pub use report::{
    loss_curve_png, read_summary, render_heatmap, render_overlay, write_png, write_summary, Summary, SUMMARY_FILE,
};

/// Videos per forward pass during evaluation.
const EVAL_CHUNK: usize = 32;
/// Label permutations averaged into the grounding null rate.
const NULL_PERMUTATIONS: usize = 50;
const NULL_SEED: u64 = 0x6e75_6c6c;

/// Dense row-major matrix of cosine similarities with item ids per axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
    pub row_ids: Vec<usize>,
    pub col_ids: Vec<usize>,
}

impl SimilarityMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::arg(format!("{} entries for a {rows}x{cols} matrix", data.len())));
        }
        if let Some(x) = data.iter().find(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("similarity entry {x}")));
        }
        Ok(Self {
            rows,
            cols,
            data,
            row_ids: (0..rows).collect(),
            col_ids: (0..cols).collect(),
        })
    }

    /// Cosines between unit vectors, clamped to `[-1, 1]`.
    pub fn from_unit_vectors(rows: &[Vec<f64>], cols: &[Vec<f64>]) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * cols.len());
        for r in rows {
            for c in cols {
                if r.len() != c.len() {
                    return Err(Error::arg("embedding dimensions differ"));
                }
                let d: f64 = r.iter().zip(c).map(|(a, b)| a * b).sum();
                data.push(d.clamp(-1.0, 1.0));
            }
        }
        Self::new(rows.len(), cols.len(), data)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn with_ids(mut self, row_ids: Vec<usize>, col_ids: Vec<usize>) -> Result<Self> {
        if row_ids.len() != self.rows || col_ids.len() != self.cols {
            return Err(Error::arg("one id per row and column required"));
        }
        self.row_ids = row_ids;
        self.col_ids = col_ids;
        Ok(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub direction: String,
    pub pool: usize,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub medr: f64,
}

/// 1-based rank of video `truth` for caption column `c`. Videos with a
/// higher score rank first; equal scores go to the lower index.
pub fn true_rank(sim: &SimilarityMatrix, c: usize, truth: usize) -> usize {
    let s = sim.get(truth, c);
    1 + (0..sim.rows)
        .filter(|&v| {
            let o = sim.get(v, c);
            o > s || (o == s && v < truth)
        })
        .count()
}

fn median(xs: &mut [usize]) -> f64 {
    xs.sort_unstable();
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2] as f64
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) as f64 / 2.0
    }
}

/// Text-to-video retrieval over a videos × captions matrix whose diagonal
/// holds the true pairs.
pub fn retrieval_metrics(sim: &SimilarityMatrix) -> Result<RetrievalReport> {
    if sim.rows != sim.cols {
        return Err(Error::arg(format!(
            "retrieval needs a square matrix, got {}x{}",
            sim.rows, sim.cols
        )));
    }
    if sim.rows == 0 {
        return Err(Error::arg("empty retrieval pool"));
    }
    let n = sim.rows;
    let mut ranks: Vec<usize> = (0..n).map(|c| true_rank(sim, c, c)).collect();
    let recall = |k: usize| 100.0 * ranks.iter().filter(|&&r| r <= k).count() as f64 / n as f64;
    let (r1, r5, r10) = (recall(1), recall(5), recall(10));
    Ok(RetrievalReport {
        direction: "text_to_video".into(),
        pool: n,
        r1,
        r5,
        r10,
        medr: median(&mut ranks),
    })
}

fn eval_opts<F: Scalar>(model: &Model<F>) -> EncodeOptions {
    EncodeOptions::eval(model.config().gumbel_temp)
}

/// Video and caption embeddings of `items` and their similarity matrix.
pub fn similarity_for<F: Scalar>(model: &Model<F>, items: &[&CaptionedVideo]) -> Result<SimilarityMatrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut f_v = Vec::with_capacity(items.len());
    for chunk in items.chunks(EVAL_CHUNK) {
        let videos: Vec<_> = chunk.iter().map(|i| &i.video).collect();
        f_v.extend(model.encode_videos(&videos, eval_opts(model), &mut rng)?.into_iter().map(|o| o.f_v));
    }
    let vocab = model.vocab();
    let seqs: Vec<_> = items.iter().map(|i| vocab.tokenize(&i.caption)).collect();
    let f_c = model.encode_texts(&seqs)?;
    SimilarityMatrix::from_unit_vectors(&f_v, &f_c)
}

/// Retrieval over one split of a corpus.
pub fn evaluate_retrieval<F: Scalar>(
    model: &Model<F>,
    corpus: &Corpus,
    split: Split,
) -> Result<(SimilarityMatrix, RetrievalReport)> {
    let ids = corpus.indices(split);
    let items: Vec<_> = ids.iter().map(|&i| &corpus.items[i]).collect();
    let sim = similarity_for(model, &items)?.with_ids(ids.clone(), ids)?;
    let rep = retrieval_metrics(&sim)?;
    Ok((sim, rep))
}

/// Cosines between unit-normalized spatial means of the output tokens at
/// each temporal grid index.
pub fn frame_similarity_matrix<F: Scalar>(item: &CaptionedVideo, model: &Model<F>) -> Result<SimilarityMatrix> {
    let out = model.encode_video(&item.video, eval_opts(model), &mut ChaCha8Rng::seed_from_u64(0))?;
    frame_similarity_from_tokens(&out.z_v, model.grid(), model.config().dim)
}

pub fn frame_similarity_from_tokens(z_v: &[f64], grid: &PatchGrid, dim: usize) -> Result<SimilarityMatrix> {
    if z_v.len() != grid.num_tokens() * dim {
        return Err(Error::arg("token buffer does not match the grid"));
    }
    let per = grid.tokens_per_frame();
    let rows: Vec<Vec<f64>> = (0..grid.frames)
        .map(|t| {
            let mut m = vec![0.0; dim];
            for tok in z_v[t * per * dim..(t + 1) * per * dim].chunks(dim) {
                m.iter_mut().zip(tok).for_each(|(a, &x)| *a += x);
            }
            let norm = m.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            m.iter().map(|x| x / norm).collect()
        })
        .collect();
    SimilarityMatrix::from_unit_vectors(&rows, &rows)
}

/// Scene id of each temporal grid index: the label of its first frame.
pub fn row_labels(scene_label: &[u8], grid: &PatchGrid) -> Result<Vec<u8>> {
    if scene_label.len() != grid.frames * grid.patch.t {
        return Err(Error::arg(format!(
            "{} frame labels for {} frames",
            scene_label.len(),
            grid.frames * grid.patch.t
        )));
    }
    Ok((0..grid.frames).map(|t| scene_label[t * grid.patch.t]).collect())
}

/// Mean within-scene minus mean cross-scene similarity over off-diagonal
/// entries.
pub fn boundary_gap(m: &SimilarityMatrix, labels: &[u8]) -> Result<f64> {
    if m.rows != m.cols || labels.len() != m.rows {
        return Err(Error::arg("square matrix with one label per row required"));
    }
    let mut scenes = labels.to_vec();
    scenes.sort_unstable();
    scenes.dedup();
    if scenes.len() != 2 {
        return Err(Error::arg(format!("boundary gap needs exactly 2 scenes, found {}", scenes.len())));
    }
    let (mut within, mut nw, mut cross, mut nc) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..m.rows {
        for j in 0..m.cols {
            if i == j {
                continue;
            }
            if labels[i] == labels[j] {
                within += m.get(i, j);
                nw += 1;
            } else {
                cross += m.get(i, j);
                nc += 1;
            }
        }
    }
    if nw == 0 {
        return Err(Error::arg("each scene needs at least two temporal rows"));
    }
    Ok(within / nw as f64 - cross / nc as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalReport {
    pub items: Vec<usize>,
    pub gaps: Vec<f64>,
    pub mean_gap: f64,
}

/// Boundary gaps of every two-scene probe item.
pub fn evaluate_temporal<F: Scalar>(
    model: &Model<F>,
    corpus: &Corpus,
) -> Result<(Vec<SimilarityMatrix>, TemporalReport)> {
    let ids = corpus.indices(Split::Probe);
    if ids.is_empty() {
        return Err(Error::arg("corpus has no two-scene probe items"));
    }
    let mut mats = Vec::with_capacity(ids.len());
    let mut gaps = Vec::with_capacity(ids.len());
    for &i in &ids {
        let item = &corpus.items[i];
        let m = frame_similarity_matrix(item, model)?;
        gaps.push(boundary_gap(&m, &row_labels(&item.scene_label, model.grid())?)?);
        mats.push(m);
    }
    let mean_gap = gaps.iter().sum::<f64>() / gaps.len() as f64;
    Ok((
        mats,
        TemporalReport {
            items: ids,
            gaps,
            mean_gap,
        },
    ))
}

/// Voxels whose pixel block contains at least one pixel of `mask`.
pub fn voxel_overlap(mask: &RegionMask, grid: &PatchGrid) -> Result<Vec<bool>> {
    let p = grid.patch;
    if (mask.frames, mask.height, mask.width) != (grid.frames * p.t, grid.rows * p.h, grid.cols * p.w) {
        return Err(Error::arg("region mask does not match the patch grid"));
    }
    let mut hit = vec![false; grid.num_tokens()];
    for t in 0..mask.frames {
        for y in 0..mask.height {
            for x in 0..mask.width {
                if mask.bits[(t * mask.height + y) * mask.width + x] {
                    hit[((t / p.t) * grid.rows + y / p.h) * grid.cols + x / p.w] = true;
                }
            }
        }
    }
    Ok(hit)
}

/// True when more than half of `voxels` overlap the object.
pub fn majority_overlap(voxels: &[usize], overlap: &[bool]) -> bool {
    let inside = voxels.iter().filter(|&&v| overlap[v]).count();
    2 * inside > voxels.len()
}

/// One caption noun matched to a group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingPair {
    pub item: usize,
    pub object: usize,
    pub group: usize,
    pub voxels: Vec<usize>,
    pub hit: bool,
}

/// Picks the group whose embedding has the largest cosine with each noun
/// (ties to the lower index) and scores its final-block voxels against
/// the noun's object mask. Returns the pairs and the per-pair overlap
/// vectors.
pub fn ground_item(
    item_id: usize,
    item: &CaptionedVideo,
    grid: &PatchGrid,
    group_embed: &[f64],
    assignment: &[usize],
    nouns: &[Vec<f64>],
) -> Result<(Vec<GroundingPair>, Vec<Vec<bool>>)> {
    if nouns.len() != item.noun_spans.len() {
        return Err(Error::arg("one noun embedding per noun span required"));
    }
    if assignment.len() != grid.num_tokens() {
        return Err(Error::arg("one assignment per voxel required"));
    }
    let mut pairs = Vec::new();
    let mut overlaps = Vec::new();
    for (span, noun) in item.noun_spans.iter().zip(nouns) {
        let dc = noun.len();
        if dc == 0 || group_embed.len() % dc != 0 {
            return Err(Error::arg("group embeddings do not match the noun dimension"));
        }
        let mut best = (0, f64::NEG_INFINITY);
        for (gi, ge) in group_embed.chunks(dc).enumerate() {
            let s: f64 = ge.iter().zip(noun).map(|(a, b)| a * b).sum();
            if s > best.1 {
                best = (gi, s);
            }
        }
        let mask = item
            .region_masks
            .get(span.object)
            .ok_or_else(|| Error::arg(format!("no region mask for object {}", span.object)))?;
        let overlap = voxel_overlap(mask, grid)?;
        let voxels: Vec<usize> = (0..assignment.len()).filter(|&v| assignment[v] == best.0).collect();
        pairs.push(GroundingPair {
            item: item_id,
            object: span.object,
            group: best.0,
            hit: majority_overlap(&voxels, &overlap),
            voxels,
        });
        overlaps.push(overlap);
    }
    Ok((pairs, overlaps))
}

/// Mean hit rate when each pair's voxels are scored against the object
/// mask of a randomly permuted pair.
pub fn permutation_null(pairs: &[GroundingPair], overlaps: &[Vec<bool>], permutations: usize, seed: u64) -> f64 {
    if pairs.is_empty() || permutations == 0 {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..pairs.len()).collect();
    let mut hits = 0usize;
    for _ in 0..permutations {
        perm.shuffle(&mut rng);
        hits += pairs
            .iter()
            .zip(&perm)
            .filter(|(p, &j)| majority_overlap(&p.voxels, &overlaps[j]))
            .count();
    }
    hits as f64 / (pairs.len() * permutations) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingReport {
    /// Majority-voxel-overlap accuracy; 1.0 when there are no pairs.
    pub accuracy: f64,
    pub null_rate: f64,
    pub pairs: usize,
    pub criterion: String,
}

/// Noun embeddings averaged over every prompt template.
pub fn noun_embeddings<F: Scalar>(model: &Model<F>, nouns: &[&str]) -> Result<Vec<Vec<f64>>> {
    let vocab = model.vocab();
    let seqs: Vec<_> = nouns
        .iter()
        .flat_map(|n| (0..TEMPLATES.len()).map(move |t| vocab.tokenize(&fill_template(t, n))))
        .collect();
    let emb = model.encode_texts(&seqs)?;
    Ok(emb
        .chunks(TEMPLATES.len())
        .map(|c| {
            let mut m = vec![0.0; c[0].len()];
            for e in c {
                m.iter_mut().zip(e).for_each(|(a, &x)| *a += x);
            }
            let norm = m.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            m.iter().map(|x| x / norm).collect()
        })
        .collect())
}

/// Grounding pairs of `ids` and their overlap vectors.
pub fn grounding_pairs<F: Scalar>(
    model: &Model<F>,
    corpus: &Corpus,
    ids: &[usize],
) -> Result<(Vec<GroundingPair>, Vec<Vec<bool>>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut pairs = Vec::new();
    let mut overlaps = Vec::new();
    for chunk in ids.chunks(EVAL_CHUNK) {
        let videos: Vec<_> = chunk.iter().map(|&i| &corpus.items[i].video).collect();
        let outs = model.encode_videos(&videos, eval_opts(model), &mut rng)?;
        for (&i, out) in chunk.iter().zip(outs) {
            let item = &corpus.items[i];
            if item.noun_spans.is_empty() {
                continue;
            }
            let nouns = noun_embeddings(model, &item.nouns())?;
            let last = out
                .block_assignments
                .last()
                .ok_or_else(|| Error::arg("model has no grouping block"))?;
            let (p, o) = ground_item(i, item, model.grid(), &out.group_embed, last, &nouns)?;
            pairs.extend(p);
            overlaps.extend(o);
        }
    }
    Ok((pairs, overlaps))
}

pub fn grounding_accuracy<F: Scalar>(model: &Model<F>, corpus: &Corpus, ids: &[usize]) -> Result<GroundingReport> {
    let (pairs, overlaps) = grounding_pairs(model, corpus, ids)?;
    Ok(grounding_report(&pairs, &overlaps))
}

pub fn grounding_report(pairs: &[GroundingPair], overlaps: &[Vec<bool>]) -> GroundingReport {
    let accuracy = if pairs.is_empty() {
        1.0
    } else {
        pairs.iter().filter(|p| p.hit).count() as f64 / pairs.len() as f64
    };
    GroundingReport {
        accuracy,
        null_rate: permutation_null(pairs, overlaps, NULL_PERMUTATIONS, NULL_SEED),
        pairs: pairs.len(),
        criterion: "majority-voxel-overlap".into(),
    }
}

#[cfg(test)]
mod tests;
