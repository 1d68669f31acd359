//! Training objectives.
//!
//! Plain `f64` versions of every loss live here and serve evaluation and
//! testing; [`graph`] builds the same quantities on the autodiff tape for
//! training.

pub mod graph;

use crate::augment::{ClipMask, WeightMatrix};
use crate::config::LossConfig;
use crate::encoders::PatchGrid;
use crate::error::{Error, Result};

/// Weights of the temporal, grounding and contrastive terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub temporal: f64,
    pub grounding: f64,
    pub contrastive: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            temporal: 1.0,
            grounding: 1.0,
            contrastive: 1.0,
        }
    }
}

impl From<&LossConfig> for LossWeights {
    fn from(c: &LossConfig) -> Self {
        Self {
            temporal: c.w_temporal,
            grounding: c.w_grounding,
            contrastive: c.w_contrastive,
        }
    }
}

/// The three loss components of one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub temporal: f64,
    pub grounding: f64,
    pub contrastive: f64,
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::arg(format!("temperature must be positive, got {tau}")))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `exp(x_i/τ) / Σ_j exp(x_j/τ)` with max subtraction.
pub fn scaled_softmax(x: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_tau(tau)?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("softmax input is not finite".into()));
    }
    let mx = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|&v| ((v - mx) / tau).exp()).collect();
    let s: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / s).collect())
}

/// `log σ(x/τ)` in log-sum-exp form.
pub fn scaled_log_softmax(x: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_tau(tau)?;
    let mx = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx / tau + x.iter().map(|&v| ((v - mx) / tau).exp()).sum::<f64>().ln();
    Ok(x.iter().map(|&v| v / tau - lse).collect())
}

/// Noun-to-group grounding score of one video–caption pair. `groups` is
/// `M × dim` and `nouns` is `K × dim`, all rows unit-norm. Each noun attends
/// over the groups with a τ-scaled softmax; the score is the mean cosine
/// between each noun and its attended group mixture.
pub fn grounding_similarity(groups: &[f64], nouns: &[f64], dim: usize, tau: f64) -> Result<f64> {
    if dim == 0 || groups.len() % dim != 0 || nouns.len() % dim != 0 || groups.is_empty() {
        return Err(Error::arg("group and noun buffers must be non-empty multiples of dim"));
    }
    let k = nouns.len() / dim;
    if k == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for n in nouns.chunks(dim) {
        let sims: Vec<f64> = groups.chunks(dim).map(|g| dot(g, n)).collect();
        let w = scaled_softmax(&sims, tau)?;
        let mut agg = vec![0.0; dim];
        for (wm, g) in w.iter().zip(groups.chunks(dim)) {
            for (a, &x) in agg.iter_mut().zip(g) {
                *a += wm * x;
            }
        }
        let na = norm(&agg);
        let nn = norm(n);
        if na > 1e-12 && nn > 1e-12 {
            total += dot(&agg, n) / (na * nn);
        }
    }
    Ok(total / k as f64)
}

/// `G[i][j] = G(v_i, c_j)` for every video and caption in a batch, row-major.
pub fn grounding_matrix(groups: &[Vec<f64>], nouns: &[Vec<f64>], dim: usize, tau: f64) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(groups.len() * nouns.len());
    for g in groups {
        for n in nouns {
            out.push(grounding_similarity(g, n, dim, tau)?);
        }
    }
    Ok(out)
}

/// `(v→c, c→v)` soft-target cross-entropies of a `B × B` similarity matrix:
/// rows are softmaxed over captions against `wv`, columns over videos against
/// `wc`.
pub fn weighted_cross_entropy(sim: &[f64], wv: &WeightMatrix, wc: &WeightMatrix, tau: f64) -> Result<(f64, f64)> {
    let b = wv.n;
    if sim.len() != b * b || wc.n != b {
        return Err(Error::arg("similarity and weight matrices must be B x B"));
    }
    if sim.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("similarity matrix is not finite".into()));
    }
    let mut v2c = 0.0;
    let mut c2v = 0.0;
    for i in 0..b {
        let row = &sim[i * b..(i + 1) * b];
        let ls = scaled_log_softmax(row, tau)?;
        v2c -= dot(wv.row(i), &ls);
        let col: Vec<f64> = (0..b).map(|r| sim[r * b + i]).collect();
        let ls = scaled_log_softmax(&col, tau)?;
        c2v -= dot(wc.row(i), &ls);
    }
    Ok((v2c / b as f64, c2v / b as f64))
}

/// Sum of both directions of the weighted grounding loss.
pub fn grounding_loss(g_matrix: &[f64], wv: &WeightMatrix, wc: &WeightMatrix, tau: f64) -> Result<f64> {
    let (a, b) = weighted_cross_entropy(g_matrix, wv, wc, tau)?;
    Ok(a + b)
}

/// Sum of both directions of the weighted global contrastive loss.
pub fn global_contrastive_loss(
    f_v: &[Vec<f64>],
    f_c: &[Vec<f64>],
    wv: &WeightMatrix,
    wc: &WeightMatrix,
    tau: f64,
) -> Result<f64> {
    if f_v.len() != f_c.len() {
        return Err(Error::arg("one caption per video required"));
    }
    let sim: Vec<f64> = f_v
        .iter()
        .flat_map(|v| f_c.iter().map(move |c| dot(v, c)))
        .collect();
    let (a, b) = weighted_cross_entropy(&sim, wv, wc, tau)?;
    Ok(a + b)
}

/// Token-row groups that make up each clip: clip `c` owns every spatial
/// position of the temporal token rows covering its frames.
pub fn clip_token_groups(grid: &PatchGrid, clip_len: usize) -> Result<Vec<Vec<usize>>> {
    let pt = grid.patch.t;
    let frames = grid.frames * pt;
    if clip_len == 0 || clip_len % pt != 0 || frames % clip_len != 0 {
        return Err(Error::config(format!(
            "clip length {clip_len} must be a multiple of the temporal patch {pt} and divide {frames} frames"
        )));
    }
    let rows_per_clip = clip_len / pt;
    let per_row = grid.tokens_per_frame();
    Ok((0..frames / clip_len)
        .map(|c| (c * rows_per_clip * per_row..(c + 1) * rows_per_clip * per_row).collect())
        .collect())
}

/// Spatially and then temporally averaged clip features, `N_t × dim`.
pub fn clip_pool(z_v: &[f64], grid: &PatchGrid, dim: usize, clip_len: usize) -> Result<Vec<f64>> {
    if z_v.len() != grid.num_tokens() * dim {
        return Err(Error::arg("token buffer does not match the grid"));
    }
    let groups = clip_token_groups(grid, clip_len)?;
    let per_row = grid.tokens_per_frame();
    let rows_per_clip = clip_len / grid.patch.t;
    let mut out = Vec::with_capacity(groups.len() * dim);
    for c in 0..groups.len() {
        let mut clip = vec![0.0; dim];
        for r in 0..rows_per_clip {
            let tr = c * rows_per_clip + r;
            let mut spatial = vec![0.0; dim];
            for p in 0..per_row {
                let tok = &z_v[(tr * per_row + p) * dim..(tr * per_row + p + 1) * dim];
                spatial.iter_mut().zip(tok).for_each(|(s, &x)| *s += x);
            }
            clip.iter_mut()
                .zip(&spatial)
                .for_each(|(c, &s)| *c += s / per_row as f64);
        }
        out.extend(clip.into_iter().map(|x| x / rows_per_clip as f64));
    }
    Ok(out)
}

/// Soft (background, foreground) assignment of each clip to the two mask
/// centres, without temperature.
pub fn temporal_assignment(z_clip: &[f64], dim: usize, mask: &ClipMask) -> Result<Vec<[f64; 2]>> {
    let nt = mask.len();
    if z_clip.len() != nt * dim {
        return Err(Error::arg("clip features and mask disagree on N_t"));
    }
    if !mask.has_both_classes() {
        return Err(Error::arg("mask must contain both background and foreground clips"));
    }
    let mut zb = vec![0.0; dim];
    let mut zf = vec![0.0; dim];
    let nf = mask.count_foreground() as f64;
    let nb = nt as f64 - nf;
    for (row, &fg) in z_clip.chunks(dim).zip(&mask.0) {
        let (acc, n) = if fg { (&mut zf, nf) } else { (&mut zb, nb) };
        acc.iter_mut().zip(row).for_each(|(a, &x)| *a += x / n);
    }
    z_clip
        .chunks(dim)
        .map(|row| {
            let p = scaled_softmax(&[dot(row, &zb), dot(row, &zf)], 1.0)?;
            Ok([p[0], p[1]])
        })
        .collect()
}

/// Mean over the batch of each item's mean squared error against the one-hot
/// mask targets (background → (1, 0), foreground → (0, 1)).
pub fn temporal_grouping_loss(a: &[Vec<[f64; 2]>], masks: &[ClipMask]) -> Result<f64> {
    if a.len() != masks.len() || a.is_empty() {
        return Err(Error::arg("one assignment per mask required"));
    }
    let mut total = 0.0;
    for (ai, m) in a.iter().zip(masks) {
        if ai.len() != m.len() {
            return Err(Error::arg("assignment and mask lengths differ"));
        }
        let mut se = 0.0;
        for (row, &fg) in ai.iter().zip(&m.0) {
            let target = if fg { [0.0, 1.0] } else { [1.0, 0.0] };
            se += (row[0] - target[0]).powi(2) + (row[1] - target[1]).powi(2);
        }
        total += se / (2 * ai.len()) as f64;
    }
    Ok(total / a.len() as f64)
}

/// Weighted sum of the components; a non-finite component is an error that
/// names it.
pub fn total_loss(parts: &LossParts, w: &LossWeights) -> Result<f64> {
    for (name, v) in [
        ("temporal", parts.temporal),
        ("grounding", parts.grounding),
        ("contrastive", parts.contrastive),
    ] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("{name} loss is {v}")));
        }
    }
    Ok(w.temporal * parts.temporal + w.grounding * parts.grounding + w.contrastive * parts.contrastive)
}

#[cfg(test)]
mod tests;
