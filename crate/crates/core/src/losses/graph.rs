//! Loss terms on the autodiff tape.

use crate::augment::{ClipMask, WeightMatrix};
use crate::autograd::{Graph, Scalar, Tensor, Var};
use crate::encoders::PatchGrid;
use crate::error::{Error, Result};

use super::clip_token_groups;

fn weights<F: Scalar>(g: &mut Graph<F>, w: &WeightMatrix) -> Var {
    g.constant(Tensor::from_f64(&[w.n, w.n], &w.data))
}

/// `[B, B]` grounding scores from unit-norm `[B, M, d_c]` group embeddings
/// and `[B·K, d_c]` noun embeddings (caption `j` owns rows `jK..(j+1)K`).
pub fn grounding_matrix<F: Scalar>(g: &mut Graph<F>, groups: Var, nouns: Var, k: usize, tau: f64) -> Result<Var> {
    let gs = g.shape(groups).to_vec();
    let ns = g.shape(nouns).to_vec();
    if gs.len() != 3 || ns.len() != 2 || gs[2] != ns[1] || k == 0 || ns[0] % k != 0 {
        return Err(Error::arg(format!(
            "grounding needs [B, M, d] groups and [B*K, d] nouns, got {gs:?} and {ns:?}"
        )));
    }
    let (b, dc) = (gs[0], gs[2]);
    let bc = ns[0] / k;
    let sims = g.bmm(nouns, groups, false, true);
    let sims = g.scale(sims, F::one() / F::cast_from(tau));
    let w = g.softmax(sims);
    let agg = g.bmm(w, groups, false, false);
    let agg = g.reshape(agg, &[b * bc * k, dc]);
    let agg = g.l2_normalize(agg);
    let cos = g.mul_bcast(agg, nouns);
    let cos = g.sum_last(cos);
    let cos = g.reshape(cos, &[b, bc, k]);
    Ok(g.mean_last(cos))
}

/// Both directions of the soft-target cross-entropy on a `[B, B]`
/// similarity matrix, summed.
pub fn weighted_cross_entropy<F: Scalar>(
    g: &mut Graph<F>,
    sim: Var,
    wv: &WeightMatrix,
    wc: &WeightMatrix,
    tau: f64,
) -> Result<Var> {
    let b = wv.n;
    if g.shape(sim) != [b, b] || wc.n != b {
        return Err(Error::arg("similarity and weight matrices must be B x B"));
    }
    let x = g.scale(sim, F::one() / F::cast_from(tau));
    let wv_c = weights(g, wv);
    let ls = g.log_softmax(x);
    let v2c = g.mul(ls, wv_c);
    let xt = g.transpose(x);
    let wc_c = weights(g, wc);
    let ls = g.log_softmax(xt);
    let c2v = g.mul(ls, wc_c);
    let both = g.add(v2c, c2v);
    let s = g.sum_all(both);
    Ok(g.scale(s, -F::one() / F::cast_from(b as f64)))
}

/// Contrastive loss between `[B, d_c]` video and caption embeddings.
pub fn global_contrastive<F: Scalar>(
    g: &mut Graph<F>,
    f_v: Var,
    f_c: Var,
    wv: &WeightMatrix,
    wc: &WeightMatrix,
    tau: f64,
) -> Result<Var> {
    let sim = g.bmm(f_v, f_c, false, true);
    weighted_cross_entropy(g, sim, wv, wc, tau)
}

/// Temporal grouping loss over a batch of `[B, N, d]` tokens. Items whose
/// mask lacks one of the two classes contribute nothing; `None` when no item
/// qualifies.
pub fn temporal_grouping<F: Scalar>(
    g: &mut Graph<F>,
    z_v: Var,
    grid: &PatchGrid,
    clip_len: usize,
    masks: &[ClipMask],
) -> Result<Option<Var>> {
    let zs = g.shape(z_v).to_vec();
    if zs.len() != 3 || zs[0] != masks.len() || zs[1] != grid.num_tokens() {
        return Err(Error::arg(format!("temporal loss got tokens {zs:?} for {} masks", masks.len())));
    }
    let (n, d) = (zs[1], zs[2]);
    let clips = clip_token_groups(grid, clip_len)?;
    let nt = clips.len();
    let used: Vec<usize> = (0..masks.len()).filter(|&i| masks[i].has_both_classes()).collect();
    if used.is_empty() {
        return Ok(None);
    }
    if used.iter().any(|&i| masks[i].len() != nt) {
        return Err(Error::arg("mask length differs from the number of clips"));
    }
    let bu = used.len();
    let mut pool = Vec::with_capacity(bu * nt);
    for &i in &used {
        for c in &clips {
            pool.push(c.iter().map(|&r| i * n + r).collect());
        }
    }
    let flat = g.reshape(z_v, &[masks.len() * n, d]);
    let z_clip = g.row_mean(flat, pool, &[bu * nt, d]);
    let mut centres = Vec::with_capacity(bu * 2);
    let mut target = Vec::with_capacity(bu * nt * 2);
    for (u, &i) in used.iter().enumerate() {
        let m = &masks[i].0;
        centres.push((0..nt).filter(|&c| !m[c]).map(|c| u * nt + c).collect());
        centres.push((0..nt).filter(|&c| m[c]).map(|c| u * nt + c).collect());
        for &fg in m {
            target.extend(if fg { [0.0, 1.0] } else { [1.0, 0.0] });
        }
    }
    let centres = g.row_mean(z_clip, centres, &[bu, 2, d]);
    let z_clip = g.reshape(z_clip, &[bu, nt, d]);
    let logits = g.bmm(z_clip, centres, false, true);
    let a = g.softmax(logits);
    let t = g.constant(Tensor::from_f64(&[bu, nt, 2], &target));
    let diff = g.sub(a, t);
    let sq = g.sqr(diff);
    Ok(Some(g.mean_all(sq)))
}
