use rand::Rng;

use super::params::ParamStore;
use crate::autograd::{Graph, Scalar, Tensor, Var};

pub(crate) const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerNorm {
    gain: usize,
    bias: usize,
}

impl LayerNorm {
    pub fn new<F: Scalar>(p: &mut ParamStore<F>, name: &str, dim: usize) -> Self {
        Self {
            gain: p.ones(&format!("{name}.gain"), &[dim]),
            bias: p.zeros(&format!("{name}.bias"), &[dim]),
        }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, v: &[Var], x: Var) -> Var {
        g.layer_norm(x, v[self.gain], v[self.bias], LN_EPS)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Linear {
    w: usize,
    b: Option<usize>,
}

impl Linear {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        p: &mut ParamStore<F>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let w = p.normal(&format!("{name}.w"), &[fan_in, fan_out], std, rng);
        let b = bias.then(|| p.zeros(&format!("{name}.b"), &[fan_out]));
        Self { w, b }
    }

    /// `x` is `[..., fan_in]`; leading axes are kept.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, v: &[Var], x: Var) -> Var {
        let y = g.matmul(x, v[self.w]);
        match self.b {
            Some(b) => g.add_bcast(y, v[b]),
            None => y,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        p: &mut ParamStore<F>,
        name: &str,
        dim: usize,
        hidden: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            fc1: Linear::new(p, &format!("{name}.fc1"), dim, hidden, true, std, rng),
            fc2: Linear::new(p, &format!("{name}.fc2"), hidden, dim, true, std, rng),
        }
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, v: &[Var], x: Var) -> Var {
        let h = self.fc1.forward(g, v, x);
        let h = g.gelu(h);
        self.fc2.forward(g, v, h)
    }
}

/// Pre-norm transformer block over packed rows.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Block {
    ln1: LayerNorm,
    qkv: Linear,
    out: Linear,
    ln2: LayerNorm,
    mlp: Mlp,
    heads: usize,
}

impl Block {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        p: &mut ParamStore<F>,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            ln1: LayerNorm::new(p, &format!("{name}.ln1"), dim),
            qkv: Linear::new(p, &format!("{name}.qkv"), dim, 3 * dim, true, std, rng),
            out: Linear::new(p, &format!("{name}.out"), dim, dim, true, std, rng),
            ln2: LayerNorm::new(p, &format!("{name}.ln2"), dim),
            mlp: Mlp::new(p, &format!("{name}.mlp"), dim, dim * mlp_ratio, std, rng),
            heads,
        }
    }

    /// `x` is `[rows, d]`; each `(start, len)` is one independent sequence.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, v: &[Var], x: Var, seqs: &[(usize, usize)]) -> Var {
        let h = self.ln1.forward(g, v, x);
        let qkv = self.qkv.forward(g, v, h);
        let a = g.attention(qkv, seqs.to_vec(), self.heads);
        let a = self.out.forward(g, v, a);
        let x = g.add(x, a);
        let h = self.ln2.forward(g, v, x);
        let h = self.mlp.forward(g, v, h);
        g.add(x, h)
    }
}

/// Assignment of video tokens to group tokens followed by a group update.
#[derive(Debug, Clone, Copy)]
pub(crate) struct GroupingBlock {
    ln_groups: LayerNorm,
    ln_tokens: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    ln_mlp: LayerNorm,
    mlp: Mlp,
    dim: usize,
}

/// How a grouping block turns logits into an assignment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssignMode {
    /// Straight-through one-hot forward (soft softmax otherwise).
    pub hard: bool,
    /// Gumbel temperature.
    pub temp: f64,
}

impl GroupingBlock {
    pub fn new<F: Scalar, R: Rng + ?Sized>(
        p: &mut ParamStore<F>,
        name: &str,
        dim: usize,
        mlp_ratio: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            ln_groups: LayerNorm::new(p, &format!("{name}.ln_groups"), dim),
            ln_tokens: LayerNorm::new(p, &format!("{name}.ln_tokens"), dim),
            q: Linear::new(p, &format!("{name}.q"), dim, dim, false, std, rng),
            k: Linear::new(p, &format!("{name}.k"), dim, dim, false, std, rng),
            v: Linear::new(p, &format!("{name}.v"), dim, dim, false, std, rng),
            out: Linear::new(p, &format!("{name}.out"), dim, dim, false, std, rng),
            ln_mlp: LayerNorm::new(p, &format!("{name}.ln_mlp"), dim),
            mlp: Mlp::new(p, &format!("{name}.mlp"), dim, dim * mlp_ratio, std, rng),
            dim,
        }
    }

    /// `groups` is `[B, M, d]`, `tokens` is `[B, N, d]`; `noise`, when given,
    /// is `B·N·M` Gumbel samples added to the logits. Returns the updated
    /// groups and the per-token argmax group, `B·N` entries.
    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        v: &[Var],
        groups: Var,
        tokens: Var,
        mode: AssignMode,
        noise: Option<Vec<F>>,
    ) -> (Var, Vec<usize>) {
        let gsh = g.shape(groups).to_vec();
        let (b, m) = (gsh[0], gsh[1]);
        let n = g.shape(tokens)[1];
        let gn = self.ln_groups.forward(g, v, groups);
        let zn = self.ln_tokens.forward(g, v, tokens);
        let q = self.q.forward(g, v, gn);
        let k = self.k.forward(g, v, zn);
        let val = self.v.forward(g, v, zn);
        let logits = g.bmm(k, q, false, true);
        let mut logits = g.scale(logits, F::one() / F::cast_from(self.dim as f64).sqrt());
        if let Some(noise) = noise {
            let nz = g.constant(Tensor::new(&[b, n, m], noise));
            logits = g.add(logits, nz);
        }
        let logits = g.scale(logits, F::one() / F::cast_from(mode.temp));
        let soft = g.softmax(logits);
        let assign: Vec<usize> = g
            .value(soft)
            .data()
            .chunks(m)
            .map(crate::autograd::argmax)
            .collect();
        let a = if mode.hard { g.straight_through(soft) } else { soft };
        let agg = g.bmm(a, val, true, false);
        let at = g.transpose(a);
        let counts = g.sum_last(at);
        let counts = g.clamp_min(counts, F::one());
        let agg = g.reshape(agg, &[b * m, self.dim]);
        let agg = g.div_rows(agg, counts);
        let agg = g.reshape(agg, &[b, m, self.dim]);
        let upd = self.out.forward(g, v, agg);
        let groups = g.add(groups, upd);
        let h = self.ln_mlp.forward(g, v, groups);
        let h = self.mlp.forward(g, v, h);
        (g.add(groups, h), assign)
    }
}
