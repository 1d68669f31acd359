//! Finite-difference check of every loss against the tape's gradients on a
//! micro model in double precision. Assignments are soft and noiseless so
//! the losses are smooth in the parameters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{loss_graph, prepare_batch, LossVars, PreparedBatch};
use crate::autograd::{Graph, Var};
use crate::config::{Config, Patch};
use crate::encoders::{AssignMode, EncodeOptions, Model};
use crate::error::Result;
use crate::synthcorpus::{caption_for, CaptionedVideo, SceneSpec, VideoTensor};

pub const EPS: f64 = 1e-5;
/// Magnitude below which errors are measured in absolute rather than
/// relative terms. Central differences at `EPS` carry about 1e-10 of
/// rounding noise on O(1) losses (visible on gradients that are exactly
/// zero, like attention key biases), so smaller entries cannot be resolved
/// to a relative 1e-4.
pub const REL_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Temporal,
    Grounding,
    Contrastive,
    Total,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [
        LossKind::Temporal,
        LossKind::Grounding,
        LossKind::Contrastive,
        LossKind::Total,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Temporal => "temporal",
            LossKind::Grounding => "grounding",
            LossKind::Contrastive => "contrastive",
            LossKind::Total => "total",
        }
    }

    fn pick(self, l: &LossVars) -> Option<Var> {
        match self {
            LossKind::Temporal => l.temporal,
            LossKind::Grounding => l.grounding,
            LossKind::Contrastive => Some(l.contrastive),
            LossKind::Total => Some(l.total),
        }
    }
}

/// Worst disagreement for one loss.
#[derive(Debug, Clone, Serialize)]
pub struct LossCheck {
    pub loss: LossKind,
    pub max_rel_err: f64,
    /// Parameter tensor and element where the worst error occurred.
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub params_checked: usize,
    /// One entry per loss, in [`LossKind::ALL`] order.
    pub checks: Vec<LossCheck>,
}

impl GradcheckReport {
    pub fn worst(&self) -> f64 {
        self.checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max)
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Max relative error between `grad` and central differences of `f` at `x`.
pub fn finite_difference_check(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], grad: &[f64], eps: f64) -> f64 {
    let mut x = x.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let up = f(&x);
        x[i] = orig - eps;
        let down = f(&x);
        x[i] = orig;
        worst = worst.max(rel_err(grad[i], (up - down) / (2.0 * eps)));
    }
    worst
}

/// B = 2, 4×8×8 videos in 2×4×4 voxels (N = 8), M = 4, d = 8.
pub fn micro_config() -> Config {
    let mut c = Config::default();
    let m = &mut c.model;
    m.frames = 4;
    m.height = 8;
    m.width = 8;
    m.patch = Patch::new(2, 4, 4);
    m.dim = 8;
    m.heads = 2;
    m.groups_m = 4;
    m.common_dim = 8;
    m.text_layers = 1;
    m.text_max_len = 16;
    m.init_std = 0.2;
    c.train.batch = 2;
    c
}

fn micro_batch(model: &Model<f64>, cfg: &Config, seed: u64) -> Result<PreparedBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = &cfg.model;
    let items: Vec<CaptionedVideo> = (0..cfg.train.batch)
        .map(|i| {
            let scene = SceneSpec::random(seed * 31 + i as u64, 2, 8, 32, 32)?;
            let (caption, noun_spans) = caption_for(&scene);
            let data = (0..m.frames * m.height * m.width * 3)
                .map(|_| rng.gen::<f32>())
                .collect();
            Ok(CaptionedVideo {
                video: VideoTensor::new(m.frames, m.height, m.width, data)?,
                caption,
                noun_spans,
                region_masks: Vec::new(),
                scene_label: vec![0; m.frames],
            })
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&CaptionedVideo> = items.iter().collect();
    prepare_batch(model, cfg, &refs, (0..refs.len()).collect(), &mut rng)
}

fn smooth() -> EncodeOptions {
    EncodeOptions {
        assign: AssignMode { hard: false, temp: 1.0 },
        noise: false,
    }
}

fn losses(model: &Model<f64>, batch: &PreparedBatch, cfg: &Config) -> Result<[f64; 4]> {
    let mut g = Graph::new();
    let v = model.params.bind(&mut g, false);
    let lv = loss_graph(model, &mut g, &v, batch, cfg, smooth(), &mut ChaCha8Rng::seed_from_u64(0))?;
    let mut out = [0.0; 4];
    for (o, k) in out.iter_mut().zip(LossKind::ALL) {
        *o = k.pick(&lv).map_or(0.0, |v| g.value(v).data()[0]);
    }
    Ok(out)
}

/// Compares analytic and central-difference gradients of every parameter
/// for each loss.
pub fn gradcheck(seed: u64) -> Result<GradcheckReport> {
    let cfg = micro_config();
    let mut model: Model<f64> = Model::new(&cfg.model, seed)?;
    let batch = micro_batch(&model, &cfg, seed)?;

    let mut g = Graph::new();
    let vars = model.params.bind(&mut g, true);
    let lv = loss_graph(&model, &mut g, &vars, &batch, &cfg, smooth(), &mut ChaCha8Rng::seed_from_u64(0))?;
    let analytic: Vec<Vec<Vec<f64>>> = LossKind::ALL
        .iter()
        .map(|k| {
            let out = k.pick(&lv).expect("micro batch has every loss");
            let grads = g.backward(out);
            vars.iter()
                .map(|&v| grads.get(v).map_or_else(|| vec![0.0; g.value(v).len()], <[f64]>::to_vec))
                .collect()
        })
        .collect();

    let mut checks: Vec<LossCheck> = LossKind::ALL
        .iter()
        .map(|&loss| LossCheck {
            loss,
            max_rel_err: 0.0,
            param: String::new(),
            index: 0,
            analytic: 0.0,
            numeric: 0.0,
        })
        .collect();
    let mut count = 0;
    for p in 0..model.params.len() {
        for i in 0..model.params.get(p).len() {
            let orig = model.params.get(p).data()[i];
            model.params.get_mut(p).data_mut()[i] = orig + EPS;
            let up = losses(&model, &batch, &cfg)?;
            model.params.get_mut(p).data_mut()[i] = orig - EPS;
            let down = losses(&model, &batch, &cfg)?;
            model.params.get_mut(p).data_mut()[i] = orig;
            for (k, c) in checks.iter_mut().enumerate() {
                let fd = (up[k] - down[k]) / (2.0 * EPS);
                let a = analytic[k][p][i];
                let e = rel_err(a, fd);
                if e > c.max_rel_err || c.param.is_empty() {
                    *c = LossCheck {
                        loss: c.loss,
                        max_rel_err: e,
                        param: model.params.name(p).to_owned(),
                        index: i,
                        analytic: a,
                        numeric: fd,
                    };
                }
            }
            count += 1;
        }
    }
    Ok(GradcheckReport {
        seed,
        params_checked: count,
        checks,
    })
}
