//! SGD training loop, checkpoints and gradient checking.
//!
//! All randomness of step `s` (batch choice, paste windows, partners, noun
//! prompts, Gumbel noise) comes from a generator seeded with
//! `derive_seed(seed, s)`, so a run resumed from a checkpoint at step `k`
//! replays steps `k..` exactly.

mod checkpoint;
mod gradcheck;

use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint};
pub use gradcheck::{finite_difference_check, gradcheck, micro_config, GradcheckReport, LossCheck, LossKind};

use crate::augment::{cut_and_paste, BlendedBatch};
use crate::autograd::{Graph, Scalar, Var};
use crate::config::Config;
use crate::encoders::{extract_nouns, prompt_noun, EncodeOptions, Model, ParamStore};
use crate::error::{Error, Result};
use crate::losses::graph as lg;
use crate::synthcorpus::{derive_seed, CaptionedVideo, Corpus, Split};

/// Salt separating the parameter-init stream from the per-step streams.
const INIT_STREAM: u64 = u64::MAX;

/// Linear warmup over `⌊warmup·steps⌋` steps, then cosine decay to zero.
pub fn lr_schedule(step: usize, steps: usize, base: f64, warmup: f64) -> f64 {
    let w = (warmup * steps as f64).floor() as usize;
    if step < w {
        return base * step as f64 / w as f64;
    }
    let span = steps.saturating_sub(w).max(1);
    let progress = (step.min(steps) - w) as f64 / span as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// `buf ← momentum·buf + grad`, `param ← param − lr·buf`. Parameters without
/// a gradient are treated as having a zero gradient.
pub fn sgd_step<F: Scalar>(
    params: &mut ParamStore<F>,
    grads: &[Option<&[F]>],
    buffers: &mut [Vec<F>],
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if grads.len() != params.len() || buffers.len() != params.len() {
        return Err(Error::arg("one gradient and buffer per parameter required"));
    }
    for (i, g) in grads.iter().enumerate() {
        if let Some(g) = g {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient for {}", params.name(i))));
            }
        }
    }
    let (lr, mu) = (F::cast_from(lr), F::cast_from(momentum));
    for (i, buf) in buffers.iter_mut().enumerate() {
        let p = params.get_mut(i).data_mut();
        match grads[i] {
            Some(g) => {
                for ((b, &gv), pv) in buf.iter_mut().zip(g).zip(p.iter_mut()) {
                    *b = mu * *b + gv;
                    *pv -= lr * *b;
                }
            }
            None => {
                for (b, pv) in buf.iter_mut().zip(p.iter_mut()) {
                    *b = mu * *b;
                    *pv -= lr * *b;
                }
            }
        }
    }
    Ok(())
}

/// One step's inputs after augmentation and tokenization.
#[derive(Debug, Clone)]
pub struct PreparedBatch {
    pub items: Vec<usize>,
    pub blended: BlendedBatch,
    /// `B` caption id sequences followed by `B·K` prompted-noun sequences.
    pub texts: Vec<Vec<usize>>,
}

pub fn prepare_batch<F: Scalar, R: Rng + ?Sized>(
    model: &Model<F>,
    cfg: &Config,
    items: &[&CaptionedVideo],
    ids: Vec<usize>,
    rng: &mut R,
) -> Result<PreparedBatch> {
    let videos: Vec<_> = items.iter().map(|i| &i.video).collect();
    let blended = cut_and_paste(&videos, &cfg.aug, rng)?;
    let vocab = model.vocab();
    let mut texts: Vec<Vec<usize>> = items.iter().map(|i| vocab.tokenize(&i.caption)).collect();
    for it in items {
        for noun in extract_nouns(it, cfg.model.nouns_k)? {
            texts.push(vocab.tokenize(&prompt_noun(&noun, rng)));
        }
    }
    Ok(PreparedBatch {
        items: ids,
        blended,
        texts,
    })
}

/// Loss nodes of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub temporal: Option<Var>,
    pub grounding: Option<Var>,
    pub contrastive: Var,
}

pub fn loss_graph<F: Scalar, R: Rng + ?Sized>(
    model: &Model<F>,
    g: &mut Graph<F>,
    v: &[Var],
    batch: &PreparedBatch,
    cfg: &Config,
    opts: EncodeOptions,
    rng: &mut R,
) -> Result<LossVars> {
    let b = batch.blended.videos.len();
    let k = cfg.model.nouns_k;
    let tau = cfg.loss.tau;
    let videos: Vec<_> = batch.blended.videos.iter().collect();
    let out = model.video_forward(g, v, &videos, opts, rng)?;
    let text = model.text_forward(g, v, &batch.texts)?;
    let caps: Vec<usize> = (0..b).collect();
    let f_c = g.gather_rows(text, &caps);
    let (wv, wc) = (&batch.blended.wv, &batch.blended.wc);
    let contrastive = lg::global_contrastive(g, out.f_v, f_c, wv, wc, tau)?;
    let grounding = if k > 0 {
        let rows: Vec<usize> = (b..b + b * k).collect();
        let nouns = g.gather_rows(text, &rows);
        let gm = lg::grounding_matrix(g, out.group_embed, nouns, k, tau)?;
        Some(lg::weighted_cross_entropy(g, gm, wv, wc, tau)?)
    } else {
        None
    };
    let temporal = lg::temporal_grouping(g, out.z_v, model.grid(), cfg.aug.window_size_t, &batch.blended.masks)?;
    let mut total = g.scale(contrastive, F::cast_from(cfg.loss.w_contrastive));
    if let Some(l) = grounding {
        let s = g.scale(l, F::cast_from(cfg.loss.w_grounding));
        total = g.add(total, s);
    }
    if let Some(l) = temporal {
        let s = g.scale(l, F::cast_from(cfg.loss.w_temporal));
        total = g.add(total, s);
    }
    Ok(LossVars {
        total,
        temporal,
        grounding,
        contrastive,
    })
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub lr: f64,
    pub loss_total: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub loss_t: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub loss_g: Option<f64>,
    pub loss_c: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wallclock: Option<f64>,
}

impl MetricsRecord {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }

    /// The same record without its wall-clock field, for comparing runs.
    pub fn without_wallclock(&self) -> Self {
        Self {
            wallclock: None,
            ..self.clone()
        }
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let f = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Parameters, momentum buffers and progress of a run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: Config,
    pub model: Model<f32>,
    pub buffers: Vec<Vec<f32>>,
    /// Number of completed steps.
    pub step: usize,
}

impl TrainState {
    pub fn new(config: &Config) -> Result<Self> {
        config.validate()?;
        let model = Model::new(&config.model, derive_seed(config.train.seed, INIT_STREAM))?;
        let buffers = model.params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Ok(Self {
            config: config.clone(),
            model,
            buffers,
            step: 0,
        })
    }
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn checkpoint_name(step: usize) -> String {
    format!("step-{step:06}.ckpt")
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Directory for the metrics log and checkpoints; nothing is written when
    /// `None`.
    pub out_dir: Option<PathBuf>,
    /// Stop after this many completed steps (for interrupted runs).
    pub stop_after: Option<usize>,
    /// Print a progress line every this many steps.
    pub progress_every: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub metrics: Vec<MetricsRecord>,
}

fn check_corpus(cfg: &Config, corpus: &Corpus) -> Result<Vec<usize>> {
    let train = corpus.indices(Split::Train);
    if train.is_empty() {
        return Err(Error::arg("corpus has no training items"));
    }
    let v = &corpus.items[train[0]].video;
    let m = &cfg.model;
    if (v.frames, v.height, v.width) != (m.frames, m.height, m.width) {
        return Err(Error::config(format!(
            "corpus videos are {}x{}x{} but the model expects {}x{}x{}",
            v.frames, v.height, v.width, m.frames, m.height, m.width
        )));
    }
    Ok(train)
}

/// Batch indices for step `step`: a uniform sample without replacement from
/// the training split (with replacement when the split is smaller than B).
pub fn batch_indices<R: Rng + ?Sized>(train: &[usize], b: usize, rng: &mut R) -> Vec<usize> {
    if train.len() >= b {
        sample(rng, train.len(), b).into_iter().map(|i| train[i]).collect()
    } else {
        (0..b).map(|_| train[rng.gen_range(0..train.len())]).collect()
    }
}

/// Runs (or continues) training from `state` up to `train.steps`.
pub fn train_from(mut state: TrainState, corpus: &Corpus, opts: &TrainOptions) -> Result<TrainOutcome> {
    let cfg = state.config.clone();
    let train = check_corpus(&cfg, corpus)?;
    let steps = cfg.train.steps;
    let end = opts.stop_after.map_or(steps, |s| s.min(steps));
    let mut log = match &opts.out_dir {
        Some(dir) => Some(open_log(dir, state.step)?),
        None => None,
    };
    let opts_enc = EncodeOptions::train(cfg.model.gumbel_temp);
    let start = Instant::now();
    let mut metrics = Vec::new();
    while state.step < end {
        let s = state.step;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.train.seed, s as u64));
        let ids = batch_indices(&train, cfg.train.batch, &mut rng);
        let items: Vec<&CaptionedVideo> = ids.iter().map(|&i| &corpus.items[i]).collect();
        let batch = prepare_batch(&state.model, &cfg, &items, ids, &mut rng)?;
        let mut g = Graph::new();
        let vars = state.model.params.bind(&mut g, true);
        let lv = loss_graph(&state.model, &mut g, &vars, &batch, &cfg, opts_enc, &mut rng)?;
        let val = |v: Var| g.value(v).data()[0] as f64;
        let lr = lr_schedule(s, steps, cfg.train.lr, cfg.train.warmup);
        let rec = MetricsRecord {
            step: s,
            lr,
            loss_total: val(lv.total),
            loss_t: lv.temporal.map(val),
            loss_g: lv.grounding.map(val),
            loss_c: val(lv.contrastive),
            wallclock: cfg.train.log_wallclock.then(|| start.elapsed().as_secs_f64()),
        };
        for (name, v) in [
            ("total", Some(rec.loss_total)),
            ("temporal", rec.loss_t),
            ("grounding", rec.loss_g),
            ("contrastive", Some(rec.loss_c)),
        ] {
            if let Some(v) = v {
                if !v.is_finite() {
                    return Err(Error::Numeric(format!(
                        "{name} loss is {v} at step {s}; last record: {}",
                        rec.to_line()
                    )));
                }
            }
        }
        let grads = g.backward(lv.total);
        let gl: Vec<Option<&[f32]>> = vars.iter().map(|&v| grads.get(v)).collect();
        sgd_step(&mut state.model.params, &gl, &mut state.buffers, lr, cfg.train.momentum)?;
        state.step += 1;
        if let Some(f) = log.as_mut() {
            writeln!(f, "{}", rec.to_line())?;
        }
        if let Some(every) = opts.progress_every {
            if every > 0 && (s % every == 0 || state.step == steps) {
                eprintln!(
                    "step {s:>5}  lr {lr:.4}  loss {:.4}  ({:.1}s)",
                    rec.loss_total,
                    start.elapsed().as_secs_f64()
                );
            }
        }
        metrics.push(rec);
        if let Some(dir) = &opts.out_dir {
            let every = cfg.train.checkpoint_every;
            if every > 0 && state.step % every == 0 {
                save_checkpoint(&Checkpoint::from_state(&state), &dir.join(checkpoint_name(state.step)))?;
            }
            if state.step == steps {
                save_checkpoint(&Checkpoint::from_state(&state), &dir.join(FINAL_CHECKPOINT))?;
            }
        }
    }
    if let Some(f) = log.as_mut() {
        f.flush()?;
    }
    Ok(TrainOutcome { state, metrics })
}

pub fn train(cfg: &Config, corpus: &Corpus, opts: &TrainOptions) -> Result<TrainOutcome> {
    train_from(TrainState::new(cfg)?, corpus, opts)
}

/// Opens the metrics log, keeping only records before `from_step`.
fn open_log(dir: &Path, from_step: usize) -> Result<File> {
    fs::create_dir_all(dir)?;
    let path = dir.join(METRICS_FILE);
    // lines are kept verbatim; re-serializing parsed floats is not byte-stable
    let mut keep = Vec::new();
    if from_step > 0 && path.exists() {
        for line in fs::read_to_string(&path)?.lines() {
            if line.trim().is_empty() {
                continue;
            }
            let r: MetricsRecord = serde_json::from_str(line)?;
            if r.step < from_step {
                keep.push(line.to_owned());
            }
        }
    }
    let mut f = File::create(&path)?;
    for l in keep {
        writeln!(f, "{l}")?;
    }
    Ok(f)
}
