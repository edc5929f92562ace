//! Alternating discriminator / generator optimization and evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Tape};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::hfe::binarize_mask;
use crate::image::{load_image, MetricReport};
use crate::losses::{
    content_loss_on, gan_g_loss_on, hinge_d_loss_on, perceptual_loss_on, removal_loss_on, LossWeights,
    PerceptualExtractor,
};
use crate::nets::{GeneratorVars, Model, ModelConfig, Toggles};
use crate::params::ParamStore;
use crate::synth::{Dataset, Quadruple};
use crate::tensor::Tensor;

pub const DEFAULT_BASE_LR: f64 = 2e-4;
pub const DEFAULT_HALVE_EVERY: usize = 10;

/// `base * 0.5^floor(epoch / 10)`.
pub fn lr_schedule(epoch: usize, base: f64) -> f64 {
    lr_schedule_every(epoch, base, DEFAULT_HALVE_EVERY)
}

pub fn lr_schedule_every(epoch: usize, base: f64, halve_every: usize) -> f64 {
    base * 0.5f64.powi((epoch / halve_every) as i32)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many generator steps; 0 means no cap.
    pub max_steps: usize,
    pub base_lr: f64,
    pub halve_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    pub image_size: usize,
    /// Write a checkpoint every this many epochs; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            batch_size: 4,
            epochs: 30,
            max_steps: 0,
            base_lr: DEFAULT_BASE_LR,
            halve_every: DEFAULT_HALVE_EVERY,
            beta1: 0.5,
            beta2: 0.999,
            seed: 0,
            image_size: 64,
            checkpoint_every: 0,
            weights: LossWeights::default(),
        }
    }
}

fn widths_text(w: &[usize]) -> String {
    w.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_widths<const N: usize>(key: &str, value: &str) -> Result<[usize; N]> {
    let parsed: Vec<usize> = value
        .split(',')
        .map(|v| v.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| bad_value(key, value))?;
    let arr: [usize; N] = parsed.try_into().map_err(|_| bad_value(key, value))?;
    if arr.contains(&0) {
        return Err(bad_value(key, value));
    }
    Ok(arr)
}

fn bad_value(key: &str, value: &str) -> Error {
    Error::InvalidArgument(format!("invalid value {value:?} for {key}"))
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| bad_value(key, value))
}

impl TrainConfig {
    pub const KEYS: [&'static str; 20] = [
        "batch_size",
        "epochs",
        "max_steps",
        "base_lr",
        "halve_every",
        "beta1",
        "beta2",
        "seed",
        "image_size",
        "checkpoint_every",
        "lambda_g",
        "lambda_content",
        "lambda_per",
        "use_hfe",
        "use_cha",
        "use_ha",
        "use_ba",
        "hfe_widths",
        "gen_widths",
        "disc_widths",
    ];

    /// Fully resolved `key=value` pairs in [`Self::KEYS`] order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let t = self.model.toggles;
        let values = [
            self.batch_size.to_string(),
            self.epochs.to_string(),
            self.max_steps.to_string(),
            self.base_lr.to_string(),
            self.halve_every.to_string(),
            self.beta1.to_string(),
            self.beta2.to_string(),
            self.seed.to_string(),
            self.image_size.to_string(),
            self.checkpoint_every.to_string(),
            self.weights.lambda_g.to_string(),
            self.weights.lambda_content.to_string(),
            self.weights.lambda_per.to_string(),
            t.use_hfe.to_string(),
            t.use_cha.to_string(),
            t.use_ha.to_string(),
            t.use_ba.to_string(),
            widths_text(&self.model.hfe_widths),
            widths_text(&self.model.gen_widths),
            widths_text(&self.model.disc_widths),
        ];
        Self::KEYS.into_iter().zip(values).collect()
    }

    pub fn to_text(&self) -> String {
        self.to_pairs().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Set one key; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t: &mut Toggles = &mut self.model.toggles;
        match key {
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "max_steps" => self.max_steps = parse(key, value)?,
            "base_lr" => self.base_lr = parse(key, value)?,
            "halve_every" => self.halve_every = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "image_size" => self.image_size = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "lambda_g" => self.weights.lambda_g = parse(key, value)?,
            "lambda_content" => self.weights.lambda_content = parse(key, value)?,
            "lambda_per" => self.weights.lambda_per = parse(key, value)?,
            "use_hfe" => t.use_hfe = parse(key, value)?,
            "use_cha" => t.use_cha = parse(key, value)?,
            "use_ha" => t.use_ha = parse(key, value)?,
            "use_ba" => t.use_ba = parse(key, value)?,
            "hfe_widths" => self.model.hfe_widths = parse_widths(key, value)?,
            "gen_widths" => self.model.gen_widths = parse_widths(key, value)?,
            "disc_widths" => self.model.disc_widths = parse_widths(key, value)?,
            other => return Err(Error::InvalidArgument(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Overlay `key=value` lines (blank lines and `#` comments skipped).
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("config line {}: expected key=value", i + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("halve_every", self.halve_every),
            ("image_size", self.image_size),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArgument(format!("{k} must be positive")));
        }
        if !(self.base_lr.is_finite() && self.base_lr >= 0.0) {
            return Err(Error::InvalidArgument(format!("base_lr {} must be finite and non-negative", self.base_lr)));
        }
        for (k, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidArgument(format!("{k} {b} must lie in [0, 1)")));
            }
        }
        self.weights.validate()
    }
}

/// Adam with bias correction. Moments are keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update of every parameter in `stores` that has a gradient.
    pub fn step(&mut self, stores: &mut [&mut ParamStore], grads: &Gradients, lr: f64) -> Result<()> {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (name, g) in grads.params() {
            let Some(store) = stores.iter_mut().find(|s| s.contains(name)) else {
                return Err(Error::Checkpoint(format!("gradient for unknown parameter {name}")));
            };
            let p = store.get_mut(name)?;
            let m = self.m.entry(name.to_string()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.to_string()).or_insert_with(|| Tensor::zeros(g.shape()));
            for (((pi, mi), vi), &gi) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *pi -= lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Everything that evolves during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub opt_g: Adam,
    pub opt_d: Adam,
    /// Next epoch to run.
    pub epoch: usize,
    /// Generator steps taken so far.
    pub step: usize,
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Self {
        Self {
            model: Model::new(config.model.clone(), config.seed),
            opt_g: Adam::new(config.beta1, config.beta2),
            opt_d: Adam::new(config.beta1, config.beta2),
            epoch: 0,
            step: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub d: f64,
    pub g: f64,
    pub content: f64,
    pub per: f64,
    pub total: f64,
}

fn finite(term: &'static str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { term })
    }
}

fn stack(batch: &[&Quadruple], pick: impl Fn(&Quadruple) -> Tensor) -> Result<Tensor> {
    Tensor::stack(&batch.iter().map(|q| pick(q)).collect::<Vec<_>>())
}

/// Hinge update of the discriminator on `gt` (real) vs. `fake`, both
/// conditioned on `hf`. Generator-side parameters are not touched; the
/// stored power-iteration vectors advance by one step.
pub fn discriminator_step(state: &mut TrainState, gt: &Tensor, fake: &Tensor, hf: &Tensor, lr: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let hf = tape.constant(hf.clone());
    let real_in = tape.constant(gt.clone());
    let fake_in = tape.constant(fake.clone());
    let disc = &state.model.discriminator;
    let (real, updates) = disc.forward_on_tape(&mut tape, real_in, hf, true)?;
    let (fake, _) = disc.forward_on_tape(&mut tape, fake_in, hf, true)?;
    let l_d = hinge_d_loss_on(&mut tape, real, fake)?;
    let d = finite("L_d", tape.value(l_d).item())?;
    let grads = tape.backward(l_d);
    state.opt_d.step(&mut [&mut state.model.discriminator.store], &grads, lr)?;
    state.model.discriminator.apply_power_updates(updates)?;
    Ok(d)
}

/// Generator forward pass on a batch of composites.
pub fn generator_forward(model: &Model, composite: Tensor) -> Result<(Tape, GeneratorVars)> {
    let mut tape = Tape::new();
    let x = tape.constant(composite);
    let out = model.generate_on_tape(&mut tape, x, true)?;
    Ok((tape, out))
}

/// Removal-loss update of the extractor and both generators, continuing
/// the tape from [`generator_forward`]. The discriminator is read but not
/// updated.
pub fn generator_step(
    state: &mut TrainState,
    mut tape: Tape,
    out: GeneratorVars,
    gt: &Tensor,
    lr: f64,
    weights: &LossWeights,
    ext: &PerceptualExtractor,
) -> Result<StepLosses> {
    let hf = tape.detach(out.hf);
    let (score, _) = state.model.discriminator.forward_on_tape(&mut tape, out.d2, hf, false)?;
    let l_g = gan_g_loss_on(&mut tape, score);
    let gt = tape.constant(gt.clone());
    let l_c = content_loss_on(&mut tape, out.d1, out.d2, gt)?;
    let l_p = perceptual_loss_on(&mut tape, ext, out.d2, gt)?;
    let total = removal_loss_on(&mut tape, l_g, l_c, l_p, weights)?;
    let losses = StepLosses {
        d: 0.0,
        g: finite("L_g", tape.value(l_g).item())?,
        content: finite("L_content", tape.value(l_c).item())?,
        per: finite("L_per", tape.value(l_p).item())?,
        total: finite("L_rem", tape.value(total).item())?,
    };
    let grads = tape.backward(total);
    let model = &mut state.model;
    state.opt_g.step(&mut [&mut model.hfe.store, &mut model.generator.store], &grads, lr)?;
    state.step += 1;
    Ok(losses)
}

/// One discriminator update on `gt` vs. the detached refined output, then
/// one generator update on the weighted removal loss.
pub fn train_step(
    state: &mut TrainState,
    batch: &[&Quadruple],
    lr: f64,
    weights: &LossWeights,
    ext: &PerceptualExtractor,
) -> Result<StepLosses> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let composite = stack(batch, |q| q.composite.to_tensor())?;
    let gt = stack(batch, |q| q.diffuse.to_tensor())?;
    let (tape, out) = generator_forward(&state.model, composite)?;
    let fake = tape.value(out.d2).clone();
    let hf = tape.value(out.hf).clone();
    let d = discriminator_step(state, &gt, &fake, &hf, lr)?;
    let losses = generator_step(state, tape, out, &gt, lr, weights, ext)?;
    Ok(StepLosses { d, ..losses })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub losses: StepLosses,
}

pub const HISTORY_HEADER: &str = "epoch,step,lr,L_d,L_g,L_content,L_per,L_rem";

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut out = format!("{HISTORY_HEADER}\n");
    for r in rows {
        let l = r.losses;
        writeln!(out, "{},{},{},{},{},{},{},{}", r.epoch, r.step, r.lr, l.d, l.g, l.content, l.per, l.total)
            .expect("writing to a String");
    }
    out
}

/// Shuffled sample order for `epoch`, determined by `(seed, epoch)`.
pub fn epoch_order(seed: u64, epoch: usize, len: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    order.shuffle(&mut rng);
    order
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Directory for periodic and final checkpoints (`epoch_XXXX.ckpt`, `final.ckpt`).
    pub checkpoint_dir: Option<PathBuf>,
    /// Continue from this state instead of a fresh initialization.
    pub resume: Option<Checkpoint>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<HistoryRow>,
}

fn check_samples(config: &TrainConfig, samples: &[Quadruple]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let s = config.image_size;
    for (i, q) in samples.iter().enumerate() {
        if q.composite.dims() != (s, s, 3) || q.diffuse.dims() != (s, s, 3) {
            return Err(Error::Sample {
                id: i.to_string(),
                reason: format!("expected {s}x{s}x3 images, got {:?}", q.composite.dims()),
            });
        }
    }
    Ok(())
}

/// Runs epochs `[start, config.epochs)`, stopping early once `max_steps`
/// generator steps have been taken.
pub fn train(config: &TrainConfig, samples: &[Quadruple], opts: TrainOptions) -> Result<TrainOutcome> {
    train_with(config, samples, opts, |_| {})
}

/// [`train`] with a callback after every step.
pub fn train_with(
    config: &TrainConfig,
    samples: &[Quadruple],
    opts: TrainOptions,
    mut on_step: impl FnMut(&HistoryRow),
) -> Result<TrainOutcome> {
    config.validate()?;
    check_samples(config, samples)?;
    let mut state = match opts.resume {
        Some(ck) => {
            if ck.config.model != config.model {
                return Err(Error::Checkpoint("checkpoint architecture differs from the requested config".into()));
            }
            ck.state
        }
        None => TrainState::new(config),
    };
    let ext = PerceptualExtractor::new();
    let mut history = Vec::new();
    let save = |state: &TrainState, name: &str| -> Result<()> {
        if let Some(dir) = &opts.checkpoint_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            Checkpoint::new(config.clone(), state.clone()).save(dir.join(name))?;
        }
        Ok(())
    };
    let capped = |step: usize| config.max_steps != 0 && step >= config.max_steps;
    while state.epoch < config.epochs && !capped(state.step) {
        let epoch = state.epoch;
        let lr = lr_schedule_every(epoch, config.base_lr, config.halve_every);
        let order = epoch_order(config.seed, epoch, samples.len());
        for chunk in order.chunks(config.batch_size) {
            if capped(state.step) {
                break;
            }
            let batch: Vec<&Quadruple> = chunk.iter().map(|&i| &samples[i]).collect();
            let losses = train_step(&mut state, &batch, lr, &config.weights, &ext)?;
            let row = HistoryRow {
                epoch,
                step: state.step,
                lr,
                losses,
            };
            on_step(&row);
            history.push(row);
        }
        state.epoch += 1;
        if config.checkpoint_every != 0 && state.epoch % config.checkpoint_every == 0 {
            save(&state, &format!("epoch_{:04}.ckpt", state.epoch))?;
        }
    }
    save(&state, "final.ckpt")?;
    Ok(TrainOutcome {
        checkpoint: Checkpoint::new(config.clone(), state),
        history,
    })
}

pub fn write_history(path: impl AsRef<Path>, rows: &[HistoryRow]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, history_csv(rows)).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub id: String,
    pub input: MetricReport,
    pub d1: MetricReport,
    pub d2: MetricReport,
    pub mask_iou: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub mean_input: MetricReport,
    pub mean_d1: MetricReport,
    pub mean_d2: MetricReport,
    pub mean_iou: f64,
}

fn mean_of(rows: &[EvalRow], f: impl Fn(&EvalRow) -> f64) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    rows.iter().map(f).sum::<f64>() / rows.len() as f64
}

fn mean_report(rows: &[EvalRow], f: impl Fn(&EvalRow) -> &MetricReport) -> MetricReport {
    MetricReport {
        psnr_db: mean_of(rows, |r| f(r).psnr_db),
        ssim: mean_of(rows, |r| f(r).ssim),
    }
}

impl EvalReport {
    pub fn from_rows(rows: Vec<EvalRow>) -> Self {
        Self {
            mean_input: mean_report(&rows, |r| &r.input),
            mean_d1: mean_report(&rows, |r| &r.d1),
            mean_d2: mean_report(&rows, |r| &r.d2),
            mean_iou: mean_of(&rows, |r| r.mask_iou),
            rows,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,psnr_input,ssim_input,psnr_d1,ssim_d1,psnr_d2,ssim_d2,mask_iou\n");
        let mut line = |id: &str, a: &MetricReport, b: &MetricReport, c: &MetricReport, iou: f64| {
            writeln!(out, "{id},{},{},{},{},{},{},{}", a.psnr_db, a.ssim, b.psnr_db, b.ssim, c.psnr_db, c.ssim, iou)
                .expect("writing to a String");
        };
        for r in &self.rows {
            line(&r.id, &r.input, &r.d1, &r.d2, r.mask_iou);
        }
        line("mean", &self.mean_input, &self.mean_d1, &self.mean_d2, self.mean_iou);
        out
    }
}

/// Scores the model in `ck` on `(id, sample)` pairs against the diffuse
/// ground truth; the highlight mask is `binarize(HF, tau)`.
pub fn evaluate(ck: &Checkpoint, samples: &[(String, Quadruple)], tau: f64) -> Result<EvalReport> {
    let model = &ck.state.model;
    let rows = samples
        .iter()
        .map(|(id, q)| {
            let pred = model.predict(&q.composite)?;
            Ok(EvalRow {
                id: id.clone(),
                input: MetricReport::compute(&q.composite, &q.diffuse)?,
                d1: MetricReport::compute(&pred.d1, &q.diffuse)?,
                d2: MetricReport::compute(&pred.d2, &q.diffuse)?,
                mask_iou: binarize_mask(&pred.hf, tau).iou(&q.mask)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_rows(rows))
}

/// Externally produced predictions scored against the diffuse ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionReport {
    pub rows: Vec<(String, MetricReport)>,
    pub mean: MetricReport,
}

impl PredictionReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,psnr,ssim\n");
        for (id, m) in self.rows.iter().chain(std::iter::once(&("mean".to_string(), self.mean))) {
            writeln!(out, "{id},{},{}", m.psnr_db, m.ssim).expect("writing to a String");
        }
        out
    }
}

/// Scores `<pred_dir>/<id><suffix>.png` for every sample of `dataset`.
pub fn evaluate_predictions(dataset: &Dataset, pred_dir: &Path, suffix: &str) -> Result<PredictionReport> {
    let mut rows = Vec::with_capacity(dataset.len());
    for (i, e) in dataset.entries().iter().enumerate() {
        let q = dataset.get(i)?;
        let pred = load_image(pred_dir.join(format!("{}{suffix}.png", e.id)))?;
        let m = MetricReport::compute(&pred, &q.diffuse).map_err(|err| Error::Sample {
            id: e.id.clone(),
            reason: err.to_string(),
        })?;
        rows.push((e.id.clone(), m));
    }
    let n = rows.len().max(1) as f64;
    let mean = MetricReport {
        psnr_db: rows.iter().map(|(_, m)| m.psnr_db).sum::<f64>() / n,
        ssim: rows.iter().map(|(_, m)| m.ssim).sum::<f64>() / n,
    };
    Ok(PredictionReport { rows, mean })
}
