//! Adversarial, content and perceptual objectives.
//!
//! Every L1 term is mean-reduced. The tape variants drive training and the
//! gradient checks; the plain functions evaluate fixed values.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{dim_err, Result};
use crate::image::Image;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Seed of the frozen perceptual feature stack.
pub const PERCEPTUAL_SEED: u64 = 0x5eed_f00d;
pub const PERCEPTUAL_WIDTHS: [usize; 3] = [8, 16, 32];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_g: f64,
    pub lambda_content: f64,
    pub lambda_per: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_g: 1.0,
            lambda_content: 10.0,
            lambda_per: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_g, self.lambda_content, self.lambda_per];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(crate::Error::InvalidArgument(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// Unweighted terms plus the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub g: f64,
    pub content: f64,
    pub per: f64,
    pub total: f64,
}

/// Fixed random-weight three-block conv stack (3x3 conv + ELU per block,
/// the last two with stride 2). Features are tapped after every block.
#[derive(Clone, Debug, PartialEq)]
pub struct PerceptualExtractor {
    store: ParamStore,
}

impl Default for PerceptualExtractor {
    fn default() -> Self {
        Self::new()
    }
}

impl PerceptualExtractor {
    pub fn new() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(PERCEPTUAL_SEED);
        let mut store = ParamStore::new();
        let mut cin = 3;
        for (i, &c) in PERCEPTUAL_WIDTHS.iter().enumerate() {
            store.init_conv(&mut rng, &format!("per.b{}", i + 1), c, cin, 3, 1.0);
            cin = c;
        }
        Self { store }
    }

    pub fn taps_on_tape(&self, tape: &mut Tape, x: Var) -> Result<Vec<Var>> {
        let mut taps = Vec::with_capacity(PERCEPTUAL_WIDTHS.len());
        let mut cur = x;
        for i in 0..PERCEPTUAL_WIDTHS.len() {
            let stride = if i == 0 { 1 } else { 2 };
            let w = tape.param(&self.store, &format!("per.b{}.w", i + 1), false)?;
            let b = tape.param(&self.store, &format!("per.b{}.b", i + 1), false)?;
            let xp = tape.pad_reflect(cur, [1; 4]);
            let y = tape.conv2d(xp, w, Some(b), stride, 1)?;
            cur = tape.elu(y);
            taps.push(cur);
        }
        Ok(taps)
    }
}

fn l1_on(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let d = tape.abs(d);
    Ok(tape.mean(d))
}

/// `mean(max(0, 1 - real)) + mean(max(0, 1 + fake))`.
pub fn hinge_d_loss_on(tape: &mut Tape, real: Var, fake: Var) -> Result<Var> {
    let r = tape.affine(real, -1.0, 1.0);
    let r = tape.relu(r);
    let r = tape.mean(r);
    let f = tape.affine(fake, 1.0, 1.0);
    let f = tape.relu(f);
    let f = tape.mean(f);
    tape.add(r, f)
}

/// `-mean(fake)`.
pub fn gan_g_loss_on(tape: &mut Tape, fake: Var) -> Var {
    let m = tape.mean(fake);
    tape.affine(m, -1.0, 0.0)
}

pub fn content_loss_on(tape: &mut Tape, d1: Var, d2: Var, gt: Var) -> Result<Var> {
    let a = l1_on(tape, d1, gt)?;
    let b = l1_on(tape, d2, gt)?;
    tape.add(a, b)
}

pub fn perceptual_loss_on(tape: &mut Tape, ext: &PerceptualExtractor, d2: Var, gt: Var) -> Result<Var> {
    if tape.value(d2).shape() != tape.value(gt).shape() {
        return Err(dim_err!(
            "perceptual loss inputs {:?} and {:?} differ",
            tape.value(d2).shape(),
            tape.value(gt).shape()
        ));
    }
    let fa = ext.taps_on_tape(tape, d2)?;
    let fb = ext.taps_on_tape(tape, gt)?;
    let mut total = None;
    for (a, b) in fa.into_iter().zip(fb) {
        let term = l1_on(tape, a, b)?;
        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term)?,
        });
    }
    Ok(total.expect("at least one tap"))
}

fn eval(build: impl FnOnce(&mut Tape) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let out = build(&mut tape)?;
    Ok(tape.value(out).item())
}

pub fn hinge_d_loss(real: &Tensor, fake: &Tensor) -> f64 {
    eval(|t| {
        let (r, f) = (t.constant(real.clone()), t.constant(fake.clone()));
        hinge_d_loss_on(t, r, f)
    })
    .expect("independent operands")
}

pub fn gan_g_loss(fake: &Tensor) -> f64 {
    -fake.mean()
}

pub fn content_loss(d1: &Image, d2: &Image, gt: &Image) -> Result<f64> {
    d1.same_dims(gt)?;
    d2.same_dims(gt)?;
    eval(|t| {
        let (a, b, g) = (t.constant(d1.to_tensor()), t.constant(d2.to_tensor()), t.constant(gt.to_tensor()));
        content_loss_on(t, a, b, g)
    })
}

pub fn perceptual_loss(d2: &Image, gt: &Image, ext: &PerceptualExtractor) -> Result<f64> {
    d2.same_dims(gt)?;
    eval(|t| {
        let (a, g) = (t.constant(d2.to_tensor()), t.constant(gt.to_tensor()));
        perceptual_loss_on(t, ext, a, g)
    })
}

pub fn removal_loss(l_g: f64, l_content: f64, l_per: f64, w: &LossWeights) -> LossBreakdown {
    LossBreakdown {
        g: l_g,
        content: l_content,
        per: l_per,
        total: w.lambda_g * l_g + w.lambda_content * l_content + w.lambda_per * l_per,
    }
}

/// [`removal_loss`] on the tape, returning the weighted total.
pub fn removal_loss_on(tape: &mut Tape, l_g: Var, l_content: Var, l_per: Var, w: &LossWeights) -> Result<Var> {
    let g = tape.affine(l_g, w.lambda_g, 0.0);
    let c = tape.affine(l_content, w.lambda_content, 0.0);
    let p = tape.affine(l_per, w.lambda_per, 0.0);
    let s = tape.add(g, c)?;
    tape.add(s, p)
}
