//! Gated convolutions, the two removal generators and the conditioned
//! patch discriminator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::cha::{cha_layer, ChaSpec};
use crate::error::{dim_err, Result};
use crate::hfe::{binarize_batch, HfeParams, HighlightFeature, DEFAULT_HFE_WIDTHS, DEFAULT_TAU, HFE_ALIGN};
use crate::image::Image;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const DILATIONS: [usize; 4] = [2, 4, 8, 16];
pub const DEFAULT_GEN_WIDTHS: [usize; 2] = [32, 64];
pub const DEFAULT_DISC_WIDTHS: [usize; 4] = [32, 64, 64, 64];
pub const DEFAULT_PATCH_LEN: usize = 2;
/// The attention block runs after two stride-2 stages.
const BOTTLENECK_FACTOR: usize = 4;
/// Initial bias of the output blend gate; sigmoid(-2) keeps early outputs
/// close to the branch input.
const BLEND_BIAS: f64 = -2.0;

/// Ablation switches. `use_hfe = false` feeds a constant 0.5 map in place of
/// the extracted highlight feature.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Toggles {
    pub use_hfe: bool,
    pub use_cha: bool,
    pub use_ha: bool,
    pub use_ba: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            use_hfe: true,
            use_cha: true,
            use_ha: true,
            use_ba: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GatedConvParams {
    /// `[Cout, Cin, k, k]`
    pub feature_w: Tensor,
    pub feature_b: Tensor,
    /// Same shape as `feature_w`.
    pub gate_w: Tensor,
    pub gate_b: Tensor,
    pub stride: usize,
    pub dilation: usize,
}

#[allow(clippy::too_many_arguments)]
fn gated_on_tape(tape: &mut Tape, x: Var, fw: Var, fb: Var, gw: Var, gb: Var, stride: usize, dilation: usize) -> Result<Var> {
    let k = tape.value(fw).shape()[2];
    if tape.value(gw).shape() != tape.value(fw).shape() {
        return Err(dim_err!(
            "gate kernel {:?} differs from feature kernel {:?}",
            tape.value(gw).shape(),
            tape.value(fw).shape()
        ));
    }
    let pad = dilation * (k - 1) / 2;
    let xp = tape.pad_reflect(x, [pad; 4]);
    let f = tape.conv2d(xp, fw, Some(fb), stride, dilation)?;
    let g = tape.conv2d(xp, gw, Some(gb), stride, dilation)?;
    let f = tape.elu(f);
    let g = tape.sigmoid(g);
    tape.mul(f, g)
}

/// `ELU(feature_conv(x)) * sigmoid(gate_conv(x))` on `[N, C, H, W]` with
/// reflect padding; stride 1 preserves the spatial size.
pub fn gated_conv(x: &Tensor, p: &GatedConvParams) -> Result<Tensor> {
    if p.dilation == 0 || p.stride == 0 {
        return Err(dim_err!("stride and dilation must be at least 1"));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = [x, &p.feature_w, &p.feature_b, &p.gate_w, &p.gate_b]
        .into_iter()
        .map(|t| tape.constant(t.clone()))
        .collect();
    let out = gated_on_tape(&mut tape, vars[0], vars[1], vars[2], vars[3], vars[4], p.stride, p.dilation)?;
    Ok(tape.value(out).clone())
}

fn init_gated(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cout: usize, cin: usize) {
    store.init_conv(rng, &format!("{name}.f"), cout, cin, 3, 1.0);
    store.init_conv(rng, &format!("{name}.g"), cout, cin, 3, 1.0);
}

fn gated_layer(tape: &mut Tape, store: &ParamStore, name: &str, x: Var, stride: usize, dilation: usize, trainable: bool) -> Result<Var> {
    let mut p = |suffix: &str| tape.param(store, &format!("{name}.{suffix}"), trainable);
    let (fw, fb, gw, gb) = (p("f.w")?, p("f.b")?, p("g.w")?, p("g.b")?);
    gated_on_tape(tape, x, fw, fb, gw, gb, stride, dilation)
}

fn conv3(tape: &mut Tape, store: &ParamStore, name: &str, x: Var, trainable: bool) -> Result<Var> {
    let xp = tape.pad_reflect(x, [1; 4]);
    let w = tape.param(store, &format!("{name}.w"), trainable)?;
    let b = tape.param(store, &format!("{name}.b"), trainable)?;
    tape.conv2d(xp, w, Some(b), 1, 1)
}

fn check_pair(tape: &Tape, a: Var, hf: Var) -> Result<(usize, usize)> {
    let (n, c, h, w) = tape.value(a).dims4();
    let (hn, hc, hh, hw) = tape.value(hf).dims4();
    if c != 3 || hc != 3 {
        return Err(dim_err!("expected 3-channel image and highlight feature, got {c} and {hc}"));
    }
    if (n, h, w) != (hn, hh, hw) {
        return Err(dim_err!("image {n}x{h}x{w} and highlight feature {hn}x{hh}x{hw} differ"));
    }
    Ok((h, w))
}

/// Both removal branches. Each branch maps `base ⊕ HF` (6 channels) to a
/// 3-channel image through two gated stride-2 stages, four dilated gated
/// blocks, two upsampling gated stages and a gated blend head
/// `b + m * (fill - b)` with `b = clamp(base, 0, 1)`, so outputs stay inside
/// `[0, 1]` for any finite input. The refine branch applies contextual
/// highlight attention after its dilated blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorParams {
    pub widths: [usize; 2],
    pub patch_len: usize,
    pub tau: f64,
    pub toggles: Toggles,
    pub store: ParamStore,
}

impl GeneratorParams {
    pub fn new(widths: [usize; 2], toggles: Toggles, rng: &mut ChaCha8Rng) -> Self {
        let [w1, w2] = widths;
        let mut store = ParamStore::new();
        for branch in ["coarse", "refine"] {
            init_gated(&mut store, rng, &format!("{branch}.enc1"), w1, 6);
            init_gated(&mut store, rng, &format!("{branch}.enc2"), w2, w1);
            for i in 1..=DILATIONS.len() {
                init_gated(&mut store, rng, &format!("{branch}.dil{i}"), w2, w2);
            }
            init_gated(&mut store, rng, &format!("{branch}.dec1"), w1, w2);
            init_gated(&mut store, rng, &format!("{branch}.dec2"), w1, w1);
            store.init_conv(rng, &format!("{branch}.fill"), 3, w1, 3, 0.5);
            store.init_conv(rng, &format!("{branch}.blend"), 3, w1, 3, 0.5);
            store
                .get_mut(&format!("{branch}.blend.b"))
                .expect("just inserted")
                .data_mut()
                .fill(BLEND_BIAS);
        }
        store.init_conv(rng, "refine.match", w2, 3 * w2, 3, 1.0);
        Self {
            widths,
            patch_len: DEFAULT_PATCH_LEN,
            tau: DEFAULT_TAU,
            toggles,
            store,
        }
    }

    pub fn random(widths: [usize; 2], toggles: Toggles, seed: u64) -> Self {
        Self::new(widths, toggles, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn branch(&self, tape: &mut Tape, branch: &str, base: Var, hf: Var, trainable: bool) -> Result<Var> {
        let (h, w) = check_pair(tape, base, hf)?;
        if h % HFE_ALIGN != 0 || w % HFE_ALIGN != 0 {
            return Err(dim_err!("generator input {h}x{w} is not a multiple of {HFE_ALIGN}"));
        }
        let s = &self.store;
        let x = tape.concat(&[base, hf])?;
        let x = gated_layer(tape, s, &format!("{branch}.enc1"), x, 2, 1, trainable)?;
        let mut x = gated_layer(tape, s, &format!("{branch}.enc2"), x, 2, 1, trainable)?;
        for (i, &d) in DILATIONS.iter().enumerate() {
            x = gated_layer(tape, s, &format!("{branch}.dil{}", i + 1), x, 1, d, trainable)?;
        }
        if branch == "refine" && self.toggles.use_cha {
            let masks = binarize_batch(tape.value(hf), self.tau)
                .iter()
                .map(|m| m.max_pool(BOTTLENECK_FACTOR))
                .collect();
            let spec = ChaSpec {
                masks,
                patch_len: self.patch_len,
                use_ha: self.toggles.use_ha,
                use_ba: self.toggles.use_ba,
            };
            let mw = tape.param(s, "refine.match.w", trainable)?;
            let mb = tape.param(s, "refine.match.b", trainable)?;
            x = cha_layer(tape, x, spec, mw, mb)?;
        }
        let x = tape.upsample2(x);
        let x = gated_layer(tape, s, &format!("{branch}.dec1"), x, 1, 1, trainable)?;
        let x = tape.upsample2(x);
        let x = gated_layer(tape, s, &format!("{branch}.dec2"), x, 1, 1, trainable)?;
        let fill = conv3(tape, s, &format!("{branch}.fill"), x, trainable)?;
        let fill = tape.sigmoid(fill);
        let m = conv3(tape, s, &format!("{branch}.blend"), x, trainable)?;
        let m = tape.sigmoid(m);
        let base = tape.clamp(base, 0.0, 1.0);
        let delta = tape.sub(fill, base)?;
        let delta = tape.mul(m, delta)?;
        tape.add(base, delta)
    }

    /// Coarse removal on aligned `[N, 3, H, W]` tensors.
    pub fn coarse_on_tape(&self, tape: &mut Tape, img: Var, hf: Var, trainable: bool) -> Result<Var> {
        self.branch(tape, "coarse", img, hf, trainable)
    }

    /// Refinement of a coarse result on aligned tensors.
    pub fn refine_on_tape(&self, tape: &mut Tape, d1: Var, hf: Var, trainable: bool) -> Result<Var> {
        self.branch(tape, "refine", d1, hf, trainable)
    }
}

fn aligned_pair(img: &Image, hf: &HighlightFeature) -> Result<(Tensor, Tensor)> {
    let hfi = hf.image();
    if img.dims() != hfi.dims() {
        return Err(dim_err!("image {:?} and highlight feature {:?} differ", img.dims(), hfi.dims()));
    }
    let (h, w) = (img.height(), img.width());
    if h < HFE_ALIGN || w < HFE_ALIGN {
        return Err(dim_err!("image {h}x{w} is smaller than the {HFE_ALIGN}x{HFE_ALIGN} minimum"));
    }
    let (ph, pw) = (h.next_multiple_of(HFE_ALIGN), w.next_multiple_of(HFE_ALIGN));
    Ok((img.reflect_pad_to(ph, pw).to_tensor(), hfi.reflect_pad_to(ph, pw).to_tensor()))
}

fn run_branch(img: &Image, hf: &HighlightFeature, p: &GeneratorParams, branch: &str) -> Result<Image> {
    let (x, f) = aligned_pair(img, hf)?;
    let mut tape = Tape::new();
    let (x, f) = (tape.constant(x), tape.constant(f));
    let out = p.branch(&mut tape, branch, x, f, false)?;
    Ok(Image::from_tensor(tape.value(out), 0)?.crop(img.height(), img.width()))
}

/// First-stage highlight-free estimate.
pub fn coarse_remove(img: &Image, hf: &HighlightFeature, p: &GeneratorParams) -> Result<Image> {
    run_branch(img, hf, p, "coarse")
}

/// Second-stage estimate from the coarse result.
pub fn refine_remove(d1: &Image, hf: &HighlightFeature, p: &GeneratorParams) -> Result<Image> {
    run_branch(d1, hf, p, "refine")
}

/// Four spectrally normalized 5x5 stride-2 convolutions with ELU, then a
/// spectrally normalized 1x1 score head.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorParams {
    pub widths: [usize; 4],
    pub store: ParamStore,
}

/// Refreshed power-iteration vectors produced by a discriminator pass.
pub type PowerUpdates = Vec<(String, Vec<f64>)>;

const DISC_LAYERS: [&str; 5] = ["disc.l1", "disc.l2", "disc.l3", "disc.l4", "disc.head"];

impl DiscriminatorParams {
    pub fn new(widths: [usize; 4], rng: &mut ChaCha8Rng) -> Self {
        let mut store = ParamStore::new();
        let mut cin = 6;
        for (i, &c) in widths.iter().enumerate() {
            store.init_conv(rng, DISC_LAYERS[i], c, cin, 5, 1.0);
            cin = c;
        }
        store.init_conv(rng, "disc.head", 1, cin, 1, 1.0);
        for name in DISC_LAYERS {
            let rows = store.get(&format!("{name}.w")).expect("just inserted").shape()[0];
            store.init_power_vector(rng, &format!("{name}.u"), rows);
        }
        Self { widths, store }
    }

    pub fn random(widths: [usize; 4], seed: u64) -> Self {
        Self::new(widths, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Score map `[N, 1, ceil(H/16), ceil(W/16)]` plus the refreshed power
    /// vectors; the stored vectors are untouched until
    /// [`apply_power_updates`](Self::apply_power_updates).
    pub fn forward_on_tape(&self, tape: &mut Tape, img: Var, hf: Var, trainable: bool) -> Result<(Var, PowerUpdates)> {
        check_pair(tape, img, hf)?;
        let s = &self.store;
        let mut x = tape.concat(&[img, hf])?;
        let mut updates = Vec::with_capacity(DISC_LAYERS.len());
        for (i, name) in DISC_LAYERS.iter().enumerate() {
            let w = tape.param(s, &format!("{name}.w"), trainable)?;
            let b = tape.param(s, &format!("{name}.b"), trainable)?;
            let (wn, u) = tape.spectral_norm(w, s.buffer(&format!("{name}.u"))?.data())?;
            updates.push((format!("{name}.u"), u));
            if i < 4 {
                let xp = tape.pad_reflect(x, [2; 4]);
                let y = tape.conv2d(xp, wn, Some(b), 2, 1)?;
                x = tape.elu(y);
            } else {
                x = tape.conv2d(x, wn, Some(b), 1, 1)?;
            }
        }
        Ok((x, updates))
    }

    pub fn apply_power_updates(&mut self, updates: PowerUpdates) -> Result<()> {
        for (name, u) in updates {
            self.store.buffer_mut(&name)?.data_mut().copy_from_slice(&u);
        }
        Ok(())
    }
}

/// Patch scores for one image conditioned on its highlight feature.
pub fn discriminate(img: &Image, hf: &HighlightFeature, p: &DiscriminatorParams) -> Result<Tensor> {
    if img.dims() != hf.image().dims() {
        return Err(dim_err!("image {:?} and highlight feature {:?} differ", img.dims(), hf.image().dims()));
    }
    let mut tape = Tape::new();
    let x = tape.constant(img.to_tensor());
    let f = tape.constant(hf.image().to_tensor());
    let (out, _) = p.forward_on_tape(&mut tape, x, f, false)?;
    Ok(tape.value(out).clone())
}

/// Architecture hyper-parameters shared by training, checkpoints and the CLI.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub hfe_widths: [usize; 4],
    pub gen_widths: [usize; 2],
    pub disc_widths: [usize; 4],
    pub toggles: Toggles,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hfe_widths: DEFAULT_HFE_WIDTHS,
            gen_widths: DEFAULT_GEN_WIDTHS,
            disc_widths: DEFAULT_DISC_WIDTHS,
            toggles: Toggles::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub hfe: HfeParams,
    pub generator: GeneratorParams,
    pub discriminator: DiscriminatorParams,
}

/// Generator-side tape outputs, all `[N, 3, H, W]`.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorVars {
    pub hf: Var,
    pub d1: Var,
    pub d2: Var,
}

/// Inference outputs at the input resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub hf: HighlightFeature,
    pub d1: Image,
    pub d2: Image,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hfe = HfeParams::new(config.hfe_widths, &mut rng);
        let generator = GeneratorParams::new(config.gen_widths, config.toggles, &mut rng);
        let discriminator = DiscriminatorParams::new(config.disc_widths, &mut rng);
        Self {
            config,
            hfe,
            generator,
            discriminator,
        }
    }

    /// Highlight feature, coarse and refined outputs for an aligned batch.
    pub fn generate_on_tape(&self, tape: &mut Tape, x: Var, trainable: bool) -> Result<GeneratorVars> {
        let hf = if self.config.toggles.use_hfe {
            self.hfe.forward_on_tape(tape, x, trainable)?
        } else {
            let shape = tape.value(x).shape().to_vec();
            tape.constant(Tensor::full(&shape, 0.5))
        };
        let d1 = self.generator.coarse_on_tape(tape, x, hf, trainable)?;
        let d2 = self.generator.refine_on_tape(tape, d1, hf, trainable)?;
        Ok(GeneratorVars { hf, d1, d2 })
    }

    /// Full pipeline on one image of any size of at least 8x8.
    pub fn predict(&self, img: &Image) -> Result<Prediction> {
        let (h, w) = (img.height(), img.width());
        if h < HFE_ALIGN || w < HFE_ALIGN {
            return Err(dim_err!("image {h}x{w} is smaller than the {HFE_ALIGN}x{HFE_ALIGN} minimum"));
        }
        let padded = img.reflect_pad_to(h.next_multiple_of(HFE_ALIGN), w.next_multiple_of(HFE_ALIGN));
        let mut tape = Tape::new();
        let x = tape.constant(padded.to_tensor());
        let out = self.generate_on_tape(&mut tape, x, false)?;
        let take = |v: Var| Image::from_tensor(tape.value(v), 0).map(|i| i.crop(h, w));
        Ok(Prediction {
            hf: HighlightFeature(take(out.hf)?),
            d1: take(out.d1)?,
            d2: take(out.d2)?,
        })
    }

    /// Named parameter groups updated by the generator step.
    pub fn generator_stores(&self) -> [&ParamStore; 2] {
        [&self.hfe.store, &self.generator.store]
    }
}
