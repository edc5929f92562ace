//! Highlight feature extractor.
//!
//! A residual backbone produces a four-level pyramid whose spatial size
//! halves at every level. A top-down pass upsamples each deeper level with a
//! learned 2x upsampler (nearest neighbour followed by a 1x1 projection),
//! adds it to the lateral features, and fuses the sum with a 3x3
//! convolution. The finest fused map is projected to three per-channel
//! highlight coefficients and squashed to `[0, 1]` with a logistic sigmoid.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{dim_err, Result};
use crate::image::{Image, Mask};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const PYRAMID_LEVELS: usize = 4;
pub const DEFAULT_HFE_WIDTHS: [usize; PYRAMID_LEVELS] = [16, 32, 64, 128];
/// Spatial sides must be multiples of this (three stride-2 stages).
pub const HFE_ALIGN: usize = 1 << (PYRAMID_LEVELS - 1);
pub const DEFAULT_TAU: f64 = 0.5;

/// Per-pixel, per-channel highlight intensity coefficients in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HighlightFeature(pub Image);

impl HighlightFeature {
    pub fn image(&self) -> &Image {
        &self.0
    }

    pub fn into_image(self) -> Image {
        self.0
    }

    /// Constant map, used when the extractor is ablated.
    pub fn constant(height: usize, width: usize, value: f64) -> Self {
        Self(Image::filled(height, width, 3, value))
    }
}

/// Backbone outputs, finest first. Level `u` is `[1, C_u, H / 2^u, W / 2^u]`
/// (zero-based `u`) over the padded input.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
    /// Input size before alignment padding.
    pub height: usize,
    pub width: usize,
}

impl FeaturePyramid {
    pub fn spatial_dims(&self) -> Vec<(usize, usize)> {
        self.levels.iter().map(|t| (t.shape()[2], t.shape()[3])).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HfeParams {
    pub widths: [usize; PYRAMID_LEVELS],
    pub store: ParamStore,
}

fn conv_same(tape: &mut Tape, store: &ParamStore, name: &str, x: Var, k: usize, stride: usize, trainable: bool) -> Result<Var> {
    let pad = (k - 1) / 2;
    let xp = tape.pad_reflect(x, [pad; 4]);
    let w = tape.param(store, &format!("{name}.w"), trainable)?;
    let b = tape.param(store, &format!("{name}.b"), trainable)?;
    tape.conv2d(xp, w, Some(b), stride, 1)
}

impl HfeParams {
    pub fn new(widths: [usize; PYRAMID_LEVELS], rng: &mut ChaCha8Rng) -> Self {
        let mut store = ParamStore::new();
        store.init_conv(rng, "hfe.stem", widths[0], 3, 3, 1.0);
        for u in 0..PYRAMID_LEVELS {
            let cin = if u == 0 { widths[0] } else { widths[u - 1] };
            let c = widths[u];
            store.init_conv(rng, &format!("hfe.l{}.a", u + 1), c, cin, 3, 1.0);
            store.init_conv(rng, &format!("hfe.l{}.b", u + 1), c, c, 3, 0.5);
            if u > 0 {
                store.init_conv(rng, &format!("hfe.l{}.skip", u + 1), c, cin, 1, 1.0);
            }
        }
        for v in (0..PYRAMID_LEVELS - 1).rev() {
            store.init_conv(rng, &format!("hfe.up{}", v + 1), widths[v], widths[v + 1], 1, 1.0);
            store.init_conv(rng, &format!("hfe.fuse{}", v + 1), widths[v], widths[v], 3, 1.0);
        }
        store.init_conv(rng, "hfe.out", 3, widths[0], 1, 0.5);
        Self { widths, store }
    }

    pub fn random(widths: [usize; PYRAMID_LEVELS], seed: u64) -> Self {
        Self::new(widths, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Backbone on an aligned `[N, 3, H, W]` input; returns the four levels.
    pub fn pyramid_on_tape(&self, tape: &mut Tape, x: Var, trainable: bool) -> Result<Vec<Var>> {
        let (_, c, h, w) = tape.value(x).dims4();
        if c != 3 {
            return Err(dim_err!("extractor expects 3 input channels, got {c}"));
        }
        if h % HFE_ALIGN != 0 || w % HFE_ALIGN != 0 {
            return Err(dim_err!("extractor input {h}x{w} is not a multiple of {HFE_ALIGN}"));
        }
        let s = &self.store;
        let stem = conv_same(tape, s, "hfe.stem", x, 3, 1, trainable)?;
        let mut cur = tape.elu(stem);
        let mut levels = Vec::with_capacity(PYRAMID_LEVELS);
        for u in 1..=PYRAMID_LEVELS {
            let stride = if u == 1 { 1 } else { 2 };
            let a = conv_same(tape, s, &format!("hfe.l{u}.a"), cur, 3, stride, trainable)?;
            let a = tape.elu(a);
            let b = conv_same(tape, s, &format!("hfe.l{u}.b"), a, 3, 1, trainable)?;
            let skip = if u == 1 {
                cur
            } else {
                conv_same(tape, s, &format!("hfe.l{u}.skip"), cur, 1, 2, trainable)?
            };
            let sum = tape.add(skip, b)?;
            cur = tape.elu(sum);
            levels.push(cur);
        }
        Ok(levels)
    }

    /// Top-down fusion of the pyramid into `[N, 3, H, W]` coefficients.
    pub fn fuse_on_tape(&self, tape: &mut Tape, levels: &[Var], trainable: bool) -> Result<Var> {
        if levels.len() != PYRAMID_LEVELS {
            return Err(dim_err!("pyramid has {} levels, expected {}", levels.len(), PYRAMID_LEVELS));
        }
        for (u, &l) in levels.iter().enumerate() {
            let c = tape.value(l).shape()[1];
            if c != self.widths[u] {
                return Err(dim_err!("pyramid level {} has {} channels, parameters expect {}", u + 1, c, self.widths[u]));
            }
            if u > 0 {
                let (_, _, ph, pw) = tape.value(levels[u - 1]).dims4();
                let (_, _, h, w) = tape.value(l).dims4();
                if (ph, pw) != (2 * h, 2 * w) {
                    return Err(dim_err!("pyramid level {} is {}x{}, expected half of {}x{}", u + 1, h, w, ph, pw));
                }
            }
        }
        let s = &self.store;
        let mut deeper = levels[PYRAMID_LEVELS - 1];
        for v in (0..PYRAMID_LEVELS - 1).rev() {
            let up = tape.upsample2(deeper);
            let up = conv_same(tape, s, &format!("hfe.up{}", v + 1), up, 1, 1, trainable)?;
            let sum = tape.add(levels[v], up)?;
            let fused = conv_same(tape, s, &format!("hfe.fuse{}", v + 1), sum, 3, 1, trainable)?;
            deeper = tape.elu(fused);
        }
        let logits = conv_same(tape, s, "hfe.out", deeper, 1, 1, trainable)?;
        Ok(tape.sigmoid(logits))
    }

    /// Full extractor on an aligned batch.
    pub fn forward_on_tape(&self, tape: &mut Tape, x: Var, trainable: bool) -> Result<Var> {
        let levels = self.pyramid_on_tape(tape, x, trainable)?;
        self.fuse_on_tape(tape, &levels, trainable)
    }
}

fn aligned(img: &Image) -> Result<Image> {
    let (h, w) = (img.height(), img.width());
    if h < HFE_ALIGN || w < HFE_ALIGN {
        return Err(dim_err!("image {h}x{w} is smaller than the {HFE_ALIGN}x{HFE_ALIGN} minimum"));
    }
    if img.channels() != 3 {
        return Err(dim_err!("expected a 3-channel image, got {}", img.channels()));
    }
    Ok(img.reflect_pad_to(h.next_multiple_of(HFE_ALIGN), w.next_multiple_of(HFE_ALIGN)))
}

/// Backbone feature pyramid; inputs not divisible by 8 are reflect-padded.
pub fn backbone_pyramid(img: &Image, p: &HfeParams) -> Result<FeaturePyramid> {
    let padded = aligned(img)?;
    let mut tape = Tape::new();
    let x = tape.constant(padded.to_tensor());
    let levels = p.pyramid_on_tape(&mut tape, x, false)?;
    Ok(FeaturePyramid {
        levels: levels.iter().map(|&v| tape.value(v).clone()).collect(),
        height: img.height(),
        width: img.width(),
    })
}

/// Top-down fusion of a pyramid into highlight coefficients at input size.
pub fn upsample_fuse(pyr: &FeaturePyramid, p: &HfeParams) -> Result<HighlightFeature> {
    let mut tape = Tape::new();
    let levels: Vec<Var> = pyr.levels.iter().map(|t| tape.constant(t.clone())).collect();
    let hf = p.fuse_on_tape(&mut tape, &levels, false)?;
    let img = Image::from_tensor(tape.value(hf), 0)?;
    Ok(HighlightFeature(img.crop(pyr.height, pyr.width)))
}

pub fn detect(img: &Image, p: &HfeParams) -> Result<HighlightFeature> {
    upsample_fuse(&backbone_pyramid(img, p)?, p)
}

/// A pixel is highlight iff its channel-mean coefficient is strictly above `tau`.
pub fn binarize_mask(hf: &HighlightFeature, tau: f64) -> Mask {
    let img = hf.image();
    let c = img.channels();
    let data = img
        .data()
        .chunks(c)
        .map(|px| px.iter().sum::<f64>() / c as f64 > tau)
        .collect();
    Mask::new(img.height(), img.width(), data).expect("one flag per pixel")
}

/// [`binarize_mask`] applied to every sample of a `[N, 3, H, W]` tensor.
pub(crate) fn binarize_batch(hf: &Tensor, tau: f64) -> Vec<Mask> {
    let (n, _, _, _) = hf.dims4();
    (0..n)
        .map(|s| binarize_mask(&HighlightFeature(Image::from_tensor(hf, s).expect("in range")), tau))
        .collect()
}
