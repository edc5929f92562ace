//! Contextual highlight attention.
//!
//! A feature map is tiled into `l x l` patches and split into highlight
//! patches `HP` (any masked pixel in the cell) and background patches `BP`.
//! Scores are a row softmax over cosine similarities,
//!
//! ```text
//! C(s, t) = softmax_t( <HP_s, BP_t> / (|HP_s| |BP_t|) )
//! HA_s    = sum_t BP_t * C(s, t)      highlight cells filled from background
//! BA_t    = sum_s HP_s * C(s, t)      background cells re-weighted by highlights
//! ```
//!
//! `HA` is scattered into the highlight cells of a zero map and `BA` into
//! the background cells of another; both are concatenated with the input and
//! fused by a 3x3 matching convolution.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::conv::gemm;
use crate::error::{dim_err, Error, Result};
use crate::image::{assemble_patches, extract_patches, extract_patches_padded, Image, Mask, PatchGrid};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Lower bound on patch norms in the cosine similarity.
pub const NORM_FLOOR: f64 = 1e-8;

/// Patches of one feature map partitioned into highlight and background sets.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSplit {
    /// `[S, dim]` row-major.
    pub hp: Vec<f64>,
    /// `[T, dim]` row-major.
    pub bp: Vec<f64>,
    pub hp_idx: Vec<usize>,
    pub bp_idx: Vec<usize>,
    pub dim: usize,
}

impl PatchSplit {
    pub fn num_highlight(&self) -> usize {
        self.hp_idx.len()
    }

    pub fn num_background(&self) -> usize {
        self.bp_idx.len()
    }

    pub fn hp_row(&self, s: usize) -> &[f64] {
        &self.hp[s * self.dim..(s + 1) * self.dim]
    }

    pub fn bp_row(&self, t: usize) -> &[f64] {
        &self.bp[t * self.dim..(t + 1) * self.dim]
    }

    fn from_grid(grid: &PatchGrid, highlight: &[bool]) -> Self {
        let dim = grid.patch_dim();
        let mut split = PatchSplit {
            hp: Vec::new(),
            bp: Vec::new(),
            hp_idx: Vec::new(),
            bp_idx: Vec::new(),
            dim,
        };
        for (r, &is_hl) in highlight.iter().enumerate() {
            if is_hl {
                split.hp_idx.push(r);
                split.hp.extend_from_slice(grid.patch(r));
            } else {
                split.bp_idx.push(r);
                split.bp.extend_from_slice(grid.patch(r));
            }
        }
        split
    }
}

/// Row-stochastic `[S, T]` score matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMatrix {
    pub scores: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
}

impl AttentionMatrix {
    pub fn get(&self, s: usize, t: usize) -> f64 {
        self.scores[s * self.cols + t]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.scores[s * self.cols..(s + 1) * self.cols]
    }
}

/// Per-cell highlight flags: a cell is highlight if any of its pixels is masked.
fn cell_flags(mask: &Mask, grid: &PatchGrid) -> Vec<bool> {
    let l = grid.patch_len;
    let padded = mask.reflect_pad_to(grid.grid_rows * l, grid.grid_cols * l);
    let mut flags = vec![false; grid.count()];
    for y in 0..padded.height() {
        for x in 0..padded.width() {
            if padded.get(y, x) {
                flags[(y / l) * grid.grid_cols + x / l] = true;
            }
        }
    }
    flags
}

/// Partition the `l x l` patches of `feat` by `mask`.
pub fn split_patches(feat: &Image, mask: &Mask, l: usize) -> Result<PatchSplit> {
    if (feat.height(), feat.width()) != (mask.height(), mask.width()) {
        return Err(dim_err!(
            "mask {}x{} does not match feature map {}x{}",
            mask.height(),
            mask.width(),
            feat.height(),
            feat.width()
        ));
    }
    let grid = extract_patches_padded(feat, l)?;
    let flags = cell_flags(mask, &grid);
    Ok(PatchSplit::from_grid(&grid, &flags))
}

fn normalized_rows(rows: &[f64], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut unit = rows.to_vec();
    let mut norms = Vec::with_capacity(rows.len() / dim.max(1));
    for row in unit.chunks_mut(dim) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
        row.iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    (unit, norms)
}

/// Cosine-similarity attention with a softmax over background patches.
///
/// Fails with [`Error::DegenerateSplit`] when either side of the split is empty.
pub fn attention_scores(split: &PatchSplit) -> Result<AttentionMatrix> {
    let (s, t, d) = (split.num_highlight(), split.num_background(), split.dim);
    if s == 0 || t == 0 {
        return Err(Error::DegenerateSplit {
            highlight: s,
            background: t,
        });
    }
    let (u, _) = normalized_rows(&split.hp, d);
    let (v, _) = normalized_rows(&split.bp, d);
    let mut scores = vec![0.0; s * t];
    gemm(s, d, t, &u, false, &v, true, 0.0, &mut scores);
    for row in scores.chunks_mut(t) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for e in row.iter_mut() {
            *e = (*e - max).exp();
            sum += *e;
        }
        row.iter_mut().for_each(|e| *e /= sum);
    }
    Ok(AttentionMatrix { scores, rows: s, cols: t })
}

fn check_attention(split: &PatchSplit, c: &AttentionMatrix) -> Result<()> {
    if c.rows != split.num_highlight() || c.cols != split.num_background() {
        return Err(dim_err!(
            "attention is {}x{} but split has {} highlight and {} background patches",
            c.rows,
            c.cols,
            split.num_highlight(),
            split.num_background()
        ));
    }
    Ok(())
}

/// `HA_s = sum_t BP_t C(s, t)`, returned as `[S, dim]`.
pub fn highlight_fill(split: &PatchSplit, c: &AttentionMatrix) -> Result<Vec<f64>> {
    check_attention(split, c)?;
    let (s, t, d) = (c.rows, c.cols, split.dim);
    let mut out = vec![0.0; s * d];
    if s > 0 && t > 0 {
        gemm(s, t, d, &c.scores, false, &split.bp, false, 0.0, &mut out);
    }
    Ok(out)
}

/// `BA_t = sum_s HP_s C(s, t)`, returned as `[T, dim]`. Columns of `C` are
/// not normalized, so this is not a convex combination.
pub fn background_fill(split: &PatchSplit, c: &AttentionMatrix) -> Result<Vec<f64>> {
    check_attention(split, c)?;
    let (s, t, d) = (c.rows, c.cols, split.dim);
    let mut out = vec![0.0; t * d];
    if s > 0 && t > 0 {
        gemm(t, s, d, &c.scores, true, &split.hp, false, 0.0, &mut out);
    }
    Ok(out)
}

fn norm_backward(unit: &[f64], norms: &[f64], g_unit: &[f64], dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; unit.len()];
    for (r, &n) in norms.iter().enumerate() {
        let u = &unit[r * dim..(r + 1) * dim];
        let g = &g_unit[r * dim..(r + 1) * dim];
        let o = &mut out[r * dim..(r + 1) * dim];
        let raw_norm = u.iter().map(|v| v * v).sum::<f64>().sqrt() * n;
        if raw_norm > NORM_FLOOR {
            let proj: f64 = u.iter().zip(g).map(|(a, b)| a * b).sum();
            for j in 0..dim {
                o[j] = (g[j] - u[j] * proj) / n;
            }
        } else {
            for j in 0..dim {
                o[j] = g[j] / n;
            }
        }
    }
    out
}

/// Gradients of `HA`/`BA` with respect to the highlight and background patches.
fn attention_backward(
    split: &PatchSplit,
    c: &AttentionMatrix,
    g_ha: &[f64],
    g_ba: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let (s, t, d) = (c.rows, c.cols, split.dim);
    let mut g_hp = vec![0.0; s * d];
    let mut g_bp = vec![0.0; t * d];
    gemm(t, s, d, &c.scores, true, g_ha, false, 0.0, &mut g_bp);
    gemm(s, t, d, &c.scores, false, g_ba, false, 0.0, &mut g_hp);

    let mut g_c = vec![0.0; s * t];
    gemm(s, d, t, g_ha, false, &split.bp, true, 0.0, &mut g_c);
    gemm(s, d, t, &split.hp, false, g_ba, true, 1.0, &mut g_c);

    let mut g_cos = vec![0.0; s * t];
    for r in 0..s {
        let cr = c.row(r);
        let gr = &g_c[r * t..(r + 1) * t];
        let dotp: f64 = cr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for k in 0..t {
            g_cos[r * t + k] = cr[k] * (gr[k] - dotp);
        }
    }

    let (u, un) = normalized_rows(&split.hp, d);
    let (v, vn) = normalized_rows(&split.bp, d);
    let mut g_u = vec![0.0; s * d];
    let mut g_v = vec![0.0; t * d];
    gemm(s, t, d, &g_cos, false, &v, false, 0.0, &mut g_u);
    gemm(t, s, d, &g_cos, true, &u, false, 0.0, &mut g_v);
    for (a, b) in g_hp.iter_mut().zip(norm_backward(&u, &un, &g_u, d)) {
        *a += b;
    }
    for (a, b) in g_bp.iter_mut().zip(norm_backward(&v, &vn, &g_v, d)) {
        *a += b;
    }
    (g_hp, g_bp)
}

/// Configuration of the attention-map op on a `[N, C, H, W]` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ChaSpec {
    /// One mask per batch sample at the feature resolution.
    pub masks: Vec<Mask>,
    pub patch_len: usize,
    pub use_ha: bool,
    pub use_ba: bool,
}

impl ChaSpec {
    fn validate(&self, x: &Tensor) -> Result<()> {
        let (n, _, h, w) = x.dims4();
        let l = self.patch_len;
        if self.masks.len() != n {
            return Err(dim_err!("{} masks for a batch of {}", self.masks.len(), n));
        }
        if let Some(m) = self.masks.iter().find(|m| (m.height(), m.width()) != (h, w)) {
            return Err(dim_err!(
                "mask {}x{} does not match feature map {}x{}",
                m.height(),
                m.width(),
                h,
                w
            ));
        }
        if l == 0 || h % l != 0 || w % l != 0 {
            return Err(dim_err!("{h}x{w} feature map is not divisible by patch length {l}"));
        }
        Ok(())
    }
}

fn sample_grid(x: &Tensor, n: usize, l: usize) -> PatchGrid {
    let feat = Image::from_tensor(x, n).expect("sample in range");
    extract_patches(&feat, l).expect("divisibility validated")
}

fn write_planes(dst: &mut [f64], img: &Image) {
    let (h, w, c) = img.dims();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                dst[(ch * h + y) * w + x] = img.get(y, x, ch);
            }
        }
    }
}

fn scatter(template: &PatchGrid, idx: &[usize], rows: &[f64]) -> Image {
    let mut grid = PatchGrid {
        patches: vec![0.0; template.patches.len()],
        ..template.clone()
    };
    let d = grid.patch_dim();
    for (k, &r) in idx.iter().enumerate() {
        grid.patch_mut(r).copy_from_slice(&rows[k * d..(k + 1) * d]);
    }
    assemble_patches(&grid).expect("grid built from a valid template")
}

pub(crate) fn maps_forward(x: &Tensor, spec: &ChaSpec) -> Result<Tensor> {
    spec.validate(x)?;
    let (n, c, h, w) = x.dims4();
    let mut out = Tensor::zeros(&[n, 2 * c, h, w]);
    let plane = c * h * w;
    for s in 0..n {
        let grid = sample_grid(x, s, spec.patch_len);
        let flags = cell_flags(&spec.masks[s], &grid);
        let split = PatchSplit::from_grid(&grid, &flags);
        let Ok(att) = attention_scores(&split) else { continue };
        let base = s * 2 * plane;
        if spec.use_ha {
            let ha = highlight_fill(&split, &att)?;
            write_planes(&mut out.data_mut()[base..base + plane], &scatter(&grid, &split.hp_idx, &ha));
        }
        if spec.use_ba {
            let ba = background_fill(&split, &att)?;
            write_planes(
                &mut out.data_mut()[base + plane..base + 2 * plane],
                &scatter(&grid, &split.bp_idx, &ba),
            );
        }
    }
    Ok(out)
}

pub(crate) fn maps_backward(x: &Tensor, spec: &ChaSpec, g: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let mut gx = Tensor::zeros(x.shape());
    let plane = c * h * w;
    let l = spec.patch_len;
    for s in 0..n {
        let grid = sample_grid(x, s, l);
        let flags = cell_flags(&spec.masks[s], &grid);
        let split = PatchSplit::from_grid(&grid, &flags);
        let Ok(att) = attention_scores(&split) else { continue };
        let (ns, nt, d) = (split.num_highlight(), split.num_background(), split.dim);
        let g_sample = Image::from_tensor(
            &Tensor::from_vec(&[1, 2 * c, h, w], g.data()[s * 2 * plane..(s + 1) * 2 * plane].to_vec())
                .expect("slice of gradient"),
            0,
        )
        .expect("single sample");
        let g_maps = extract_patches(&g_sample, l).expect("divisible");
        // g_maps patches interleave HA and BA channels; split them per patch.
        let split_channels = |idx: &[usize], offset: usize, enabled: bool, rows: usize| -> Vec<f64> {
            if !enabled {
                return vec![0.0; rows * d];
            }
            let mut outv = Vec::with_capacity(rows * d);
            for &r in idx {
                let p = g_maps.patch(r);
                for px in 0..l * l {
                    outv.extend_from_slice(&p[px * 2 * c + offset..px * 2 * c + offset + c]);
                }
            }
            outv
        };
        let g_ha = split_channels(&split.hp_idx, 0, spec.use_ha, ns);
        let g_ba = split_channels(&split.bp_idx, c, spec.use_ba, nt);
        let (g_hp, g_bp) = attention_backward(&split, &att, &g_ha, &g_ba);
        let mut g_grid = PatchGrid {
            patches: vec![0.0; grid.patches.len()],
            ..grid.clone()
        };
        for (k, &r) in split.hp_idx.iter().enumerate() {
            g_grid.patch_mut(r).copy_from_slice(&g_hp[k * d..(k + 1) * d]);
        }
        for (k, &r) in split.bp_idx.iter().enumerate() {
            g_grid.patch_mut(r).copy_from_slice(&g_bp[k * d..(k + 1) * d]);
        }
        let g_img = assemble_patches(&g_grid).expect("valid grid");
        write_planes(&mut gx.data_mut()[s * plane..(s + 1) * plane], &g_img);
    }
    gx
}

/// Weights of the 3x3 convolution that fuses `feat ⊕ HA-map ⊕ BA-map`
/// back to the input channel count.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchingConv {
    /// `[C, 3C, 3, 3]`
    pub weight: Tensor,
    /// `[C]`
    pub bias: Tensor,
}

impl MatchingConv {
    pub fn random(channels: usize, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        store.init_conv(&mut rng, "m", channels, 3 * channels, 3, 1.0);
        let mut bias = store.get("m.b").expect("just inserted").clone();
        bias.data_mut()
            .iter_mut()
            .enumerate()
            .for_each(|(i, b)| *b = 0.01 * (i as f64 + 1.0));
        Self {
            weight: store.get("m.w").expect("just inserted").clone(),
            bias,
        }
    }

    pub fn channels(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// Attention maps, concatenation and matching convolution on the tape.
pub fn cha_layer(tape: &mut Tape, x: Var, spec: ChaSpec, weight: Var, bias: Var) -> Result<Var> {
    let maps = tape.cha_maps(x, spec)?;
    let cat = tape.concat(&[x, maps])?;
    let padded = tape.pad_reflect(cat, [1, 1, 1, 1]);
    tape.conv2d(padded, weight, Some(bias), 1, 1)
}

fn check_matching(feat: &Image, mask: &Mask, p: &MatchingConv) -> Result<()> {
    if (feat.height(), feat.width()) != (mask.height(), mask.width()) {
        return Err(dim_err!(
            "mask {}x{} does not match feature map {}x{}",
            mask.height(),
            mask.width(),
            feat.height(),
            feat.width()
        ));
    }
    let c = feat.channels();
    if p.weight.shape() != [c, 3 * c, 3, 3] || p.bias.len() != c {
        return Err(dim_err!(
            "matching conv {:?} does not fit {} channels",
            p.weight.shape(),
            c
        ));
    }
    Ok(())
}

/// Full attention layer on one `[H, W, C]` map.
///
/// Maps whose sides are not multiples of `l` are reflect-padded first and
/// the result is cropped back. Empty highlight or background sets leave the
/// attention maps at zero.
pub fn cha_forward(feat: &Image, mask: &Mask, l: usize, p: &MatchingConv) -> Result<Image> {
    check_matching(feat, mask, p)?;
    if l == 0 {
        return Err(dim_err!("patch length must be positive"));
    }
    let (h, w) = (feat.height(), feat.width());
    let (ph, pw) = (h.div_ceil(l) * l, w.div_ceil(l) * l);
    let feat_p = feat.reflect_pad_to(ph, pw);
    let mask_p = mask.reflect_pad_to(ph, pw);
    let mut tape = Tape::new();
    let x = tape.constant(feat_p.to_tensor());
    let wv = tape.constant(p.weight.clone());
    let bv = tape.constant(p.bias.clone());
    let spec = ChaSpec {
        masks: vec![mask_p],
        patch_len: l,
        use_ha: true,
        use_ba: true,
    };
    let y = cha_layer(&mut tape, x, spec, wv, bv)?;
    Ok(Image::from_tensor(tape.value(y), 0)?.crop(h, w))
}

/// Scalar-loop reference for [`cha_forward`], written directly from the
/// attention formulas with no shared helpers.
#[allow(clippy::needless_range_loop)]
pub fn cha_oracle(feat: &Image, mask: &Mask, l: usize, p: &MatchingConv) -> Result<Image> {
    check_matching(feat, mask, p)?;
    if l == 0 {
        return Err(dim_err!("patch length must be positive"));
    }
    fn mirror(mut i: isize, n: usize) -> usize {
        let n = n as isize;
        if n == 1 {
            return 0;
        }
        while i < 0 || i >= n {
            if i < 0 {
                i = -i;
            }
            if i >= n {
                i = 2 * (n - 1) - i;
            }
        }
        i as usize
    }
    let (h0, w0, c) = feat.dims();
    let rows = h0.div_ceil(l);
    let cols = w0.div_ceil(l);
    let (h, w) = (rows * l, cols * l);
    let mut f = vec![vec![vec![0.0; c]; w]; h];
    let mut m = vec![vec![false; w]; h];
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = (mirror(y as isize, h0), mirror(x as isize, w0));
            for ch in 0..c {
                f[y][x][ch] = feat.get(sy, sx, ch);
            }
            m[y][x] = mask.get(sy, sx);
        }
    }

    let mut hp_cells = Vec::new();
    let mut bp_cells = Vec::new();
    for gy in 0..rows {
        for gx in 0..cols {
            let mut any = false;
            for dy in 0..l {
                for dx in 0..l {
                    any |= m[gy * l + dy][gx * l + dx];
                }
            }
            if any {
                hp_cells.push((gy, gx));
            } else {
                bp_cells.push((gy, gx));
            }
        }
    }

    let mut ha_map = vec![vec![vec![0.0; c]; w]; h];
    let mut ba_map = vec![vec![vec![0.0; c]; w]; h];
    if !hp_cells.is_empty() && !bp_cells.is_empty() {
        let norm = |cell: (usize, usize)| -> f64 {
            let mut acc = 0.0;
            for dy in 0..l {
                for dx in 0..l {
                    for ch in 0..c {
                        let v = f[cell.0 * l + dy][cell.1 * l + dx][ch];
                        acc += v * v;
                    }
                }
            }
            acc.sqrt().max(NORM_FLOOR)
        };
        let mut score = vec![vec![0.0; bp_cells.len()]; hp_cells.len()];
        for (s, &hc) in hp_cells.iter().enumerate() {
            let mut denom = 0.0;
            for (t, &bc) in bp_cells.iter().enumerate() {
                let mut dotp = 0.0;
                for dy in 0..l {
                    for dx in 0..l {
                        for ch in 0..c {
                            dotp += f[hc.0 * l + dy][hc.1 * l + dx][ch] * f[bc.0 * l + dy][bc.1 * l + dx][ch];
                        }
                    }
                }
                let e = (dotp / (norm(hc) * norm(bc))).exp();
                score[s][t] = e;
                denom += e;
            }
            for t in 0..bp_cells.len() {
                score[s][t] /= denom;
            }
        }
        for (s, &hc) in hp_cells.iter().enumerate() {
            for (t, &bc) in bp_cells.iter().enumerate() {
                for dy in 0..l {
                    for dx in 0..l {
                        for ch in 0..c {
                            ha_map[hc.0 * l + dy][hc.1 * l + dx][ch] +=
                                f[bc.0 * l + dy][bc.1 * l + dx][ch] * score[s][t];
                            ba_map[bc.0 * l + dy][bc.1 * l + dx][ch] +=
                                f[hc.0 * l + dy][hc.1 * l + dx][ch] * score[s][t];
                        }
                    }
                }
            }
        }
    }

    let input = |y: usize, x: usize, k: usize| -> f64 {
        if k < c {
            f[y][x][k]
        } else if k < 2 * c {
            ha_map[y][x][k - c]
        } else {
            ba_map[y][x][k - 2 * c]
        }
    };
    let wt = p.weight.data();
    let mut out = Image::filled(h0, w0, c, 0.0);
    for y in 0..h0 {
        for x in 0..w0 {
            for co in 0..c {
                let mut acc = p.bias.data()[co];
                for k in 0..3 * c {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let sy = mirror(y as isize + ky as isize - 1, h);
                            let sx = mirror(x as isize + kx as isize - 1, w);
                            acc += wt[((co * 3 * c + k) * 3 + ky) * 3 + kx] * input(sy, sx, k);
                        }
                    }
                }
                out.set(y, x, co, acc);
            }
        }
    }
    Ok(out)
}
