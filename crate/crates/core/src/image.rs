//! Image container, patch gridding, PNG I/O and the PSNR/SSIM metrics.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{dim_err, Error, Result};
use crate::tensor::{reflect_index, Tensor};

/// Interleaved `[H, W, C]` array of finite reals.
///
/// Also used for feature maps with arbitrary channel counts.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(dim_err!("image dimensions must be positive, got {height}x{width}x{channels}"));
        }
        if data.len() != height * width * channels {
            return Err(dim_err!(
                "{}x{}x{} image needs {} values, got {}",
                height,
                width,
                channels,
                height * width * channels,
                data.len()
            ));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite pixel value {bad}")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self::new(height, width, channels, vec![value; height * width * channels]).expect("valid constant image")
    }

    pub fn from_fn(height: usize, width: usize, channels: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, channels, data).expect("valid generated image")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn clamped(&self) -> Image {
        Image {
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
            ..self.clone()
        }
    }

    pub fn same_dims(&self, other: &Image) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(dim_err!("image shapes {:?} and {:?} differ", self.dims(), other.dims()));
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// `[1, C, H, W]` tensor view of the image.
    pub fn to_tensor(&self) -> Tensor {
        let (h, w, c) = self.dims();
        let mut out = vec![0.0; h * w * c];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out[(ch * h + y) * w + x] = self.data[(y * w + x) * c + ch];
                }
            }
        }
        Tensor::from_vec(&[1, c, h, w], out).expect("consistent shape")
    }

    /// Sample `n` of a `[N, C, H, W]` tensor as an image.
    pub fn from_tensor(t: &Tensor, n: usize) -> Result<Image> {
        let (batch, c, h, w) = t.dims4();
        if n >= batch {
            return Err(dim_err!("sample {n} out of range for batch {batch}"));
        }
        let base = n * c * h * w;
        let src = t.data();
        Ok(Image::from_fn(h, w, c, |y, x, ch| src[base + (ch * h + y) * w + x]))
    }

    /// Mirror-pad to `new_h x new_w` (extra rows/columns at the bottom/right).
    pub fn reflect_pad_to(&self, new_h: usize, new_w: usize) -> Image {
        Image::from_fn(new_h, new_w, self.channels, |y, x, c| {
            self.get(
                reflect_index(y as isize, self.height),
                reflect_index(x as isize, self.width),
                c,
            )
        })
    }

    /// Top-left `h x w` window.
    pub fn crop(&self, h: usize, w: usize) -> Image {
        Image::from_fn(h, w, self.channels, |y, x, c| self.get(y, x, c))
    }
}

/// Binary `[H, W]` map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(dim_err!("{height}x{width} mask needs {} values, got {}", height * width, data.len()));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn coverage(&self) -> f64 {
        self.count() as f64 / self.data.len() as f64
    }

    /// Intersection over union; two empty masks score 1.
    pub fn iou(&self, other: &Mask) -> Result<f64> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(dim_err!("mask shapes differ"));
        }
        let inter = self.data.iter().zip(&other.data).filter(|(a, b)| **a && **b).count();
        let union = self.data.iter().zip(&other.data).filter(|(a, b)| **a || **b).count();
        Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
    }

    /// 3-channel image with 1.0 on set pixels and 0.0 elsewhere.
    pub fn to_image(&self) -> Image {
        Image::from_fn(self.height, self.width, 3, |y, x, _| if self.get(y, x) { 1.0 } else { 0.0 })
    }

    /// Pixels whose channel mean exceeds 0.5.
    pub fn from_image(img: &Image) -> Mask {
        let c = img.channels();
        let data = img
            .data()
            .chunks(c)
            .map(|px| px.iter().sum::<f64>() / c as f64 > 0.5)
            .collect();
        Mask {
            height: img.height(),
            width: img.width(),
            data,
        }
    }

    /// A cell of the coarse mask is set if any pixel of its `factor x factor`
    /// block is set; partial blocks at the border count too.
    pub fn max_pool(&self, factor: usize) -> Mask {
        let (oh, ow) = (self.height.div_ceil(factor), self.width.div_ceil(factor));
        let mut out = Mask::filled(oh, ow, false);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    out.set(y / factor, x / factor, true);
                }
            }
        }
        out
    }

    pub fn reflect_pad_to(&self, new_h: usize, new_w: usize) -> Mask {
        let mut out = Mask::filled(new_h, new_w, false);
        for y in 0..new_h {
            for x in 0..new_w {
                let v = self.get(
                    reflect_index(y as isize, self.height),
                    reflect_index(x as isize, self.width),
                );
                out.set(y, x, v);
            }
        }
        out
    }
}

/// Mean squared error over every sample of two equally shaped images.
pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    a.same_dims(b)?;
    let sum: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.data.len() as f64)
}

pub const PSNR_CAP_DB: f64 = 100.0;

/// Peak signal-to-noise ratio in dB for unit peak, capped at 100 dB.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let err = mse(a, b)?;
    if err < 1e-10 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / err).log10()).min(PSNR_CAP_DB))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable Gaussian filter over the valid region of one plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Structural similarity with an 11x11 Gaussian window (sigma 1.5),
/// `C1 = 0.01^2`, `C2 = 0.03^2`, averaged over the valid region and channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.same_dims(b)?;
    let (h, w, c) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(dim_err!("ssim needs at least {0}x{0} pixels, got {h}x{w}", SSIM_WINDOW));
    }
    let k = gaussian_window();
    let mut total = 0.0;
    for ch in 0..c {
        let pa: Vec<f64> = (0..h * w).map(|i| a.data[i * c + ch]).collect();
        let pb: Vec<f64> = (0..h * w).map(|i| b.data[i * c + ch]).collect();
        let paa: Vec<f64> = pa.iter().map(|v| v * v).collect();
        let pbb: Vec<f64> = pb.iter().map(|v| v * v).collect();
        let pab: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| x * y).collect();
        let mu_a = filter_valid(&pa, h, w, &k);
        let mu_b = filter_valid(&pb, h, w, &k);
        let e_aa = filter_valid(&paa, h, w, &k);
        let e_bb = filter_valid(&pbb, h, w, &k);
        let e_ab = filter_valid(&pab, h, w, &k);
        let n = mu_a.len();
        let mut sum = 0.0;
        for i in 0..n {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            sum += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
        }
        total += sum / n as f64;
    }
    Ok((total / c as f64).clamp(-1.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub ssim: f64,
}

impl MetricReport {
    pub fn compute(pred: &Image, reference: &Image) -> Result<Self> {
        Ok(Self {
            psnr_db: psnr(pred, reference)?,
            ssim: ssim(pred, reference)?,
        })
    }
}

/// Non-overlapping `l x l` tiling of an `[H, W, C]` map.
///
/// Patch `r` covers grid cell `(r / grid_cols, r % grid_cols)`; each patch is
/// flattened row-major over `(dy, dx, c)`. `height`/`width` record the size
/// before any padding so assembly can crop back.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub patches: Vec<f64>,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub patch_len: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl PatchGrid {
    pub fn count(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_len * self.patch_len * self.channels
    }

    pub fn patch(&self, r: usize) -> &[f64] {
        let d = self.patch_dim();
        &self.patches[r * d..(r + 1) * d]
    }

    pub fn patch_mut(&mut self, r: usize) -> &mut [f64] {
        let d = self.patch_dim();
        &mut self.patches[r * d..(r + 1) * d]
    }

    fn validate(&self) -> Result<()> {
        let l = self.patch_len;
        if l == 0 || self.channels == 0 || self.grid_rows == 0 || self.grid_cols == 0 {
            return Err(dim_err!("patch grid has a zero dimension"));
        }
        if self.patches.len() != self.count() * self.patch_dim() {
            return Err(dim_err!(
                "patch grid holds {} values, expected {}",
                self.patches.len(),
                self.count() * self.patch_dim()
            ));
        }
        if self.height.div_ceil(l) != self.grid_rows || self.width.div_ceil(l) != self.grid_cols {
            return Err(dim_err!(
                "{}x{} map does not tile into {}x{} cells of {}",
                self.height,
                self.width,
                self.grid_rows,
                self.grid_cols,
                l
            ));
        }
        Ok(())
    }
}

fn tile(feat: &Image, l: usize, height: usize, width: usize) -> PatchGrid {
    let (h, w, c) = feat.dims();
    let (rows, cols) = (h / l, w / l);
    let d = l * l * c;
    let mut patches = vec![0.0; rows * cols * d];
    for gy in 0..rows {
        for gx in 0..cols {
            let r = gy * cols + gx;
            for dy in 0..l {
                for dx in 0..l {
                    for ch in 0..c {
                        patches[r * d + (dy * l + dx) * c + ch] = feat.get(gy * l + dy, gx * l + dx, ch);
                    }
                }
            }
        }
    }
    PatchGrid {
        patches,
        grid_rows: rows,
        grid_cols: cols,
        patch_len: l,
        channels: c,
        height,
        width,
    }
}

/// Tile `feat` into `l x l` patches; `l` must divide both spatial dims.
pub fn extract_patches(feat: &Image, l: usize) -> Result<PatchGrid> {
    if l == 0 {
        return Err(dim_err!("patch length must be positive"));
    }
    if !feat.height().is_multiple_of(l) || !feat.width().is_multiple_of(l) {
        return Err(dim_err!(
            "{}x{} map is not divisible by patch length {}",
            feat.height(),
            feat.width(),
            l
        ));
    }
    Ok(tile(feat, l, feat.height(), feat.width()))
}

/// Like [`extract_patches`], but reflect-pads up to the next multiple of `l`;
/// [`assemble_patches`] crops the padding off again.
pub fn extract_patches_padded(feat: &Image, l: usize) -> Result<PatchGrid> {
    if l == 0 {
        return Err(dim_err!("patch length must be positive"));
    }
    let (h, w) = (feat.height(), feat.width());
    let padded = feat.reflect_pad_to(h.div_ceil(l) * l, w.div_ceil(l) * l);
    Ok(tile(&padded, l, h, w))
}

pub fn assemble_patches(grid: &PatchGrid) -> Result<Image> {
    grid.validate()?;
    let l = grid.patch_len;
    let c = grid.channels;
    let d = grid.patch_dim();
    let mut out = Image::filled(grid.grid_rows * l, grid.grid_cols * l, c, 0.0);
    for gy in 0..grid.grid_rows {
        for gx in 0..grid.grid_cols {
            let r = gy * grid.grid_cols + gx;
            for dy in 0..l {
                for dx in 0..l {
                    for ch in 0..c {
                        out.set(gy * l + dy, gx * l + dx, ch, grid.patches[r * d + (dy * l + dx) * c + ch]);
                    }
                }
            }
        }
    }
    if out.height() != grid.height || out.width() != grid.width {
        out = out.crop(grid.height, grid.width);
    }
    Ok(out)
}

/// Read an 8-bit RGB PNG, mapping each sample `v` to `v / 255`.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let info = reader.info();
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Format(format!(
            "{}: expected 8-bit samples, found {:?}",
            path.display(),
            info.bit_depth
        )));
    }
    if info.color_type != png::ColorType::Rgb {
        return Err(Error::Format(format!(
            "{}: expected 3-channel RGB, found {:?}",
            path.display(),
            info.color_type
        )));
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Format(format!("{}: image too large", path.display())))?;
    let mut buf = vec![0u8; size];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let (w, h) = (frame.width as usize, frame.height as usize);
    let data = buf[..h * w * 3].iter().map(|&v| f64::from(v) / 255.0).collect();
    Image::new(h, w, 3, data)
}

/// Write a 3-channel image as 8-bit RGB, storing `round(clamp(v) * 255)`.
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if img.channels() != 3 {
        return Err(Error::Format(format!(
            "{}: can only write 3-channel images, got {}",
            path.display(),
            img.channels()
        )));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), img.width() as u32, img.height() as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let bytes: Vec<u8> = img.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    writer
        .write_image_data(&bytes)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    writer
        .finish()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Ok(())
}
