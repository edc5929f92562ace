//! Synthetic highlight quadruples and the on-disk quadruple layout.
//!
//! Each sample is a smooth diffuse field plus an additive specular layer of
//! a few anisotropic, truncated Gaussian blobs with a near-white tint.
//! On disk a sample `<id>` is four PNGs, `<id>_A.png` (composite),
//! `<id>_D.png` (diffuse), `<id>_S.png` (specular) and `<id>_M.png` (mask),
//! listed in `manifest.txt` as `<id> <train|test>` lines.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{load_image, save_image, Image, Mask};

pub const MIN_SYNTH_SIZE: usize = 16;
pub const MANIFEST_FILE: &str = "manifest.txt";
const BLOB_CUTOFF: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct Quadruple {
    pub composite: Image,
    pub diffuse: Image,
    pub specular: Image,
    pub mask: Mask,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SynthOptions {
    /// Force every blob amplitude to zero; the composite then equals the
    /// diffuse image and the mask is empty.
    pub zero_amplitude: bool,
}

fn diffuse_field(rng: &mut ChaCha8Rng, size: usize) -> Image {
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.25..0.6));
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let slope: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.15..0.15));
    let waves: Vec<(f64, f64, f64, f64, usize)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.0..0.05),
                rng.random_range(1.0..3.0),
                rng.random_range(1.0..3.0),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0..3),
            )
        })
        .collect();
    let rects: Vec<(f64, f64, f64, f64, [f64; 3])> = (0..rng.random_range(2..=4))
        .map(|_| {
            let (y0, x0) = (rng.random_range(0.0..0.8), rng.random_range(0.0..0.8));
            let (hh, ww) = (rng.random_range(0.1..0.5), rng.random_range(0.1..0.5));
            (y0, x0, y0 + hh, x0 + ww, std::array::from_fn(|_| rng.random_range(-0.15..0.15)))
        })
        .collect();
    let n = size as f64;
    Image::from_fn(size, size, 3, |y, x, c| {
        let (v, u) = (y as f64 / n, x as f64 / n);
        let mut val = base[c] + slope[c] * (angle.cos() * u + angle.sin() * v - 0.5);
        for &(amp, fy, fx, phase, ch) in &waves {
            if ch == c {
                val += amp * (std::f64::consts::TAU * (fy * v + fx * u) + phase).sin();
            }
        }
        for &(y0, x0, y1, x1, off) in &rects {
            if (y0..y1).contains(&v) && (x0..x1).contains(&u) {
                val += off[c];
            }
        }
        val.clamp(0.02, 0.9)
    })
}

fn specular_layer(rng: &mut ChaCha8Rng, size: usize, opts: &SynthOptions) -> Image {
    let n = size as f64;
    let blobs: Vec<_> = (0..rng.random_range(1..=3))
        .map(|_| {
            let cy = rng.random_range(0.15..0.85) * n;
            let cx = rng.random_range(0.15..0.85) * n;
            let sy = rng.random_range(0.03..0.09) * n;
            let sx = rng.random_range(0.03..0.09) * n;
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            let amp = rng.random_range(0.3..=1.0);
            let tint: [f64; 3] = std::array::from_fn(|_| 1.0 - rng.random_range(0.0..0.1));
            (cy, cx, sy, sx, theta, if opts.zero_amplitude { 0.0 } else { amp }, tint)
        })
        .collect();
    Image::from_fn(size, size, 3, |y, x, c| {
        blobs
            .iter()
            .map(|&(cy, cx, sy, sx, theta, amp, tint)| {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let a = dx * theta.cos() + dy * theta.sin();
                let b = -dx * theta.sin() + dy * theta.cos();
                let g = (-0.5 * ((a / sx).powi(2) + (b / sy).powi(2))).exp();
                amp * tint[c] * ((g - BLOB_CUTOFF) / (1.0 - BLOB_CUTOFF)).max(0.0)
            })
            .sum()
    })
}

pub fn generate_quadruple(seed: u64, size: usize) -> Result<Quadruple> {
    generate_quadruple_with(seed, size, &SynthOptions::default())
}

pub fn generate_quadruple_with(seed: u64, size: usize, opts: &SynthOptions) -> Result<Quadruple> {
    if size < MIN_SYNTH_SIZE {
        return Err(Error::InvalidArgument(format!("synthetic size {size} is below {MIN_SYNTH_SIZE}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let diffuse = diffuse_field(&mut rng, size);
    let specular = specular_layer(&mut rng, size, opts);
    let composite = Image::from_fn(size, size, 3, |y, x, c| {
        (diffuse.get(y, x, c) + specular.get(y, x, c)).clamp(0.0, 1.0)
    });
    let mask = Mask::new(
        size,
        size,
        specular.data().chunks(3).map(|px| px.iter().cloned().fold(0.0, f64::max) > 0.0).collect(),
    )?;
    Ok(Quadruple {
        composite,
        diffuse,
        specular,
        mask,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Format(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(id), Some(split), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::Format(format!("manifest line {}: expected `<id> <split>`", lineno + 1)));
            };
            entries.push(ManifestEntry {
                id: id.to_string(),
                split: split.parse()?,
            });
        }
        Ok(Self { entries })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|e| format!("{} {}\n", e.id, e.split)).collect()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// The four file paths of sample `id` under `dir`.
pub fn sample_paths(dir: &Path, id: &str) -> [PathBuf; 4] {
    ["A", "D", "S", "M"].map(|k| dir.join(format!("{id}_{k}.png")))
}

pub fn save_quadruple(dir: impl AsRef<Path>, id: &str, q: &Quadruple) -> Result<()> {
    let [a, d, s, m] = sample_paths(dir.as_ref(), id);
    save_image(&q.composite, a)?;
    save_image(&q.diffuse, d)?;
    save_image(&q.specular, s)?;
    save_image(&q.mask.to_image(), m)
}

/// Generates `train + test` samples into `dir` and writes the manifest.
/// Sample `i` uses a seed drawn from a stream seeded by `seed`.
pub fn write_synthetic_dataset(dir: impl AsRef<Path>, train: usize, test: usize, seed: u64, size: usize) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut stream = ChaCha8Rng::seed_from_u64(seed);
    let mut manifest = DatasetManifest::default();
    for i in 0..train + test {
        let id = format!("s{i:05}");
        save_quadruple(dir, &id, &generate_quadruple(stream.next_u64(), size)?)?;
        manifest.entries.push(ManifestEntry {
            id,
            split: if i < train { Split::Train } else { Split::Test },
        });
    }
    manifest.write(dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Lazily decoded quadruple directory.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    root: PathBuf,
    entries: Vec<ManifestEntry>,
}

/// Checks that every referenced file exists; images are decoded on access.
pub fn load_quadruple_dir(dir: impl AsRef<Path>, manifest: &DatasetManifest) -> Result<Dataset> {
    let root = dir.as_ref().to_path_buf();
    for e in &manifest.entries {
        if let Some(p) = sample_paths(&root, &e.id).iter().find(|p| !p.is_file()) {
            return Err(Error::Sample {
                id: e.id.clone(),
                reason: format!("missing file {}", p.display()),
            });
        }
    }
    Ok(Dataset {
        root,
        entries: manifest.entries.clone(),
    })
}

impl Dataset {
    /// Reads `manifest.txt` from `dir`.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        load_quadruple_dir(dir, &DatasetManifest::read(dir.join(MANIFEST_FILE))?)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn split(&self, split: Split) -> Dataset {
        Dataset {
            root: self.root.clone(),
            entries: self.entries.iter().filter(|e| e.split == split).cloned().collect(),
        }
    }

    pub fn get(&self, i: usize) -> Result<Quadruple> {
        let id = &self.entries[i].id;
        let [a, d, s, m] = sample_paths(&self.root, id);
        let wrap = |e: Error| Error::Sample {
            id: id.clone(),
            reason: e.to_string(),
        };
        let composite = load_image(a).map_err(wrap)?;
        let diffuse = load_image(d).map_err(wrap)?;
        let specular = load_image(s).map_err(wrap)?;
        let mask = Mask::from_image(&load_image(m).map_err(wrap)?);
        for (name, img) in [("diffuse", &diffuse), ("specular", &specular)] {
            if img.dims() != composite.dims() {
                return Err(Error::Sample {
                    id: id.clone(),
                    reason: format!("{name} is {:?}, composite is {:?}", img.dims(), composite.dims()),
                });
            }
        }
        if (mask.height(), mask.width()) != (composite.height(), composite.width()) {
            return Err(Error::Sample {
                id: id.clone(),
                reason: "mask size differs from composite".into(),
            });
        }
        Ok(Quadruple {
            composite,
            diffuse,
            specular,
            mask,
        })
    }

    pub fn load_all(&self) -> Result<Vec<Quadruple>> {
        (0..self.len()).map(|i| self.get(i)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadruple_invariants() {
        for seed in 0..20 {
            let q = generate_quadruple(seed, 32).unwrap();
            for i in 0..q.diffuse.data().len() {
                let sum = q.diffuse.data()[i] + q.specular.data()[i];
                assert_eq!(q.composite.data()[i], sum.clamp(0.0, 1.0));
                assert!(q.specular.data()[i] >= 0.0);
            }
            for (k, px) in q.specular.data().chunks(3).enumerate() {
                assert_eq!(q.mask.data()[k], px.iter().any(|&v| v > 0.0));
            }
        }
    }

    #[test]
    fn zero_amplitude_and_determinism() {
        let q = generate_quadruple_with(3, 24, &SynthOptions { zero_amplitude: true }).unwrap();
        assert_eq!(q.composite, q.diffuse);
        assert_eq!(q.mask.count(), 0);
        assert_eq!(generate_quadruple(11, 24).unwrap(), generate_quadruple(11, 24).unwrap());
        assert!(generate_quadruple(0, 15).is_err());
    }

    #[test]
    fn coverage_and_brightness_ranges() {
        for seed in 0..100 {
            let q = generate_quadruple(seed, 64).unwrap();
            let cov = q.mask.coverage();
            assert!(cov > 0.0 && cov < 0.4, "seed {seed}: coverage {cov}");
            let mean = q.composite.mean();
            assert!((0.2..=0.8).contains(&mean), "seed {seed}: mean {mean}");
        }
    }

    #[test]
    fn manifest_parsing() {
        let m = DatasetManifest::parse("# header\na train\n\nb test\n").unwrap();
        assert_eq!(m.entries.len(), 2);
        assert_eq!(DatasetManifest::parse(&m.to_text()).unwrap(), m);
        assert!(DatasetManifest::parse("a valid\n").is_err());
        assert!(DatasetManifest::parse("a train extra\n").is_err());
    }
}
