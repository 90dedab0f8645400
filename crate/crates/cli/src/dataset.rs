//! Image directories with a `manifest.txt` split file, and the synthetic
//! blob generator.
//!
//! Manifest lines are `split index filename` with split one of `train`,
//! `val`, `test`. A directory without a manifest is treated as a test set of
//! every PGM/PPM file in name order.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use flowprox_core::numerics::{Prng, Tensor};

use crate::error::{CliError, Result};
use crate::pnm;

pub const MANIFEST: &str = "manifest.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Item {
    pub index: usize,
    pub name: String,
    pub image: Tensor,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub train: Vec<Item>,
    pub val: Vec<Item>,
    pub test: Vec<Item>,
}

impl Dataset {
    pub fn images(items: &[Item]) -> Vec<Tensor> {
        items.iter().map(|i| i.image.clone()).collect()
    }

    /// Shape shared by every image.
    pub fn shape(&self) -> Option<[usize; 3]> {
        let first = self.train.iter().chain(&self.val).chain(&self.test).next()?;
        first.image.shape().try_into().ok()
    }
}

/// 80/10/10 contiguous split sizes.
pub fn split_sizes(count: usize) -> (usize, usize, usize) {
    let train = count * 8 / 10;
    let val = count / 10;
    (train, val, count - train - val)
}

pub fn split_of(index: usize, count: usize) -> Split {
    let (train, val, _) = split_sizes(count);
    if index < train {
        Split::Train
    } else if index < train + val {
        Split::Val
    } else {
        Split::Test
    }
}

/// A sum of 2–3 random anisotropic Gaussian blobs, min-max rescaled to
/// `[−0.5, 0.5]`.
pub fn blob_image(shape: [usize; 3], rng: &mut Prng) -> Tensor {
    let [c, h, w] = shape;
    let side = h.min(w) as f64;
    let mut img = vec![0.0; c * h * w];
    let blobs = 2 + rng.below(2);
    for _ in 0..blobs {
        let cy = rng.uniform() * h as f64;
        let cx = rng.uniform() * w as f64;
        let sa = rng.uniform_range(0.1, 0.4) * side;
        let sb = rng.uniform_range(0.1, 0.4) * side;
        let theta = rng.uniform() * PI;
        let (cos, sin) = (theta.cos(), theta.sin());
        let amps: Vec<f64> = (0..c).map(|_| rng.uniform_range(0.2, 1.0)).collect();
        for i in 0..h {
            for j in 0..w {
                let (dy, dx) = (i as f64 - cy, j as f64 - cx);
                let u = (cos * dx + sin * dy) / sa;
                let v = (-sin * dx + cos * dy) / sb;
                let g = (-0.5 * (u * u + v * v)).exp();
                for (ch, a) in amps.iter().enumerate() {
                    img[(ch * h + i) * w + j] += a * g;
                }
            }
        }
    }
    let lo = img.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = img.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = (hi - lo).max(f64::MIN_POSITIVE);
    for v in &mut img {
        *v = (*v - lo) / range - 0.5;
    }
    Tensor::from_vec(&[c, h, w], img).expect("shape matches buffer")
}

pub fn file_name(index: usize, channels: usize) -> String {
    format!("img_{index:05}.{}", pnm::extension_for(channels))
}

/// Writes `count` blob images and a manifest into `out`.
pub fn synthesize(out: &Path, count: usize, shape: [usize; 3], seed: u64, force: bool) -> Result<()> {
    let [c, h, w] = shape;
    if count == 0 || h == 0 || w == 0 {
        return Err(CliError::Usage("--count and --size must be positive".into()));
    }
    if c != 1 && c != 3 {
        return Err(CliError::Usage(format!("--channels must be 1 or 3, got {c}")));
    }
    if out.exists() {
        let non_empty = fs::read_dir(out)
            .map_err(|e| CliError::io(out, e))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(CliError::Usage(format!(
                "{} exists and is not empty (use --force to overwrite)",
                out.display()
            )));
        }
    }
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let mut manifest = String::new();
    let _ = writeln!(
        manifest,
        "# synth-data --count {count} --size {h} {w} --channels {c} --seed {seed}"
    );
    let _ = writeln!(manifest, "# split index filename");
    for index in 0..count {
        let mut rng = Prng::derive(seed, &[index as u64]);
        let image = blob_image(shape, &mut rng);
        let name = file_name(index, c);
        pnm::write_image(&out.join(&name), &image)?;
        let _ = writeln!(manifest, "{} {index} {name}", split_of(index, count).as_str());
    }
    let path = out.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| CliError::io(&path, e))
}

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()),
        Some("pgm") | Some("ppm")
    )
}

fn load_item(dir: &Path, index: usize, name: &str) -> Result<Item> {
    Ok(Item {
        index,
        name: name.to_string(),
        image: pnm::read_image(&dir.join(name))?,
    })
}

pub fn load(dir: &Path) -> Result<Dataset> {
    let manifest = dir.join(MANIFEST);
    let mut ds = Dataset::default();
    if manifest.exists() {
        let text = fs::read_to_string(&manifest).map_err(|e| CliError::io(&manifest, e))?;
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = || CliError::format(&manifest, format!("line {}: expected `split index filename`", n + 1));
            let mut parts = line.split_whitespace();
            let split = parts.next().and_then(Split::parse).ok_or_else(bad)?;
            let index = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let name = parts.next().ok_or_else(bad)?;
            if parts.next().is_some() {
                return Err(bad());
            }
            let item = load_item(dir, index, name)?;
            match split {
                Split::Train => ds.train.push(item),
                Split::Val => ds.val.push(item),
                Split::Test => ds.test.push(item),
            }
        }
    } else {
        let mut files: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| CliError::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| is_image(p))
            .collect();
        files.sort();
        for (index, path) in files.iter().enumerate() {
            let name = path.file_name().unwrap().to_string_lossy().into_owned();
            ds.test.push(load_item(dir, index, &name)?);
        }
    }
    let shape = ds.shape();
    for item in ds.train.iter().chain(&ds.val).chain(&ds.test) {
        if Some(item.image.shape()) != shape.as_ref().map(|s| &s[..]) {
            return Err(CliError::format(
                dir.join(&item.name),
                format!(
                    "image shape {:?} differs from the rest of the dataset ({:?})",
                    item.image.shape(),
                    shape.unwrap()
                ),
            ));
        }
    }
    Ok(ds)
}
