//! Registered infrared/visible pair corpora: directory ingestion, the
//! seeded 3:1 train/test split, and a synthetic face generator for
//! desk-scale runs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{ImageGray, Provenance};
use crate::pnm;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair {
    pub id: String,
    pub infrared: ImageGray,
    pub visible: ImageGray,
    pub split: Split,
}

/// Pairs sorted by id, each tagged train or test.
#[derive(Debug, Clone, PartialEq)]
pub struct PairDataset {
    pairs: Vec<ImagePair>,
}

impl PairDataset {
    /// Sort by id, check registration, and assign a seeded 3:1 split.
    pub fn new(mut pairs: Vec<ImagePair>, seed: u64) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Ingestion("no image pairs".into()));
        }
        for p in &pairs {
            p.infrared
                .same_size(&p.visible)
                .map_err(|e| Error::Ingestion(format!("pair {}: {e}", p.id)))?;
        }
        pairs.sort_by(|a, b| a.id.cmp(&b.id));
        let (_, n_test) = split_counts(pairs.len());
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        for p in pairs.iter_mut() {
            p.split = Split::Train;
        }
        for &i in &order[..n_test] {
            pairs[i].split = Split::Test;
        }
        Ok(PairDataset { pairs })
    }

    /// Every pair in the training split, e.g. for overfitting checks.
    pub fn train_only(mut pairs: Vec<ImagePair>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Ingestion("no image pairs".into()));
        }
        pairs.sort_by(|a, b| a.id.cmp(&b.id));
        for p in pairs.iter_mut() {
            p.split = Split::Train;
        }
        Ok(PairDataset { pairs })
    }

    pub fn pairs(&self) -> &[ImagePair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn split(&self, split: Split) -> Vec<&ImagePair> {
        self.pairs.iter().filter(|p| p.split == split).collect()
    }

    pub fn train(&self) -> Vec<&ImagePair> {
        self.split(Split::Train)
    }

    pub fn test(&self) -> Vec<&ImagePair> {
        self.split(Split::Test)
    }
}

/// `(train, test)` counts for `n` pairs: a quarter (rounded) goes to test,
/// keeping at least one training pair.
pub fn split_counts(n: usize) -> (usize, usize) {
    let test = ((n as f64) / 4.0).round() as usize;
    let test = test.min(n.saturating_sub(1));
    (n - test, test)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IngestConfig {
    /// Target `(width, height)`.
    pub image_size: (usize, usize),
    pub seed: u64,
}

fn is_image(path: &Path) -> bool {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    match ext.as_deref() {
        Some("pgm" | "ppm" | "pnm") => true,
        Some("png") => cfg!(feature = "png"),
        _ => false,
    }
}

fn list_images(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let entries = std::fs::read_dir(dir)
        .map_err(|e| Error::Ingestion(format!("cannot read directory {}: {e}", dir.display())))?;
    let mut files = BTreeMap::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::Ingestion(format!("{}: {e}", dir.display())))?;
        let path = entry.path();
        if path.is_file() && is_image(&path) {
            // pairs are matched by stem, so `a.pgm` pairs with `a.ppm`
            let stem = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            if let Some(prev) = files.insert(stem, path.clone()) {
                return Err(Error::Ingestion(format!(
                    "{} and {} share a name",
                    prev.display(),
                    path.display()
                )));
            }
        }
    }
    Ok(files)
}

/// Decode one image file (PNM, or PNG with the `png` feature) to gray.
pub fn read_image(path: &Path, provenance: Provenance) -> Result<ImageGray> {
    #[cfg(feature = "png")]
    if path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("png"))
    {
        let img = ::image::open(path)
            .map_err(|e| Error::Ingestion(format!("cannot decode {}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let pixels = img
            .pixels()
            .map(|p| {
                crate::image::luma(
                    f64::from(p[0]) / 255.0,
                    f64::from(p[1]) / 255.0,
                    f64::from(p[2]) / 255.0,
                )
            })
            .collect();
        return ImageGray::new(w as usize, h as usize, pixels, provenance);
    }
    pnm::read(path, provenance).map_err(|e| match e {
        Error::Io { path, source } => {
            Error::Ingestion(format!("cannot read {}: {source}", path.display()))
        }
        other => other,
    })
}

/// Read equally named images from the two directories, convert to gray,
/// resize to the configured size, and split 3:1.
pub fn load_dataset(ir_dir: &Path, vis_dir: &Path, cfg: &IngestConfig) -> Result<PairDataset> {
    let ir = list_images(ir_dir)?;
    let vis = list_images(vis_dir)?;
    if let Some(orphan) = ir.keys().find(|k| !vis.contains_key(*k)) {
        return Err(Error::Ingestion(format!(
            "unpaired file {} has no match in {}",
            ir[orphan].display(),
            vis_dir.display()
        )));
    }
    if let Some(orphan) = vis.keys().find(|k| !ir.contains_key(*k)) {
        return Err(Error::Ingestion(format!(
            "unpaired file {} has no match in {}",
            vis[orphan].display(),
            ir_dir.display()
        )));
    }
    let (w, h) = cfg.image_size;
    let mut pairs = Vec::with_capacity(ir.len());
    for (name, ir_path) in &ir {
        let infrared = read_image(ir_path, Provenance::Infrared)?.resize_bilinear(w, h)?;
        let visible = read_image(&vis[name], Provenance::Visible)?.resize_bilinear(w, h)?;
        pairs.push(ImagePair {
            id: name.clone(),
            infrared,
            visible,
            split: Split::Train,
        });
    }
    PairDataset::new(pairs, cfg.seed)
}

/// Write a dataset as two directories of `P5` files named `<id>.pgm`.
pub fn write_dataset(ds: &PairDataset, ir_dir: &Path, vis_dir: &Path) -> Result<()> {
    for dir in [ir_dir, vis_dir] {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    for p in ds.pairs() {
        pnm::write(&p.infrared, &ir_dir.join(format!("{}.pgm", p.id)))?;
        pnm::write(&p.visible, &vis_dir.join(format!("{}.pgm", p.id)))?;
    }
    Ok(())
}

struct Face {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    eye_dx: f64,
    eye_r: f64,
    mouth_w: f64,
    tone: f64,
    light: f64,
}

fn inside(x: f64, y: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> bool {
    let (dx, dy) = ((x - cx) / rx, (y - cy) / ry);
    dx * dx + dy * dy <= 1.0
}

impl Face {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        Face {
            cx: rng.random_range(0.46..0.54),
            cy: rng.random_range(0.48..0.55),
            rx: rng.random_range(0.28..0.36),
            ry: rng.random_range(0.36..0.44),
            eye_dx: rng.random_range(0.30..0.40),
            eye_r: rng.random_range(0.07..0.10),
            mouth_w: rng.random_range(0.30..0.45),
            tone: rng.random_range(0.30..0.42),
            light: rng.random_range(-0.08..0.08),
        }
    }

    /// Shared layout intensity at normalized coordinates.
    fn layout(&self, x: f64, y: f64) -> f64 {
        let background = 0.06 + 0.06 * y;
        if !inside(x, y, self.cx, self.cy, self.rx, self.ry) {
            // hair cap above the face
            if inside(
                x,
                y,
                self.cx,
                self.cy - 0.1 * self.ry,
                self.rx * 1.1,
                self.ry * 1.05,
            ) && y < self.cy
            {
                return 0.04;
            }
            return background;
        }
        let (u, v) = ((x - self.cx) / self.rx, (y - self.cy) / self.ry);
        let shade = self.tone + self.light * u - 0.07 * (u * u + v * v);
        let eye_y = -0.22;
        for side in [-1.0, 1.0] {
            if inside(
                u,
                v,
                side * self.eye_dx,
                eye_y,
                self.eye_r * 1.6,
                self.eye_r,
            ) {
                return 0.05;
            }
            if inside(
                u,
                v,
                side * self.eye_dx,
                eye_y - 0.15,
                self.eye_r * 2.0,
                0.03,
            ) {
                return 0.09;
            }
        }
        if inside(u, v, 0.0, 0.48, self.mouth_w, 0.07) {
            return 0.17;
        }
        if inside(u, v, 0.0, 0.12, 0.08, 0.22) {
            return shade + 0.05;
        }
        shade
    }
}

fn box_blur(px: &[f64], w: usize, h: usize, radius: usize) -> Vec<f64> {
    let r = radius as isize;
    let mut out = vec![0.0; px.len()];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut sum = 0.0;
            let mut n = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (sx, sy) = (x + dx, y + dy);
                    if sx >= 0 && sy >= 0 && sx < w as isize && sy < h as isize {
                        sum += px[sy as usize * w + sx as usize];
                        n += 1.0;
                    }
                }
            }
            out[y as usize * w + x as usize] = sum / n;
        }
    }
    out
}

/// Deterministic synthetic registered pairs: one random face layout per
/// pair, rendered as a textured "visible" image and a blurred,
/// intensity-shifted "infrared" image.
pub fn synth_corpus(n_pairs: usize, size: usize, seed: u64) -> Result<PairDataset> {
    if n_pairs == 0 {
        return Err(Error::contract("synthetic corpus needs at least one pair"));
    }
    if size < 4 {
        return Err(Error::contract("synthetic images must be at least 4x4"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(n_pairs);
    let s = size as f64;
    for i in 0..n_pairs {
        let face = Face::random(&mut rng);
        let layout: Vec<f64> = (0..size * size)
            .map(|k| face.layout(((k % size) as f64 + 0.5) / s, ((k / size) as f64 + 0.5) / s))
            .collect();

        let freq = rng.random_range(3.0..7.0) * std::f64::consts::TAU;
        let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let (ca, sa) = (angle.cos(), angle.sin());
        let visible: Vec<f64> = layout
            .iter()
            .enumerate()
            .map(|(k, &base)| {
                let (x, y) = ((k % size) as f64 / s, (k / size) as f64 / s);
                let stripes = 0.05 * (freq * (ca * x + sa * y)).sin();
                let grain = rng.random_range(-0.04..0.04);
                (base + stripes + grain).clamp(0.0, 1.0)
            })
            .collect();

        let radius = (size / 16).max(1);
        let shift = rng.random_range(0.04..0.10);
        let infrared: Vec<f64> = box_blur(&layout, size, size, radius)
            .into_iter()
            .map(|v| (0.9 * v + shift).clamp(0.0, 1.0))
            .collect();

        pairs.push(ImagePair {
            id: format!("pair_{i:03}"),
            infrared: ImageGray::new(size, size, infrared, Provenance::Infrared)?,
            visible: ImageGray::new(size, size, visible, Provenance::Visible)?,
            split: Split::Train,
        });
    }
    PairDataset::new(pairs, seed)
}
