//! Synthetic coloured-shapes dataset.
//!
//! Each class owns a shape kind and a base colour. Images hold one to three
//! non-overlapping shapes on a textured background; labels are read back from
//! the rendered ground-truth mask so they always agree with it.

use std::collections::VecDeque;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::mask::{export_mask, import_mask, LabelMap};
use crate::tensor::{io, Tensor};

pub const IMAGE_SIZE: usize = 64;
pub const PIXEL_NOISE: f64 = 0.05;
const MIN_RADIUS: usize = 7;
const MAX_RADIUS: usize = 13;
const GAP: usize = 2;

const PALETTE: [[f64; 3]; 8] = [
    [0.90, 0.15, 0.15],
    [0.15, 0.80, 0.25],
    [0.15, 0.30, 0.95],
    [0.95, 0.85, 0.10],
    [0.85, 0.20, 0.85],
    [0.10, 0.85, 0.85],
    [0.95, 0.55, 0.10],
    [0.50, 0.25, 0.75],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Cross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [Self::Circle, Self::Square, Self::Triangle, Self::Cross];

    pub fn for_class(class: usize) -> Self {
        Self::ALL[class % 4]
    }

    /// Whether offset `(dy, dx)` from the centre lies inside a shape of radius `r`.
    pub fn contains(self, dy: f64, dx: f64, r: f64) -> bool {
        match self {
            Self::Circle => dy * dy + dx * dx <= r * r,
            Self::Square => dy.abs() <= r && dx.abs() <= r,
            // apex at (-r, 0), base along dy = r
            Self::Triangle => dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0,
            Self::Cross => {
                let arm = r / 3.0;
                (dy.abs() <= r && dx.abs() <= arm) || (dx.abs() <= r && dy.abs() <= arm)
            }
        }
    }
}

/// Display names for `classes` foreground classes.
pub fn class_names(classes: usize) -> Vec<String> {
    const COLOURS: [&str; 8] = ["red", "green", "blue", "yellow", "magenta", "cyan", "orange", "purple"];
    (0..classes)
        .map(|c| {
            let kind = match ShapeKind::for_class(c) {
                ShapeKind::Circle => "circle",
                ShapeKind::Square => "square",
                ShapeKind::Triangle => "triangle",
                ShapeKind::Cross => "cross",
            };
            format!("{}_{kind}", COLOURS[c])
        })
        .collect()
}

/// One shape to draw: 0-based class, centre and radius in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Placement {
    pub class: usize,
    pub cy: usize,
    pub cx: usize,
    pub radius: usize,
}

impl Placement {
    fn separated(&self, other: &Placement) -> bool {
        let reach = self.radius + other.radius + GAP;
        self.cy.abs_diff(other.cy) > reach || self.cx.abs_diff(other.cx) > reach
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[3, 64, 64]`, values in `[0, 1]`.
    pub image: Tensor,
    pub mask: LabelMap,
    /// Multi-hot over the foreground classes.
    pub label: Vec<bool>,
}

impl Sample {
    /// Present classes, 0-based and ascending.
    pub fn classes(&self) -> Vec<usize> {
        (0..self.label.len()).filter(|&c| self.label[c]).collect()
    }
}

fn label_from_mask(mask: &LabelMap, classes: usize) -> Vec<bool> {
    let mut label = vec![false; classes];
    for v in mask.labels() {
        if v > 0 {
            label[v as usize - 1] = true;
        }
    }
    label
}

/// Renders the given shapes over a random textured background.
pub fn render(placements: &[Placement], classes: usize, rng: &mut impl Rng) -> Result<Sample> {
    let n = IMAGE_SIZE;
    let noise = Normal::new(0.0, PIXEL_NOISE).expect("valid sigma");
    let mut image = vec![0.0; 3 * n * n];
    let base: f64 = rng.random_range(0.30..0.60);
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.05..0.05));
    let waves: [(f64, f64, f64, f64); 2] = std::array::from_fn(|_| {
        (
            rng.random_range(0.15..0.6),
            rng.random_range(0.15..0.6),
            rng.random_range(0.0..std::f64::consts::TAU),
            rng.random_range(0.03..0.08),
        )
    });
    for y in 0..n {
        for x in 0..n {
            let tex: f64 = waves
                .iter()
                .map(|&(fy, fx, ph, amp)| amp * (fy * y as f64 + fx * x as f64 + ph).sin())
                .sum();
            for ch in 0..3 {
                image[(ch * n + y) * n + x] = base + tint[ch] + tex;
            }
        }
    }
    let mut mask = LabelMap::filled(n, n, 0);
    for p in placements {
        if p.class >= classes || p.class >= PALETTE.len() {
            return Err(invalid(format!("class {} out of range", p.class)));
        }
        if p.cy < p.radius || p.cx < p.radius || p.cy + p.radius >= n || p.cx + p.radius >= n {
            return Err(invalid("shape exceeds the image bounds"));
        }
        let jitter: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.08..0.08));
        let kind = ShapeKind::for_class(p.class);
        let r = p.radius as f64;
        for y in p.cy - p.radius..=p.cy + p.radius {
            for x in p.cx - p.radius..=p.cx + p.radius {
                if kind.contains(y as f64 - p.cy as f64, x as f64 - p.cx as f64, r) {
                    mask.set(y, x, p.class as u8 + 1);
                    for ch in 0..3 {
                        image[(ch * n + y) * n + x] = PALETTE[p.class][ch] + jitter[ch];
                    }
                }
            }
        }
    }
    for v in &mut image {
        *v = (*v + noise.sample(rng)).clamp(0.0, 1.0);
    }
    let label = label_from_mask(&mask, classes);
    Ok(Sample {
        image: Tensor::new(vec![3, n, n], image)?,
        mask,
        label,
    })
}

/// Shuffled decks of class ids, so every class is drawn equally often.
struct Deck {
    classes: usize,
    cards: VecDeque<usize>,
}

impl Deck {
    fn new(classes: usize) -> Self {
        Self {
            classes,
            cards: VecDeque::new(),
        }
    }

    fn refill(&mut self, rng: &mut impl Rng) {
        let mut fresh: Vec<usize> = (0..self.classes).collect();
        fresh.shuffle(rng);
        self.cards.extend(fresh);
    }

    /// Next card not in `taken`.
    fn draw(&mut self, taken: &[usize], rng: &mut impl Rng) -> usize {
        loop {
            if let Some(i) = self.cards.iter().position(|c| !taken.contains(c)) {
                return self.cards.remove(i).expect("index in range");
            }
            self.refill(rng);
        }
    }
}

fn place(class: usize, existing: &[Placement], rng: &mut impl Rng) -> Option<Placement> {
    for _ in 0..64 {
        let radius = rng.random_range(MIN_RADIUS..=MAX_RADIUS);
        let p = Placement {
            class,
            cy: rng.random_range(radius..IMAGE_SIZE - radius),
            cx: rng.random_range(radius..IMAGE_SIZE - radius),
            radius,
        };
        if existing.iter().all(|q| p.separated(q)) {
            return Some(p);
        }
    }
    None
}

fn generate_split(n: usize, classes: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Sample>> {
    let mut deck = Deck::new(classes);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let count = rng.random_range(1..=3usize.min(classes));
        let mut placements: Vec<Placement> = Vec::with_capacity(count);
        let mut taken = Vec::with_capacity(count);
        for _ in 0..count {
            let class = deck.draw(&taken, rng);
            match place(class, &placements, rng) {
                Some(p) => {
                    placements.push(p);
                    taken.push(class);
                }
                None => deck.cards.push_front(class),
            }
        }
        out.push(render(&placements, classes, rng)?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub classes: usize,
    pub seed: u64,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

/// Deterministic per seed; train and val come from separate streams of one generator.
pub fn generate_dataset(n_train: usize, n_val: usize, classes: usize, seed: u64) -> Result<Dataset> {
    if !(2..=8).contains(&classes) {
        return Err(invalid(format!("classes must be in 2..=8, got {classes}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    let train = generate_split(n_train, classes, &mut rng)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let val = generate_split(n_val, classes, &mut rng)?;
    Ok(Dataset {
        classes,
        seed,
        train,
        val,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: String,
    pub mask: String,
    pub label: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub image_size: usize,
    pub classes: Vec<String>,
    pub train: Vec<ManifestEntry>,
    pub val: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes images (RTT1), masks (PGM) and `manifest.json` under `dir`.
pub fn save_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<Manifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    let write_split = |name: &str, samples: &[Sample]| -> Result<Vec<ManifestEntry>> {
        samples
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let image = format!("images/{name}_{i:05}.rtt");
                let mask = format!("masks/{name}_{i:05}.pgm");
                io::save(dir.join(&image), &s.image)?;
                export_mask(&s.mask, dir.join(&mask))?;
                Ok(ManifestEntry {
                    image,
                    mask,
                    label: s.label.iter().map(|&b| b as u8).collect(),
                })
            })
            .collect()
    };
    let manifest = Manifest {
        seed: ds.seed,
        image_size: IMAGE_SIZE,
        classes: class_names(ds.classes),
        train: write_split("train", &ds.train)?,
        val: write_split("val", &ds.val)?,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

/// Reads a dataset written by [`save_dataset`]; `path` is the directory or the manifest file.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let (dir, file): (PathBuf, PathBuf) = if path.is_dir() {
        (path.to_path_buf(), path.join(MANIFEST_FILE))
    } else {
        (
            path.parent().map(Path::to_path_buf).unwrap_or_default(),
            path.to_path_buf(),
        )
    };
    let manifest: Manifest = serde_json::from_slice(&fs::read(&file)?)?;
    let classes = manifest.classes.len();
    let load_split = |entries: &[ManifestEntry]| -> Result<Vec<Sample>> {
        entries
            .iter()
            .map(|e| {
                let image = io::load(dir.join(&e.image))?;
                let mask = import_mask(dir.join(&e.mask))?;
                if image.shape() != [3, mask.height(), mask.width()] {
                    return Err(invalid(format!("{}: image and mask sizes differ", e.image)));
                }
                let label = label_from_mask(&mask, classes);
                if e.label.len() != classes || e.label.iter().zip(&label).any(|(&a, &b)| (a != 0) != b) {
                    return Err(invalid(format!("{}: label disagrees with mask", e.mask)));
                }
                Ok(Sample { image, mask, label })
            })
            .collect()
    };
    Ok(Dataset {
        classes,
        seed: manifest.seed,
        train: load_split(&manifest.train)?,
        val: load_split(&manifest.val)?,
    })
}
