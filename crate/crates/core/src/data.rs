//! Dataset ingestion, the synthetic shapes fixture, PPM export and
//! stratified label subsets.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Images `[M, C, H, W]` in `[0, 1]` with optional labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Option<Vec<usize>>,
    pub class_count: usize,
    pub name: String,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Option<Vec<usize>>, class_count: usize, name: impl Into<String>) -> Result<Self> {
        let d = Self {
            images,
            labels,
            class_count,
            name: name.into(),
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.ndim() != 4 {
            return shape_err("dataset", format!("images must be [M, C, H, W], got {:?}", self.images.shape()));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.len() {
                return Err(Error::Format(format!("{} labels for {} images", labels.len(), self.len())));
            }
            if let Some(&bad) = labels.iter().find(|&&l| l >= self.class_count) {
                return Err(Error::Format(format!("label {bad} outside 0..{}", self.class_count)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `[C, H, W]`.
    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn image(&self, i: usize) -> Result<Tensor<f32>> {
        self.images.narrow(0, i, 1)?.reshape(self.image_shape())
    }

    pub fn labels(&self) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::Contract(format!("dataset {} has no labels", self.name)))
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Ok(Self {
            images: self.images.select(indices)?,
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
            class_count: self.class_count,
            name: self.name.clone(),
        })
    }

    /// First `n` images (or all of them).
    pub fn take(&self, n: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

impl CifarVariant {
    pub fn record_len(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1 + CIFAR_PIXELS,
            CifarVariant::Cifar100 => 2 + CIFAR_PIXELS,
        }
    }

    pub fn classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }
}

const CIFAR_PIXELS: usize = 3 * 32 * 32;

/// Decode CIFAR binary records. CIFAR-10 records are a label byte followed
/// by the R, G and B planes, each 32x32 row-major; CIFAR-100 records carry a
/// coarse and a fine label byte, and the fine label is kept.
pub fn parse_cifar(bytes: &[u8], variant: CifarVariant) -> Result<(Vec<f32>, Vec<usize>)> {
    let rec = variant.record_len();
    if bytes.is_empty() || bytes.len() % rec != 0 {
        return Err(Error::Format(format!(
            "{} bytes is not a whole number of {rec}-byte records",
            bytes.len()
        )));
    }
    let n = bytes.len() / rec;
    let mut pixels = Vec::with_capacity(n * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(n);
    let header = rec - CIFAR_PIXELS;
    for r in bytes.chunks_exact(rec) {
        let label = r[header - 1] as usize;
        if label >= variant.classes() {
            return Err(Error::Format(format!("label {label} outside 0..{}", variant.classes())));
        }
        labels.push(label);
        pixels.extend(r[header..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok((pixels, labels))
}

/// Load a CIFAR split from the directory holding the standard binary files
/// (`data_batch_{1..5}.bin` and `test_batch.bin` for CIFAR-10, `train.bin`
/// and `test.bin` for CIFAR-100).
pub fn load_cifar(dir: &Path, variant: CifarVariant, split: Split) -> Result<Dataset> {
    let files: Vec<String> = match (variant, split) {
        (CifarVariant::Cifar10, Split::Train) => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
        (CifarVariant::Cifar10, Split::Test) => vec!["test_batch.bin".into()],
        (CifarVariant::Cifar100, Split::Train) => vec!["train.bin".into()],
        (CifarVariant::Cifar100, Split::Test) => vec!["test.bin".into()],
    };
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for f in files {
        let bytes = fs::read(dir.join(&f))?;
        let (p, l) = parse_cifar(&bytes, variant)?;
        pixels.extend(p);
        labels.extend(l);
    }
    let n = labels.len();
    let name = match variant {
        CifarVariant::Cifar10 => "cifar10",
        CifarVariant::Cifar100 => "cifar100",
    };
    Dataset::new(
        Tensor::from_vec(&[n, 3, 32, 32], pixels)?,
        Some(labels),
        variant.classes(),
        name,
    )
}

pub const STL_SIDE: usize = 96;
const STL_PIXELS: usize = 3 * STL_SIDE * STL_SIDE;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StlSplit {
    Unlabeled,
    Train,
    Test,
}

/// Decode STL-10 image bytes. Each image is three 96x96 channel planes
/// stored column-major, so byte `c*96*96 + x*96 + y` is pixel `(y, x)`.
pub fn parse_stl_images(bytes: &[u8]) -> Result<Vec<f32>> {
    if bytes.is_empty() || bytes.len() % STL_PIXELS != 0 {
        return Err(Error::Format(format!(
            "{} bytes is not a whole number of {STL_PIXELS}-byte images",
            bytes.len()
        )));
    }
    let mut out = vec![0.0f32; bytes.len()];
    let plane = STL_SIDE * STL_SIDE;
    for (img, dst) in bytes.chunks_exact(STL_PIXELS).zip(out.chunks_exact_mut(STL_PIXELS)) {
        for c in 0..3 {
            for x in 0..STL_SIDE {
                for y in 0..STL_SIDE {
                    dst[c * plane + y * STL_SIDE + x] = img[c * plane + x * STL_SIDE + y] as f32 / 255.0;
                }
            }
        }
    }
    Ok(out)
}

/// Decode STL-10 label bytes, which are 1-based on disk.
pub fn parse_stl_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    bytes
        .iter()
        .map(|&b| match b {
            1..=10 => Ok(b as usize - 1),
            _ => Err(Error::Format(format!("STL-10 label byte {b} outside 1..=10"))),
        })
        .collect()
}

/// Load an STL-10 split from the directory holding `train_X.bin`,
/// `train_y.bin`, `test_X.bin`, `test_y.bin` and `unlabeled_X.bin`.
pub fn load_stl10(dir: &Path, split: StlSplit) -> Result<Dataset> {
    let (xf, yf) = match split {
        StlSplit::Unlabeled => ("unlabeled_X.bin", None),
        StlSplit::Train => ("train_X.bin", Some("train_y.bin")),
        StlSplit::Test => ("test_X.bin", Some("test_y.bin")),
    };
    let pixels = parse_stl_images(&fs::read(dir.join(xf))?)?;
    let n = pixels.len() / STL_PIXELS;
    let labels = match yf {
        Some(f) => {
            let l = parse_stl_labels(&fs::read(dir.join(f))?)?;
            if l.len() != n {
                return Err(Error::Format(format!("{} labels for {n} STL-10 images", l.len())));
            }
            Some(l)
        }
        None => None,
    };
    Dataset::new(Tensor::from_vec(&[n, 3, STL_SIDE, STL_SIDE], pixels)?, labels, 10, "stl10")
}

/// Number of shape classes the synthetic generator can draw.
pub const SYNTHETIC_CLASSES: usize = 10;

/// Upright 5x5 glyphs, top row first: T, L, F, P, U, Y, A, R, J, 7. None
/// is mirror-symmetric about its horizontal axis, so a half-turn never
/// looks like a horizontal flip, and no glyph is a quarter-turn of another.
const GLYPHS: [[&str; 5]; SYNTHETIC_CLASSES] = [
    ["#####", "..#..", "..#..", "..#..", "..#.."],
    ["#....", "#....", "#....", "#....", "#####"],
    ["#####", "#....", "####.", "#....", "#...."],
    ["####.", "#...#", "####.", "#....", "#...."],
    ["#...#", "#...#", "#...#", "#...#", ".###."],
    ["#...#", ".#.#.", "..#..", "..#..", "..#.."],
    ["..#..", ".#.#.", "#...#", "#####", "#...#"],
    ["####.", "#...#", "####.", "#.#..", "#..##"],
    ["..###", "...#.", "...#.", "#..#.", ".##.."],
    ["#####", "....#", "...#.", "..#..", "..#.."],
];

/// Foreground tints. A small shared palette keeps colour from identifying
/// individual images.
const PALETTE: [[f32; 3]; 4] = [[1.0, 1.0, 1.0], [1.0, 0.45, 0.4], [0.45, 1.0, 0.5], [0.5, 0.6, 1.0]];

/// Whether offset `(y, x)` from the glyph centre falls on an ink cell of a
/// glyph spanning `2r` pixels.
fn glyph_mask(class: usize, y: f32, x: f32, r: f32) -> bool {
    let cell = |v: f32| ((v + r) / (2.0 * r) * 5.0).floor();
    let (row, col) = (cell(y), cell(x));
    if !(0.0..5.0).contains(&row) || !(0.0..5.0).contains(&col) {
        return false;
    }
    GLYPHS[class][row as usize].as_bytes()[col as usize] == b'#'
}

/// Class-dependent upright glyphs (see [`GLYPHS`]) drawn with a random
/// bright tinted foreground on a random dark grey background at a jittered position
/// and scale, plus Gaussian pixel noise. Labels cycle through the classes,
/// so every class gets `n / classes` images (the first `n % classes`
/// classes one more).
pub fn synthetic_dataset(n: usize, classes: usize, size: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Contract("synthetic dataset needs at least one image".into()));
    }
    if classes == 0 || classes > SYNTHETIC_CLASSES {
        return Err(Error::Contract(format!("synthetic classes must be in 1..={SYNTHETIC_CLASSES}, got {classes}")));
    }
    if size < 8 {
        return Err(Error::Contract(format!("synthetic image size {size} is below 8")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0f32, 0.03).expect("valid std");
    let plane = size * size;
    let mut pixels = vec![0.0f32; n * 3 * plane];
    let mut labels = Vec::with_capacity(n);
    let s = size as f32;
    for i in 0..n {
        let class = i % classes;
        labels.push(class);
        let tint = PALETTE[rng.gen_range(0..PALETTE.len())];
        let (v_fg, v_bg) = (rng.gen_range(0.6..1.0f32), rng.gen_range(0.0..0.35f32));
        let fg: [f32; 3] = tint.map(|t| v_fg * t);
        let bg = [v_bg; 3];
        let r = s * rng.gen_range(0.3..0.42);
        let cy = s / 2.0 + rng.gen_range(-0.08..0.08) * s;
        let cx = s / 2.0 + rng.gen_range(-0.08..0.08) * s;
        let img = &mut pixels[i * 3 * plane..(i + 1) * 3 * plane];
        for py in 0..size {
            for px in 0..size {
                let y = py as f32 + 0.5 - cy;
                let x = px as f32 + 0.5 - cx;
                let col = if glyph_mask(class, y, x, r) { &fg } else { &bg };
                for c in 0..3 {
                    img[c * plane + py * size + px] = (col[c] + noise.sample(&mut rng)).clamp(0.0, 1.0);
                }
            }
        }
    }
    Dataset::new(
        Tensor::from_vec(&[n, 3, size, size], pixels)?,
        Some(labels),
        classes,
        format!("synthetic-{classes}x{size}-s{seed}"),
    )
}

/// Stratified subset holding `floor(count * percent / 100)` images of each
/// class, at least one. Returns the subset and the remaining images (`None`
/// when nothing remains). Indices keep dataset order within both parts.
pub fn few_shot_split(dataset: &Dataset, percent: f64, seed: u64) -> Result<(Dataset, Option<Dataset>)> {
    if !(percent > 0.0 && percent <= 100.0) {
        return Err(Error::Contract(format!("label percentage {percent} outside (0, 100]")));
    }
    let labels = dataset.labels()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![false; labels.len()];
    for class in 0..dataset.class_count {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.is_empty() {
            continue;
        }
        let k = ((members.len() as f64 * percent / 100.0 + 1e-9).floor() as usize).clamp(1, members.len());
        members.shuffle(&mut rng);
        for &i in &members[..k] {
            chosen[i] = true;
        }
    }
    let subset: Vec<usize> = (0..labels.len()).filter(|&i| chosen[i]).collect();
    let rest: Vec<usize> = (0..labels.len()).filter(|&i| !chosen[i]).collect();
    let rest = if rest.is_empty() { None } else { Some(dataset.subset(&rest)?) };
    Ok((dataset.subset(&subset)?, rest))
}

/// Quantise `[0, 1]` to a byte, clamping and rounding half up.
pub fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Binary P6 bytes of a `[C, H, W]` image; one-channel images are written
/// as grey RGB.
pub fn ppm_bytes(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let (c, h, w) = match *image.shape() {
        [c, h, w] if c == 1 || c == 3 => (c, h, w),
        ref s => return shape_err("ppm", format!("expected [1|3, H, W], got {s:?}")),
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    let d = image.data();
    out.reserve(3 * plane);
    for i in 0..plane {
        for ch in 0..3 {
            out.push(to_byte(d[(ch % c) * plane + i]));
        }
    }
    Ok(out)
}

pub fn write_ppm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let bytes = ppm_bytes(image)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Parse a binary P6 file with maxval 255. Returns `(width, height, rgb)`.
pub fn parse_ppm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PPM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P6" {
        return Err(Error::Format(format!("unsupported PPM magic {:?}", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PPM field {s:?}")));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(Error::Format(format!("unsupported PPM maxval {maxval}")));
    }
    let body = bytes.get(pos..).unwrap_or_default();
    if body.len() != 3 * w * h {
        return Err(Error::Format(format!("PPM body has {} bytes, expected {}", body.len(), 3 * w * h)));
    }
    Ok((w, h, body.to_vec()))
}

pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    parse_ppm(&fs::read(path)?)
}
