//! Training images: procedurally rendered cartoon avatars, or a directory of PNGs.

use std::path::{Path, PathBuf};
use std::sync::{Mutex, OnceLock};

use image::imageops::FilterType;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::seeds::derive_seed;
use crate::tensor::Tensor;

/// Number of variants per avatar attribute, in rendering order.
pub const ATTRIBUTES: [(&str, usize); 10] = [
    ("face_shape", 7),
    ("eye_style", 3),
    ("hair_style", 8),
    ("chin", 3),
    ("eye_angle", 3),
    ("glasses", 4),
    ("face_color", 6),
    ("hair_color", 6),
    ("eye_color", 5),
    ("background", 6),
];

const FACE_COLORS: [[f32; 3]; 6] = [
    [0.98, 0.85, 0.72],
    [0.93, 0.76, 0.60],
    [0.82, 0.62, 0.45],
    [0.66, 0.47, 0.32],
    [0.48, 0.33, 0.22],
    [0.36, 0.24, 0.16],
];
const HAIR_COLORS: [[f32; 3]; 6] = [
    [0.10, 0.08, 0.07],
    [0.40, 0.25, 0.12],
    [0.85, 0.70, 0.35],
    [0.70, 0.25, 0.10],
    [0.75, 0.75, 0.78],
    [0.30, 0.35, 0.80],
];
const EYE_COLORS: [[f32; 3]; 5] = [
    [0.15, 0.10, 0.05],
    [0.20, 0.45, 0.80],
    [0.20, 0.60, 0.30],
    [0.45, 0.45, 0.50],
    [0.55, 0.35, 0.15],
];
const BACKGROUNDS: [[f32; 3]; 6] = [
    [0.95, 0.95, 0.95],
    [0.60, 0.80, 0.95],
    [0.95, 0.75, 0.80],
    [0.75, 0.92, 0.70],
    [0.98, 0.90, 0.55],
    [0.75, 0.70, 0.90],
];
const FRAME: [f32; 3] = [0.12, 0.12, 0.14];
const MOUTH: [f32; 3] = [0.55, 0.15, 0.15];

/// Attribute indices of one avatar, in the order of [`ATTRIBUTES`].
pub type Attributes = [usize; 10];

/// Seeded procedural avatar renderer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub resolution: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(resolution: usize, seed: u64) -> Self {
        SyntheticSpec { resolution, seed }
    }

    pub fn attributes(&self, index: u64) -> Attributes {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, 0xa77, index));
        let mut out = [0; 10];
        for (slot, (_, count)) in out.iter_mut().zip(ATTRIBUTES) {
            *slot = rng.random_range(0..count);
        }
        out
    }

    /// `[3, R, R]` image in `[-1, 1]`; each pixel averages a 2×2 subgrid.
    pub fn render(&self, index: u64) -> Tensor<f32> {
        render_attributes(&self.attributes(index), self.resolution)
    }
}

/// Renders an avatar with explicit attributes.
pub fn render_attributes(a: &Attributes, resolution: usize) -> Tensor<f32> {
    let r = resolution;
    let mut out = Tensor::zeros([3, r, r]);
    let data = out.data_mut();
    for py in 0..r {
        for px in 0..r {
            let mut acc = [0f32; 3];
            for sy in 0..2 {
                for sx in 0..2 {
                    let u = ((px * 2 + sx) as f32 + 0.5) / r as f32 - 1.0;
                    let v = ((py * 2 + sy) as f32 + 0.5) / r as f32 - 1.0;
                    let c = shade(a, u, v);
                    for ch in 0..3 {
                        acc[ch] += c[ch];
                    }
                }
            }
            for ch in 0..3 {
                data[ch * r * r + py * r + px] = (acc[ch] / 4.0) * 2.0 - 1.0;
            }
        }
    }
    out
}

/// Colour at `(u, v) ∈ [-1, 1]²`, `v` pointing down, painted back to front.
fn shade(a: &Attributes, u: f32, v: f32) -> [f32; 3] {
    let [face_shape, eye_style, hair_style, chin, eye_angle, glasses, face_color, hair_color, eye_color, bg] = *a;
    let skin = FACE_COLORS[face_color];
    let hair = HAIR_COLORS[hair_color];
    let mut c = BACKGROUNDS[bg];

    // (half width, half height, superellipse exponent)
    let (rx, ry, e): (f32, f32, f32) = [
        (0.55, 0.68, 2.0),
        (0.50, 0.72, 2.0),
        (0.62, 0.62, 2.0),
        (0.55, 0.68, 3.2),
        (0.48, 0.75, 2.6),
        (0.60, 0.66, 1.7),
        (0.52, 0.64, 4.0),
    ][face_shape];
    let (cx, cy) = (0.0, 0.1);

    if matches!(hair_style, 5..=7) {
        // long hair falls behind the face
        let reach = [0.0, 0.0, 0.0, 0.0, 0.0, 0.75, 0.95, 0.6][hair_style];
        if superellipse(u - cx, v - cy + 0.05, rx + 0.16, ry + 0.12, 2.0) && v < cy + reach {
            c = hair;
        }
    }

    let lower_ry = match chin {
        0 => ry,
        1 => ry * 1.12,
        _ => ry * 0.92,
    };
    let lower_e = if chin == 2 { e.max(3.5) } else { e };
    let face = if v >= cy {
        if chin == 1 {
            // tapered chin
            let taper = 1.0 - 0.45 * ((v - cy) / lower_ry).clamp(0.0, 1.0);
            superellipse(u - cx, v - cy, rx * taper.max(0.2), lower_ry, lower_e)
        } else {
            superellipse(u - cx, v - cy, rx, lower_ry, lower_e)
        }
    } else {
        superellipse(u - cx, v - cy, rx, ry, e)
    };
    if face {
        c = skin;
    }

    let top = cy - ry;
    let on_head = superellipse(u - cx, v - cy, rx + 0.06, ry + 0.06, e);
    let hair_here = match hair_style {
        0 => false,
        1 => on_head && v < top + 0.25,
        2 => on_head && v < top + 0.35 + 0.15 * u,
        3 => on_head && v < top + 0.30 && (u.abs() > 0.12 || v < top + 0.12),
        4 => superellipse(u - cx, v - top - 0.02, 0.35, 0.2, 2.0),
        5 => on_head && v < top + 0.28,
        6 => on_head && (v < top + 0.22 || (u.abs() > rx - 0.12 && v < cy + 0.2)),
        _ => on_head && v < top + 0.4 - 0.2 * u.abs(),
    };
    if hair_here {
        c = hair;
    }

    let angle = [-0.3f32, 0.0, 0.3][eye_angle];
    for side in [-1.0f32, 1.0] {
        let (ex, ey) = (cx + side * rx * 0.45, cy - 0.05);
        let (du, dv) = (u - ex, v - ey);
        let theta = angle * side;
        let (s, co) = theta.sin_cos();
        let (ru, rv) = (co * du + s * dv, -s * du + co * dv);
        let eye = match eye_style {
            0 => ru * ru + rv * rv < 0.085 * 0.085,
            1 => superellipse(ru, rv, 0.13, 0.06, 2.0),
            _ => ru.abs() < 0.12 && rv.abs() < 0.03,
        };
        if eye {
            c = EYE_COLORS[eye_color];
        }
        let d = (du * du + dv * dv).sqrt();
        match glasses {
            1 if (d - 0.17).abs() < 0.035 => c = FRAME,
            2 if (du.abs().max(dv.abs()) - 0.16).abs() < 0.035 => c = FRAME,
            3 if du.abs() < 0.19 && dv.abs() < 0.12 => c = FRAME,
            _ => {}
        }
    }
    if glasses != 0 && (u - cx).abs() < 0.1 && (v - (cy - 0.05)).abs() < 0.025 {
        c = FRAME;
    }

    if superellipse(u - cx, v - cy - 0.38, 0.16, 0.045, 2.0) {
        c = MOUTH;
    }
    c
}

fn superellipse(x: f32, y: f32, rx: f32, ry: f32, e: f32) -> bool {
    (x / rx).abs().powf(e) + (y / ry).abs().powf(e) <= 1.0
}

/// Decodes a PNG, resizes it bilinearly to `resolution`² and scales it to `[-1, 1]`.
pub fn load_png(path: &Path, resolution: usize) -> Result<Tensor<f32>> {
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()?;
    Ok(image_to_tensor(&img, resolution))
}

fn image_to_tensor(img: &image::DynamicImage, resolution: usize) -> Tensor<f32> {
    let rgb = img.to_rgb8();
    let r = resolution as u32;
    let rgb = if rgb.dimensions() == (r, r) {
        rgb
    } else {
        image::imageops::resize(&rgb, r, r, FilterType::Triangle)
    };
    let n = resolution * resolution;
    let mut out = Tensor::zeros([3, resolution, resolution]);
    let data = out.data_mut();
    for (i, px) in rgb.pixels().enumerate() {
        for ch in 0..3 {
            data[ch * n + i] = px[ch] as f32 / 127.5 - 1.0;
        }
    }
    out
}

enum Source {
    Synthetic(SyntheticSpec),
    Directory {
        paths: Vec<PathBuf>,
        cache: Vec<OnceLock<Tensor<f32>>>,
    },
}

/// An indexable image set with a seeded, per-epoch shuffled iteration order.
pub struct DatasetHandle {
    source: Source,
    resolution: usize,
    size: usize,
    shuffle_seed: u64,
    /// Files that failed to decode during ingestion, with the reason.
    pub skipped: Vec<String>,
    order: Mutex<Option<(u64, Vec<usize>)>>,
}

impl std::fmt::Debug for DatasetHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DatasetHandle")
            .field("resolution", &self.resolution)
            .field("size", &self.size)
            .field("skipped", &self.skipped.len())
            .finish()
    }
}

impl DatasetHandle {
    pub fn synthetic(spec: SyntheticSpec, size: usize, shuffle_seed: u64) -> Result<Self> {
        if size == 0 {
            return Err(Error::Dataset("synthetic dataset size must be positive".into()));
        }
        Ok(DatasetHandle {
            resolution: spec.resolution,
            source: Source::Synthetic(spec),
            size,
            shuffle_seed,
            skipped: Vec::new(),
            order: Mutex::new(None),
        })
    }

    /// Every `*.png` directly inside `dir`, in file-name order. Each file is
    /// decoded once here to weed out corrupt ones; resized pixels are produced
    /// on first access and cached.
    pub fn ingest_directory(dir: &Path, resolution: usize, shuffle_seed: u64) -> Result<Self> {
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut candidates = Vec::new();
        for entry in entries {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            let is_png = path
                .extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("png"));
            if path.is_file() && is_png {
                candidates.push(path);
            }
        }
        candidates.sort();
        let mut paths = Vec::new();
        let mut skipped = Vec::new();
        for path in candidates {
            match image::open(&path) {
                Ok(_) => paths.push(path),
                Err(e) => skipped.push(format!("{}: {e}", path.display())),
            }
        }
        if paths.is_empty() {
            return Err(Error::Dataset(format!("no decodable PNG files in {}", dir.display())));
        }
        let size = paths.len();
        Ok(DatasetHandle {
            source: Source::Directory {
                cache: (0..size).map(|_| OnceLock::new()).collect(),
                paths,
            },
            resolution,
            size,
            shuffle_seed,
            skipped,
            order: Mutex::new(None),
        })
    }

    pub fn len(&self) -> usize {
        self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    /// Image by dataset index, `[3, R, R]`.
    pub fn image(&self, index: usize) -> Result<Tensor<f32>> {
        if index >= self.size {
            return Err(Error::Dataset(format!("index {index} out of range for {} images", self.size)));
        }
        match &self.source {
            Source::Synthetic(spec) => Ok(spec.render(index as u64)),
            Source::Directory { paths, cache } => {
                if let Some(t) = cache[index].get() {
                    return Ok(t.clone());
                }
                let t = load_png(&paths[index], self.resolution)?;
                Ok(cache[index].get_or_init(|| t).clone())
            }
        }
    }

    /// Dataset index shown at stream `position`; each epoch is a fresh permutation.
    pub fn index_at(&self, position: u64) -> usize {
        let epoch = position / self.size as u64;
        let offset = (position % self.size as u64) as usize;
        let mut order = self.order.lock().unwrap_or_else(|e| e.into_inner());
        match order.as_ref() {
            Some((e, perm)) if *e == epoch => perm[offset],
            _ => {
                let mut perm: Vec<usize> = (0..self.size).collect();
                perm.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(self.shuffle_seed, 0x5f, epoch)));
                let i = perm[offset];
                *order = Some((epoch, perm));
                i
            }
        }
    }

    /// `count` consecutive stream images starting at `position`, `[count, 3, R, R]`.
    pub fn batch(&self, position: u64, count: usize) -> Result<Tensor<f32>> {
        let indices: Vec<usize> = (0..count as u64).map(|j| self.index_at(position + j)).collect();
        self.gather(&indices)
    }

    pub fn gather(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        let r = self.resolution;
        let mut data = Vec::with_capacity(indices.len() * 3 * r * r);
        for &i in indices {
            data.extend_from_slice(self.image(i)?.data());
        }
        Tensor::new([indices.len(), 3, r, r], data)
    }
}

/// Writes `[3, R, R]` images in `[-1, 1]` as a PNG grid with `columns` columns.
pub fn save_grid(path: &Path, images: &[Tensor<f32>], columns: usize) -> Result<()> {
    if images.is_empty() || columns == 0 {
        return Err(Error::invalid("empty image grid"));
    }
    let s = images[0].shape().to_vec();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape("save_grid", &s, &[3, 0, 0]));
    }
    let (h, w) = (s[1], s[2]);
    let rows = images.len().div_ceil(columns);
    let mut canvas = image::RgbImage::new((columns * w) as u32, (rows * h) as u32);
    for (n, img) in images.iter().enumerate() {
        if img.shape() != s.as_slice() {
            return Err(Error::shape("save_grid", img.shape(), &s));
        }
        let (gx, gy) = ((n % columns) * w, (n / columns) * h);
        let d = img.data();
        for y in 0..h {
            for x in 0..w {
                let px = std::array::from_fn(|ch| {
                    let v = d[ch * h * w + y * w + x].clamp(-1.0, 1.0);
                    ((v + 1.0) * 127.5).round() as u8
                });
                canvas.put_pixel((gx + x) as u32, (gy + y) as u32, image::Rgb(px));
            }
        }
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    canvas.save(path)?;
    Ok(())
}
