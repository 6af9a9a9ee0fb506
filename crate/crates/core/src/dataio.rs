//! Dataset I/O: binary PPM (P6) images, the versioned manifest schema, and
//! the synthetic terrain generator used for every desk-scale experiment.
//!
//! Manifest schema `lvx-manifest/1` (JSON, UTF-8):
//!
//! ```json
//! {
//!   "version": "lvx-manifest/1",
//!   "classes": ["roi"],
//!   "entries": [
//!     { "image": "img_000.ppm", "width": 64, "height": 64,
//!       "objects": [ { "class": "roi", "cx": 20.5, "cy": 41.0 } ] }
//!   ]
//! }
//! ```
//!
//! Centroids are pixel coordinates in `[0, width) x [0, height)`. Images are
//! P6 with maxval 255, no comments, exactly one whitespace byte after the
//! maxval.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_VERSION: &str = "lvx-manifest/1";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Uniform per-pixel jitter amplitude for the `noise` background style.
pub const NOISE_AMPLITUDE: f32 = 0.05;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ObjectLabel {
    pub class: String,
    pub cx: f64,
    pub cy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub image: String,
    pub width: usize,
    pub height: usize,
    pub objects: Vec<ObjectLabel>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub version: String,
    pub classes: Vec<String>,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::Manifest(format!(
                "unsupported version {:?}, expected {MANIFEST_VERSION:?}",
                self.version
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for c in &self.classes {
            if !seen.insert(c) {
                return Err(Error::Manifest(format!("duplicate class name {c:?}")));
            }
        }
        if self.classes.is_empty() {
            return Err(Error::Manifest("class list is empty".into()));
        }
        for (i, e) in self.entries.iter().enumerate() {
            for (j, o) in e.objects.iter().enumerate() {
                if !self.classes.iter().any(|c| c == &o.class) {
                    return Err(Error::Manifest(format!(
                        "entry {i} ({:?}) object {j}: class {:?} not in class list",
                        e.image, o.class
                    )));
                }
                let in_bounds =
                    o.cx >= 0.0 && o.cy >= 0.0 && o.cx < e.width as f64 && o.cy < e.height as f64;
                if !in_bounds {
                    return Err(Error::Manifest(format!(
                        "entry {i} ({:?}) object {j}: centroid ({}, {}) outside [0, {}) x [0, {})",
                        e.image, o.cx, o.cy, e.width, e.height
                    )));
                }
            }
        }
        Ok(())
    }

    /// 1-based class id (0 is background).
    pub fn class_id(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name).map(|i| i + 1)
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path)?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::Manifest(e.to_string()))?;
    manifest.validate()?;
    Ok(manifest)
}

pub fn save_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    manifest.validate()?;
    let mut text = serde_json::to_string_pretty(manifest).map_err(|e| Error::Manifest(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

// --- PPM (P6) ----------------------------------------------------------------

fn parse_ppm_token<'a>(bytes: &'a [u8], pos: &mut usize, what: &str) -> Result<&'a [u8]> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Ppm(format!("missing {what} in header")));
    }
    Ok(&bytes[start..*pos])
}

fn parse_dim(token: &[u8], what: &str) -> Result<usize> {
    std::str::from_utf8(token)
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&v| v > 0)
        .ok_or_else(|| Error::Ppm(format!("invalid {what}: {:?}", String::from_utf8_lossy(token))))
}

/// Read a binary P6 image into a `(1, h, w, 3)` tensor with pixels in `[0, 1]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let bytes = std::fs::read(&path)?;
    decode_ppm(&bytes)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0usize;
    let magic = parse_ppm_token(bytes, &mut pos, "magic")?;
    if magic != b"P6" {
        return Err(Error::Ppm(format!(
            "expected magic P6, got {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let w = parse_dim(parse_ppm_token(bytes, &mut pos, "width")?, "width")?;
    let h = parse_dim(parse_ppm_token(bytes, &mut pos, "height")?, "height")?;
    let maxval = parse_dim(parse_ppm_token(bytes, &mut pos, "maxval")?, "maxval")?;
    if maxval != 255 {
        return Err(Error::Ppm(format!("only maxval 255 is supported, got {maxval}")));
    }
    // exactly one whitespace byte separates the header from the pixel data
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Ppm("missing whitespace after maxval".into()));
    }
    pos += 1;
    let want = w * h * 3;
    let pixels = &bytes[pos..];
    if pixels.len() != want {
        return Err(Error::Ppm(format!(
            "pixel payload is {} bytes, expected {want} for {w}x{h}",
            pixels.len()
        )));
    }
    let data = pixels.iter().map(|&b| b as f32 / 255.0).collect();
    Tensor::from_vec([1, h, w, 3], data)
}

/// Write a `(1, h, w, 3)` tensor as canonical P6: `P6\n{w} {h}\n255\n` + RGB.
pub fn write_image(image: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_ppm(image)?)?;
    Ok(())
}

pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let [n, h, w, c] = image.shape();
    if n != 1 || c != 3 {
        return Err(Error::shape("encode_ppm", "(1, h, w, 3)", format!("{:?}", image.shape())));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(
        image
            .data()
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    Ok(out)
}

// --- Resizing ----------------------------------------------------------------

/// Bilinear sample at continuous coordinates (pixel centers at integers),
/// clamped to the image border.
fn sample_bilinear(img: &Tensor, y: f64, x: f64, ch: usize) -> f32 {
    let h = img.h() as isize;
    let w = img.w() as isize;
    let y0 = y.floor() as isize;
    let x0 = x.floor() as isize;
    let fy = (y - y0 as f64) as f32;
    let fx = (x - x0 as f64) as f32;
    let clamp_y = |v: isize| v.clamp(0, h - 1) as usize;
    let clamp_x = |v: isize| v.clamp(0, w - 1) as usize;
    let v00 = img.at(0, clamp_y(y0), clamp_x(x0), ch);
    let v01 = img.at(0, clamp_y(y0), clamp_x(x0 + 1), ch);
    let v10 = img.at(0, clamp_y(y0 + 1), clamp_x(x0), ch);
    let v11 = img.at(0, clamp_y(y0 + 1), clamp_x(x0 + 1), ch);
    let top = v00 + (v01 - v00) * fx;
    let bot = v10 + (v11 - v10) * fx;
    top + (bot - top) * fy
}

/// Resample an axis-aligned window of `img` to `out_h` x `out_w` with
/// bilinear interpolation. The window may have fractional coordinates.
pub fn crop_resize(img: &Tensor, top: f64, left: f64, height: f64, width: f64, out_h: usize, out_w: usize) -> Tensor {
    let c = img.c();
    let mut out = Tensor::zeros(1, out_h, out_w, c);
    let sy = height / out_h as f64;
    let sx = width / out_w as f64;
    for oy in 0..out_h {
        let y = top + (oy as f64 + 0.5) * sy - 0.5;
        for ox in 0..out_w {
            let x = left + (ox as f64 + 0.5) * sx - 0.5;
            for ch in 0..c {
                *out.at_mut(0, oy, ox, ch) = sample_bilinear(img, y, x, ch);
            }
        }
    }
    out
}

/// Bilinear resize of a square image to `target` x `target`. Centroid labels
/// must be rescaled by the same `target / source` factor (see
/// [`scale_centroid`]).
pub fn resize(img: &Tensor, target: usize) -> Tensor {
    crop_resize(img, 0.0, 0.0, img.h() as f64, img.w() as f64, target, target)
}

pub fn scale_centroid(cx: f64, cy: f64, src: usize, dst: usize) -> (f64, f64) {
    let f = dst as f64 / src as f64;
    (cx * f, cy * f)
}

// --- Synthetic terrain generator ----------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackgroundStyle {
    Flat,
    Noise,
}

impl std::str::FromStr for BackgroundStyle {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flat" => Ok(BackgroundStyle::Flat),
            "noise" => Ok(BackgroundStyle::Noise),
            other => Err(Error::Config(format!("unknown background style {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub image_size: usize,
    pub n_images: usize,
    pub objects_per_image: (usize, usize),
    /// Ellipse semi-axis range in pixels, at least 2.
    pub radius_range: (f64, f64),
    pub background: BackgroundStyle,
    /// Normalized color distance between object and background mean:
    /// `|obj - bg| / sqrt(3)`, so 1.0 spans opposite RGB cube corners.
    pub contrast: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.n_images == 0 {
            return Err(Error::Config("image_size and n_images must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.contrast) {
            return Err(Error::Config(format!("contrast must lie in [0, 1], got {}", self.contrast)));
        }
        if self.radius_range.0 < 2.0 || self.radius_range.1 < self.radius_range.0 {
            return Err(Error::Config(format!(
                "radius range must satisfy 2 <= lo <= hi, got {:?}",
                self.radius_range
            )));
        }
        if self.objects_per_image.1 < self.objects_per_image.0 {
            return Err(Error::Config(format!(
                "objects_per_image range is inverted: {:?}",
                self.objects_per_image
            )));
        }
        if self.image_size as f64 <= 2.0 * (self.radius_range.1 + 1.0) {
            return Err(Error::Config(
                "image too small for the requested object radius".into(),
            ));
        }
        Ok(())
    }
}

/// Random unit direction in RGB space whose scaled offset fits the cube.
/// Falls back to a cube diagonal, which fits for any length up to sqrt(3),
/// when rejection sampling runs out of attempts (contrast near 1 leaves
/// almost no admissible directions).
fn feasible_direction(rng: &mut ChaCha8Rng, len: f64) -> [f64; 3] {
    for _ in 0..64 {
        let v = [
            rng.gen_range(-1.0f64..1.0),
            rng.gen_range(-1.0f64..1.0),
            rng.gen_range(-1.0f64..1.0),
        ];
        let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if !(0.1..=1.0).contains(&norm) {
            continue;
        }
        let u = [v[0] / norm, v[1] / norm, v[2] / norm];
        if u.iter().all(|&c| (len * c).abs() <= 1.0) {
            return u;
        }
    }
    let d = 3.0f64.sqrt().recip();
    let sign = |b: bool| if b { d } else { -d };
    [
        sign(rng.gen_bool(0.5)),
        sign(rng.gen_bool(0.5)),
        sign(rng.gen_bool(0.5)),
    ]
}

/// Background and object mean colors at exactly the requested normalized
/// distance; both inside the RGB unit cube.
pub(crate) fn contrast_color_pair(rng: &mut ChaCha8Rng, contrast: f64) -> ([f32; 3], [f32; 3]) {
    let len = contrast * 3.0f64.sqrt();
    let u = feasible_direction(rng, len);
    let mut bg = [0.0f32; 3];
    let mut obj = [0.0f32; 3];
    for c in 0..3 {
        let d = len * u[c];
        let lo = (-d).max(0.0);
        let hi = (1.0 - d).min(1.0);
        let b = rng.gen_range(lo..=hi);
        bg[c] = b as f32;
        obj[c] = (b + d) as f32;
    }
    (bg, obj)
}

pub(crate) struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
}

impl Ellipse {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let dx = (x - self.cx) / self.rx;
        let dy = (y - self.cy) / self.ry;
        dx * dx + dy * dy <= 1.0
    }
}

/// Fill an image with `base` plus optional uniform jitter.
pub(crate) fn fill_background(
    img: &mut Tensor,
    base: [f32; 3],
    style: BackgroundStyle,
    rng: &mut ChaCha8Rng,
) {
    let [_, h, w, _] = img.shape();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let jitter = match style {
                    BackgroundStyle::Flat => 0.0,
                    BackgroundStyle::Noise => rng.gen_range(-NOISE_AMPLITUDE..=NOISE_AMPLITUDE),
                };
                *img.at_mut(0, y, x, c) = (base[c] + jitter).clamp(0.0, 1.0);
            }
        }
    }
}

pub(crate) fn draw_ellipse(
    img: &mut Tensor,
    e: &Ellipse,
    color: [f32; 3],
    style: BackgroundStyle,
    rng: &mut ChaCha8Rng,
) {
    let [_, h, w, _] = img.shape();
    let y0 = (e.cy - e.ry).floor().max(0.0) as usize;
    let y1 = ((e.cy + e.ry).ceil() as usize).min(h - 1);
    let x0 = (e.cx - e.rx).floor().max(0.0) as usize;
    let x1 = ((e.cx + e.rx).ceil() as usize).min(w - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            if e.contains(x as f64 + 0.5, y as f64 + 0.5) {
                for c in 0..3 {
                    let jitter = match style {
                        BackgroundStyle::Flat => 0.0,
                        BackgroundStyle::Noise => rng.gen_range(-NOISE_AMPLITUDE..=NOISE_AMPLITUDE),
                    };
                    *img.at_mut(0, y, x, c) = (color[c] + jitter).clamp(0.0, 1.0);
                }
            }
        }
    }
}

const PLACEMENT_RETRIES: usize = 200;

/// Generate a labeled synthetic corpus: each object is a filled ellipse whose
/// mean color sits at normalized distance `contrast` from the background
/// mean. Images land in `out_dir` as `img_NNN.ppm` next to `manifest.json`.
/// Deterministic for a fixed `(config, seed)`.
pub fn gen_synthetic(config: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    config.validate()?;
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let size = config.image_size;
    let mut entries = Vec::with_capacity(config.n_images);
    for i in 0..config.n_images {
        let (bg, obj_color) = contrast_color_pair(&mut rng, config.contrast);
        let mut img = Tensor::zeros(1, size, size, 3);
        fill_background(&mut img, bg, config.background, &mut rng);

        let n_objects = rng.gen_range(config.objects_per_image.0..=config.objects_per_image.1);
        let mut placed: Vec<Ellipse> = Vec::new();
        let mut objects = Vec::new();
        for _ in 0..n_objects {
            let mut found = false;
            for _try in 0..PLACEMENT_RETRIES {
                let rx = rng.gen_range(config.radius_range.0..=config.radius_range.1);
                let ry = rng.gen_range(config.radius_range.0..=config.radius_range.1);
                let margin = rx.max(ry) + 1.0;
                let cx = rng.gen_range(margin..size as f64 - margin);
                let cy = rng.gen_range(margin..size as f64 - margin);
                // keep objects apart: adjacent activation clusters would
                // otherwise bridge into one merged detection
                let min_sep = 0.375 * size as f64;
                let sep_ok = placed.iter().all(|p| {
                    let d = ((p.cx - cx).powi(2) + (p.cy - cy).powi(2)).sqrt();
                    d > (p.rx.max(p.ry) + rx.max(ry) + 2.0).max(min_sep)
                });
                if sep_ok {
                    let e = Ellipse { cx, cy, rx, ry };
                    draw_ellipse(&mut img, &e, obj_color, config.background, &mut rng);
                    objects.push(ObjectLabel {
                        class: "roi".to_string(),
                        cx,
                        cy,
                    });
                    placed.push(e);
                    found = true;
                    break;
                }
            }
            if !found {
                return Err(Error::Generation(format!(
                    "could not place object in image {i} after {PLACEMENT_RETRIES} retries"
                )));
            }
        }
        let name = format!("img_{i:03}.ppm");
        write_image(&img, out_dir.join(&name))?;
        entries.push(ManifestEntry {
            image: name,
            width: size,
            height: size,
            objects,
        });
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION.to_string(),
        classes: vec!["roi".to_string()],
        entries,
    };
    save_manifest(&manifest, out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

// --- Loaded datasets -----------------------------------------------------------

/// One ground-truth object with a resolved class id (1-based; 0 is background).
#[derive(Debug, Clone, PartialEq)]
pub struct GtObject {
    pub class_id: usize,
    pub cx: f64,
    pub cy: f64,
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub image: Tensor,
    pub objects: Vec<GtObject>,
}

/// A manifest pulled into memory with every image resized to `input_size`
/// and centroids rescaled to match.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub classes: Vec<String>,
    pub input_size: usize,
    pub samples: Vec<Sample>,
}

impl LoadedDataset {
    pub fn load(dir: impl AsRef<Path>, input_size: usize) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest_path: PathBuf = if dir.is_dir() {
            dir.join(MANIFEST_FILE)
        } else {
            dir.to_path_buf()
        };
        let base = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let manifest = load_manifest(&manifest_path)?;
        let mut samples = Vec::with_capacity(manifest.entries.len());
        for entry in &manifest.entries {
            let img = load_image(base.join(&entry.image))?;
            if img.h() != entry.height || img.w() != entry.width {
                return Err(Error::Manifest(format!(
                    "entry {:?}: declared {}x{} but image is {}x{}",
                    entry.image,
                    entry.width,
                    entry.height,
                    img.w(),
                    img.h()
                )));
            }
            if entry.width != entry.height {
                return Err(Error::Manifest(format!(
                    "entry {:?}: only square images are supported",
                    entry.image
                )));
            }
            let image = if entry.width == input_size {
                img
            } else {
                resize(&img, input_size)
            };
            let objects = entry
                .objects
                .iter()
                .map(|o| {
                    let (cx, cy) = scale_centroid(o.cx, o.cy, entry.width, input_size);
                    GtObject {
                        class_id: manifest.class_id(&o.class).expect("validated class"),
                        cx,
                        cy,
                    }
                })
                .collect();
            samples.push(Sample {
                id: entry.image.clone(),
                image,
                objects,
            });
        }
        Ok(LoadedDataset {
            classes: manifest.classes,
            input_size,
            samples,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}
