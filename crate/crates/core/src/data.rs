//! Synthetic shapes with known structure/texture factors, oracle scorers and PNG I/O.
//!
//! Each image is an anti-aliased rounded square on a gray background. Pose
//! and size are structural factors; hue and background luminance are
//! textural; the accent flag darkens a bar in the lower half of the shape.

use std::fs::{self, File};
use std::io::BufReader;
use std::path::Path;

use autograd::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream;

/// Names of the oracle attributes, in table column order.
pub const ATTRIBUTES: [&str; 5] = ["pose_x", "hue", "size", "accent", "background"];

const SUPERSAMPLE: usize = 4;
const SATURATION: f64 = 0.8;
const VALUE: f64 = 0.9;
const ACCENT_SHADE: f64 = 0.35;
/// Accent bar, in units of the side length relative to the center.
const ACCENT_Y: (f64, f64) = (0.08, 0.40);
const ACCENT_HALF_WIDTH: f64 = 0.25;
const CORNER: f64 = 0.25;

/// Factor ranges of the synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub resolution: usize,
    /// Horizontal offset as a fraction of the travel range.
    pub pose_x: (f64, f64),
    pub hue: (f64, f64),
    /// Side length as a fraction of the image width.
    pub size: (f64, f64),
    /// Probability of the accent mark.
    pub accent_prob: f64,
    pub background: (f64, f64),
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            resolution: 32,
            pose_x: (-0.5, 0.5),
            hue: (0.05, 0.8),
            size: (0.2, 0.5),
            accent_prob: 0.5,
            background: (0.2, 0.8),
        }
    }
}

fn parse_range(key: &str, v: &str) -> Result<(f64, f64)> {
    let bad = || Error::Validation {
        key: key.into(),
        msg: format!("expected `lo,hi`, got `{v}`"),
    };
    let (a, b) = v.split_once(',').ok_or_else(bad)?;
    Ok((
        a.trim().parse().map_err(|_| bad())?,
        b.trim().parse().map_err(|_| bad())?,
    ))
}

impl SyntheticSpec {
    /// Parses `key = value` lines; ranges are written `lo, hi`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut s = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected `key = value`, got `{}`", raw.trim()),
            })?;
            let (k, v) = (k.trim(), v.trim());
            match k {
                "resolution" => {
                    s.resolution = v.parse().map_err(|_| Error::Validation {
                        key: k.into(),
                        msg: format!("cannot parse `{v}`"),
                    })?
                }
                "pose_x" => s.pose_x = parse_range(k, v)?,
                "hue" => s.hue = parse_range(k, v)?,
                "size" => s.size = parse_range(k, v)?,
                "background" => s.background = parse_range(k, v)?,
                "accent_prob" => {
                    s.accent_prob = v.parse().map_err(|_| Error::Validation {
                        key: k.into(),
                        msg: format!("cannot parse `{v}`"),
                    })?
                }
                other => {
                    return Err(Error::Validation {
                        key: other.into(),
                        msg: "unknown key".into(),
                    })
                }
            }
        }
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let check = |key: &str, (lo, hi): (f64, f64), min: f64, max: f64| {
            if !(lo < hi && lo >= min && hi <= max) {
                Err(Error::Validation {
                    key: key.into(),
                    msg: format!("range ({lo}, {hi}) must be non-empty within [{min}, {max}]"),
                })
            } else {
                Ok(())
            }
        };
        check("pose_x", self.pose_x, -0.5, 0.5)?;
        check("hue", self.hue, 0.0, 1.0)?;
        check("size", self.size, 0.05, 0.5)?;
        check("background", self.background, 0.0, 1.0)?;
        if !(0.0..=1.0).contains(&self.accent_prob) {
            return Err(Error::Validation {
                key: "accent_prob".into(),
                msg: "must lie in [0, 1]".into(),
            });
        }
        if self.resolution < 8 || !self.resolution.is_power_of_two() {
            return Err(Error::Validation {
                key: "resolution".into(),
                msg: "must be a power of two >= 8".into(),
            });
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Factors {
        let u = |rng: &mut dyn rand::RngCore, (lo, hi): (f64, f64)| rng.random_range(lo..hi);
        Factors {
            pose_x: u(rng, self.pose_x),
            hue: u(rng, self.hue),
            size: u(rng, self.size),
            accent: rng.random_bool(self.accent_prob),
            background: u(rng, self.background),
        }
    }
}

/// Ground-truth factors of one image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Factors {
    pub pose_x: f64,
    pub hue: f64,
    pub size: f64,
    pub accent: bool,
    pub background: f64,
}

impl Factors {
    /// Horizontal center as a fraction of the width.
    pub fn center_x(&self) -> f64 {
        0.5 + 0.5 * self.pose_x
    }

    /// Factor values on the scorers' scales.
    pub fn expected_scores(&self) -> [f64; 5] {
        [
            self.center_x(),
            self.hue,
            size_score(self.size),
            if self.accent { 1.0 } else { 0.0 },
            background_score(self.background),
        ]
    }
}

fn size_score(side_fraction: f64) -> f64 {
    ((side_fraction - 0.2) / 0.3).clamp(0.0, 1.0)
}

fn background_score(lum: f64) -> f64 {
    ((lum - 0.2) / 0.6).clamp(0.0, 1.0)
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as i64 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Hue in `[0, 1)`; `None` for gray.
pub fn rgb_to_hue(c: [f64; 3]) -> Option<f64> {
    let [r, g, b] = c;
    let mx = r.max(g).max(b);
    let mn = r.min(g).min(b);
    let delta = mx - mn;
    if delta <= 1e-12 {
        return None;
    }
    let h = if mx == r {
        ((g - b) / delta).rem_euclid(6.0)
    } else if mx == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    };
    Some((h / 6.0).rem_euclid(1.0))
}

fn inside_rounded_square(x: f64, y: f64, cx: f64, cy: f64, side: f64) -> bool {
    let half = side / 2.0;
    let r = CORNER * side;
    let dx = (x - cx).abs();
    let dy = (y - cy).abs();
    if dx > half || dy > half {
        return false;
    }
    let ix = dx - (half - r);
    let iy = dy - (half - r);
    if ix > 0.0 && iy > 0.0 {
        ix * ix + iy * iy <= r * r
    } else {
        true
    }
}

fn in_accent(x: f64, y: f64, cx: f64, cy: f64, side: f64) -> bool {
    (x - cx).abs() <= ACCENT_HALF_WIDTH * side && y >= cy + ACCENT_Y.0 * side && y <= cy + ACCENT_Y.1 * side
}

/// Renders one image as `[3, R, R]` values in `[-1, 1]`.
pub fn render(f: &Factors, resolution: usize) -> Tensor<f32> {
    let r = resolution;
    let rf = r as f64;
    let fg = hsv_to_rgb(f.hue, SATURATION, VALUE);
    let dark = fg.map(|c| c * ACCENT_SHADE);
    let bg = f.background;
    let (cx, cy, side) = (f.center_x() * rf, rf / 2.0, f.size * rf);
    let mut out = vec![0f32; 3 * r * r];
    let ss = SUPERSAMPLE as f64;
    for py in 0..r {
        for px in 0..r {
            let mut acc = [0.0f64; 3];
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = px as f64 + (sx as f64 + 0.5) / ss;
                    let y = py as f64 + (sy as f64 + 0.5) / ss;
                    let c = if !inside_rounded_square(x, y, cx, cy, side) {
                        [bg; 3]
                    } else if f.accent && in_accent(x, y, cx, cy, side) {
                        dark
                    } else {
                        fg
                    };
                    for k in 0..3 {
                        acc[k] += c[k];
                    }
                }
            }
            for k in 0..3 {
                out[k * r * r + py * r + px] = (acc[k] / (ss * ss) * 2.0 - 1.0) as f32;
            }
        }
    }
    Tensor::new(&[3, r, r], out)
}

/// An attribute measured directly from pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Attribute {
    PoseX,
    Hue,
    Size,
    Accent,
    Background,
}

impl Attribute {
    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "pose_x" | "pose" => Attribute::PoseX,
            "hue" => Attribute::Hue,
            "size" => Attribute::Size,
            "accent" => Attribute::Accent,
            "background" => Attribute::Background,
            other => return Err(Error::UnknownAttribute(other.into())),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Attribute::PoseX => "pose_x",
            Attribute::Hue => "hue",
            Attribute::Size => "size",
            Attribute::Accent => "accent",
            Attribute::Background => "background",
        }
    }

    pub fn all() -> [Attribute; 5] {
        [
            Attribute::PoseX,
            Attribute::Hue,
            Attribute::Size,
            Attribute::Accent,
            Attribute::Background,
        ]
    }
}

/// Deterministic per-image scorer with outputs in `[0, 1]`.
pub trait AttributeScorer: Send + Sync {
    fn name(&self) -> &str;
    /// Scores one `[3, R, R]` image with values in `[-1, 1]`.
    fn score(&self, image: &[f32], resolution: usize) -> f64;

    fn score_batch(&self, images: &Tensor<f32>) -> Vec<f64> {
        let r = images.shape()[2];
        images.data().chunks(3 * r * r).map(|im| self.score(im, r)).collect()
    }
}

/// Pixel measurements shared by the oracle scorers.
#[derive(Clone, Debug)]
pub struct Measurements {
    pub background: f64,
    pub centroid_x: f64,
    pub hue: f64,
    pub width: f64,
    pub accent: f64,
}

/// Measures one `[3, R, R]` image (values in `[-1, 1]`).
pub fn measure(image: &[f32], r: usize) -> Measurements {
    let px = |k: usize, y: usize, x: usize| (image[k * r * r + y * r + x] as f64 + 1.0) / 2.0;
    let rgb = |y: usize, x: usize| [px(0, y, x), px(1, y, x), px(2, y, x)];

    // Background from the top and bottom rows, which the shape never reaches.
    let mut bg = [0.0; 3];
    for y in [0, r - 1] {
        for x in 0..r {
            let c = rgb(y, x);
            for k in 0..3 {
                bg[k] += c[k] / (2 * r) as f64;
            }
        }
    }
    let dist = |c: [f64; 3]| ((c[0] - bg[0]).powi(2) + (c[1] - bg[1]).powi(2) + (c[2] - bg[2]).powi(2)).sqrt();

    let mut wsum = 0.0;
    let mut xsum = 0.0;
    let mut col = [0.0; 3];
    for y in 0..r {
        for x in 0..r {
            let c = rgb(y, x);
            let w = dist(c);
            wsum += w;
            xsum += w * (x as f64 + 0.5);
            for k in 0..3 {
                col[k] += w * (c[k] - bg[k]);
            }
        }
    }
    let centroid_x = if wsum > 1e-9 { xsum / wsum / r as f64 } else { 0.5 };
    let hue = rgb_to_hue(col).unwrap_or(0.0);

    // Width from the row just above center, clear of corners and accent.
    let row = r / 2 - 1;
    let dists: Vec<f64> = (0..r).map(|x| dist(rgb(row, x))).collect();
    let dmax = dists.iter().copied().fold(0.0, f64::max);
    let width = if dmax > 1e-9 {
        dists.iter().map(|d| d / dmax).sum::<f64>() / r as f64
    } else {
        0.0
    };

    // Accent: darkest lower-half row against the reference row, over the central columns.
    let cx = centroid_x * r as f64;
    let side = width * r as f64;
    let lum = |y: usize| {
        let (mut s, mut n) = (0.0, 0);
        for x in 0..r {
            let xc = x as f64 + 0.5;
            if (xc - cx).abs() <= (0.2 * side - 0.5).max(0.5) {
                let c = rgb(y, x);
                s += (c[0] + c[1] + c[2]) / 3.0;
                n += 1;
            }
        }
        if n == 0 {
            None
        } else {
            Some(s / n as f64)
        }
    };
    let accent = match lum(row) {
        Some(reference) if reference > 1e-6 => {
            let cy = r as f64 / 2.0;
            let mut darkest = reference;
            for y in r / 2..r {
                // only rows lying entirely inside the shape
                if y as f64 + 1.0 - cy > 0.5 * side {
                    break;
                }
                if let Some(l) = lum(y) {
                    darkest = darkest.min(l);
                }
            }
            ((reference - darkest) / ((1.0 - ACCENT_SHADE) * reference)).clamp(0.0, 1.0)
        }
        _ => 0.0,
    };
    let background = (bg[0] + bg[1] + bg[2]) / 3.0;
    Measurements {
        background,
        centroid_x,
        hue,
        width,
        accent,
    }
}

/// Hand-written measurement of one attribute.
#[derive(Clone, Copy, Debug)]
pub struct OracleScorer {
    pub attribute: Attribute,
}

pub fn oracle_scorer(name: &str) -> Result<OracleScorer> {
    Ok(OracleScorer {
        attribute: Attribute::parse(name)?,
    })
}

impl OracleScorer {
    pub fn from_measurements(&self, m: &Measurements) -> f64 {
        match self.attribute {
            Attribute::PoseX => m.centroid_x.clamp(0.0, 1.0),
            Attribute::Hue => m.hue,
            Attribute::Size => size_score(m.width),
            Attribute::Accent => m.accent,
            Attribute::Background => background_score(m.background),
        }
    }
}

impl AttributeScorer for OracleScorer {
    fn name(&self) -> &str {
        self.attribute.name()
    }

    fn score(&self, image: &[f32], resolution: usize) -> f64 {
        self.from_measurements(&measure(image, resolution))
    }
}

/// All five oracle scores for every image in `[B, 3, R, R]`, as `[B][5]`.
pub fn score_all(images: &Tensor<f32>) -> Vec<[f64; 5]> {
    let r = images.shape()[2];
    images
        .data()
        .chunks(3 * r * r)
        .map(|im| {
            let m = measure(im, r);
            Attribute::all().map(|a| OracleScorer { attribute: a }.from_measurements(&m))
        })
        .collect()
}

/// Images held as 8-bit CHW bytes with their factors.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub resolution: usize,
    pub pixels: Vec<u8>,
    pub factors: Vec<Factors>,
}

pub fn to_u8(v: f32) -> u8 {
    ((v as f64 + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

pub fn from_u8(b: u8) -> f32 {
    (b as f64 / 127.5 - 1.0) as f32
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }

    fn image_len(&self) -> usize {
        3 * self.resolution * self.resolution
    }

    /// `[len, 3, R, R]` batch of the given indices.
    pub fn batch(&self, indices: &[usize]) -> Tensor<f32> {
        let n = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend(self.pixels[i * n..(i + 1) * n].iter().map(|&b| from_u8(b)));
        }
        let r = self.resolution;
        Tensor::new(&[indices.len(), 3, r, r], data)
    }

    pub fn random_batch(&self, rng: &mut impl Rng, size: usize) -> Tensor<f32> {
        let idx: Vec<usize> = (0..size).map(|_| rng.random_range(0..self.len())).collect();
        self.batch(&idx)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let img_dir = dir.join("images");
        fs::create_dir_all(&img_dir)?;
        let n = self.image_len();
        for i in 0..self.len() {
            let t = Tensor::new(
                &[3, self.resolution, self.resolution],
                self.pixels[i * n..(i + 1) * n].iter().map(|&b| from_u8(b)).collect(),
            );
            save_png(&t, img_dir.join(format!("{i}.png")))?;
        }
        let mut w = csv::Writer::from_path(dir.join("attributes.csv"))?;
        let mut header = vec![
            "index".to_string(),
            "pose_x".into(),
            "hue".into(),
            "size".into(),
            "accent".into(),
            "background".into(),
        ];
        header.extend(ATTRIBUTES.iter().map(|a| format!("score_{a}")));
        w.write_record(&header)?;
        for i in 0..self.len() {
            let f = &self.factors[i];
            let t = Tensor::new(
                &[1, 3, self.resolution, self.resolution],
                self.pixels[i * n..(i + 1) * n].iter().map(|&b| from_u8(b)).collect(),
            );
            let scores = score_all(&t)[0];
            let mut rec = vec![
                i.to_string(),
                f.pose_x.to_string(),
                f.hue.to_string(),
                f.size.to_string(),
                u8::from(f.accent).to_string(),
                f.background.to_string(),
            ];
            rec.extend(scores.iter().map(|s| s.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut rdr = csv::Reader::from_path(dir.join("attributes.csv"))?;
        let mut factors = Vec::new();
        let mut pixels = Vec::new();
        let mut resolution = 0;
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let field = |k: usize| -> Result<f64> {
                rec.get(k)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::Invalid(format!("attributes.csv row {}: bad column {k}", row + 1)))
            };
            let index = field(0)? as usize;
            factors.push(Factors {
                pose_x: field(1)?,
                hue: field(2)?,
                size: field(3)?,
                accent: field(4)? != 0.0,
                background: field(5)?,
            });
            let img = load_png(dir.join("images").join(format!("{index}.png")))?;
            let r = img.shape()[1];
            if resolution == 0 {
                resolution = r;
            } else if r != resolution {
                return Err(Error::Image {
                    path: dir.join("images").join(format!("{index}.png")),
                    msg: format!("expected {resolution}x{resolution}, got {r}x{r}"),
                });
            }
            pixels.extend(img.data().iter().map(|&v| to_u8(v)));
        }
        if factors.is_empty() {
            return Err(Error::Invalid(format!("dataset at {} is empty", dir.display())));
        }
        Ok(Self {
            resolution,
            pixels,
            factors,
        })
    }
}

/// Renders `count` images with factors drawn from the seeded `data` stream.
pub fn generate_dataset(spec: &SyntheticSpec, count: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::Invalid("count must be at least 1".into()));
    }
    let r = spec.resolution;
    let mut factors = Vec::with_capacity(count);
    let mut pixels = Vec::with_capacity(count * 3 * r * r);
    for i in 0..count {
        let f = spec.sample(&mut stream(seed, "data", i as u64));
        pixels.extend(render(&f, r).data().iter().map(|&v| to_u8(v)));
        factors.push(f);
    }
    Ok(Dataset {
        resolution: r,
        pixels,
        factors,
    })
}

/// Writes a `[3, H, W]` image to an 8-bit RGB PNG using `round((v+1)·127.5)`.
pub fn save_png(image: &Tensor<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_png(image).map_err(|e| Error::Image {
        path: path.into(),
        msg: e.to_string(),
    })?;
    fs::write(path, bytes)?;
    Ok(())
}

/// Encodes a `[3, H, W]` image as PNG bytes.
pub fn encode_png(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Invalid(format!("expected a [3, H, W] image, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let d = image.data();
    let mut buf = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for k in 0..3 {
                buf.push(to_u8(d[k * h * w + y * w + x]));
            }
        }
    }
    let err = |e: png::EncodingError| Error::Invalid(format!("png encoding: {e}"));
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(err)?;
        writer.write_image_data(&buf).map_err(err)?;
        writer.finish().map_err(err)?;
    }
    Ok(out)
}

/// Decodes PNG bytes into `[3, H, W]` values in `[-1, 1]`.
pub fn decode_png(bytes: &[u8]) -> Result<Tensor<f32>> {
    decode_from(std::io::Cursor::new(bytes), Path::new("<memory>"))
}

pub fn load_png(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::Image {
        path: path.into(),
        msg: e.to_string(),
    })?;
    decode_from(BufReader::new(file), path)
}

fn decode_from<R: std::io::BufRead + std::io::Seek>(r: R, path: &Path) -> Result<Tensor<f32>> {
    let err = |msg: String| Error::Image { path: path.into(), msg };
    let mut dec = png::Decoder::new(r);
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| err(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| err("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| err(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(err(format!("unsupported color type {other:?}"))),
    };
    let mut out = vec![0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let p = &buf[y * info.line_size + x * channels..];
            for k in 0..3 {
                let b = if channels < 3 { p[0] } else { p[k] };
                out[k * h * w + y * w + x] = from_u8(b);
            }
        }
    }
    Ok(Tensor::new(&[3, h, w], out))
}
