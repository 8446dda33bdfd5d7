//! Deterministic synthetic text-line images.
//!
//! Glyphs are procedural 5×7 bitmaps placed left to right on a baseline
//! that may follow a sinusoid. Every random choice for sample `i` of a
//! dataset comes from a ChaCha stream seeded with `spec.seed + i`, so a
//! [`GenSpec`] fully determines the bytes written to disk.

use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::charset::Charset;
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::parallel::{self, Exec};

pub const GLYPH_W: usize = 5;
pub const GLYPH_H: usize = 7;
/// Horizontal advance per glyph, in glyph pixels (one column of spacing).
pub const ADVANCE: usize = GLYPH_W + 1;
/// Glyph height as a fraction of the canvas height at scale 1.
pub const GLYPH_HEIGHT_FRACTION: f64 = 0.6;
/// Left/right margin as a fraction of the canvas width.
pub const MARGIN_FRACTION: f64 = 0.04;

pub const MAX_CURVE_AMPLITUDE: f64 = 12.0;
pub const MAX_JITTER: f64 = 2.0;
pub const SCALE_LIMITS: (f64, f64) = (0.8, 1.2);

const STREAM_RENDER: u64 = 0;
const STREAM_LABEL: u64 = 1;

/// One 5×7 bitmap per printable charset symbol, bit `r·5 + c` set when the
/// pixel at row `r`, column `c` is ink.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GlyphAtlas {
    seed: u64,
    bitmaps: Vec<u64>,
}

impl GlyphAtlas {
    /// Derives the atlas for all printable symbols in charset order; a
    /// bitmap that is too sparse, too dense, or equal to an earlier one is
    /// redrawn from the next attempt stream.
    pub fn new(seed: u64) -> Self {
        let charset = Charset::new();
        let mut bitmaps: Vec<u64> = Vec::with_capacity(charset.symbols().len());
        for index in 0..charset.symbols().len() {
            let mut attempt = 0u64;
            let bitmap = loop {
                let candidate = glyph_bits(seed, index as u64, attempt);
                let ones = candidate.count_ones();
                if (12..=24).contains(&ones) && !bitmaps.contains(&candidate) {
                    break candidate;
                }
                attempt += 1;
            };
            bitmaps.push(bitmap);
        }
        Self { seed, bitmaps }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn bitmap(&self, c: char) -> Option<u64> {
        Charset::new().id(c).map(|i| self.bitmaps[i])
    }

    pub fn ink(bitmap: u64, row: usize, col: usize) -> bool {
        bitmap >> (row * GLYPH_W + col) & 1 == 1
    }
}

fn glyph_bits(seed: u64, index: u64, attempt: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index << 16 | attempt);
    rng.random::<u64>() & ((1u64 << (GLYPH_W * GLYPH_H)) - 1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistortionConfig {
    /// Baseline sinusoid amplitude in canvas pixels, in `[0, 12]`.
    pub curve_amplitude: f64,
    /// Sinusoid phase in radians; drawn from the sample seed when `None`.
    pub curve_phase: Option<f64>,
    /// Maximum per-glyph vertical jitter in pixels, in `[0, 2]`.
    pub jitter: f64,
    /// Glyph scale range, within `[0.8, 1.2]`.
    pub scale_range: (f64, f64),
}

impl DistortionConfig {
    pub fn none() -> Self {
        Self {
            curve_amplitude: 0.0,
            curve_phase: Some(0.0),
            jitter: 0.0,
            scale_range: (1.0, 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        if !(0.0..=MAX_CURVE_AMPLITUDE).contains(&self.curve_amplitude) {
            return Err(Error::Config(format!(
                "curve amplitude {} outside [0, {MAX_CURVE_AMPLITUDE}]",
                self.curve_amplitude
            )));
        }
        if !(0.0..=MAX_JITTER).contains(&self.jitter) {
            return Err(Error::Config(format!("jitter {} outside [0, {MAX_JITTER}]", self.jitter)));
        }
        if !(SCALE_LIMITS.0 <= lo && lo <= hi && hi <= SCALE_LIMITS.1) {
            return Err(Error::Config(format!(
                "scale range ({lo}, {hi}) not within [{}, {}]",
                SCALE_LIMITS.0, SCALE_LIMITS.1
            )));
        }
        Ok(())
    }
}

/// Where one glyph lands on the canvas.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GlyphPlacement {
    /// Left edge in canvas pixels.
    pub left: f64,
    /// Top edge in canvas pixels.
    pub top: f64,
    /// Canvas pixels per glyph pixel.
    pub pixel: f64,
    /// Baseline offset from the vertical canvas center, before jitter.
    pub curve_offset: f64,
}

/// Per-sample random draws that shape the layout and colors.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleStyle {
    pub scale: f64,
    pub phase: f64,
    pub jitter: Vec<f64>,
    pub background: [f64; 3],
    pub foreground: [f64; 3],
}

impl SampleStyle {
    fn draw(len: usize, seed: u64, distortion: &DistortionConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(STREAM_RENDER);
        let (lo, hi) = distortion.scale_range;
        let scale = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let drawn_phase = rng.random_range(0.0..TAU);
        let phase = distortion.curve_phase.unwrap_or(drawn_phase);
        let jitter = (0..len)
            .map(|_| {
                let j = rng.random_range(-1.0..=1.0);
                j * distortion.jitter
            })
            .collect();
        let light_background = rng.random_bool(0.5);
        let contrast = rng.random_range(0.45..0.8);
        let level = if light_background {
            rng.random_range(0.85..1.0)
        } else {
            rng.random_range(0.0..0.15)
        };
        let ink = if light_background { level - contrast } else { level + contrast };
        let mut background = [0.0; 3];
        let mut foreground = [0.0; 3];
        for ch in 0..3 {
            let tint: f64 = rng.random_range(-0.05..0.05);
            background[ch] = (level + tint).clamp(0.0, 1.0);
            foreground[ch] = (ink + tint).clamp(0.0, 1.0);
        }
        Self {
            scale,
            phase,
            jitter,
            background,
            foreground,
        }
    }
}

/// Glyph positions for a `len`-character line.
pub fn layout(
    len: usize,
    canvas_h: usize,
    canvas_w: usize,
    style: &SampleStyle,
    amplitude: f64,
) -> Result<Vec<GlyphPlacement>> {
    let margin = MARGIN_FRACTION * canvas_w as f64;
    let available = canvas_w as f64 - 2.0 * margin;
    let units = (ADVANCE * len - 1) as f64;
    let mut pixel = canvas_h as f64 * GLYPH_HEIGHT_FRACTION / GLYPH_H as f64 * style.scale;
    if units * pixel > available {
        pixel = available / units;
    }
    if pixel < 1.0 {
        return Err(Error::Layout(format!(
            "{len} glyphs do not fit a {canvas_w}px canvas at one pixel per glyph pixel"
        )));
    }
    Ok((0..len)
        .map(|i| {
            let left = margin + (ADVANCE * i) as f64 * pixel;
            let center_x = left + GLYPH_W as f64 * pixel / 2.0;
            let curve_offset = amplitude * (TAU * center_x / canvas_w as f64 + style.phase).sin();
            let center_y = canvas_h as f64 / 2.0 + curve_offset + style.jitter[i];
            GlyphPlacement {
                left,
                top: center_y - GLYPH_H as f64 * pixel / 2.0,
                pixel,
                curve_offset,
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub image: RgbImage,
    pub label: String,
    pub seed: u64,
}

/// Renders one text line on a `canvas_h × canvas_w` canvas.
pub fn render_sample(
    text: &str,
    seed: u64,
    distortion: &DistortionConfig,
    atlas: &GlyphAtlas,
    canvas_h: usize,
    canvas_w: usize,
) -> Result<SynthSample> {
    distortion.validate()?;
    let chars: Vec<char> = text.chars().collect();
    if chars.is_empty() {
        return Err(Error::Data("cannot render an empty label".into()));
    }
    let bitmaps = chars
        .iter()
        .map(|&c| {
            atlas
                .bitmap(c)
                .ok_or_else(|| Error::Data(format!("character {c:?} has no glyph")))
        })
        .collect::<Result<Vec<_>>>()?;
    let style = SampleStyle::draw(chars.len(), seed, distortion);
    let places = layout(chars.len(), canvas_h, canvas_w, &style, distortion.curve_amplitude)?;

    let to_u8 = |v: f64| (v * 255.0).round() as u8;
    let bg = style.background.map(to_u8);
    let fg = style.foreground.map(to_u8);
    let mut image = RgbImage::from_raw(canvas_w, canvas_h, bg.repeat(canvas_w * canvas_h))?;
    for (place, &bitmap) in places.iter().zip(&bitmaps) {
        let x0 = place.left.floor().max(0.0) as usize;
        let y0 = place.top.floor().max(0.0) as usize;
        let x1 = ((place.left + GLYPH_W as f64 * place.pixel).ceil() as usize).min(canvas_w);
        let y1 = ((place.top + GLYPH_H as f64 * place.pixel).ceil().max(0.0) as usize).min(canvas_h);
        for y in y0..y1 {
            let v = (y as f64 + 0.5 - place.top) / place.pixel;
            if v < 0.0 || v >= GLYPH_H as f64 {
                continue;
            }
            for x in x0..x1 {
                let u = (x as f64 + 0.5 - place.left) / place.pixel;
                if u < 0.0 || u >= GLYPH_W as f64 {
                    continue;
                }
                if GlyphAtlas::ink(bitmap, v as usize, u as usize) {
                    image.set_pixel(x, y, fg);
                }
            }
        }
    }
    Ok(SynthSample {
        image,
        label: text.to_owned(),
        seed,
    })
}

/// Dataset generation request, stored as JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenSpec {
    pub count: usize,
    pub seed: u64,
    pub alphabet: String,
    pub min_len: usize,
    pub max_len: usize,
    pub curve_amplitude: f64,
    pub jitter: f64,
    pub scale_range: (f64, f64),
    pub canvas_h: usize,
    pub canvas_w: usize,
}

impl GenSpec {
    /// Digit strings of length 1 to 5 with mild curvature and jitter.
    pub fn digits(count: usize, seed: u64, canvas_h: usize, canvas_w: usize) -> Self {
        Self {
            count,
            seed,
            alphabet: "0123456789".into(),
            min_len: 1,
            max_len: 5,
            curve_amplitude: 3.0,
            jitter: 1.0,
            scale_range: (0.9, 1.1),
            canvas_h,
            canvas_w,
        }
    }

    pub fn distortion(&self) -> DistortionConfig {
        DistortionConfig {
            curve_amplitude: self.curve_amplitude,
            curve_phase: None,
            jitter: self.jitter,
            scale_range: self.scale_range,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Config("dataset count must be positive".into()));
        }
        if self.alphabet.is_empty() {
            return Err(Error::Config("alphabet is empty".into()));
        }
        let charset = Charset::new();
        if let Some(c) = self.alphabet.chars().find(|&c| !charset.contains(c)) {
            return Err(Error::Config(format!("alphabet character {c:?} is not in the charset")));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "length range [{}, {}] is empty or starts at zero",
                self.min_len, self.max_len
            )));
        }
        if self.canvas_h == 0 || self.canvas_w == 0 {
            return Err(Error::Config("canvas must be non-empty".into()));
        }
        self.distortion().validate()
    }

    /// Label of sample `index`: uniform length, then uniform characters.
    pub fn label(&self, index: usize) -> String {
        let alphabet: Vec<char> = self.alphabet.chars().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(index as u64));
        rng.set_stream(STREAM_LABEL);
        let len = rng.random_range(self.min_len..=self.max_len);
        (0..len).map(|_| alphabet[rng.random_range(0..alphabet.len())]).collect()
    }

    pub fn render(&self, index: usize, atlas: &GlyphAtlas) -> Result<SynthSample> {
        render_sample(
            &self.label(index),
            self.seed.wrapping_add(index as u64),
            &self.distortion(),
            atlas,
            self.canvas_h,
            self.canvas_w,
        )
    }
}

/// Glyph atlas seed shared by every dataset, so train and validation splits
/// draw the same glyph shapes.
pub const ATLAS_SEED: u64 = 0x7472_6967;

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const SPEC_FILE: &str = "genspec.json";

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub path: String,
    pub label: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub spec: Option<GenSpec>,
}

/// Writes `images/NNNNNN.ppm`, `manifest.tsv` and `genspec.json` under `out`.
pub fn generate_dataset(spec: &GenSpec, out: impl AsRef<Path>, exec: Exec) -> Result<DatasetManifest> {
    spec.validate()?;
    let out = out.as_ref();
    let images = out.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let atlas = GlyphAtlas::new(ATLAS_SEED);

    let indices: Vec<usize> = (0..spec.count).collect();
    let entries = parallel::map(exec, &indices, |&i| -> Result<ManifestEntry> {
        let sample = spec.render(i, &atlas)?;
        let rel = format!("images/{i:06}.ppm");
        sample.image.save_ppm(out.join(&rel))?;
        Ok(ManifestEntry {
            path: rel,
            label: sample.label,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let manifest = DatasetManifest {
        root: out.to_path_buf(),
        entries,
        spec: Some(spec.clone()),
    };
    let tsv: String = manifest
        .entries
        .iter()
        .map(|e| format!("{}\t{}\n", e.path, e.label))
        .collect();
    let mpath = out.join(MANIFEST_FILE);
    fs::write(&mpath, tsv).map_err(|e| Error::io(&mpath, e))?;
    let spath = out.join(SPEC_FILE);
    let json = serde_json::to_string_pretty(spec)? + "\n";
    fs::write(&spath, json).map_err(|e| Error::io(&spath, e))?;
    Ok(manifest)
}

/// Parses a manifest; `path` may name the TSV file or its directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
    let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
    let charset = Charset::new();
    let mut entries = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        if line.is_empty() {
            continue;
        }
        let (p, label) = line.split_once('\t').ok_or_else(|| Error::Manifest {
            line: line_no,
            msg: "expected <path>\\t<label>".into(),
        })?;
        if p.is_empty() || label.contains('\t') {
            return Err(Error::Manifest {
                line: line_no,
                msg: "expected exactly two non-empty fields".into(),
            });
        }
        if let Some(c) = label.chars().find(|&c| !charset.contains(c)) {
            return Err(Error::Manifest {
                line: line_no,
                msg: format!("label character {c:?} is outside the charset"),
            });
        }
        entries.push(ManifestEntry {
            path: p.to_owned(),
            label: label.to_owned(),
        });
    }
    if entries.is_empty() {
        return Err(Error::Data(format!("{} lists no samples", file.display())));
    }
    let spec_path = root.join(SPEC_FILE);
    let spec = match fs::read_to_string(&spec_path) {
        Ok(s) => Some(serde_json::from_str(&s)?),
        Err(_) => None,
    };
    Ok(DatasetManifest { root, entries, spec })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoadedSample {
    pub path: String,
    pub label: String,
    pub image: RgbImage,
}

/// Loads every manifest entry, in manifest order.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<LoadedSample>> {
    let manifest = read_manifest(path)?;
    manifest
        .entries
        .iter()
        .map(|e| {
            let image = RgbImage::load_ppm(manifest.root.join(&e.path))?;
            Ok(LoadedSample {
                path: e.path.clone(),
                label: e.label.clone(),
                image,
            })
        })
        .collect()
}
