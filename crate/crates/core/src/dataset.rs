//! Synthetic two-domain image tasks and a small on-disk dataset format.
//!
//! On disk a domain is a directory holding `manifest.json` and one raw
//! little-endian `f32` file per image (`channels × height × width`,
//! row-major). Values are widened to `f64` on load; generated images are
//! rounded to `f32` precision so a save/load round trip is exact.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainSample {
    /// `channels × side × side`, values in `[0, 1]`.
    pub image: Vec<f64>,
    pub label: usize,
    pub domain: Domain,
    pub id: usize,
}

/// One domain's samples plus the geometry they share.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainSet {
    pub domain: Domain,
    pub num_classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub samples: Vec<DomainSample>,
}

impl DomainSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Stacks the selected images into a `B×C×H×W` tensor.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            data.extend_from_slice(&self.samples[i].image);
        }
        Tensor::new(
            vec![indices.len(), self.channels, self.height, self.width],
            data,
        )
        .expect("image sizes are validated on construction")
    }

    /// Every image as a `B×C×H×W` tensor.
    pub fn images(&self) -> Tensor {
        let all: Vec<usize> = (0..self.len()).collect();
        self.batch(&all)
    }
}

/// Class-conditional motif drawn into every image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternKind {
    /// A bar through the image whose orientation encodes the class.
    Bars,
    /// A Gaussian blob whose position on a ring encodes the class.
    Blobs,
    /// A checkerboard whose period encodes the class.
    Checker,
}

/// Style transform applied to target images. All-neutral values give the
/// source distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainShift {
    /// Blend toward the inverted image, in `[0, 1]`.
    pub inversion: f64,
    /// Amplitude of an additive random sinusoidal texture, in `[0, 1]`.
    pub texture_noise: f64,
    /// Additive intensity offset, in `[-1, 1]`.
    pub brightness: f64,
    /// Multiplier on the deviation from mid-gray, in `(0, 2]`.
    pub contrast: f64,
    /// Rotation of the motif in degrees, in `[-45, 45]`.
    pub rotation_deg: f64,
}

impl DomainShift {
    pub fn none() -> Self {
        DomainShift {
            inversion: 0.0,
            texture_noise: 0.0,
            brightness: 0.0,
            contrast: 1.0,
            rotation_deg: 0.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::none()
    }

    fn validate(&self) -> Result<()> {
        let check = |name: &str, v: f64, lo: f64, hi: f64, open_lo: bool| {
            let ok = v.is_finite() && v <= hi && if open_lo { v > lo } else { v >= lo };
            if ok {
                Ok(())
            } else {
                Err(Error::field(
                    format!("data.shift.{name}"),
                    format!("{v} outside documented range [{lo}, {hi}]"),
                ))
            }
        };
        check("inversion", self.inversion, 0.0, 1.0, false)?;
        check("texture_noise", self.texture_noise, 0.0, 1.0, false)?;
        check("brightness", self.brightness, -1.0, 1.0, false)?;
        check("contrast", self.contrast, 0.0, 2.0, true)?;
        check("rotation_deg", self.rotation_deg, -45.0, 45.0, false)
    }
}

impl Default for DomainShift {
    /// The calibrated desk-scale shift: reduced contrast, a brightness
    /// offset, a background texture and a slight rotation.
    fn default() -> Self {
        DomainShift {
            inversion: 0.0,
            texture_noise: 0.15,
            brightness: 0.1,
            contrast: 0.8,
            rotation_deg: 5.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticTaskSpec {
    pub num_classes: usize,
    pub samples_per_domain: usize,
    pub image_side: usize,
    pub channels: usize,
    pub pattern: PatternKind,
    /// Per-sample motif jitter as a fraction of the class spacing.
    pub jitter: f64,
    /// Standard deviation of per-pixel Gaussian noise.
    pub pixel_noise: f64,
    /// Equal class counts (within one sample) instead of i.i.d. labels.
    pub balanced: bool,
    pub shift: DomainShift,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        SyntheticTaskSpec {
            num_classes: 4,
            samples_per_domain: 512,
            image_side: 16,
            channels: 1,
            pattern: PatternKind::Bars,
            jitter: 0.5,
            pixel_noise: 0.08,
            balanced: true,
            shift: DomainShift::default(),
            seed: 0,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::field("data.num_classes", "need at least 2 classes"));
        }
        if self.samples_per_domain == 0 {
            return Err(Error::field("data.samples_per_domain", "must be positive"));
        }
        if self.image_side < 4 {
            return Err(Error::field("data.image_side", "must be at least 4"));
        }
        if self.channels == 0 {
            return Err(Error::field("data.channels", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.jitter) {
            return Err(Error::field("data.jitter", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.pixel_noise) {
            return Err(Error::field("data.pixel_noise", "must lie in [0, 1]"));
        }
        self.shift.validate()
    }
}

/// Renders the clean motif of `class` (values in `[0, 1]`).
fn render_motif(
    spec: &SyntheticTaskSpec,
    class: usize,
    rotation: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let side = spec.image_side;
    let c = spec.num_classes as f64;
    let mid = (side as f64 - 1.0) / 2.0;
    let mut img = vec![0.0; side * side];
    match spec.pattern {
        PatternKind::Bars => {
            let spacing = PI / c;
            let theta = class as f64 * spacing
                + rng.random_range(-0.5..=0.5) * spec.jitter * spacing
                + rotation;
            let offset = rng.random_range(-1.5..=1.5) * spec.jitter;
            let width = 1.1;
            let (s, co) = theta.sin_cos();
            for y in 0..side {
                for x in 0..side {
                    let (dx, dy) = (x as f64 - mid, y as f64 - mid);
                    let dist = -dx * s + dy * co - offset;
                    img[y * side + x] = (-(dist * dist) / (2.0 * width * width)).exp();
                }
            }
        }
        PatternKind::Blobs => {
            let spacing = 2.0 * PI / c;
            let phi = class as f64 * spacing
                + rng.random_range(-0.5..=0.5) * spec.jitter * spacing
                + rotation;
            let radius = side as f64 * 0.3;
            let (cx, cy) = (mid + radius * phi.cos(), mid + radius * phi.sin());
            let width = side as f64 * 0.12;
            for y in 0..side {
                for x in 0..side {
                    let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                    img[y * side + x] = (-d2 / (2.0 * width * width)).exp();
                }
            }
        }
        PatternKind::Checker => {
            let period = 2.0 + class as f64 * 1.5;
            let phase_x = rng.random_range(0.0..period) * spec.jitter;
            let phase_y = rng.random_range(0.0..period) * spec.jitter;
            let (s, co) = rotation.sin_cos();
            for y in 0..side {
                for x in 0..side {
                    let (dx, dy) = (x as f64 - mid, y as f64 - mid);
                    let u = dx * co + dy * s + phase_x;
                    let v = -dx * s + dy * co + phase_y;
                    let on = ((u / period).floor() + (v / period).floor()) as i64 % 2 == 0;
                    img[y * side + x] = if on { 1.0 } else { 0.0 };
                }
            }
        }
    }
    img
}

fn apply_style(shift: &DomainShift, img: &mut [f64], side: usize, rng: &mut ChaCha8Rng) {
    let freq = rng.random_range(0.6..1.6);
    let angle = rng.random_range(0.0..PI);
    let phase = rng.random_range(0.0..2.0 * PI);
    let (s, c) = angle.sin_cos();
    for y in 0..side {
        for x in 0..side {
            let v = &mut img[y * side + x];
            *v = shift.contrast * (*v - 0.5) + 0.5 + shift.brightness;
            *v = (1.0 - shift.inversion) * *v + shift.inversion * (1.0 - *v);
            if shift.texture_noise > 0.0 {
                let t = freq * (x as f64 * c + y as f64 * s) + phase;
                *v += shift.texture_noise * t.sin();
            }
        }
    }
}

fn draw_labels(spec: &SyntheticTaskSpec, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = spec.samples_per_domain;
    if spec.balanced {
        let mut labels: Vec<usize> = (0..n).map(|i| i % spec.num_classes).collect();
        labels.shuffle(rng);
        labels
    } else {
        (0..n).map(|_| rng.random_range(0..spec.num_classes)).collect()
    }
}

fn generate_domain(spec: &SyntheticTaskSpec, domain: Domain, rng: &mut ChaCha8Rng) -> DomainSet {
    let side = spec.image_side;
    let noise = Normal::new(0.0, spec.pixel_noise.max(f64::MIN_POSITIVE)).expect("valid std");
    let shift = match domain {
        Domain::Source => DomainShift::none(),
        Domain::Target => spec.shift.clone(),
    };
    let rotation = shift.rotation_deg.to_radians();
    let labels = draw_labels(spec, rng);
    let samples = labels
        .into_iter()
        .enumerate()
        .map(|(id, label)| {
            let mut image = Vec::with_capacity(spec.channels * side * side);
            for _ in 0..spec.channels {
                let mut plane = render_motif(spec, label, rotation, rng);
                if !shift.is_identity() {
                    apply_style(&shift, &mut plane, side, rng);
                }
                for v in plane.iter_mut() {
                    if spec.pixel_noise > 0.0 {
                        *v += noise.sample(rng);
                    }
                    *v = (v.clamp(0.0, 1.0) as f32) as f64;
                }
                image.extend(plane);
            }
            DomainSample {
                image,
                label,
                domain,
                id,
            }
        })
        .collect();
    DomainSet {
        domain,
        num_classes: spec.num_classes,
        channels: spec.channels,
        height: side,
        width: side,
        samples,
    }
}

/// Draws a labelled source set and a shifted target set.
///
/// The two domains use independent random streams derived from the seed,
/// so with a neutral shift they are i.i.d. draws of the same distribution.
pub fn generate(spec: &SyntheticTaskSpec) -> Result<(DomainSet, DomainSet)> {
    spec.validate()?;
    let mut src_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    src_rng.set_stream(1);
    let mut tgt_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    tgt_rng.set_stream(2);
    Ok((
        generate_domain(spec, Domain::Source, &mut src_rng),
        generate_domain(spec, Domain::Target, &mut tgt_rng),
    ))
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    domain: Domain,
    num_classes: usize,
    channels: usize,
    height: usize,
    width: usize,
    samples: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    id: usize,
    file: String,
    label: usize,
}

/// Writes `dir/manifest.json` and `dir/images/<id>.bin`.
pub fn save_dataset(set: &DomainSet, dir: &Path) -> Result<()> {
    let images = dir.join("images");
    fs::create_dir_all(&images)?;
    let mut entries = Vec::with_capacity(set.len());
    for s in &set.samples {
        let file = format!("images/{:06}.bin", s.id);
        let mut bytes = Vec::with_capacity(s.image.len() * 4);
        for &v in &s.image {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        fs::write(dir.join(&file), bytes)?;
        entries.push(ManifestEntry {
            id: s.id,
            file,
            label: s.label,
        });
    }
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        domain: set.domain,
        num_classes: set.num_classes,
        channels: set.channels,
        height: set.height,
        width: set.width,
        samples: entries,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

fn ingestion(file: PathBuf, reason: impl Into<String>) -> Error {
    Error::Ingestion {
        file,
        reason: reason.into(),
    }
}

/// Reads a directory written by [`save_dataset`] (or by hand in the same
/// format). Samples keep manifest order.
pub fn load_dataset(dir: &Path) -> Result<DomainSet> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let raw = fs::read(&manifest_path).map_err(|e| ingestion(manifest_path.clone(), e.to_string()))?;
    let manifest: Manifest = serde_json::from_slice(&raw)
        .map_err(|e| ingestion(manifest_path.clone(), format!("malformed manifest: {e}")))?;
    if manifest.format_version != MANIFEST_VERSION {
        return Err(ingestion(
            manifest_path,
            format!("unsupported format_version {}", manifest.format_version),
        ));
    }
    if manifest.num_classes < 2 || manifest.channels == 0 || manifest.height == 0 || manifest.width == 0 {
        return Err(ingestion(manifest_path, "num_classes, channels, height and width must be positive"));
    }
    if let Some(max) = manifest.samples.iter().map(|e| e.label).max() {
        if max >= manifest.num_classes {
            return Err(ingestion(
                manifest_path,
                format!(
                    "label {max} inconsistent with num_classes {}",
                    manifest.num_classes
                ),
            ));
        }
    }
    let expected = manifest.channels * manifest.height * manifest.width * 4;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for entry in &manifest.samples {
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| ingestion(path.clone(), e.to_string()))?;
        if bytes.len() != expected {
            return Err(ingestion(
                path,
                format!("expected {expected} bytes, found {}", bytes.len()),
            ));
        }
        let image: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        if image.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(ingestion(path, "pixel values must lie in [0, 1]"));
        }
        samples.push(DomainSample {
            image,
            label: entry.label,
            domain: manifest.domain,
            id: entry.id,
        });
    }
    Ok(DomainSet {
        domain: manifest.domain,
        num_classes: manifest.num_classes,
        channels: manifest.channels,
        height: manifest.height,
        width: manifest.width,
        samples,
    })
}
