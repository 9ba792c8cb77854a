//! Synthetic layered-phantom corpus.
//!
//! Each phantom is a stack of horizontal tissue-like bands
//! (background / retinal / choroidal / background) whose boundaries get a
//! smooth per-sample perturbation. Per-domain appearance styles (gamma,
//! contrast, noise, blur) simulate the acquisition shift between devices;
//! the label geometry is untouched by styling, which is the premise of
//! unsupervised adaptation.

use crate::error::{Error, Result};
use crate::pgm;
use crate::rng::{standard_normal, stream2, Purpose};
use crate::types::{DomainTag, ImageBatch, LabelMap};
use ndarray::{Array2, Array3, Array4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const NUM_CLASSES: usize = 3;

/// Geometry and intensity plan for one phantom family.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub height: usize,
    pub width: usize,
    /// Row fractions of the three band boundaries (top-of-retina,
    /// retina/choroid, bottom-of-choroid), strictly increasing in (0, 1).
    pub boundary_fractions: [f64; 3],
    /// Amplitude in pixels of the smooth random perturbation applied to each
    /// boundary (vertical offset plus a low-frequency wave).
    pub boundary_wiggle: f64,
    /// Base intensity per class: background, retinal, choroidal.
    pub layer_means: [f64; 3],
    /// Amplitude of the smooth within-layer texture noise.
    pub texture_amp: f64,
    /// Per-sample uniform jitter of each class mean, in intensity units.
    pub mean_jitter: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            height: 64,
            width: 64,
            boundary_fractions: [0.3, 0.52, 0.72],
            boundary_wiggle: 5.0,
            layer_means: [0.38, 0.5, 0.58],
            texture_amp: 0.08,
            mean_jitter: 0.03,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 || self.height % 8 != 0 || self.width % 8 != 0 {
            return Err(Error::Config(format!(
                "phantom size {}x{} must be >= 8 and divisible by 8",
                self.height, self.width
            )));
        }
        let f = &self.boundary_fractions;
        if !(0.0 < f[0] && f[0] < f[1] && f[1] < f[2] && f[2] < 1.0) {
            return Err(Error::Config(format!(
                "boundary fractions {f:?} must be strictly increasing in (0, 1)"
            )));
        }
        if self.boundary_wiggle < 0.0 {
            return Err(Error::Config("boundary wiggle must be >= 0".into()));
        }
        if self.layer_means.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(Error::Config("layer means must lie in [0, 1]".into()));
        }
        if self.texture_amp < 0.0 {
            return Err(Error::Config("texture amplitude must be >= 0".into()));
        }
        if self.mean_jitter < 0.0 {
            return Err(Error::Config("mean jitter must be >= 0".into()));
        }
        Ok(())
    }
}

/// Appearance transform of one acquisition domain.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainStyle {
    pub gamma: f64,
    pub contrast: f64,
    pub noise_sigma: f64,
    pub blur_radius: usize,
}

impl Default for DomainStyle {
    fn default() -> Self {
        DomainStyle::identity()
    }
}

impl DomainStyle {
    pub fn identity() -> Self {
        DomainStyle {
            gamma: 1.0,
            contrast: 1.0,
            noise_sigma: 0.0,
            blur_radius: 0,
        }
    }

    pub fn source_preset() -> Self {
        DomainStyle {
            gamma: 1.0,
            contrast: 1.0,
            noise_sigma: 0.02,
            blur_radius: 0,
        }
    }

    pub fn target_preset() -> Self {
        DomainStyle {
            gamma: 1.6,
            contrast: 0.8,
            noise_sigma: 0.08,
            blur_radius: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gamma <= 0.0 || self.contrast <= 0.0 || self.noise_sigma < 0.0 {
            return Err(Error::Config(format!("invalid domain style {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// One manifest row; paths are relative to the manifest file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image: String,
    pub label: String,
    pub domain: DomainTag,
    pub split: Split,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

/// Smooth boundary perturbation: vertical offset plus one sine wave, with
/// total amplitude bounded by `wiggle`.
fn boundary_offsets(width: usize, wiggle: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let dc = rng.gen_range(-0.6..0.6) * wiggle;
    let amp = rng.gen_range(0.0..0.4) * wiggle;
    let freq = rng.gen_range(1..=3) as f64;
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    (0..width)
        .map(|x| {
            let t = x as f64 / width as f64;
            dc + amp * (std::f64::consts::TAU * freq * t + phase).sin()
        })
        .collect()
}

/// Low-frequency texture: coarse noise grid resized bilinearly to full size.
fn smooth_texture(height: usize, width: usize, amp: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let (gh, gw) = ((height / 8).max(2), (width / 8).max(2));
    let coarse = standard_normal(ndarray::Ix2(gh, gw), rng).mapv(|v| v * amp * 0.5);
    let mut out = Array2::<f64>::zeros((height, width));
    for y in 0..height {
        let fy = (y as f64 + 0.5) * gh as f64 / height as f64 - 0.5;
        let fy = fy.max(0.0);
        let y0 = (fy.floor() as usize).min(gh - 1);
        let y1 = (y0 + 1).min(gh - 1);
        let ty = (fy - y0 as f64).clamp(0.0, 1.0);
        for x in 0..width {
            let fx = (x as f64 + 0.5) * gw as f64 / width as f64 - 0.5;
            let fx = fx.max(0.0);
            let x0 = (fx.floor() as usize).min(gw - 1);
            let x1 = (x0 + 1).min(gw - 1);
            let tx = (fx - x0 as f64).clamp(0.0, 1.0);
            out[[y, x]] = (1.0 - ty) * ((1.0 - tx) * coarse[[y0, x0]] + tx * coarse[[y0, x1]])
                + ty * ((1.0 - tx) * coarse[[y1, x0]] + tx * coarse[[y1, x1]]);
        }
    }
    out
}

/// Generates one phantom: a band-partition label map and its pre-styling
/// rendering. Identical `(spec, seed)` produce bit-identical output.
pub fn generate_phantom(spec: &PhantomSpec, seed: u64) -> Result<(ImageBatch, LabelMap)> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = stream2(seed, Purpose::CorpusSample, 0, 0);

    // three boundary rows per column
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(3);
    for frac in spec.boundary_fractions {
        let offsets = boundary_offsets(w, spec.boundary_wiggle, &mut rng);
        rows.push(
            offsets
                .iter()
                .map(|o| (frac * h as f64 + o).round())
                .collect(),
        );
    }
    for x in 0..w {
        let (b0, b1, b2) = (rows[0][x], rows[1][x], rows[2][x]);
        if !(b0 >= 1.0 && b0 < b1 && b1 < b2 && b2 <= (h - 1) as f64) {
            return Err(Error::Data(format!(
                "boundary wiggle {} makes bands cross or vanish at column {x} ({b0}, {b1}, {b2})",
                spec.boundary_wiggle
            )));
        }
    }

    let mut labels = Array3::<u8>::zeros((1, h, w));
    for x in 0..w {
        let (b0, b1, b2) = (rows[0][x] as usize, rows[1][x] as usize, rows[2][x] as usize);
        for y in 0..h {
            labels[[0, y, x]] = if y < b0 {
                0
            } else if y < b1 {
                1
            } else if y < b2 {
                2
            } else {
                0
            };
        }
    }
    let label = LabelMap::new(labels, NUM_CLASSES)?;
    let present: std::collections::BTreeSet<u8> = label.data().iter().copied().collect();
    if present.len() != NUM_CLASSES {
        return Err(Error::Data(format!(
            "phantom label map uses only classes {present:?}"
        )));
    }

    let texture = smooth_texture(h, w, spec.texture_amp, &mut rng);
    let mut means = spec.layer_means;
    for m in means.iter_mut() {
        *m = (*m + rng.gen_range(-spec.mean_jitter..=spec.mean_jitter)).clamp(0.0, 1.0);
    }
    let mut img = Array4::<f64>::zeros((1, 1, h, w));
    for y in 0..h {
        for x in 0..w {
            let base = means[label.data()[[0, y, x]] as usize];
            img[[0, 0, y, x]] = (base + texture[[y, x]]).clamp(0.0, 1.0);
        }
    }
    Ok((ImageBatch::new(img, DomainTag::Source)?, label))
}

/// Separable box blur with clamp-to-edge handling; radius 0 is the identity.
fn box_blur(img: &Array4<f64>, radius: usize) -> Array4<f64> {
    if radius == 0 {
        return img.clone();
    }
    let (b, c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2], img.shape()[3]);
    let win = (2 * radius + 1) as f64;
    let mut horiz = Array4::<f64>::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let mut s = 0.0;
                    for dx in -(radius as isize)..=(radius as isize) {
                        let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                        s += img[[bi, ci, y, xx]];
                    }
                    horiz[[bi, ci, y, x]] = s / win;
                }
            }
        }
    }
    let mut out = Array4::<f64>::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let mut s = 0.0;
                    for dy in -(radius as isize)..=(radius as isize) {
                        let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                        s += horiz[[bi, ci, yy, x]];
                    }
                    out[[bi, ci, y, x]] = s / win;
                }
            }
        }
    }
    out
}

/// Applies an appearance style:
/// `clip(contrast * blur(img)^gamma + noise, 0, 1)`.
/// Labels are untouched by construction. Deterministic under a fixed seed.
pub fn apply_domain_style(
    img: &ImageBatch,
    style: &DomainStyle,
    domain: DomainTag,
    seed: u64,
) -> Result<ImageBatch> {
    style.validate()?;
    let blurred = box_blur(img.data(), style.blur_radius);
    let mut out = blurred.mapv(|v| style.contrast * v.max(0.0).powf(style.gamma));
    if style.noise_sigma > 0.0 {
        let mut rng = stream2(seed, Purpose::CorpusSample, 1, 1);
        let noise = standard_normal(
            ndarray::Ix4(
                out.shape()[0],
                out.shape()[1],
                out.shape()[2],
                out.shape()[3],
            ),
            &mut rng,
        );
        out.zip_mut_with(&noise, |v, &n| *v += style.noise_sigma * n);
    }
    out.mapv_inplace(|v| v.clamp(0.0, 1.0));
    ImageBatch::new(out, domain)
}

/// Configuration of a corpus build.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub n_source: usize,
    pub n_target: usize,
    pub train_fraction: f64,
    pub phantom: PhantomSpec,
    pub source_style: DomainStyle,
    pub target_style: DomainStyle,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_source: 200,
            n_target: 200,
            train_fraction: 0.8,
            phantom: PhantomSpec::default(),
            source_style: DomainStyle::source_preset(),
            target_style: DomainStyle::target_preset(),
        }
    }
}

/// Generates the full two-domain corpus under `out_dir` and writes
/// `manifest.json`. Returns the manifest. Rebuilding with the same seed
/// produces byte-identical files.
pub fn build_corpus(cfg: &CorpusConfig, out_dir: &Path, seed: u64) -> Result<DatasetManifest> {
    cfg.phantom.validate()?;
    cfg.source_style.validate()?;
    cfg.target_style.validate()?;
    if cfg.n_source == 0 || cfg.n_target == 0 {
        return Err(Error::Config("corpus needs at least one sample per domain".into()));
    }
    if !(0.0 < cfg.train_fraction && cfg.train_fraction < 1.0) {
        return Err(Error::Config("train fraction must lie in (0, 1)".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut entries = Vec::with_capacity(cfg.n_source + cfg.n_target);
    for (domain, count, prefix, style) in [
        (DomainTag::Source, cfg.n_source, "src", &cfg.source_style),
        (DomainTag::Target, cfg.n_target, "tgt", &cfg.target_style),
    ] {
        let domain_ord = match domain {
            DomainTag::Source => 0u64,
            DomainTag::Target => 1u64,
        };
        let n_train = (count as f64 * cfg.train_fraction).floor() as usize;
        let mut split_rng = stream2(seed, Purpose::CorpusSplit, domain_ord, 0);
        let order = crate::rng::permutation(count, &mut split_rng);
        let mut split_of = vec![Split::Test; count];
        for &i in order.iter().take(n_train) {
            split_of[i] = Split::Train;
        }

        for i in 0..count {
            let id = format!("{prefix}_{i:04}");
            let sample_seed = crate::rng::mix(
                seed,
                Purpose::CorpusSample,
                domain_ord * 1_000_000 + i as u64,
            );
            let (base, label) = generate_phantom(&cfg.phantom, sample_seed)?;
            let styled = apply_domain_style(&base, style, domain, sample_seed)?;

            let image_rel = format!("images/{id}.pgm");
            let label_rel = format!("labels/{id}.pgm");
            let (h, w) = (cfg.phantom.height, cfg.phantom.width);
            let img_bytes: Vec<u8> = styled
                .data()
                .iter()
                .map(|&v| pgm::quantize_intensity(v))
                .collect();
            pgm::write_pgm(&out_dir.join(&image_rel), w, h, &img_bytes)?;
            let label_bytes: Vec<u8> = label.data().iter().copied().collect();
            pgm::write_pgm(&out_dir.join(&label_rel), w, h, &label_bytes)?;

            entries.push(ManifestEntry {
                id,
                image: image_rel,
                label: label_rel,
                domain,
                split: split_of[i],
            });
        }
    }

    let manifest = DatasetManifest { entries };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Data(format!("manifest serialization: {e}")))?;
    let path = manifest_path(out_dir);
    std::fs::write(&path, json.as_bytes()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.json")
}
