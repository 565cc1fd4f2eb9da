//! Paired CF/FFA data: disk loading, preprocessing, phase-stratified frame
//! sampling, augmentation, and a procedural synthetic-pair generator used for
//! desk-scale testing in place of clinical data.
//!
//! On-disk layout:
//! ```text
//! root/manifest.json                      split assignment + timestamps
//! root/<patient_id>/cf.png                color fundus image
//! root/<patient_id>/ffa/<idx>_<seconds>.png   ordered FFA frames
//! ```

use crate::error::{Error, Result};
use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub const DEFAULT_TARGET_SIZE: usize = 512;

/// FFA phase, ordered by dye-transit time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    Vascular,
    Venous,
    Late,
}

/// Phase boundaries in seconds after dye injection. Clinical usage varies;
/// these cutoffs are this repo's convention.
pub const VASCULAR_MAX_SECONDS: f64 = 30.0;
pub const VENOUS_MAX_SECONDS: f64 = 180.0;

impl Phase {
    pub fn from_seconds(s: f64) -> Phase {
        if s <= VASCULAR_MAX_SECONDS {
            Phase::Vascular
        } else if s <= VENOUS_MAX_SECONDS {
            Phase::Venous
        } else {
            Phase::Late
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Phase::Vascular => "vascular",
            Phase::Venous => "venous",
            Phase::Late => "late",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split '{other}'"))),
        }
    }
}

/// One color-fundus image with its ordered FFA frame series.
#[derive(Debug, Clone)]
pub struct PairedSample {
    /// 3×H×W, values in [0,1].
    pub cf_image: Array3<f64>,
    /// Ordered 1-channel frames, values in [0,1].
    pub ffa_frames: Vec<Array2<f64>>,
    pub phase_labels: Vec<Phase>,
    pub patient_id: String,
}

impl PairedSample {
    pub fn phase_indices(&self, phase: Phase) -> Vec<usize> {
        self.phase_labels
            .iter()
            .enumerate()
            .filter(|(_, &p)| p == phase)
            .map(|(i, _)| i)
            .collect()
    }
}

/// A phase-stratified training subsequence.
#[derive(Debug, Clone)]
pub struct TrainingSequence {
    pub cf_image: Array3<f64>,
    pub frames: Vec<Array2<f64>>,
    pub source_indices: Vec<usize>,
}

// ---------------------------------------------------------------------------
// Manifest and loading
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestPatient {
    pub split: Split,
    /// Seconds after injection for each frame, in frame-index order.
    pub timestamps: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub patients: BTreeMap<String, ManifestPatient>,
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|_| {
        Error::Config(format!(
            "missing or unreadable manifest at {}",
            path.display()
        ))
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Json { path, source: e })
}

/// Load every sample of a split, preprocessed to `target_size`. Ordering is
/// deterministic (sorted by patient id); splits are disjoint by construction
/// of the manifest.
pub fn load_dataset(root: &Path, split: Split, target_size: usize) -> Result<Vec<PairedSample>> {
    let manifest = read_manifest(root)?;
    let mut samples = Vec::new();
    for (pid, entry) in &manifest.patients {
        if entry.split != split {
            continue;
        }
        samples.push(load_patient(root, pid, entry, target_size)?);
    }
    Ok(samples)
}

fn load_patient(
    root: &Path,
    pid: &str,
    entry: &ManifestPatient,
    target_size: usize,
) -> Result<PairedSample> {
    let dir = root.join(pid);
    let cf_raw = load_png_rgb(&dir.join("cf.png"))?;
    let cf_image = preprocess_cf(&cf_raw, target_size).map_err(|e| Error::MalformedSample {
        patient: pid.to_string(),
        reason: format!("cf image: {e}"),
    })?;

    let ffa_dir = dir.join("ffa");
    let mut indexed: Vec<(usize, f64, std::path::PathBuf)> = Vec::new();
    let rd = std::fs::read_dir(&ffa_dir).map_err(|e| Error::io(&ffa_dir, e))?;
    for item in rd {
        let item = item.map_err(|e| Error::io(&ffa_dir, e))?;
        let name = item.file_name().to_string_lossy().to_string();
        if let Some(stem) = name.strip_suffix(".png") {
            if let Some((idx, secs)) = stem.split_once('_') {
                let idx: usize = idx.parse().map_err(|_| Error::MalformedSample {
                    patient: pid.to_string(),
                    reason: format!("bad frame filename '{name}'"),
                })?;
                let secs: f64 = secs.parse().map_err(|_| Error::MalformedSample {
                    patient: pid.to_string(),
                    reason: format!("bad timestamp in '{name}'"),
                })?;
                indexed.push((idx, secs, item.path()));
            }
        }
    }
    indexed.sort_by(|a, b| a.0.cmp(&b.0));
    if indexed.is_empty() {
        return Err(Error::MalformedSample {
            patient: pid.to_string(),
            reason: "frame count is 0".into(),
        });
    }
    if entry.timestamps.len() != indexed.len() {
        return Err(Error::MalformedSample {
            patient: pid.to_string(),
            reason: format!(
                "manifest lists {} timestamps but {} frames on disk",
                entry.timestamps.len(),
                indexed.len()
            ),
        });
    }
    let mut frames = Vec::with_capacity(indexed.len());
    let mut phase_labels = Vec::with_capacity(indexed.len());
    let mut last_secs = f64::NEG_INFINITY;
    for (_, secs, path) in &indexed {
        if *secs < last_secs {
            return Err(Error::MalformedSample {
                patient: pid.to_string(),
                reason: "frame timestamps are not monotone".into(),
            });
        }
        last_secs = *secs;
        let raw = load_png_gray(path)?;
        let frame = preprocess_frame(&raw, target_size).map_err(|e| Error::MalformedSample {
            patient: pid.to_string(),
            reason: format!("frame {}: {e}", path.display()),
        })?;
        frames.push(frame);
        phase_labels.push(Phase::from_seconds(*secs));
    }
    Ok(PairedSample {
        cf_image,
        ffa_frames: frames,
        phase_labels,
        patient_id: pid.to_string(),
    })
}

// ---------------------------------------------------------------------------
// Preprocessing
// ---------------------------------------------------------------------------

fn check_finite<'a>(vals: impl Iterator<Item = &'a f64>) -> Result<()> {
    for v in vals {
        if !v.is_finite() {
            return Err(Error::Contract("non-finite pixel value".into()));
        }
    }
    Ok(())
}

/// Bilinear resize of a single-channel image.
pub fn resize_bilinear(src: &Array2<f64>, oh: usize, ow: usize) -> Array2<f64> {
    let (h, w) = src.dim();
    if (h, w) == (oh, ow) {
        return src.clone();
    }
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    Array2::from_shape_fn((oh, ow), |(i, j)| {
        let fy = ((i as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let fx = ((j as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
        let y0 = fy.floor() as usize;
        let x0 = fx.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let dy = fy - y0 as f64;
        let dx = fx - x0 as f64;
        src[[y0, x0]] * (1.0 - dy) * (1.0 - dx)
            + src[[y1, x0]] * dy * (1.0 - dx)
            + src[[y0, x1]] * (1.0 - dy) * dx
            + src[[y1, x1]] * dy * dx
    })
}

fn center_crop_square(src: &Array2<f64>) -> Array2<f64> {
    let (h, w) = src.dim();
    let s = h.min(w);
    let oy = (h - s) / 2;
    let ox = (w - s) / 2;
    src.slice(ndarray::s![oy..oy + s, ox..ox + s]).to_owned()
}

/// Center-crop to square, bilinear-resize to `target`×`target`, clamp to [0,1].
pub fn preprocess_frame(image: &Array2<f64>, target: usize) -> Result<Array2<f64>> {
    let (h, w) = image.dim();
    if h < 8 || w < 8 {
        return Err(Error::Contract(format!(
            "image too small for preprocessing: {h}x{w}"
        )));
    }
    check_finite(image.iter())?;
    let square = center_crop_square(image);
    let mut out = resize_bilinear(&square, target, target);
    out.mapv_inplace(|v| v.clamp(0.0, 1.0));
    Ok(out)
}

pub fn preprocess_cf(image: &Array3<f64>, target: usize) -> Result<Array3<f64>> {
    check_finite(image.iter())?;
    let mut out = Array3::zeros((3, target, target));
    for c in 0..3 {
        let ch = image.index_axis(ndarray::Axis(0), c).to_owned();
        out.index_axis_mut(ndarray::Axis(0), c)
            .assign(&preprocess_frame(&ch, target)?);
    }
    Ok(out)
}

/// ITU-R 601 luminance of a 3×H×W image.
pub fn luminance(cf: &Array3<f64>) -> Array2<f64> {
    let r = cf.index_axis(ndarray::Axis(0), 0);
    let g = cf.index_axis(ndarray::Axis(0), 1);
    let b = cf.index_axis(ndarray::Axis(0), 2);
    let mut out = Array2::zeros(r.raw_dim());
    ndarray::Zip::from(&mut out)
        .and(&r)
        .and(&g)
        .and(&b)
        .for_each(|o, &r, &g, &b| *o = 0.299 * r + 0.587 * g + 0.114 * b);
    out
}

// ---------------------------------------------------------------------------
// Phase-stratified frame sampling
// ---------------------------------------------------------------------------

/// Draw `per_phase` frames from each of the three phases, order-preserving.
/// The default recipe is `per_phase = 4` (12 frames total).
pub fn sample_training_frames(
    sample: &PairedSample,
    per_phase: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TrainingSequence> {
    let mut source_indices = Vec::with_capacity(3 * per_phase);
    for phase in [Phase::Vascular, Phase::Venous, Phase::Late] {
        let pool = sample.phase_indices(phase);
        if pool.len() < per_phase {
            return Err(Error::InsufficientFrames {
                phase: phase.name().into(),
                have: pool.len(),
                need: per_phase,
            });
        }
        let mut chosen: Vec<usize> = rand::seq::index::sample(rng, pool.len(), per_phase)
            .into_iter()
            .map(|k| pool[k])
            .collect();
        chosen.sort_unstable();
        source_indices.extend(chosen);
    }
    let frames = source_indices
        .iter()
        .map(|&i| sample.ffa_frames[i].clone())
        .collect();
    Ok(TrainingSequence {
        cf_image: sample.cf_image.clone(),
        frames,
        source_indices,
    })
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Probability of a random crop-and-resize (the shared geometric transform).
    pub crop_prob: f64,
    /// Smallest crop window as a fraction of the full side.
    pub min_crop_frac: f64,
    /// Probability of a random zoom (center crop by 1/scale then resize).
    pub scale_prob: f64,
    pub max_scale: f64,
    /// Probability of CF color jitter.
    pub jitter_prob: f64,
    /// Relative jitter amplitude for brightness/contrast/saturation.
    pub jitter_amount: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop_prob: 0.5,
            min_crop_frac: 0.8,
            scale_prob: 0.5,
            max_scale: 1.1,
            jitter_prob: 0.5,
            jitter_amount: 0.1,
        }
    }
}

/// Crop window applied to one array, recorded for consistency checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropWindow {
    pub y: usize,
    pub x: usize,
    pub size: usize,
}

#[derive(Debug, Clone, Default)]
pub struct AugmentRecord {
    /// One entry per array (CF first, then each frame); `None` = identity.
    pub windows: Vec<Option<CropWindow>>,
    pub jitter: Option<(f64, f64, f64)>,
}

fn crop_resize_2d(img: &Array2<f64>, win: CropWindow) -> Array2<f64> {
    let (h, w) = img.dim();
    if win.y + win.size > h || win.x + win.size > w {
        return img.clone(); // identity fallback on an out-of-range window
    }
    let crop = img
        .slice(ndarray::s![win.y..win.y + win.size, win.x..win.x + win.size])
        .to_owned();
    resize_bilinear(&crop, h, w)
}

/// Apply one shared geometric transform to the CF image and every frame, and
/// color jitter to the CF image only. Outputs are clamped to [0,1].
pub fn augment(
    seq: &TrainingSequence,
    config: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> TrainingSequence {
    augment_recorded(seq, config, rng).0
}

pub fn augment_recorded(
    seq: &TrainingSequence,
    config: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> (TrainingSequence, AugmentRecord) {
    let size = seq.cf_image.dim().1;
    // One geometric transform per sequence: crop takes precedence over zoom.
    let window: Option<CropWindow> = if rng.gen::<f64>() < config.crop_prob {
        let frac = rng.gen_range(config.min_crop_frac..=1.0);
        let cs = ((size as f64 * frac).round() as usize).clamp(1, size);
        let y = rng.gen_range(0..=size - cs);
        let x = rng.gen_range(0..=size - cs);
        Some(CropWindow { y, x, size: cs })
    } else if rng.gen::<f64>() < config.scale_prob {
        let scale = rng.gen_range(1.0..=config.max_scale);
        let cs = ((size as f64 / scale).round() as usize).clamp(1, size);
        let off = (size - cs) / 2;
        Some(CropWindow {
            y: off,
            x: off,
            size: cs,
        })
    } else {
        None
    };

    let jitter = if rng.gen::<f64>() < config.jitter_prob {
        let a = config.jitter_amount;
        Some((
            rng.gen_range(-a..=a),           // brightness offset
            rng.gen_range(1.0 - a..=1.0 + a), // contrast factor
            rng.gen_range(1.0 - a..=1.0 + a), // saturation factor
        ))
    } else {
        None
    };

    let mut record = AugmentRecord::default();
    let mut cf = seq.cf_image.clone();
    if let Some(win) = window {
        for c in 0..3 {
            let ch = cf.index_axis(ndarray::Axis(0), c).to_owned();
            cf.index_axis_mut(ndarray::Axis(0), c)
                .assign(&crop_resize_2d(&ch, win));
        }
    }
    record.windows.push(window);
    if let Some((b, c, s)) = jitter {
        let lum = luminance(&cf);
        let mean = cf.mean().unwrap_or(0.0);
        for ch in 0..3 {
            let mut plane = cf.index_axis_mut(ndarray::Axis(0), ch);
            ndarray::Zip::from(&mut plane).and(&lum).for_each(|v, &l| {
                let sat = l + (*v - l) * s;
                let con = (sat - mean) * c + mean;
                *v = con + b;
            });
        }
        record.jitter = jitter;
    }
    cf.mapv_inplace(|v| v.clamp(0.0, 1.0));

    let mut frames = Vec::with_capacity(seq.frames.len());
    for f in &seq.frames {
        let mut out = match window {
            Some(win) => crop_resize_2d(f, win),
            None => f.clone(),
        };
        out.mapv_inplace(|v| v.clamp(0.0, 1.0));
        record.windows.push(window);
        frames.push(out);
    }
    (
        TrainingSequence {
            cf_image: cf,
            frames,
            source_indices: seq.source_indices.clone(),
        },
        record,
    )
}

// ---------------------------------------------------------------------------
// Synthetic paired data
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LesionRegion {
    /// Center in pixel coordinates (row, col).
    pub center: (f64, f64),
    pub radius: f64,
    /// Fraction of the full leak amplitude reached by the last frame.
    pub leak_rate: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSceneParams {
    pub vessel_count: usize,
    pub lesion_regions: Vec<LesionRegion>,
    /// >0; 1.0 means the dye front traverses the whole tree over the series.
    pub dye_front_speed: f64,
    pub noise_level: f64,
    pub seed: u64,
    pub resolution: usize,
    pub frame_count: usize,
}

impl SyntheticSceneParams {
    pub fn validate(&self) -> Result<()> {
        if self.dye_front_speed <= 0.0 {
            return Err(Error::Contract("dye_front_speed must be > 0".into()));
        }
        if self.noise_level < 0.0 {
            return Err(Error::Contract("noise_level must be >= 0".into()));
        }
        for l in &self.lesion_regions {
            if l.radius <= 0.0 {
                return Err(Error::Contract("lesion radius must be > 0".into()));
            }
            if !(0.0..=1.0).contains(&l.leak_rate) {
                return Err(Error::Contract("leak_rate must be in [0,1]".into()));
            }
        }
        Ok(())
    }

    /// Scene with one planted lesion, randomized within safe bounds.
    pub fn random(seed: u64, resolution: usize, frame_count: usize) -> SyntheticSceneParams {
        let mut rng = rng_for_seed(seed ^ 0x5ce9e);
        let r = resolution as f64;
        SyntheticSceneParams {
            vessel_count: 6,
            lesion_regions: vec![LesionRegion {
                center: (
                    rng.gen_range(r * 0.25..r * 0.75),
                    rng.gen_range(r * 0.25..r * 0.75),
                ),
                radius: rng.gen_range(r * 0.08..r * 0.16),
                leak_rate: rng.gen_range(0.85..1.0),
            }],
            dye_front_speed: 1.2,
            noise_level: 0.0,
            seed,
            resolution,
            frame_count,
        }
    }
}

fn rng_for_seed(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

/// Steady-state vessel brightness in FFA frames. Kept below the default
/// mask threshold (45/255) so that perfused vessels never enter the
/// knowledge mask; only leaking lesions do.
pub const VESSEL_AMPLITUDE: f64 = 0.15;
/// Full-leak lesion brightening between first and last frames.
pub const LEAK_AMPLITUDE: f64 = 0.4;

/// Closed-form lesion intensity profile: 1 at the center, smoothly falling to
/// 0 at the radius. Shared with the IoU oracle in tests.
pub fn lesion_profile(dist: f64, radius: f64) -> f64 {
    if dist >= radius {
        0.0
    } else {
        1.0 - (dist / radius).powi(8)
    }
}

struct VesselField {
    /// Peak vessel weight per pixel, in [0,1].
    weight: Array2<f64>,
    /// Normalized dye arrival time per pixel (inf where no vessel).
    arrival: Array2<f64>,
}

fn grow_vessels(params: &SyntheticSceneParams, rng: &mut ChaCha8Rng) -> VesselField {
    let n = params.resolution;
    let mut weight = Array2::<f64>::zeros((n, n));
    let mut arrival = Array2::<f64>::from_elem((n, n), f64::INFINITY);
    let disc = (n as f64 * 0.5, n as f64 * 0.78);
    let max_len = n as f64 * 1.1;
    for v in 0..params.vessel_count {
        let mut pos = disc;
        let mut angle =
            std::f64::consts::PI * (0.25 + 1.5 * (v as f64 / params.vessel_count.max(1) as f64))
                + rng.gen_range(-0.3..0.3);
        let mut dist = 0.0;
        while dist < max_len {
            angle += rng.gen_range(-0.25..0.25);
            pos.0 += angle.sin();
            pos.1 -= angle.cos();
            dist += 1.0;
            if pos.0 < 1.0 || pos.1 < 1.0 || pos.0 >= (n - 1) as f64 || pos.1 >= (n - 1) as f64 {
                break;
            }
            let (ci, cj) = (pos.0 as usize, pos.1 as usize);
            for di in -1i64..=1 {
                for dj in -1i64..=1 {
                    let (i, j) = ((ci as i64 + di) as usize, (cj as i64 + dj) as usize);
                    let dd = ((i as f64 - pos.0).powi(2) + (j as f64 - pos.1).powi(2)).sqrt();
                    let w = (-dd * dd / 0.9).exp();
                    if w > weight[[i, j]] {
                        weight[[i, j]] = w;
                    }
                    let t = dist / max_len;
                    if t < arrival[[i, j]] {
                        arrival[[i, j]] = t;
                    }
                }
            }
        }
    }
    VesselField { weight, arrival }
}

/// Deterministic procedural CF/FFA pair. The FFA intensity model is closed
/// form: vessels brighten as the dye front passes and hold a steady level;
/// lesions brighten linearly in time by `leak_rate`, so the last−first frame
/// difference peaks at lesion centers.
pub fn synthesize_pair(params: &SyntheticSceneParams) -> Result<PairedSample> {
    params.validate()?;
    let n = params.resolution;
    let t_count = params.frame_count.max(1);
    let mut rng = rng_for_seed(params.seed);
    let vessels = grow_vessels(params, &mut rng);

    // Vignette shared by CF and FFA backgrounds.
    let center = (n as f64 - 1.0) / 2.0;
    let vignette = Array2::from_shape_fn((n, n), |(i, j)| {
        let d = ((i as f64 - center).powi(2) + (j as f64 - center).powi(2)).sqrt();
        (1.0 - (d / (n as f64 * 0.72)).powi(2)).max(0.0)
    });

    // Color fundus image: warm background, bright optic disc, dark vessels,
    // reddish lesion tint.
    let disc = (n as f64 * 0.5, n as f64 * 0.78);
    let disc_r = n as f64 * 0.09;
    let mut cf = Array3::<f64>::zeros((3, n, n));
    for i in 0..n {
        for j in 0..n {
            let vg = vignette[[i, j]];
            let dd = ((i as f64 - disc.0).powi(2) + (j as f64 - disc.1).powi(2)).sqrt();
            let disc_glow = (1.0 - (dd / disc_r).powi(4)).max(0.0);
            let vw = vessels.weight[[i, j]];
            let mut lesion_tint = 0.0;
            for l in &params.lesion_regions {
                let ld =
                    ((i as f64 - l.center.0).powi(2) + (j as f64 - l.center.1).powi(2)).sqrt();
                lesion_tint += 0.25 * lesion_profile(ld, l.radius);
            }
            let base = [0.82, 0.42, 0.16];
            for c in 0..3 {
                let mut v = base[c] * vg;
                v += disc_glow * (1.0 - base[c]) * 0.8;
                v -= vw * 0.3 * base[c];
                if c == 0 {
                    v -= lesion_tint * 0.2;
                } else {
                    v -= lesion_tint * 0.3;
                }
                cf[[c, i, j]] = v.clamp(0.0, 1.0);
            }
        }
    }

    // FFA frames.
    let mut frames = Vec::with_capacity(t_count);
    let mut phase_labels = Vec::with_capacity(t_count);
    for k in 0..t_count {
        let t = if t_count == 1 {
            1.0
        } else {
            k as f64 / (t_count - 1) as f64
        };
        let mut frame = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                let mut v = 0.06 * vignette[[i, j]];
                let arr = vessels.arrival[[i, j]];
                if arr.is_finite() {
                    let front = params.dye_front_speed * t - arr;
                    let lit = (front / 0.05).clamp(0.0, 1.0);
                    v += VESSEL_AMPLITUDE * vessels.weight[[i, j]] * lit;
                }
                for l in &params.lesion_regions {
                    let ld = ((i as f64 - l.center.0).powi(2)
                        + (j as f64 - l.center.1).powi(2))
                    .sqrt();
                    v += LEAK_AMPLITUDE * l.leak_rate * t * lesion_profile(ld, l.radius);
                }
                if params.noise_level > 0.0 {
                    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                    let u2: f64 = rng.gen::<f64>();
                    let gauss =
                        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                    v += gauss * params.noise_level;
                }
                frame[[i, j]] = v.clamp(0.0, 1.0);
            }
        }
        frames.push(frame);
        phase_labels.push(Phase::from_seconds(synthetic_seconds(k, t_count)));
    }

    Ok(PairedSample {
        cf_image: cf,
        ffa_frames: frames,
        phase_labels,
        patient_id: format!("synth{:04}", params.seed),
    })
}

/// Timestamps for synthetic frames: thirds of the series land in the
/// vascular, venous and late phase windows respectively.
pub fn synthetic_seconds(index: usize, total: usize) -> f64 {
    let third = (total as f64 / 3.0).ceil() as usize;
    let bucket = (index / third.max(1)).min(2);
    let within = (index % third.max(1)) as f64 / third.max(1) as f64;
    match bucket {
        0 => 3.0 + within * 25.0,
        1 => 40.0 + within * 130.0,
        _ => 200.0 + within * 150.0,
    }
}

// ---------------------------------------------------------------------------
// PNG I/O
// ---------------------------------------------------------------------------

pub fn load_png_gray(path: &Path) -> Result<Array2<f64>> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.into(),
            source: e,
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(i, j)| {
        img.get_pixel(j as u32, i as u32).0[0] as f64 / 255.0
    }))
}

pub fn load_png_rgb(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.into(),
            source: e,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn(
        (3, h as usize, w as usize),
        |(c, i, j)| img.get_pixel(j as u32, i as u32).0[c] as f64 / 255.0,
    ))
}

pub fn save_png_gray(path: &Path, img: &Array2<f64>) -> Result<()> {
    let (h, w) = img.dim();
    let buf = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([(img[[y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    buf.save(path).map_err(|e| Error::Image {
        path: path.into(),
        source: e,
    })
}

pub fn save_png_rgb(path: &Path, img: &Array3<f64>) -> Result<()> {
    let (_, h, w) = img.dim();
    let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        image::Rgb([
            (img[[0, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8,
            (img[[1, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8,
            (img[[2, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8,
        ])
    });
    buf.save(path).map_err(|e| Error::Image {
        path: path.into(),
        source: e,
    })
}

/// Write a sample into the documented dataset layout under `root`.
pub fn write_sample(root: &Path, sample: &PairedSample, seconds: &[f64]) -> Result<()> {
    let dir = root.join(&sample.patient_id);
    let ffa = dir.join("ffa");
    std::fs::create_dir_all(&ffa).map_err(|e| Error::io(&ffa, e))?;
    save_png_rgb(&dir.join("cf.png"), &sample.cf_image)?;
    for (k, frame) in sample.ffa_frames.iter().enumerate() {
        let name = format!("{:03}_{}.png", k, seconds[k]);
        save_png_gray(&ffa.join(name), frame)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small_params(seed: u64) -> SyntheticSceneParams {
        SyntheticSceneParams::random(seed, 48, 12)
    }

    #[test]
    fn synthesize_deterministic() {
        let p = small_params(7);
        let a = synthesize_pair(&p).unwrap();
        let b = synthesize_pair(&p).unwrap();
        assert_eq!(a.cf_image, b.cf_image);
        for (fa, fb) in a.ffa_frames.iter().zip(b.ffa_frames.iter()) {
            assert_eq!(fa, fb);
        }
    }

    #[test]
    fn no_leak_difference_confined_to_vessels() {
        let mut p = small_params(3);
        for l in &mut p.lesion_regions {
            l.leak_rate = 0.0;
        }
        p.noise_level = 0.0;
        let s = synthesize_pair(&p).unwrap();
        let first = &s.ffa_frames[0];
        let last = s.ffa_frames.last().unwrap();
        // rebuild the vessel support from the generator's own field
        let mut rng = rng_for_seed(p.seed);
        let vessels = grow_vessels(&p, &mut rng);
        for i in 0..p.resolution {
            for j in 0..p.resolution {
                if vessels.weight[[i, j]] == 0.0 {
                    assert!(
                        (last[[i, j]] - first[[i, j]]).abs() < 1e-12,
                        "difference outside vessels at ({i},{j})"
                    );
                }
            }
        }
    }

    #[test]
    fn full_leak_peaks_at_lesion_center() {
        let mut p = small_params(5);
        p.lesion_regions = vec![LesionRegion {
            center: (20.0, 14.0),
            radius: 7.0,
            leak_rate: 1.0,
        }];
        p.noise_level = 0.0;
        let s = synthesize_pair(&p).unwrap();
        let first = &s.ffa_frames[0];
        let last = s.ffa_frames.last().unwrap();
        let diff = last - first;
        let mut max_pos = (0, 0);
        let mut max_val = f64::NEG_INFINITY;
        for ((i, j), &v) in diff.indexed_iter() {
            if v > max_val {
                max_val = v;
                max_pos = (i, j);
            }
        }
        assert_eq!(max_pos, (20, 14), "peak off lesion center, value {max_val}");
    }

    #[test]
    fn phase_sampling_counts_and_determinism() {
        let s = synthesize_pair(&small_params(11)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let seq = sample_training_frames(&s, 4, &mut rng).unwrap();
        assert_eq!(seq.frames.len(), 12);
        for w in seq.source_indices.windows(2) {
            assert!(w[0] < w[1], "source indices not strictly increasing");
        }
        for (count, phase) in [
            (4, Phase::Vascular),
            (4, Phase::Venous),
            (4, Phase::Late),
        ] {
            let n = seq
                .source_indices
                .iter()
                .filter(|&&i| s.phase_labels[i] == phase)
                .count();
            assert_eq!(n, count);
        }
        let mut rng2 = ChaCha8Rng::seed_from_u64(99);
        let seq2 = sample_training_frames(&s, 4, &mut rng2).unwrap();
        assert_eq!(seq.source_indices, seq2.source_indices);
    }

    #[test]
    fn forced_selection_uses_full_series() {
        let mut s = synthesize_pair(&small_params(2)).unwrap();
        s.ffa_frames.truncate(12);
        s.phase_labels.truncate(12);
        // exactly 4 frames per phase by construction at frame_count 12
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let seq = sample_training_frames(&s, 4, &mut rng).unwrap();
        assert_eq!(seq.source_indices, (0..12).collect::<Vec<_>>());
    }

    #[test]
    fn insufficient_phase_frames_named() {
        let mut s = synthesize_pair(&small_params(2)).unwrap();
        // drop all late frames
        while s.phase_labels.last() == Some(&Phase::Late) {
            s.phase_labels.pop();
            s.ffa_frames.pop();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = sample_training_frames(&s, 4, &mut rng).unwrap_err();
        match err {
            Error::InsufficientFrames { phase, .. } => assert_eq!(phase, "late"),
            other => panic!("wrong error: {other}"),
        }
    }

    #[test]
    fn augment_identity_when_probabilities_zero() {
        let s = synthesize_pair(&small_params(4)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let seq = sample_training_frames(&s, 4, &mut rng).unwrap();
        let off = AugmentConfig {
            crop_prob: 0.0,
            scale_prob: 0.0,
            jitter_prob: 0.0,
            ..AugmentConfig::default()
        };
        let out = augment(&seq, &off, &mut rng);
        assert_eq!(out.cf_image, seq.cf_image);
        for (a, b) in out.frames.iter().zip(seq.frames.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn augment_shares_one_window_and_clips() {
        let s = synthesize_pair(&small_params(4)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let seq = sample_training_frames(&s, 4, &mut rng).unwrap();
        let always = AugmentConfig {
            crop_prob: 1.0,
            jitter_prob: 1.0,
            ..AugmentConfig::default()
        };
        let (out, record) = augment_recorded(&seq, &always, &mut rng);
        let first = record.windows[0];
        assert!(first.is_some());
        for w in &record.windows {
            assert_eq!(*w, first, "geometric transform differs between arrays");
        }
        for v in out.cf_image.iter().chain(out.frames.iter().flatten()) {
            assert!((0.0..=1.0).contains(v));
        }
    }

    #[test]
    fn preprocess_shapes_and_identity() {
        let img = Array2::from_elem((768, 768), 0.5);
        let out = preprocess_frame(&img, 64).unwrap();
        assert_eq!(out.dim(), (64, 64));

        let same = Array2::from_elem((64, 64), 0.5);
        let out = preprocess_frame(&same, 64).unwrap();
        assert_eq!(out, same);

        let wide = Array2::from_elem((1110, 1467), 0.25);
        let out = preprocess_frame(&wide, 64).unwrap();
        assert_eq!(out.dim(), (64, 64));
    }

    #[test]
    fn preprocess_rejects_non_finite_and_tiny() {
        let mut img = Array2::from_elem((32, 32), 0.5);
        img[[3, 3]] = f64::NAN;
        assert!(preprocess_frame(&img, 16).is_err());
        let tiny = Array2::from_elem((4, 4), 0.5);
        assert!(preprocess_frame(&tiny, 16).is_err());
    }

    #[test]
    fn dataset_roundtrip_and_split_disjointness() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        let mut manifest = Manifest {
            patients: BTreeMap::new(),
        };
        for (k, split) in [
            (0, Split::Train),
            (1, Split::Train),
            (2, Split::Val),
            (3, Split::Test),
        ] {
            let p = small_params(k as u64 + 100);
            let mut s = synthesize_pair(&p).unwrap();
            s.patient_id = format!("p{k:03}");
            let secs: Vec<f64> = (0..s.ffa_frames.len())
                .map(|i| synthetic_seconds(i, s.ffa_frames.len()))
                .collect();
            write_sample(root, &s, &secs).unwrap();
            manifest.patients.insert(
                s.patient_id.clone(),
                ManifestPatient {
                    split,
                    timestamps: secs,
                },
            );
        }
        std::fs::write(
            root.join("manifest.json"),
            serde_json::to_string_pretty(&manifest).unwrap(),
        )
        .unwrap();

        let train = load_dataset(root, Split::Train, 48).unwrap();
        let val = load_dataset(root, Split::Val, 48).unwrap();
        let test = load_dataset(root, Split::Test, 48).unwrap();
        assert_eq!(train.len(), 2);
        assert_eq!(val.len(), 1);
        assert_eq!(test.len(), 1);
        let ids = |v: &[PairedSample]| {
            v.iter()
                .map(|s| s.patient_id.clone())
                .collect::<std::collections::HashSet<_>>()
        };
        assert!(ids(&train).is_disjoint(&ids(&val)));
        assert!(ids(&train).is_disjoint(&ids(&test)));

        // deterministic ordering
        let train2 = load_dataset(root, Split::Train, 48).unwrap();
        assert_eq!(
            train.iter().map(|s| &s.patient_id).collect::<Vec<_>>(),
            train2.iter().map(|s| &s.patient_id).collect::<Vec<_>>()
        );
        // phases monotone
        for s in &train {
            for w in s.phase_labels.windows(2) {
                assert!(w[0] <= w[1]);
            }
        }
    }

    #[test]
    fn empty_root_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_dataset(dir.path(), Split::Train, 32).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn zero_frames_is_malformed_sample() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        let p = small_params(55);
        let mut s = synthesize_pair(&p).unwrap();
        s.patient_id = "p000".into();
        let secs: Vec<f64> = (0..s.ffa_frames.len())
            .map(|i| synthetic_seconds(i, s.ffa_frames.len()))
            .collect();
        write_sample(root, &s, &secs).unwrap();
        // remove the frames but keep the directory
        for entry in std::fs::read_dir(root.join("p000/ffa")).unwrap() {
            std::fs::remove_file(entry.unwrap().path()).unwrap();
        }
        let manifest = Manifest {
            patients: [(
                "p000".to_string(),
                ManifestPatient {
                    split: Split::Train,
                    timestamps: secs,
                },
            )]
            .into_iter()
            .collect(),
        };
        std::fs::write(
            root.join("manifest.json"),
            serde_json::to_string(&manifest).unwrap(),
        )
        .unwrap();
        let err = load_dataset(root, Split::Train, 32).unwrap_err();
        match err {
            Error::MalformedSample { patient, .. } => assert_eq!(patient, "p000"),
            other => panic!("wrong error: {other}"),
        }
    }
}
