//! Evaluation metrics and the dataset-level evaluation harness.
//!
//! Frame metrics: PSNR and SSIM on [0,1] grayscale frames, plus a
//! deterministic multi-scale perceptual distance. Video-set metric: Fréchet
//! distance between Gaussian fits of per-video features; the feature
//! extractor is pluggable, with a seeded random-projection fallback so
//! evaluation runs without any external model weights.

use crate::checkpoint::{file_digest, load_checkpoint};
use crate::data_pipeline::{sample_training_frames, PairedSample};
use crate::error::{Error, Result};
use crate::inference::{rollout, smooth_triple_average};
use crate::models::Generator;
use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::Path;

// ---------------------------------------------------------------------------
// PSNR
// ---------------------------------------------------------------------------

/// Peak signal-to-noise ratio in dB for [0,1] images; identical inputs give
/// `+inf`.
pub fn psnr(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Contract(format!(
            "psnr: shape mismatch {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let mse = (a - b).mapv(|d| d * d).mean().unwrap_or(0.0);
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

// ---------------------------------------------------------------------------
// SSIM
// ---------------------------------------------------------------------------

fn gaussian_window(size: usize, sigma: f64) -> Array2<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let mut w = Array2::from_shape_fn((size, size), |(i, j)| {
        let (di, dj) = (i as f64 - c, j as f64 - c);
        (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp()
    });
    let s = w.sum();
    w.mapv_inplace(|v| v / s);
    w
}

fn window_conv(img: &Array2<f64>, win: &Array2<f64>) -> Array2<f64> {
    // valid convolution; window fits entirely inside the image
    let (h, w) = img.dim();
    let k = win.dim().0;
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut out = Array2::zeros((oh, ow));
    for i in 0..oh {
        for j in 0..ow {
            let mut s = 0.0;
            for di in 0..k {
                for dj in 0..k {
                    s += img[[i + di, j + dj]] * win[[di, dj]];
                }
            }
            out[[i, j]] = s;
        }
    }
    out
}

/// Mean structural similarity with an 11×11 Gaussian window (σ = 1.5),
/// stabilizers k1 = 0.01, k2 = 0.03, dynamic range 1.
pub fn ssim(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    const K: usize = 11;
    if a.dim() != b.dim() {
        return Err(Error::Contract(format!(
            "ssim: shape mismatch {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    if a.dim().0 < K || a.dim().1 < K {
        return Err(Error::Contract(format!(
            "ssim: image {:?} smaller than the {K}x{K} window",
            a.dim()
        )));
    }
    let c1 = 0.01f64 * 0.01;
    let c2 = 0.03f64 * 0.03;
    let win = gaussian_window(K, 1.5);
    let mu_a = window_conv(a, &win);
    let mu_b = window_conv(b, &win);
    let aa = window_conv(&(a * a), &win);
    let bb = window_conv(&(b * b), &win);
    let ab = window_conv(&(a * b), &win);
    let mut total = 0.0;
    for ((i, j), &ma) in mu_a.indexed_iter() {
        let mb = mu_b[[i, j]];
        let va = aa[[i, j]] - ma * ma;
        let vb = bb[[i, j]] - mb * mb;
        let cov = ab[[i, j]] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
            / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / mu_a.len() as f64)
}

// ---------------------------------------------------------------------------
// Perceptual distance
// ---------------------------------------------------------------------------

/// Deterministic multi-scale perceptual distance: a fixed seeded 3×3 filter
/// bank is applied at scales 1/2/4, feature maps are channel-normalized, and
/// squared differences averaged. Zero iff the inputs are identical; not tied
/// to any pretrained network, so values are comparable only within this
/// implementation.
pub fn perceptual_distance(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Contract(format!(
            "perceptual_distance: shape mismatch {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let bank = filter_bank();
    let mut total = 0.0;
    let mut scales = 0.0;
    for factor in [1usize, 2, 4] {
        let (h, w) = a.dim();
        if h / factor < 3 || w / factor < 3 || h % factor != 0 || w % factor != 0 {
            continue;
        }
        let fa = feature_stack(&pool(a, factor), &bank);
        let fb = feature_stack(&pool(b, factor), &bank);
        let mut d = 0.0;
        for (x, y) in fa.iter().zip(fb.iter()) {
            d += (x - y) * (x - y);
        }
        total += d / fa.len() as f64;
        scales += 1.0;
    }
    if scales == 0.0 {
        return Err(Error::Contract(
            "perceptual_distance: image too small for every scale".into(),
        ));
    }
    Ok(total / scales)
}

fn filter_bank() -> Vec<Array2<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e3779b9); // fixed: part of the metric definition
    (0..8)
        .map(|_| Array2::from_shape_fn((3, 3), |_| rng.gen::<f64>() * 2.0 - 1.0))
        .collect()
}

fn pool(img: &Array2<f64>, factor: usize) -> Array2<f64> {
    if factor == 1 {
        return img.clone();
    }
    let (h, w) = (img.dim().0 / factor, img.dim().1 / factor);
    Array2::from_shape_fn((h, w), |(i, j)| {
        let mut s = 0.0;
        for di in 0..factor {
            for dj in 0..factor {
                s += img[[i * factor + di, j * factor + dj]];
            }
        }
        s / (factor * factor) as f64
    })
}

fn feature_stack(img: &Array2<f64>, bank: &[Array2<f64>]) -> Vec<f64> {
    // channel-normalized valid 3×3 responses, flattened
    let mut all = Vec::new();
    for f in bank {
        let resp = window_conv(img, f);
        let norm = (resp.mapv(|v| v * v).sum() / resp.len() as f64).sqrt() + 1e-10;
        all.extend(resp.iter().map(|v| v / norm));
    }
    all
}

// ---------------------------------------------------------------------------
// Fréchet video distance
// ---------------------------------------------------------------------------

/// Maps a whole video to a fixed-length feature vector.
pub trait FeatureExtractor {
    /// Recorded in reports so scores are never compared across extractors.
    fn id(&self) -> &str;
    fn extract(&self, frames: &[Array2<f64>]) -> Result<Array1<f64>>;
}

/// Seeded random-projection extractor: frames are area-pooled to 8×8, up to
/// eight frames are sampled evenly over the video, and the flattened stack is
/// projected through a fixed random matrix with a tanh squash.
pub struct RandomProjectionExtractor {
    dim: usize,
}

impl RandomProjectionExtractor {
    pub fn new() -> Self {
        RandomProjectionExtractor { dim: 16 }
    }
}

impl Default for RandomProjectionExtractor {
    fn default() -> Self {
        Self::new()
    }
}

const RP_FRAMES: usize = 8;
const RP_SIDE: usize = 8;

impl FeatureExtractor for RandomProjectionExtractor {
    fn id(&self) -> &str {
        "random-projection-v1"
    }

    fn extract(&self, frames: &[Array2<f64>]) -> Result<Array1<f64>> {
        if frames.is_empty() {
            return Err(Error::Contract("extract: empty video".into()));
        }
        let n = frames.len();
        let picks: Vec<usize> = (0..RP_FRAMES.min(n))
            .map(|k| k * n / RP_FRAMES.min(n))
            .collect();
        let mut z = Vec::with_capacity(RP_FRAMES * RP_SIDE * RP_SIDE);
        for &t in &picks {
            let f = &frames[t];
            let (h, w) = f.dim();
            for i in 0..RP_SIDE {
                for j in 0..RP_SIDE {
                    // area average over the cell this coarse pixel covers
                    let (i0, i1) = (i * h / RP_SIDE, ((i + 1) * h / RP_SIDE).max(i * h / RP_SIDE + 1));
                    let (j0, j1) = (j * w / RP_SIDE, ((j + 1) * w / RP_SIDE).max(j * w / RP_SIDE + 1));
                    let mut s = 0.0;
                    for ii in i0..i1.min(h) {
                        for jj in j0..j1.min(w) {
                            s += f[[ii, jj]];
                        }
                    }
                    z.push(s / ((i1.min(h) - i0) * (j1.min(w) - j0)) as f64);
                }
            }
        }
        z.resize(RP_FRAMES * RP_SIDE * RP_SIDE, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0xfeed); // fixed projection
        let scale = 1.0 / (z.len() as f64).sqrt();
        let mut out = Array1::zeros(self.dim);
        for o in 0..self.dim {
            let mut acc = 0.0;
            for &v in &z {
                acc += (rng.gen::<f64>() * 2.0 - 1.0) * v;
            }
            out[o] = (acc * scale).tanh();
        }
        Ok(out)
    }
}

/// Gaussian fit of a feature set: mean and population covariance.
pub fn gaussian_fit(features: &[Array1<f64>]) -> Result<(Array1<f64>, Array2<f64>)> {
    if features.is_empty() {
        return Err(Error::Contract("gaussian_fit: no samples".into()));
    }
    let d = features[0].len();
    let n = features.len() as f64;
    let mut mu = Array1::<f64>::zeros(d);
    for f in features {
        mu += f;
    }
    mu /= n;
    let mut cov = Array2::<f64>::zeros((d, d));
    for f in features {
        let c = f - &mu;
        for i in 0..d {
            for j in 0..d {
                cov[[i, j]] += c[i] * c[j];
            }
        }
    }
    cov /= n;
    Ok((mu, cov))
}

/// Squared Fréchet distance between two Gaussians:
/// `|μ1-μ2|² + tr(Σ1 + Σ2 - 2·(Σ1^½ Σ2 Σ1^½)^½)`.
pub fn frechet_distance(
    mu1: &Array1<f64>,
    sigma1: &Array2<f64>,
    mu2: &Array1<f64>,
    sigma2: &Array2<f64>,
) -> Result<f64> {
    let d = mu1.len();
    if mu2.len() != d || sigma1.dim() != (d, d) || sigma2.dim() != (d, d) {
        return Err(Error::Contract("frechet_distance: dimension mismatch".into()));
    }
    const EPS: f64 = 1e-10;
    let to_na = |a: &Array2<f64>| {
        nalgebra::DMatrix::from_fn(d, d, |i, j| {
            // symmetrize and regularize: eigen-decomposition needs exact symmetry
            0.5 * (a[[i, j]] + a[[j, i]]) + if i == j { EPS } else { 0.0 }
        })
    };
    let s1 = to_na(sigma1);
    let s2 = to_na(sigma2);
    let sym_sqrt = |m: &nalgebra::DMatrix<f64>| {
        let e = nalgebra::SymmetricEigen::new(m.clone());
        let vals = e.eigenvalues.map(|v| v.max(0.0).sqrt());
        &e.eigenvectors * nalgebra::DMatrix::from_diagonal(&vals) * e.eigenvectors.transpose()
    };
    let s1h = sym_sqrt(&s1);
    let inner = &s1h * s2 * &s1h;
    // trace of the matrix square root = sum of sqrt eigenvalues
    let inner_sym = (&inner + inner.transpose()) * 0.5;
    let e = nalgebra::SymmetricEigen::new(inner_sym);
    let tr_sqrt: f64 = e.eigenvalues.iter().map(|&v| v.max(0.0).sqrt()).sum();
    let mean_term: f64 = mu1
        .iter()
        .zip(mu2.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let tr1: f64 = (0..d).map(|i| sigma1[[i, i]]).sum();
    let tr2: f64 = (0..d).map(|i| sigma2[[i, i]]).sum();
    Ok((mean_term + tr1 + tr2 - 2.0 * tr_sqrt).max(0.0))
}

/// Fréchet distance between feature distributions of two video sets.
pub fn fvd(
    real: &[Vec<Array2<f64>>],
    generated: &[Vec<Array2<f64>>],
    extractor: &dyn FeatureExtractor,
) -> Result<f64> {
    let feats = |set: &[Vec<Array2<f64>>]| -> Result<Vec<Array1<f64>>> {
        set.iter().map(|v| extractor.extract(v)).collect()
    };
    let (mu1, s1) = gaussian_fit(&feats(real)?)?;
    let (mu2, s2) = gaussian_fit(&feats(generated)?)?;
    frechet_distance(&mu1, &s1, &mu2, &s2)
}

// ---------------------------------------------------------------------------
// Evaluation harness
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleScores {
    pub patient_id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub perceptual: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint_digest: String,
    pub extractor_id: String,
    pub n_evaluated: usize,
    pub n_skipped: usize,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_perceptual: f64,
    pub fvd: f64,
    pub per_sample: Vec<SampleScores>,
}

/// Compare generated videos against ground truth over a dataset split.
/// For each sample the ground-truth series is reduced to the standard
/// per-phase frame selection, a video of the same length is rolled out from
/// the CF image, and frame metrics are averaged over time; FVD is computed
/// across the whole set. Samples whose series cannot supply the selection
/// are skipped with a warning.
pub fn evaluate(
    checkpoint_path: &Path,
    dataset: &[PairedSample],
    frames_per_phase: usize,
    smooth: bool,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::Config("evaluation dataset is empty".into()));
    }
    let ck = load_checkpoint(checkpoint_path)?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(0);
    let generator = Generator::new(&ck.header.model, &mut init_rng);
    ck.load_params(&generator.params())?;

    let extractor = RandomProjectionExtractor::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_sample = Vec::new();
    let mut real_videos = Vec::new();
    let mut gen_videos = Vec::new();
    let mut skipped = 0usize;

    for sample in dataset {
        let seq = match sample_training_frames(sample, frames_per_phase, &mut rng) {
            Ok(s) => s,
            Err(e) => {
                log::warn!("skipping patient {}: {e}", sample.patient_id);
                skipped += 1;
                continue;
            }
        };
        let cf = resize_cf(&sample.cf_image, ck.header.image_size)?;
        let mut frames = rollout(&generator, &cf, seq.frames.len())?;
        if smooth {
            frames = smooth_triple_average(&frames);
        }
        let gt: Vec<Array2<f64>> = seq
            .frames
            .iter()
            .map(|f| crate::data_pipeline::preprocess_frame(f, ck.header.image_size))
            .collect::<Result<_>>()?;
        let mut sp = 0.0;
        let mut ss = 0.0;
        let mut pd = 0.0;
        for (g, r) in frames.iter().zip(gt.iter()) {
            sp += psnr(g, r)?;
            ss += ssim(g, r)?;
            pd += perceptual_distance(g, r)?;
        }
        let n = frames.len() as f64;
        per_sample.push(SampleScores {
            patient_id: sample.patient_id.clone(),
            psnr: sp / n,
            ssim: ss / n,
            perceptual: pd / n,
        });
        real_videos.push(gt);
        gen_videos.push(frames);
    }
    if per_sample.is_empty() {
        return Err(Error::Config(
            "no sample in the dataset could be evaluated".into(),
        ));
    }
    let fvd_score = fvd(&real_videos, &gen_videos, &extractor)?;
    let n = per_sample.len() as f64;
    let report = EvalReport {
        checkpoint_digest: file_digest(checkpoint_path)?,
        extractor_id: extractor.id().to_string(),
        n_evaluated: per_sample.len(),
        n_skipped: skipped,
        mean_psnr: per_sample.iter().map(|s| s.psnr).sum::<f64>() / n,
        mean_ssim: per_sample.iter().map(|s| s.ssim).sum::<f64>() / n,
        mean_perceptual: per_sample.iter().map(|s| s.perceptual).sum::<f64>() / n,
        fvd: fvd_score,
        per_sample,
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let jpath = dir.join("evaluation.json");
        let body = serde_json::to_string_pretty(&report).map_err(|e| Error::Json {
            path: jpath.clone(),
            source: e,
        })?;
        std::fs::write(&jpath, body).map_err(|e| Error::io(&jpath, e))?;
        let cpath = dir.join("evaluation.csv");
        let mut f = std::fs::File::create(&cpath).map_err(|e| Error::io(&cpath, e))?;
        writeln!(f, "patient_id,psnr,ssim,perceptual").map_err(|e| Error::io(&cpath, e))?;
        for s in &report.per_sample {
            writeln!(f, "{},{},{},{}", s.patient_id, s.psnr, s.ssim, s.perceptual)
                .map_err(|e| Error::io(&cpath, e))?;
        }
    }
    Ok(report)
}

fn resize_cf(cf: &Array3<f64>, target: usize) -> Result<Array3<f64>> {
    crate::data_pipeline::preprocess_cf(cf, target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_pipeline::{synthesize_pair, SyntheticSceneParams};
    use crate::trainer::{TrainConfig, Trainer};

    #[test]
    fn psnr_oracles() {
        let a = Array2::from_elem((16, 16), 0.25);
        let b = Array2::from_elem((16, 16), 0.75);
        // mse = 0.25 → 10·log10(4) ≈ 6.0206
        assert!((psnr(&a, &b).unwrap() - 6.0206).abs() < 1e-3);
        assert!(psnr(&a, &a).unwrap().is_infinite());
    }

    #[test]
    fn psnr_decreases_with_noise_amplitude() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let base = Array2::from_shape_fn((32, 32), |_| rng.gen::<f64>());
        let noise = Array2::from_shape_fn((32, 32), |_| rng.gen::<f64>() - 0.5);
        let mut prev = f64::INFINITY;
        for amp in [0.01, 0.05, 0.1, 0.3] {
            let noisy = (&base + &(&noise * amp)).mapv(|v| v.clamp(0.0, 1.0));
            let p = psnr(&base, &noisy).unwrap();
            assert!(p < prev, "psnr not monotone: {p} !< {prev}");
            prev = p;
        }
    }

    #[test]
    fn ssim_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Array2::from_shape_fn((32, 32), |_| rng.gen::<f64>());
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        // structural noise lowers ssim below 1
        let b = a.mapv(|v| (1.0 - v).clamp(0.0, 1.0));
        assert!(ssim(&a, &b).unwrap() < 0.5);
        // ssim is symmetric
        let c = Array2::from_shape_fn((32, 32), |_| rng.gen::<f64>());
        assert!((ssim(&a, &c).unwrap() - ssim(&c, &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn perceptual_distance_zero_iff_identical_and_grows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Array2::from_shape_fn((16, 16), |_| rng.gen::<f64>());
        assert_eq!(perceptual_distance(&a, &a).unwrap(), 0.0);
        let noise = Array2::from_shape_fn((16, 16), |_| rng.gen::<f64>() - 0.5);
        let d_small = perceptual_distance(&a, &(&a + &(&noise * 0.05))).unwrap();
        let d_large = perceptual_distance(&a, &(&a + &(&noise * 0.5))).unwrap();
        assert!(d_small > 0.0);
        assert!(d_large > d_small);
    }

    #[test]
    fn frechet_one_dimensional_oracle() {
        // N(0, σ²) vs N(1, σ²) → distance 1 exactly
        let mu1 = Array1::from_vec(vec![0.0]);
        let mu2 = Array1::from_vec(vec![1.0]);
        let s = Array2::from_elem((1, 1), 0.3);
        let d = frechet_distance(&mu1, &s, &mu2, &s).unwrap();
        assert!((d - 1.0).abs() < 1e-6, "got {d}");
        // closed form with different variances: (μ1-μ2)² + (σ1-σ2)²
        let s1 = Array2::from_elem((1, 1), 4.0);
        let s2 = Array2::from_elem((1, 1), 1.0);
        let d = frechet_distance(&mu1, &s1, &mu2, &s2).unwrap();
        assert!((d - 2.0).abs() < 1e-6, "got {d}");
    }

    #[test]
    fn fvd_identical_sets_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let videos: Vec<Vec<Array2<f64>>> = (0..5)
            .map(|_| {
                (0..4)
                    .map(|_| Array2::from_shape_fn((16, 16), |_| rng.gen::<f64>()))
                    .collect()
            })
            .collect();
        let ex = RandomProjectionExtractor::new();
        let d = fvd(&videos, &videos, &ex).unwrap();
        assert!(d.abs() < 1e-6, "fvd(S,S) = {d}");
    }

    #[test]
    fn fvd_separates_shifted_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mk = |shift: f64, rng: &mut ChaCha8Rng| -> Vec<Vec<Array2<f64>>> {
            (0..6)
                .map(|_| {
                    (0..4)
                        .map(|_| {
                            Array2::from_shape_fn((16, 16), |_| {
                                (rng.gen::<f64>() * 0.3 + shift).clamp(0.0, 1.0)
                            })
                        })
                        .collect()
                })
                .collect()
        };
        let a = mk(0.0, &mut rng);
        let b = mk(0.6, &mut rng);
        let ex = RandomProjectionExtractor::new();
        let near = fvd(&a, &a, &ex).unwrap();
        let far = fvd(&a, &b, &ex).unwrap();
        assert!(far > near + 1e-3, "fvd failed to separate: {far} vs {near}");
    }

    #[test]
    fn extractor_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let v: Vec<Array2<f64>> = (0..5)
            .map(|_| Array2::from_shape_fn((24, 24), |_| rng.gen::<f64>()))
            .collect();
        let ex = RandomProjectionExtractor::new();
        assert_eq!(ex.extract(&v).unwrap(), ex.extract(&v).unwrap());
    }

    #[test]
    fn evaluate_end_to_end_writes_report() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("ck.bin");
        let t = Trainer::new(TrainConfig {
            model: crate::models::ModelConfig {
                base_channels: 2,
                n_blocks: 1,
                disc_channels: 2,
                embed_dim: 4,
                n_patches: 4,
            },
            image_size: 16,
            seed: 9,
            ..TrainConfig::default()
        })
        .unwrap();
        t.save(&ckpt).unwrap();
        let data: Vec<PairedSample> = (0..2)
            .map(|i| synthesize_pair(&SyntheticSceneParams::random(i, 16, 6)).unwrap())
            .collect();
        let report = evaluate(&ckpt, &data, 1, true, 0, Some(dir.path())).unwrap();
        assert_eq!(report.n_evaluated, 2);
        assert_eq!(report.n_skipped, 0);
        assert!(report.fvd.is_finite());
        assert!(report.mean_ssim.is_finite());
        assert!(dir.path().join("evaluation.json").exists());
        let csv = std::fs::read_to_string(dir.path().join("evaluation.csv")).unwrap();
        assert_eq!(csv.lines().count(), 3);

        // short series are skipped with a count, not a failure
        let mut tiny = data.clone();
        tiny.push(synthesize_pair(&SyntheticSceneParams::random(9, 16, 2)).unwrap());
        let report = evaluate(&ckpt, &tiny, 1, false, 0, None).unwrap();
        assert_eq!(report.n_skipped, 1);
    }
}
