//! Video generation from a trained checkpoint: deterministic autoregressive
//! rollout, optional triple-frame temporal smoothing, and PNG-sequence output
//! with a JSON manifest.

use crate::checkpoint::{file_digest, load_checkpoint};
use crate::data_pipeline::{preprocess_cf, save_png_gray};
use crate::error::{Error, Result};
use crate::models::{GenerationState, Generator, ModelConfig};
use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Roll the generator forward from the CF bootstrap window, feeding each
/// generated frame back in. Pure function of the weights and the input.
pub fn rollout(generator: &Generator, cf_image: &Array3<f64>, n_frames: usize) -> Result<Vec<Array2<f64>>> {
    if n_frames == 0 {
        return Err(Error::Contract("rollout: n_frames must be >= 1".into()));
    }
    let mut state = GenerationState::bootstrap(cf_image.clone())?;
    let mut frames = Vec::with_capacity(n_frames);
    for _ in 0..n_frames {
        let out = generator.forward(&state)?;
        let frame = out.frame_unit();
        state.push(frame.clone());
        frames.push(frame);
    }
    Ok(frames)
}

/// Temporal box filter of width 3, truncated at the sequence ends: each
/// output frame is the mean of the existing neighbours `{t-1, t, t+1}`.
pub fn smooth_triple_average(frames: &[Array2<f64>]) -> Vec<Array2<f64>> {
    let n = frames.len();
    (0..n)
        .map(|t| {
            let lo = t.saturating_sub(1);
            let hi = (t + 1).min(n - 1);
            let mut acc = Array2::<f64>::zeros(frames[t].dim());
            for f in &frames[lo..=hi] {
                acc += f;
            }
            acc / (hi - lo + 1) as f64
        })
        .collect()
}

/// Written alongside the PNG sequence.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VideoManifest {
    pub checkpoint_digest: String,
    pub model: ModelConfig,
    pub image_size: usize,
    pub n_frames: usize,
    pub smoothed: bool,
    pub frame_files: Vec<String>,
}

/// Load a checkpoint, roll out `n_frames` from a CF image, smooth unless
/// disabled, and write `frame_NNN.png` plus `video.json` into `out_dir`.
/// Refuses a non-empty output directory unless `force` is set.
pub fn generate_video(
    checkpoint_path: &Path,
    cf_image: &Array3<f64>,
    out_dir: &Path,
    n_frames: usize,
    smooth: bool,
    force: bool,
) -> Result<VideoManifest> {
    let ck = load_checkpoint(checkpoint_path)?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(0); // overwritten immediately
    let generator = Generator::new(&ck.header.model, &mut init_rng);
    ck.load_params(&generator.params())?;

    let cf = preprocess_cf(cf_image, ck.header.image_size)?;

    if out_dir.exists() {
        let occupied = std::fs::read_dir(out_dir)
            .map_err(|e| Error::io(out_dir, e))?
            .next()
            .is_some();
        if occupied && !force {
            return Err(Error::Config(format!(
                "output directory {} is not empty (use --force to overwrite)",
                out_dir.display()
            )));
        }
    } else {
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    }

    let mut frames = rollout(&generator, &cf, n_frames)?;
    if smooth {
        frames = smooth_triple_average(&frames);
    }

    let mut frame_files = Vec::with_capacity(frames.len());
    for (i, f) in frames.iter().enumerate() {
        let name = format!("frame_{i:03}.png");
        save_png_gray(&out_dir.join(&name), f)?;
        frame_files.push(name);
    }
    let manifest = VideoManifest {
        checkpoint_digest: file_digest(checkpoint_path)?,
        model: ck.header.model.clone(),
        image_size: ck.header.image_size,
        n_frames: frames.len(),
        smoothed: smooth,
        frame_files,
    };
    let mpath = out_dir.join("video.json");
    let body = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Json {
        path: mpath.clone(),
        source: e,
    })?;
    std::fs::write(&mpath, body).map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}
