//! Networks: the autoregressive generator (encoder / residual blocks /
//! decoder), the three-scale patch discriminators, and the projection head
//! that turns encoder features into unit-norm patch embeddings for the
//! contrastive losses.

use crate::autograd::{concat_channels, Tensor};
use crate::data_pipeline::luminance;
use crate::error::{Error, Result};
use crate::knowledge_mask::{downsample_mask, DownsampleTo, KnowledgeMask};
use crate::nn::{Conv2d, InstanceNorm2d, Linear, Param};
use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Total downsampling stride of the generator encoder.
pub const GEN_STRIDE: usize = 8;
/// Number of previous frames fed back into the generator.
pub const WINDOW: usize = 3;
/// Encoder feature levels used for patch embeddings (strides 1, 2, 4).
pub const NCE_LEVELS: usize = 3;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    /// Generator base channel width.
    pub base_channels: usize,
    /// Residual blocks at the bottleneck.
    pub n_blocks: usize,
    /// Discriminator base channel width.
    pub disc_channels: usize,
    /// Projection-head width (= embedding dimension).
    pub embed_dim: usize,
    /// Patch locations sampled per feature level for the contrastive losses.
    pub n_patches: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            base_channels: 16,
            n_blocks: 6,
            disc_channels: 16,
            embed_dim: 256,
            n_patches: 256,
        }
    }
}

// ---------------------------------------------------------------------------
// Generation state
// ---------------------------------------------------------------------------

/// Autoregressive rollout buffer: conditioning CF image plus the last three
/// frames, oldest first.
#[derive(Debug, Clone)]
pub struct GenerationState {
    pub cf_image: Array3<f64>,
    pub prev_frames: [Array2<f64>; WINDOW],
    pub step: usize,
}

impl GenerationState {
    pub fn new(cf_image: Array3<f64>, prev_frames: [Array2<f64>; WINDOW]) -> Result<Self> {
        let (_, h, w) = cf_image.dim();
        if h % GEN_STRIDE != 0 || w % GEN_STRIDE != 0 {
            return Err(Error::Contract(format!(
                "spatial size {h}x{w} not divisible by generator stride {GEN_STRIDE}"
            )));
        }
        for f in &prev_frames {
            if f.dim() != (h, w) {
                return Err(Error::Contract(
                    "previous frame shape differs from CF image".into(),
                ));
            }
        }
        Ok(GenerationState {
            cf_image,
            prev_frames,
            step: 0,
        })
    }

    /// Before any frame exists the window holds three copies of the CF
    /// luminance channel.
    pub fn bootstrap(cf_image: Array3<f64>) -> Result<Self> {
        let lum = luminance(&cf_image);
        GenerationState::new(cf_image, [lum.clone(), lum.clone(), lum])
    }

    /// Slide the window forward with a newly available frame.
    pub fn push(&mut self, frame: Array2<f64>) {
        self.prev_frames.rotate_left(1);
        self.prev_frames[WINDOW - 1] = frame;
        self.step += 1;
    }
}

/// Channel-concatenated generator input: CF (3) + previous frames (3).
pub fn generator_input(state: &GenerationState) -> Tensor {
    let mut parts = vec![Tensor::constant(state.cf_image.clone().into_dyn())];
    for f in &state.prev_frames {
        let (h, w) = f.dim();
        parts.push(Tensor::constant(
            f.clone().into_shape((1, h, w)).unwrap().into_dyn(),
        ));
    }
    concat_channels(&parts)
}

/// 6-channel encoding input for an arbitrary image, reusing the generator
/// encoder layout: 3 color channels + 3 luminance channels. Single-channel
/// frames are replicated into both halves.
pub fn encoder_input(img_rgb: Option<&Array3<f64>>, img_gray: Option<&Array2<f64>>) -> Tensor {
    match (img_rgb, img_gray) {
        (Some(rgb), None) => {
            let lum = luminance(rgb);
            let (h, w) = lum.dim();
            let l = Tensor::constant(lum.into_shape((1, h, w)).unwrap().into_dyn());
            let rgb = Tensor::constant(rgb.clone().into_dyn());
            concat_channels(&[rgb, l.clone(), l.clone(), l])
        }
        (None, Some(gray)) => {
            let (h, w) = gray.dim();
            let g = Tensor::constant(gray.clone().into_shape((1, h, w)).unwrap().into_dyn());
            concat_channels(&[g.clone(), g.clone(), g.clone(), g.clone(), g.clone(), g])
        }
        _ => panic!("encoder_input: exactly one of rgb/gray must be given"),
    }
}

// ---------------------------------------------------------------------------
// Generator
// ---------------------------------------------------------------------------

pub struct GeneratorOutput {
    /// 1×H×W in tanh range [-1,1].
    pub frame: Tensor,
    /// Activation of the last decoder convolution (before the output
    /// projection), full resolution.
    pub last_activation: Tensor,
}

impl GeneratorOutput {
    /// Frame mapped from tanh range to [0,1] as a plain array.
    pub fn frame_unit(&self) -> Array2<f64> {
        let a = self.frame.to_array();
        let sh = a.shape().to_vec();
        a.into_shape((sh[1], sh[2]))
            .unwrap()
            .mapv(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0))
    }

    /// Differentiable [0,1]-range frame for losses.
    pub fn frame_unit_tensor(&self) -> Tensor {
        self.frame.add_scalar(1.0).mul_scalar(0.5)
    }
}

struct ResBlock {
    conv1: Conv2d,
    norm1: InstanceNorm2d,
    conv2: Conv2d,
    norm2: InstanceNorm2d,
}

impl ResBlock {
    fn new(name: &str, ch: usize, rng: &mut ChaCha8Rng) -> ResBlock {
        ResBlock {
            conv1: Conv2d::new(&format!("{name}.conv1"), ch, ch, 3, 1, 1, rng),
            norm1: InstanceNorm2d::new(&format!("{name}.norm1"), ch),
            conv2: Conv2d::new(&format!("{name}.conv2"), ch, ch, 3, 1, 1, rng),
            norm2: InstanceNorm2d::new(&format!("{name}.norm2"), ch),
        }
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        let y = self.norm1.forward(&self.conv1.forward(x)).relu();
        let y = self.norm2.forward(&self.conv2.forward(&y));
        x.add(&y)
    }

    fn params(&self) -> Vec<Param> {
        [
            self.conv1.params(),
            self.norm1.params(),
            self.conv2.params(),
            self.norm2.params(),
        ]
        .concat()
    }
}

pub struct Generator {
    pub config: ModelConfig,
    enc0: Conv2d,
    enc0_norm: InstanceNorm2d,
    down: Vec<(Conv2d, InstanceNorm2d)>,
    blocks: Vec<ResBlock>,
    up: Vec<(Conv2d, InstanceNorm2d)>,
    feat: Conv2d,
    out: Conv2d,
}

impl Generator {
    pub fn new(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Generator {
        let nf = config.base_channels;
        let enc0 = Conv2d::new("gen.enc0", 3 + WINDOW, nf, 7, 1, 3, rng);
        let enc0_norm = InstanceNorm2d::new("gen.enc0_norm", nf);
        let mut down = Vec::new();
        for i in 0..3 {
            let cin = nf << i;
            down.push((
                Conv2d::new(&format!("gen.down{i}"), cin, cin * 2, 3, 2, 1, rng),
                InstanceNorm2d::new(&format!("gen.down{i}_norm"), cin * 2),
            ));
        }
        let blocks = (0..config.n_blocks)
            .map(|i| ResBlock::new(&format!("gen.block{i}"), nf * 8, rng))
            .collect();
        let mut up = Vec::new();
        for i in 0..3 {
            let cin = nf * 8 >> i;
            up.push((
                Conv2d::new(&format!("gen.up{i}"), cin, cin / 2, 3, 1, 1, rng),
                InstanceNorm2d::new(&format!("gen.up{i}_norm"), cin / 2),
            ));
        }
        let feat = Conv2d::new("gen.feat", nf, nf, 3, 1, 1, rng);
        let out = Conv2d::new("gen.out", nf, 1, 7, 1, 3, rng);
        Generator {
            config: config.clone(),
            enc0,
            enc0_norm,
            down,
            blocks,
            up,
            feat,
            out,
        }
    }

    /// Encoder features at strides 1, 2 and 4 for the contrastive losses.
    pub fn encode_levels(&self, input6: &Tensor) -> Vec<Tensor> {
        let l0 = self.enc0_norm.forward(&self.enc0.forward(input6)).relu();
        let l1 = self.down[0].1.forward(&self.down[0].0.forward(&l0)).relu();
        let l2 = self.down[1].1.forward(&self.down[1].0.forward(&l1)).relu();
        vec![l0, l1, l2]
    }

    /// Channel widths per NCE level.
    pub fn level_channels(&self) -> Vec<usize> {
        let nf = self.config.base_channels;
        vec![nf, nf * 2, nf * 4]
    }

    pub fn forward(&self, state: &GenerationState) -> Result<GeneratorOutput> {
        let (_, h, w) = state.cf_image.dim();
        if h % GEN_STRIDE != 0 || w % GEN_STRIDE != 0 {
            return Err(Error::Contract(format!(
                "generator input {h}x{w} not divisible by stride {GEN_STRIDE}"
            )));
        }
        let input = generator_input(state);
        Ok(self.forward_tensor(&input))
    }

    /// Forward pass on a prepared 6-channel tensor (kept separate so tests can
    /// drive the network directly).
    pub fn forward_tensor(&self, input6: &Tensor) -> GeneratorOutput {
        let mut x = self.enc0_norm.forward(&self.enc0.forward(input6)).relu();
        for (conv, norm) in &self.down {
            x = norm.forward(&conv.forward(&x)).relu();
        }
        for b in &self.blocks {
            x = b.forward(&x);
        }
        for (conv, norm) in &self.up {
            x = norm.forward(&conv.forward(&x.upsample_nearest2())).relu();
        }
        let f_l = self.feat.forward(&x);
        let frame = self.out.forward(&f_l.relu()).tanh_t();
        GeneratorOutput {
            frame,
            last_activation: f_l,
        }
    }

    pub fn params(&self) -> Vec<Param> {
        let mut p = Vec::new();
        p.extend(self.enc0.params());
        p.extend(self.enc0_norm.params());
        for (c, n) in &self.down {
            p.extend(c.params());
            p.extend(n.params());
        }
        for b in &self.blocks {
            p.extend(b.params());
        }
        for (c, n) in &self.up {
            p.extend(c.params());
            p.extend(n.params());
        }
        p.extend(self.feat.params());
        p.extend(self.out.params());
        p
    }

    /// Zero the output projection; forces a spatially constant tanh(bias) map.
    pub fn zero_output_layer(&self) {
        let w = self.out.weight.tensor.to_array();
        self.out
            .weight
            .tensor
            .set_value(ndarray::ArrayD::zeros(w.raw_dim()));
    }
}

// ---------------------------------------------------------------------------
// Patch discriminators
// ---------------------------------------------------------------------------

/// Channels of the conditioned pair fed to each discriminator: CF (3) +
/// candidate frame (1).
pub const DISC_IN_CHANNELS: usize = 4;
const DISC_STRIDE2_LAYERS: usize = 4;

/// One patchGAN discriminator: 4 stride-2 k4 convolutions with LeakyReLU,
/// then a k3 stride-1 logit head. No normalization layers, so each logit
/// depends only on pixels inside its receptive field.
pub struct PatchDiscriminator {
    layers: Vec<Conv2d>,
    head: Conv2d,
}

/// Padding rule for the stride-2 k4 convolutions: pad 1 normally, 2 when the
/// input is a single pixel so tiny scales still produce a logit.
fn stride2_pad(h: usize) -> usize {
    if h >= 2 {
        1
    } else {
        2
    }
}

/// Declared output size of the logit map for a square input of side `h`.
pub fn patch_logit_size(mut h: usize) -> usize {
    for _ in 0..DISC_STRIDE2_LAYERS {
        let p = stride2_pad(h);
        h = (h + 2 * p - 4) / 2 + 1;
    }
    h // the k3 s1 p1 head preserves size
}

/// Input pixel interval (unclamped, may extend past the image) feeding the
/// logit at 1-D index `idx` for an input of side `h`.
pub fn receptive_field_1d(h: usize, idx: usize) -> (i64, i64) {
    // simulate the per-layer sizes to know each pad
    let mut sizes = vec![h];
    let mut cur = h;
    for _ in 0..DISC_STRIDE2_LAYERS {
        let p = stride2_pad(cur);
        cur = (cur + 2 * p - 4) / 2 + 1;
        sizes.push(cur);
    }
    // head: k3 s1 p1
    let mut lo = idx as i64 - 1;
    let mut hi = idx as i64 + 1;
    for layer in (0..DISC_STRIDE2_LAYERS).rev() {
        let p = stride2_pad(sizes[layer]) as i64;
        lo = lo * 2 - p;
        hi = hi * 2 - p + 3;
    }
    (lo, hi)
}

impl PatchDiscriminator {
    pub fn new(name: &str, ndf: usize, rng: &mut ChaCha8Rng) -> PatchDiscriminator {
        let mut layers = Vec::new();
        let mut cin = DISC_IN_CHANNELS;
        for i in 0..DISC_STRIDE2_LAYERS {
            let cout = ndf << i;
            // pad is chosen per input size at forward time
            layers.push(Conv2d::new(&format!("{name}.conv{i}"), cin, cout, 4, 2, 1, rng));
            cin = cout;
        }
        let head = Conv2d::new(&format!("{name}.head"), cin, 1, 3, 1, 1, rng);
        PatchDiscriminator { layers, head }
    }

    /// `pair`: DISC_IN_CHANNELS×H×W already at this discriminator's scale.
    pub fn forward(&self, pair: &Tensor) -> Result<Tensor> {
        let sh = pair.shape();
        if sh.len() != 3 || sh[0] != DISC_IN_CHANNELS {
            return Err(Error::Contract(format!(
                "discriminator expects {DISC_IN_CHANNELS}xHxW, got {sh:?}"
            )));
        }
        let mut x = pair.clone();
        for conv in &self.layers {
            let h = x.shape()[1];
            let pad = stride2_pad(h);
            x = x
                .conv2d(&conv.weight.tensor, &conv.bias.tensor, 2, pad)
                .leaky_relu(0.2);
        }
        Ok(self.head.forward(&x))
    }

    pub fn params(&self) -> Vec<Param> {
        let mut p: Vec<Param> = self.layers.iter().flat_map(|l| l.params()).collect();
        p.extend(self.head.params());
        p
    }
}

/// The three discriminators at image scales 1, 0.5 and 0.25.
pub struct MultiScaleDiscriminator {
    pub scales: Vec<PatchDiscriminator>,
}

impl MultiScaleDiscriminator {
    pub fn new(config: &ModelConfig, rng: &mut ChaCha8Rng) -> MultiScaleDiscriminator {
        MultiScaleDiscriminator {
            scales: (0..3)
                .map(|k| PatchDiscriminator::new(&format!("disc{}", k + 1), config.disc_channels, rng))
                .collect(),
        }
    }

    /// `k` in {1,2,3}; the full-resolution pair is average-pooled by
    /// 2^(k-1) before discrimination.
    pub fn forward(&self, k: usize, pair_full: &Tensor) -> Result<Tensor> {
        if !(1..=3).contains(&k) {
            return Err(Error::Contract(format!("discriminator scale {k} not in 1..=3")));
        }
        let factor = 1 << (k - 1);
        let scaled = if factor == 1 {
            pair_full.clone()
        } else {
            let sh = pair_full.shape();
            if sh[1] % factor != 0 || sh[2] % factor != 0 {
                return Err(Error::Contract(format!(
                    "input {}x{} not divisible by scale factor {factor}",
                    sh[1], sh[2]
                )));
            }
            pair_full.avg_pool2(factor)
        };
        self.scales[k - 1].forward(&scaled)
    }

    pub fn params(&self) -> Vec<Param> {
        self.scales.iter().flat_map(|d| d.params()).collect()
    }
}

/// Conditioned discriminator pair: CF image + candidate frame.
pub fn conditioned_pair(cf: &Array3<f64>, candidate: &Tensor) -> Tensor {
    concat_channels(&[Tensor::constant(cf.clone().into_dyn()), candidate.clone()])
}

// ---------------------------------------------------------------------------
// Patch embeddings
// ---------------------------------------------------------------------------

pub struct ProjectionHead {
    mlps: Vec<(Linear, Linear)>,
}

impl ProjectionHead {
    pub fn new(level_channels: &[usize], embed_dim: usize, rng: &mut ChaCha8Rng) -> ProjectionHead {
        ProjectionHead {
            mlps: level_channels
                .iter()
                .enumerate()
                .map(|(i, &c)| {
                    (
                        Linear::new(&format!("head.l{i}.fc1"), c, embed_dim, rng),
                        Linear::new(&format!("head.l{i}.fc2"), embed_dim, embed_dim, rng),
                    )
                })
                .collect(),
        }
    }

    pub fn project(&self, level: usize, patches: &Tensor) -> Tensor {
        let (fc1, fc2) = &self.mlps[level];
        fc2.forward(&fc1.forward(patches).relu()).normalize_rows()
    }

    pub fn params(&self) -> Vec<Param> {
        self.mlps
            .iter()
            .flat_map(|(a, b)| [a.params(), b.params()].concat())
            .collect()
    }
}

/// Unit-norm patch embeddings per level, with the sampled locations and the
/// mask weights recorded at those locations.
pub struct PatchEmbeddingSet {
    pub embeddings: Vec<Tensor>,
    pub locations: Vec<Vec<(usize, usize)>>,
    pub weights: Vec<Vec<f64>>,
}

/// Sample `n_patches` spatial locations per feature level. With a mask,
/// sampling is restricted to cells whose level-downsampled weight exceeds
/// 0.5; if fewer such cells exist the sampling falls back to the whole grid
/// (recording the true, possibly zero, mask weights).
pub fn sample_patch_locations(
    level_shapes: &[(usize, usize)],
    n_patches: usize,
    mask: Option<&KnowledgeMask>,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Vec<(usize, usize)>>, Vec<Vec<f64>>)> {
    assert!(n_patches >= 1, "n_patches must be >= 1");
    let mut all_locs = Vec::with_capacity(level_shapes.len());
    let mut all_weights = Vec::with_capacity(level_shapes.len());
    for &(h, w) in level_shapes {
        let level_mask = match mask {
            Some(m) => Some(downsample_mask(m, DownsampleTo::Shape(h, w))?),
            None => None,
        };
        let eligible: Vec<(usize, usize)> = match &level_mask {
            Some(lm) => lm
                .values
                .indexed_iter()
                .filter(|(_, &v)| v > 0.5)
                .map(|((i, j), _)| (i, j))
                .collect(),
            None => Vec::new(),
        };
        let pool: Vec<(usize, usize)> = if eligible.len() >= n_patches {
            eligible
        } else {
            (0..h).flat_map(|i| (0..w).map(move |j| (i, j))).collect()
        };
        let locs: Vec<(usize, usize)> = if pool.len() >= n_patches {
            rand::seq::index::sample(rng, pool.len(), n_patches)
                .into_iter()
                .map(|k| pool[k])
                .collect()
        } else {
            (0..n_patches)
                .map(|_| pool[rng.gen_range(0..pool.len())])
                .collect()
        };
        let weights: Vec<f64> = locs
            .iter()
            .map(|&(i, j)| match &level_mask {
                Some(lm) => lm.values[[i, j]],
                None => 1.0,
            })
            .collect();
        all_locs.push(locs);
        all_weights.push(weights);
    }
    Ok((all_locs, all_weights))
}

/// Project feature vectors gathered at fixed locations through the head.
pub fn embed_patches_at(
    features: &[Tensor],
    locations: &[Vec<(usize, usize)>],
    weights: &[Vec<f64>],
    head: &ProjectionHead,
) -> PatchEmbeddingSet {
    let embeddings = features
        .iter()
        .zip(locations.iter())
        .enumerate()
        .map(|(lvl, (f, locs))| head.project(lvl, &f.gather_spatial(locs)))
        .collect();
    PatchEmbeddingSet {
        embeddings,
        locations: locations.to_vec(),
        weights: weights.to_vec(),
    }
}

/// Sample locations and embed in one call.
pub fn embed_patches(
    features: &[Tensor],
    n_patches: usize,
    mask: Option<&KnowledgeMask>,
    rng: &mut ChaCha8Rng,
    head: &ProjectionHead,
) -> Result<PatchEmbeddingSet> {
    let shapes: Vec<(usize, usize)> = features
        .iter()
        .map(|f| {
            let s = f.shape();
            (s[1], s[2])
        })
        .collect();
    let (locs, weights) = sample_patch_locations(&shapes, n_patches, mask, rng)?;
    Ok(embed_patches_at(features, &locs, &weights, head))
}
