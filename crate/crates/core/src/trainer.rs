//! Training loop: autoregressive sequence rollout with scheduled teacher
//! forcing, one discriminator update and one generator update per sequence,
//! Adam with step-decayed learning rate, CSV loss logging and per-epoch
//! checkpoints that resume bit-exactly.

use crate::autograd::{concat_channels, Tensor};
use crate::checkpoint::{
    adam_entries, load_checkpoint, param_entries, save_checkpoint, Checkpoint, CheckpointHeader,
    RngState,
};
use crate::data_pipeline::{sample_training_frames, PairedSample, TrainingSequence};
use crate::error::{Error, Result};
use crate::knowledge_mask::{compute_mask, DEFAULT_THRESHOLD};
use crate::losses::{
    attention_loss, discriminator_loss, gan_loss_knowledge_aware, masked_patch_nce, total_loss,
    LossBreakdown, LossWeights, DEFAULT_TAU,
};
use crate::models::{
    embed_patches_at, encoder_input, sample_patch_locations, GenerationState,
    Generator, ModelConfig, MultiScaleDiscriminator, ProjectionHead,
};
use crate::nn::{zero_grads, Adam, Param};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub image_size: usize,
    pub epochs: u64,
    /// Optional hard cap on generator updates; mainly for short smoke runs.
    pub max_steps: Option<u64>,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Multiply the learning rate by `lr_decay` every `lr_decay_every` steps.
    pub lr_decay_every: u64,
    pub lr_decay: f64,
    pub grad_clip: f64,
    /// Probability that a whole sequence uses ground-truth previous frames.
    pub teacher_forcing_prob: f64,
    pub frames_per_phase: usize,
    pub mask_threshold: f64,
    pub use_knowledge_mask: bool,
    pub tau: f64,
    pub weights: LossWeights,
    pub seed: u64,
    /// Save a checkpoint every N epochs (the final one is always saved).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            image_size: 512,
            epochs: 50,
            max_steps: None,
            learning_rate: 2e-3,
            beta1: 0.5,
            beta2: 0.999,
            lr_decay_every: 50,
            lr_decay: 0.9,
            grad_clip: 10.0,
            teacher_forcing_prob: 0.5,
            frames_per_phase: 4,
            mask_threshold: DEFAULT_THRESHOLD,
            use_knowledge_mask: true,
            tau: DEFAULT_TAU,
            weights: LossWeights::default(),
            seed: 0,
            checkpoint_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % crate::models::GEN_STRIDE != 0 {
            return Err(Error::Config(format!(
                "image_size must be a positive multiple of {}, got {}",
                crate::models::GEN_STRIDE,
                self.image_size
            )));
        }
        if !(0.0..=1.0).contains(&self.teacher_forcing_prob) {
            return Err(Error::Config(format!(
                "teacher_forcing_prob must be in [0,1], got {}",
                self.teacher_forcing_prob
            )));
        }
        if self.learning_rate <= 0.0 || self.tau <= 0.0 {
            return Err(Error::Config(
                "learning_rate and tau must be positive".into(),
            ));
        }
        if self.frames_per_phase == 0 {
            return Err(Error::Config("frames_per_phase must be >= 1".into()));
        }
        Ok(())
    }
}

/// Step-decayed learning rate: `base * decay^(step / every)`.
pub fn scheduled_lr(base: f64, step: u64, every: u64, decay: f64) -> f64 {
    base * decay.powi((step / every.max(1)) as i32)
}

/// Per-sequence teacher-forcing draw: `true` means the whole rollout feeds
/// ground-truth frames back into the window.
pub fn scheduled_input_select(prob: f64, rng: &mut ChaCha8Rng) -> bool {
    rng.gen::<f64>() < prob
}

pub struct Trainer {
    pub config: TrainConfig,
    pub generator: Generator,
    pub discriminator: MultiScaleDiscriminator,
    pub head: ProjectionHead,
    pub gen_opt: Adam,
    pub disc_opt: Adam,
    pub step: u64,
    pub epoch: u64,
    pub rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Trainer> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let generator = Generator::new(&config.model, &mut rng);
        let discriminator = MultiScaleDiscriminator::new(&config.model, &mut rng);
        let head = ProjectionHead::new(
            &generator.level_channels(),
            config.model.embed_dim,
            &mut rng,
        );
        let gen_params = [generator.params(), head.params()].concat();
        let gen_opt = Adam::new(&gen_params, config.beta1, config.beta2);
        let disc_opt = Adam::new(&discriminator.params(), config.beta1, config.beta2);
        Ok(Trainer {
            config,
            generator,
            discriminator,
            head,
            gen_opt,
            disc_opt,
            step: 0,
            epoch: 0,
            rng,
        })
    }

    pub fn resume(config: TrainConfig, path: &Path) -> Result<Trainer> {
        let ck = load_checkpoint(path)?;
        let mut config = config;
        if config.model != ck.header.model {
            return Err(Error::Checkpoint(format!(
                "architecture in {} does not match the configured model",
                path.display()
            )));
        }
        config.image_size = ck.header.image_size;
        let mut t = Trainer::new(config)?;
        t.load_state(&ck)?;
        Ok(t)
    }

    fn load_state(&mut self, ck: &Checkpoint) -> Result<()> {
        ck.load_params(&self.generator.params())?;
        ck.load_params(&self.head.params())?;
        ck.load_params(&self.discriminator.params())?;
        let gen_params = self.gen_params();
        ck.load_adam("adam_gen", &gen_params, &mut self.gen_opt)?;
        ck.load_adam("adam_disc", &self.discriminator.params(), &mut self.disc_opt)?;
        self.gen_opt.t = ck.header.gen_adam_t;
        self.disc_opt.t = ck.header.disc_adam_t;
        self.step = ck.header.step;
        self.epoch = ck.header.epoch;
        self.rng = ck.header.rng.restore();
        Ok(())
    }

    fn gen_params(&self) -> Vec<Param> {
        [self.generator.params(), self.head.params()].concat()
    }

    fn all_params(&self) -> Vec<Param> {
        [self.gen_params(), self.discriminator.params()].concat()
    }

    pub fn current_lr(&self) -> f64 {
        scheduled_lr(
            self.config.learning_rate,
            self.step,
            self.config.lr_decay_every,
            self.config.lr_decay,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = CheckpointHeader {
            model: self.config.model.clone(),
            image_size: self.config.image_size,
            step: self.step,
            epoch: self.epoch,
            gen_adam_t: self.gen_opt.t,
            disc_adam_t: self.disc_opt.t,
            rng: RngState::capture(&self.rng),
            entries: Vec::new(),
        };
        let mut arrays = param_entries(&self.all_params());
        arrays.extend(adam_entries("adam_gen", &self.gen_params(), &self.gen_opt));
        arrays.extend(adam_entries(
            "adam_disc",
            &self.discriminator.params(),
            &self.disc_opt,
        ));
        save_checkpoint(path, header, arrays)
    }

    /// One optimization step on one sequence: rollout, loss accumulation over
    /// all frames, a discriminator update, then a generator update.
    pub fn train_step(&mut self, seq: &TrainingSequence) -> Result<LossBreakdown> {
        let t_frames = seq.frames.len();
        if t_frames < 2 {
            return Err(Error::Contract(
                "train_step: sequence needs at least two frames".into(),
            ));
        }
        let mask = if self.config.use_knowledge_mask {
            Some(compute_mask(
                &seq.frames[0],
                &seq.frames[t_frames - 1],
                self.config.mask_threshold,
            )?)
        } else {
            None
        };
        let teacher = scheduled_input_select(self.config.teacher_forcing_prob, &mut self.rng);

        // CF features for the unsupervised contrastive loss, shared across t.
        let cf_feats = self
            .generator
            .encode_levels(&encoder_input(Some(&seq.cf_image), None));

        let zero = || Tensor::scalar_const(0.0);
        let (mut up, mut sp, mut att, mut gan_g, mut gan_d) =
            (zero(), zero(), zero(), zero(), zero());

        let mut state = GenerationState::bootstrap(seq.cf_image.clone())?;
        for t in 0..t_frames {
            let out = self.generator.forward(&state)?;
            let fake = out.frame_unit_tensor(); // 1×H×W in [0,1]
            let real = frame_tensor(&seq.frames[t]);

            if self.config.use_knowledge_mask {
                att = att.add(&attention_loss(
                    &out.last_activation,
                    mask.as_ref().unwrap(),
                )?);
            }

            // contrastive terms at shared locations
            let shapes: Vec<(usize, usize)> = cf_feats
                .iter()
                .map(|f| {
                    let s = f.shape();
                    (s[1], s[2])
                })
                .collect();
            let (locs, lweights) = sample_patch_locations(
                &shapes,
                self.config.model.n_patches,
                mask.as_ref(),
                &mut self.rng,
            )?;
            let fake6 = concat_channels(&vec![fake.clone(); 6]);
            let gen_feats = self.generator.encode_levels(&fake6);
            let gt_feats = self
                .generator
                .encode_levels(&encoder_input(None, Some(&seq.frames[t])));
            let gen_emb = embed_patches_at(&gen_feats, &locs, &lweights, &self.head);
            let cf_emb = embed_patches_at(&cf_feats, &locs, &lweights, &self.head);
            let gt_emb = embed_patches_at(&gt_feats, &locs, &lweights, &self.head);
            up = up.add(&masked_patch_nce(&gen_emb, &cf_emb, self.config.tau)?);
            sp = sp.add(&masked_patch_nce(&gen_emb, &gt_emb, self.config.tau)?);

            for k in 1..=3usize {
                let (d, g) = match &mask {
                    Some(m) => gan_loss_knowledge_aware(
                        &self.discriminator,
                        k,
                        &seq.cf_image,
                        &real,
                        &fake,
                        m,
                    )?,
                    None => {
                        discriminator_loss(&self.discriminator, k, &seq.cf_image, &real, &fake)?
                    }
                };
                gan_d = gan_d.add(&d);
                gan_g = gan_g.add(&g);
            }

            let next = if teacher {
                seq.frames[t].clone()
            } else {
                out.frame_unit() // plain array: generated frames re-enter detached
            };
            state.push(next);
        }

        let inv = 1.0 / t_frames as f64;
        let (up, sp, att) = (up.mul_scalar(inv), sp.mul_scalar(inv), att.mul_scalar(inv));
        // the adversarial terms are averaged over the discriminator scales,
        // mirroring how the contrastive terms average over feature levels
        let (gan_g, gan_d) = (gan_g.mul_scalar(inv / 3.0), gan_d.mul_scalar(inv / 3.0));

        let lr = self.current_lr();
        let all = self.all_params();

        // discriminator update
        zero_grads(&all);
        gan_d.backward();
        self.disc_opt.step(
            &self.discriminator.params(),
            lr,
            Some(self.config.grad_clip),
        );

        // generator (+ projection head) update
        zero_grads(&all);
        let (total, breakdown) =
            total_loss(&up, &sp, &att, &gan_g, &gan_d, &self.config.weights).map_err(|e| {
                match e {
                    Error::TrainingDiverged { detail, .. } => Error::TrainingDiverged {
                        step: self.step,
                        detail,
                    },
                    other => other,
                }
            })?;
        total.backward();
        self.gen_opt
            .step(&self.gen_params(), lr, Some(self.config.grad_clip));

        self.step += 1;
        Ok(breakdown)
    }

    /// Run the configured number of epochs over the dataset. Writes
    /// `loss_log.csv`, per-epoch checkpoints, and `checkpoint_final.bin`
    /// under `out_dir`. Returns per-step breakdowns.
    pub fn fit(
        &mut self,
        dataset: &[PairedSample],
        out_dir: &Path,
    ) -> Result<Vec<LossBreakdown>> {
        if dataset.is_empty() {
            return Err(Error::Config("training dataset is empty".into()));
        }
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let log_path = out_dir.join("loss_log.csv");
        let fresh = self.step == 0;
        let mut log = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        if fresh {
            writeln!(log, "{}", LossBreakdown::csv_header()).map_err(|e| Error::io(&log_path, e))?;
        }
        let mut history = Vec::new();
        'epochs: while self.epoch < self.config.epochs {
            for sample in dataset {
                if let Some(cap) = self.config.max_steps {
                    if self.step >= cap {
                        break 'epochs;
                    }
                }
                let seq = sample_training_frames(sample, self.config.frames_per_phase, &mut self.rng)?;
                let b = self.train_step(&seq)?;
                writeln!(log, "{}", b.csv_row(self.step)).map_err(|e| Error::io(&log_path, e))?;
                log::info!(
                    "step {} (epoch {}, patient {}): total {:.4}",
                    self.step,
                    self.epoch,
                    sample.patient_id,
                    b.total
                );
                history.push(b);
            }
            self.epoch += 1;
            if self.config.checkpoint_every > 0 && self.epoch % self.config.checkpoint_every == 0 {
                self.save(&out_dir.join(format!("checkpoint_epoch_{:04}.bin", self.epoch)))?;
            }
        }
        self.save(&out_dir.join("checkpoint_final.bin"))?;
        Ok(history)
    }
}

fn frame_tensor(frame: &Array2<f64>) -> Tensor {
    let (h, w) = frame.dim();
    Tensor::constant(frame.clone().into_shape((1, h, w)).unwrap().into_dyn())
}

/// Build a one-sequence-per-sample iterator-friendly view used by the CLI
/// when the dataset's series already hold exactly the frames to train on.
pub fn sequence_from_sample(sample: &PairedSample) -> TrainingSequence {
    TrainingSequence {
        cf_image: sample.cf_image.clone(),
        frames: sample.ffa_frames.clone(),
        source_indices: (0..sample.ffa_frames.len()).collect(),
    }
}
