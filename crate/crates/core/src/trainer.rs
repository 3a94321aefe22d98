//! The optimization loop: paired steps over the weighted joint
//! objective with alternating discriminator updates, interleaved
//! recipe-only self-supervised steps, the loss-flag ablation matrix,
//! the batch-size sweep harness, checkpointing and named gradient
//! probes.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, Array4, ArrayD, Axis, IxDyn};
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::check::{check_gradients, GradCheckProbe, GradCheckReport};
use crate::autodiff::{Adam, Gradients, Module, NodeId, Param, Tape};
use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use crate::corpus::{make_batches, Batch, BatchMode, CorpusSplit, ImageTensor, Recipe};
use crate::encoders::{EncoderConfig, ImageEncoder, RecipeEncoder};
use crate::error::{Result, XmodalError};
use crate::evaluation::{
    extract_features, fid, sampled_protocol, FeatureExtractor, MetricsReport, RankMetric,
};
use crate::generation::{
    adversarial_step, generate_for_recipes, n_critic_for, GenConfig, Generator, ImageClassifier,
    ImageDiscriminator, ImageToRecipeHeads,
};
use crate::losses::{
    modality_alignment_losses, recipe_loss, retrieval_loss, total_loss_node,
    translation_image_losses, translation_recipe_losses, AdversarialForm, LossConfig, LossReport,
    Mining,
};
use crate::nn::TanhMlp;
use crate::rng::{seeded, stream, Rng};

// ----- configuration -----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub use_rec: bool,
    pub use_ma: bool,
    pub use_trans_r: bool,
    pub use_trans_i: bool,
    pub use_recipe_only: bool,
    pub seed: u64,
    pub eval_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            lr: 1e-4,
            batch_size: 32,
            use_rec: true,
            use_ma: true,
            use_trans_r: true,
            use_trans_i: true,
            use_recipe_only: true,
            seed: 0,
            eval_every: 5,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(XmodalError::BatchTooSmall { got: self.batch_size });
        }
        if self.epochs < 1 {
            return Err(XmodalError::config("train_config", "epochs must be >= 1"));
        }
        if self.eval_every < 1 {
            return Err(XmodalError::config("train_config", "eval_every must be >= 1"));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(XmodalError::config("train_config", "lr must be finite and >= 0"));
        }
        Ok(())
    }

    /// Key-value lines in canonical (sorted-key) order.
    pub fn to_kv_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.kv_pairs() {
            out.push_str(&format!("{k}={v}\n"));
        }
        out
    }

    fn kv_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("batch_size", self.batch_size.to_string()),
            (
                "checkpoint_dir",
                self.checkpoint_dir
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_default(),
            ),
            ("epochs", self.epochs.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("lr", format!("{}", self.lr)),
            ("seed", self.seed.to_string()),
            ("use_ma", self.use_ma.to_string()),
            ("use_rec", self.use_rec.to_string()),
            ("use_recipe_only", self.use_recipe_only.to_string()),
            ("use_trans_i", self.use_trans_i.to_string()),
            ("use_trans_r", self.use_trans_r.to_string()),
        ]
    }

    /// Parses the flat key=value format; blank lines and `#` comments
    /// are skipped, unknown keys rejected. Missing keys keep defaults.
    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply_kv_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_kv_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                XmodalError::config("train_config", format!("line {}: expected key=value, got `{line}`", i + 1))
            })?;
            self.set_field(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn set_field(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| {
                XmodalError::config("train_config", format!("bad value `{v}` for key `{key}`"))
            })
        }
        match key {
            "epochs" => self.epochs = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "use_rec" => self.use_rec = parse(key, value)?,
            "use_ma" => self.use_ma = parse(key, value)?,
            "use_trans_r" => self.use_trans_r = parse(key, value)?,
            "use_trans_i" => self.use_trans_i = parse(key, value)?,
            "use_recipe_only" => self.use_recipe_only = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "checkpoint_dir" => {
                self.checkpoint_dir = if value.is_empty() { None } else { Some(PathBuf::from(value)) }
            }
            other => {
                return Err(XmodalError::config(
                    "train_config",
                    format!("unknown key `{other}`"),
                ))
            }
        }
        Ok(())
    }

    /// SHA-256 over the canonical key-value text, excluding
    /// `checkpoint_dir`: where a run stores its artifacts is not part
    /// of the run's identity, so moving the output directory must not
    /// invalidate checkpoints.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.kv_pairs() {
            if k == "checkpoint_dir" {
                continue;
            }
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(v.as_bytes());
            h.update(b"\n");
        }
        hex(&h.finalize())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 over a module's trainable parameters only (names, shapes,
/// raw values). Running statistics move legitimately during train-mode
/// forwards, so isolation assertions hash what the optimizer owns.
pub fn trainable_hash<M: Module + ?Sized>(m: &M) -> String {
    let mut h = Sha256::new();
    for p in m.params() {
        if !p.trainable {
            continue;
        }
        h.update(p.name().as_bytes());
        for d in p.value.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for x in p.value.iter() {
            h.update(x.to_le_bytes());
        }
    }
    hex(&h.finalize())
}

// ----- training state -----

/// Everything a run owns: configs, modules, optimizers, RNG streams
/// and the global step counter. Single-writer; evaluation reads
/// parameter snapshots between steps.
pub struct TrainState {
    pub cfg: TrainConfig,
    pub loss_cfg: LossConfig,
    pub enc_cfg: EncoderConfig,
    pub gen_cfg: GenConfig,
    pub rec_enc: RecipeEncoder,
    pub img_enc: ImageEncoder,
    pub generator: Generator,
    pub critic: TanhMlp,
    pub d_img: ImageDiscriminator,
    pub cls_img: ImageClassifier,
    pub i2r: ImageToRecipeHeads,
    pub main_opt: Adam,
    pub critic_opt: Adam,
    pub disc_opt: Adam,
    pub step: u64,
    pub n_critic: usize,
    pub c_ing: usize,
    rng_dropout: Rng,
    rng_adv: Rng,
    rng_noise: Rng,
}

impl TrainState {
    pub fn new(
        cfg: TrainConfig,
        enc_cfg: EncoderConfig,
        gen_cfg: GenConfig,
        loss_cfg: LossConfig,
        c_ing: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        gen_cfg.validate()?;
        loss_cfg.validate()?;
        if gen_cfg.d_ret != enc_cfg.d_ret {
            return Err(XmodalError::config(
                "train_state",
                format!("generator d_ret {} != encoder d_ret {}", gen_cfg.d_ret, enc_cfg.d_ret),
            ));
        }
        if gen_cfg.g_res != enc_cfg.image_size {
            return Err(XmodalError::config(
                "train_state",
                format!("generator resolution {} != corpus image size {}", gen_cfg.g_res, enc_cfg.image_size),
            ));
        }
        if c_ing == 0 {
            return Err(XmodalError::config("train_state", "c_ing must be positive"));
        }

        let mut rng = seeded(cfg.seed, stream::INIT);
        let rec_enc = RecipeEncoder::new(&enc_cfg, &mut rng)?;
        let img_enc = ImageEncoder::new(&enc_cfg, &mut rng)?;
        let generator = Generator::new(&gen_cfg, &mut rng)?;
        let critic = TanhMlp::new("dm", enc_cfg.d_ret, &[enc_cfg.d_ret], &mut rng);
        let d_img = ImageDiscriminator::new(&mut rng);
        let cls_img = ImageClassifier::new(gen_cfg.c_cat, &mut rng);
        let i2r = ImageToRecipeHeads::new(enc_cfg.d_model, c_ing, gen_cfg.c_cat, &mut rng);

        let n_critic = n_critic_for(loss_cfg.adversarial_form);
        Ok(TrainState {
            main_opt: Adam::new(cfg.lr),
            critic_opt: Adam::new(cfg.lr),
            disc_opt: Adam::new(cfg.lr),
            rng_dropout: seeded(cfg.seed, stream::DROPOUT),
            rng_adv: seeded(cfg.seed, stream::GP_EPSILON),
            rng_noise: seeded(cfg.seed, stream::NOISE),
            step: 0,
            n_critic,
            c_ing,
            cfg,
            loss_cfg,
            enc_cfg,
            gen_cfg,
            rec_enc,
            img_enc,
            generator,
            critic,
            d_img,
            cls_img,
            i2r,
        })
    }

    fn checkpoint_params(&self) -> Vec<&Param> {
        let mut out = self.rec_enc.params();
        out.extend(self.img_enc.params());
        out.extend(self.generator.params());
        out.extend(self.critic.params());
        out.extend(self.d_img.params());
        out.extend(self.cls_img.params());
        out.extend(self.i2r.params());
        out
    }

    fn checkpoint_params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.rec_enc.params_mut();
        out.extend(self.img_enc.params_mut());
        out.extend(self.generator.params_mut());
        out.extend(self.critic.params_mut());
        out.extend(self.d_img.params_mut());
        out.extend(self.cls_img.params_mut());
        out.extend(self.i2r.params_mut());
        out
    }

    pub fn save(&self, path: &Path, best_med_r: Option<f64>) -> Result<()> {
        save_checkpoint(path, &self.cfg.fingerprint(), self.step, best_med_r, &self.checkpoint_params())
    }

    /// Loads parameters and optimizer moments, restoring the step
    /// counter so a resumed log continues its numbering.
    pub fn restore(&mut self, path: &Path) -> Result<CheckpointMeta> {
        let fp = self.cfg.fingerprint();
        let meta = load_checkpoint(path, &fp, self.checkpoint_params_mut())?;
        self.step = meta.step;
        Ok(meta)
    }
}

// ----- run log -----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RunRecord {
    Meta { fingerprint: String, config: TrainConfig },
    Step { step: u64, epoch: usize, mode: String, losses: LossReport, wall_ms: u64 },
    Eval { step: u64, epoch: usize, metrics: MetricsReport, wall_ms: u64 },
}

/// Append-only record stream, optionally mirrored to a JSON-lines file
/// as records are produced.
pub struct RunLog {
    pub records: Vec<RunRecord>,
    sink: Option<std::io::BufWriter<std::fs::File>>,
}

impl RunLog {
    pub fn new(path: Option<&Path>) -> Result<Self> {
        let sink = match path {
            Some(p) => Some(std::io::BufWriter::new(std::fs::File::create(p)?)),
            None => None,
        };
        Ok(RunLog { records: Vec::new(), sink })
    }

    fn push(&mut self, rec: RunRecord) -> Result<()> {
        if let Some(sink) = &mut self.sink {
            let line = serde_json::to_string(&rec)
                .map_err(|e| XmodalError::validation("run_log", e.to_string()))?;
            writeln!(sink, "{line}")?;
            sink.flush()?;
        }
        self.records.push(rec);
        Ok(())
    }

    pub fn step_reports(&self) -> impl Iterator<Item = (&str, &LossReport)> {
        self.records.iter().filter_map(|r| match r {
            RunRecord::Step { mode, losses, .. } => Some((mode.as_str(), losses)),
            _ => None,
        })
    }

    pub fn eval_reports(&self) -> impl Iterator<Item = &MetricsReport> {
        self.records.iter().filter_map(|r| match r {
            RunRecord::Eval { metrics, .. } => Some(metrics),
            _ => None,
        })
    }
}

// ----- steps -----

/// One paired optimization step. Discriminator-side updates run first
/// against the current encoders/generator; the joint objective then
/// updates encoders, generator and translation heads against the
/// discriminators as just left. Disabled loss terms contribute exactly
/// zero and never touch their dedicated parameters.
pub fn training_step(state: &mut TrainState, batch: &Batch) -> Result<LossReport> {
    if batch.mode != BatchMode::Paired {
        return Err(XmodalError::validation("training_step", "requires a paired batch"));
    }
    let images = batch
        .images
        .as_ref()
        .ok_or_else(|| XmodalError::validation("training_step", "paired batch has no images"))?;

    if state.cfg.use_ma || state.cfg.use_trans_r {
        let n_critic = if state.cfg.use_ma { state.n_critic } else { 0 };
        adversarial_step(
            batch,
            &state.rec_enc,
            &state.img_enc,
            &state.generator,
            &mut state.critic,
            &mut state.d_img,
            &mut state.cls_img,
            &state.critic_opt,
            &state.disc_opt,
            &state.loss_cfg,
            n_critic,
            state.cfg.use_trans_r,
            &mut state.rng_adv,
        )?;
    }

    let mut t = Tape::new();
    let emb = state.rec_enc.encode_batch(&mut t, &batch.recipes, true, &mut state.rng_dropout)?;
    let r_ret = state.rec_enc.to_retrieval(&mut t, emb.r);
    let e_v = state.img_enc.encode_batch(&mut t, images, true, &mut state.rng_dropout)?;
    let v_ret = state.img_enc.to_retrieval(&mut t, e_v);

    let l_ret = retrieval_loss(&mut t, v_ret, r_ret, state.loss_cfg.margin, state.loss_cfg.mining)?;

    let l_rec = if state.cfg.use_rec {
        Some(recipe_loss(&mut t, &state.rec_enc, emb.e_ttl, emb.e_ing, emb.e_ins, state.loss_cfg.margin)?)
    } else {
        None
    };

    let l_ma = if state.cfg.use_ma {
        let ma = modality_alignment_losses(&mut t, v_ret, r_ret, &state.critic, &state.loss_cfg, &mut state.rng_adv)?;
        Some(ma.encoder_loss)
    } else {
        None
    };

    let trans_r = if state.cfg.use_trans_r {
        let b = batch.len();
        let z = if state.gen_cfg.d_noise == 0 {
            r_ret
        } else {
            let normal = rand_distr::Normal::new(0.0, 1.0).unwrap();
            let noise = ArrayD::from_shape_fn(IxDyn(&[b, state.gen_cfg.d_noise]), |_| {
                normal.sample(&mut state.rng_noise)
            });
            let noise = t.constant(noise);
            t.concat(1, &[r_ret, noise])
        };
        let fake = state.generator.forward(&mut t, z)?;
        let real = t.constant(images.clone().into_dyn());
        let d_fake = state.d_img.forward(&mut t, fake);
        let d_real = state.d_img.forward(&mut t, real);
        let cls_fake = state.cls_img.forward(&mut t, fake);
        let cls_real = state.cls_img.forward(&mut t, real);
        Some(translation_recipe_losses(&mut t, d_fake, d_real, cls_fake, cls_real, &batch.categories, &state.loss_cfg)?)
    } else {
        None
    };

    let trans_i = if state.cfg.use_trans_i {
        let (ing_logits, cls_logits) = state.i2r.forward(&mut t, e_v);
        Some(translation_image_losses(&mut t, ing_logits, cls_logits, &batch.ingredient_multihot, &batch.categories)?)
    } else {
        None
    };

    let total = total_loss_node(
        &mut t,
        &state.loss_cfg,
        l_rec,
        l_ma,
        trans_r.as_ref().map(|x| x.l_trans_r),
        trans_i.as_ref().map(|x| x.l_trans_i),
        l_ret,
    );

    let read = |n: Option<NodeId>| n.map_or(0.0, |n| t.scalar(n));
    let report = LossReport::compose(
        &state.loss_cfg,
        read(l_rec),
        t.scalar(l_ret),
        read(l_ma),
        read(trans_r.as_ref().map(|x| x.l_r2i)),
        read(trans_r.as_ref().map(|x| x.l_cls_r2i)),
        read(trans_i.as_ref().map(|x| x.l_i2r)),
        read(trans_i.as_ref().map(|x| x.l_cls_i2r)),
    )?;

    let grads = t.backward(total);
    state.main_opt.step(&mut state.rec_enc, &grads);
    state.main_opt.step(&mut state.img_enc, &grads);
    state.main_opt.step(&mut state.generator, &grads);
    state.main_opt.step(&mut state.i2r, &grads);
    state.step += 1;
    Ok(report)
}

/// One self-supervised step on recipes without images: the weighted
/// component loss alone, updating only the recipe encoder and its
/// projection heads.
pub fn recipe_only_step(state: &mut TrainState, batch: &Batch) -> Result<LossReport> {
    if batch.mode != BatchMode::RecipeOnly {
        return Err(XmodalError::validation("recipe_only_step", "requires a recipe-only batch"));
    }
    if !(state.cfg.use_rec && state.cfg.use_recipe_only) {
        return Err(XmodalError::Scheduling(
            "recipe-only step requires use_rec and use_recipe_only".to_string(),
        ));
    }

    let mut t = Tape::new();
    let emb = state.rec_enc.encode_batch(&mut t, &batch.recipes, true, &mut state.rng_dropout)?;
    let l_rec = recipe_loss(&mut t, &state.rec_enc, emb.e_ttl, emb.e_ing, emb.e_ins, state.loss_cfg.margin)?;
    let total = t.scale(l_rec, state.loss_cfg.lambda1);

    let report = LossReport::compose(&state.loss_cfg, t.scalar(l_rec), 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)?;

    let grads = t.backward(total);
    state.main_opt.step(&mut state.rec_enc, &grads);
    state.step += 1;
    Ok(report)
}

// ----- evaluation plumbing -----

fn stack_images(recipes: &[Recipe], context: &'static str) -> Result<Array4<f64>> {
    let first = recipes
        .first()
        .and_then(|r| r.image.as_ref())
        .ok_or_else(|| XmodalError::validation(context, "no recipes with images"))?;
    let (c, hh, ww) = first.pixels.dim();
    let mut out = Array4::zeros((recipes.len(), c, hh, ww));
    for (i, r) in recipes.iter().enumerate() {
        let img = r
            .image
            .as_ref()
            .ok_or_else(|| XmodalError::validation(context, format!("recipe `{}` has no image", r.id)))?;
        if img.pixels.dim() != (c, hh, ww) {
            return Err(XmodalError::validation(context, format!("recipe `{}` image size differs", r.id)));
        }
        out.index_axis_mut(Axis(0), i).assign(&img.pixels);
    }
    Ok(out)
}

/// Deterministic eval-mode retrieval embeddings for a paired split,
/// computed in fixed-size chunks: (image rows, recipe rows),
/// index-aligned.
pub fn encode_paired_eval(state: &TrainState, recipes: &[Recipe]) -> Result<(Array2<f64>, Array2<f64>)> {
    if recipes.is_empty() {
        return Err(XmodalError::validation("encode_paired_eval", "empty split"));
    }
    let d = state.enc_cfg.d_ret;
    let mut v = Array2::zeros((recipes.len(), d));
    let mut r = Array2::zeros((recipes.len(), d));
    let mut row = 0;
    for chunk in recipes.chunks(64) {
        let images = stack_images(chunk, "encode_paired_eval")?;
        let mut t = Tape::new();
        let mut dummy = seeded(0, stream::DROPOUT);
        let e_v = state.img_enc.encode_batch(&mut t, &images, false, &mut dummy)?;
        let v_ret = state.img_enc.to_retrieval(&mut t, e_v);
        let emb = state.rec_enc.encode_batch(&mut t, chunk, false, &mut dummy)?;
        let r_ret = state.rec_enc.to_retrieval(&mut t, emb.r);
        let vv = t.value(v_ret);
        let rv = t.value(r_ret);
        for i in 0..chunk.len() {
            for j in 0..d {
                v[[row + i, j]] = vv[[i, j]];
                r[[row + i, j]] = rv[[i, j]];
            }
        }
        row += chunk.len();
    }
    Ok((v, r))
}

/// Eval-mode component loss on a held-out recipe split; measures how
/// well the projection heads map between component spaces.
pub fn held_out_recipe_loss(state: &TrainState, recipes: &[Recipe]) -> Result<f64> {
    if recipes.len() < 2 {
        return Err(XmodalError::BatchTooSmall { got: recipes.len() });
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for chunk in recipes.chunks(64) {
        if chunk.len() < 2 {
            continue;
        }
        let mut t = Tape::new();
        let mut dummy = seeded(0, stream::DROPOUT);
        let emb = state.rec_enc.encode_batch(&mut t, chunk, false, &mut dummy)?;
        let l = recipe_loss(&mut t, &state.rec_enc, emb.e_ttl, emb.e_ing, emb.e_ins, state.loss_cfg.margin)?;
        total += t.scalar(l) * chunk.len() as f64;
        n += chunk.len();
    }
    Ok(total / n as f64)
}

fn run_eval(state: &TrainState, val: &[Recipe]) -> Result<MetricsReport> {
    let (v, r) = encode_paired_eval(state, val)?;
    sampled_protocol(&v, &r, val.len(), 1, state.cfg.seed, RankMetric::Euclidean)
}

// ----- the loop -----

struct EpochPlan {
    paired: Vec<Batch>,
    recipe_only: Option<Vec<Batch>>,
}

fn plan_epoch(state: &TrainState, split: &CorpusSplit, epoch: usize) -> Result<EpochPlan> {
    let b = state.cfg.batch_size;
    let paired = make_batches(
        &split.train_paired,
        b,
        BatchMode::Paired,
        state.c_ing,
        state.cfg.seed.wrapping_add(epoch as u64),
    )?;
    let recipe_only = if state.cfg.use_rec && state.cfg.use_recipe_only {
        Some(make_batches(
            &split.train_recipe_only,
            b,
            BatchMode::RecipeOnly,
            state.c_ing,
            state.cfg.seed.wrapping_add(1_000_000 + epoch as u64),
        )?)
    } else {
        None
    };
    Ok(EpochPlan { paired, recipe_only })
}

/// Runs the configured number of epochs: every paired step is followed
/// by one recipe-only step when that path is enabled (recipe-only
/// batches recycle if that split is smaller), with validation
/// retrieval metrics every `eval_every` epochs and after the final
/// one. The best image-to-recipe median rank triggers a checkpoint at
/// `checkpoint_dir/best.ckpt` when a directory is configured.
pub fn train(state: &mut TrainState, split: &CorpusSplit, log_path: Option<&Path>) -> Result<RunLog> {
    if split.val_paired.is_empty() {
        return Err(XmodalError::config("train", "empty validation split"));
    }
    let mut log = RunLog::new(log_path)?;
    log.push(RunRecord::Meta { fingerprint: state.cfg.fingerprint(), config: state.cfg.clone() })?;
    let mut best: Option<f64> = None;

    for epoch in 0..state.cfg.epochs {
        let plan = plan_epoch(state, split, epoch)?;
        let mut ro_idx = 0usize;
        for batch in &plan.paired {
            let t0 = Instant::now();
            let losses = training_step(state, batch)?;
            log.push(RunRecord::Step {
                step: state.step,
                epoch,
                mode: "paired".to_string(),
                losses,
                wall_ms: t0.elapsed().as_millis() as u64,
            })?;
            if let Some(ro) = &plan.recipe_only {
                let rb = &ro[ro_idx % ro.len()];
                ro_idx += 1;
                let t0 = Instant::now();
                let losses = recipe_only_step(state, rb)?;
                log.push(RunRecord::Step {
                    step: state.step,
                    epoch,
                    mode: "recipe_only".to_string(),
                    losses,
                    wall_ms: t0.elapsed().as_millis() as u64,
                })?;
            }
        }

        let last = epoch + 1 == state.cfg.epochs;
        if (epoch + 1) % state.cfg.eval_every == 0 || last {
            let t0 = Instant::now();
            let metrics = run_eval(state, &split.val_paired)?;
            let med = metrics.image_to_recipe.mean.med_r;
            log.push(RunRecord::Eval {
                step: state.step,
                epoch,
                metrics,
                wall_ms: t0.elapsed().as_millis() as u64,
            })?;
            if best.map_or(true, |b| med < b) {
                best = Some(med);
                if let Some(dir) = state.cfg.checkpoint_dir.clone() {
                    std::fs::create_dir_all(&dir)?;
                    state.save(&dir.join("best.ckpt"), best)?;
                }
            }
        }
    }
    Ok(log)
}

/// Step-budget variant for sweeps: runs exactly `total_paired_steps`
/// paired steps (cycling epochs as needed, no evaluation), so runs
/// with different batch sizes see the same number of optimizer
/// updates.
pub fn train_for_steps(
    state: &mut TrainState,
    split: &CorpusSplit,
    total_paired_steps: usize,
    log_path: Option<&Path>,
) -> Result<RunLog> {
    let mut log = RunLog::new(log_path)?;
    log.push(RunRecord::Meta { fingerprint: state.cfg.fingerprint(), config: state.cfg.clone() })?;
    let mut done = 0usize;
    let mut epoch = 0usize;
    while done < total_paired_steps {
        let plan = plan_epoch(state, split, epoch)?;
        let mut ro_idx = 0usize;
        for batch in &plan.paired {
            if done >= total_paired_steps {
                break;
            }
            let t0 = Instant::now();
            let losses = training_step(state, batch)?;
            log.push(RunRecord::Step {
                step: state.step,
                epoch,
                mode: "paired".to_string(),
                losses,
                wall_ms: t0.elapsed().as_millis() as u64,
            })?;
            done += 1;
            if let Some(ro) = &plan.recipe_only {
                let rb = &ro[ro_idx % ro.len()];
                ro_idx += 1;
                let t0 = Instant::now();
                let losses = recipe_only_step(state, rb)?;
                log.push(RunRecord::Step {
                    step: state.step,
                    epoch,
                    mode: "recipe_only".to_string(),
                    losses,
                    wall_ms: t0.elapsed().as_millis() as u64,
                })?;
            }
        }
        epoch += 1;
    }
    Ok(log)
}

// ----- batch-size sweep -----

/// JSON has no NaN; failed-run metrics round-trip as null.
mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub batch_size: usize,
    #[serde(rename = "medR_i2r", with = "nan_as_null")]
    pub med_r_i2r: f64,
    #[serde(with = "nan_as_null")]
    pub r1_i2r: f64,
    #[serde(with = "nan_as_null")]
    pub r5_i2r: f64,
    #[serde(with = "nan_as_null")]
    pub r10_i2r: f64,
    #[serde(rename = "medR_r2i", with = "nan_as_null")]
    pub med_r_r2i: f64,
    #[serde(with = "nan_as_null")]
    pub r1_r2i: f64,
    #[serde(with = "nan_as_null")]
    pub r5_r2i: f64,
    #[serde(with = "nan_as_null")]
    pub r10_r2i: f64,
    #[serde(with = "nan_as_null")]
    pub fid: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub total_steps: usize,
    pub seed: u64,
}

fn sweep_one(
    cfg: &TrainConfig,
    enc_cfg: &EncoderConfig,
    gen_cfg: &GenConfig,
    loss_cfg: &LossConfig,
    c_ing: usize,
    split: &CorpusSplit,
    total_steps: usize,
) -> Result<SweepRow> {
    let mut state = TrainState::new(cfg.clone(), enc_cfg.clone(), gen_cfg.clone(), loss_cfg.clone(), c_ing)?;
    train_for_steps(&mut state, split, total_steps, None)?;

    let (v, r) = encode_paired_eval(&state, &split.test_paired)?;
    let m = sampled_protocol(&v, &r, split.test_paired.len(), 1, cfg.seed, RankMetric::Euclidean)?;

    let n_fid = split.test_paired.len().min(128);
    let generated = generate_for_recipes(&state.rec_enc, &state.generator, &split.test_paired[..n_fid], cfg.seed)?;
    let gen_imgs: Vec<ImageTensor> = generated.into_iter().map(|(_, img)| img).collect();
    let real_imgs: Vec<ImageTensor> = split.test_paired[..n_fid]
        .iter()
        .map(|rec| rec.image.clone().expect("paired test split"))
        .collect();
    let f_real = extract_features(&real_imgs, &FeatureExtractor::RawPool)?;
    let f_gen = extract_features(&gen_imgs, &FeatureExtractor::RawPool)?;
    let fid_value = fid(&f_real.features, &f_gen.features)?;

    Ok(SweepRow {
        batch_size: cfg.batch_size,
        med_r_i2r: m.image_to_recipe.mean.med_r,
        r1_i2r: m.image_to_recipe.mean.r1,
        r5_i2r: m.image_to_recipe.mean.r5,
        r10_i2r: m.image_to_recipe.mean.r10,
        med_r_r2i: m.recipe_to_image.mean.med_r,
        r1_r2i: m.recipe_to_image.mean.r1,
        r5_r2i: m.recipe_to_image.mean.r5,
        r10_r2i: m.recipe_to_image.mean.r10,
        fid: fid_value,
        error: None,
    })
}

/// Trains one fresh model per batch size under an equal optimizer-step
/// budget and scores each on the test split (retrieval both ways plus
/// image FID against up to 128 real test images). A failing size
/// yields a row with NaN metrics and the error message; the sweep
/// continues.
pub fn batch_size_sweep(
    cfg: &TrainConfig,
    enc_cfg: &EncoderConfig,
    gen_cfg: &GenConfig,
    loss_cfg: &LossConfig,
    c_ing: usize,
    sizes: &[usize],
    split: &CorpusSplit,
    total_steps: usize,
) -> Result<SweepReport> {
    if sizes.is_empty() {
        return Err(XmodalError::config("batch_size_sweep", "no batch sizes given"));
    }
    let mut rows = Vec::with_capacity(sizes.len());
    for &b in sizes {
        let mut run_cfg = cfg.clone();
        run_cfg.batch_size = b;
        run_cfg.checkpoint_dir = None;
        match sweep_one(&run_cfg, enc_cfg, gen_cfg, loss_cfg, c_ing, split, total_steps) {
            Ok(row) => rows.push(row),
            Err(e) => rows.push(SweepRow {
                batch_size: b,
                med_r_i2r: f64::NAN,
                r1_i2r: f64::NAN,
                r5_i2r: f64::NAN,
                r10_i2r: f64::NAN,
                med_r_r2i: f64::NAN,
                r1_r2i: f64::NAN,
                r5_r2i: f64::NAN,
                r10_r2i: f64::NAN,
                fid: f64::NAN,
                error: Some(e.to_string()),
            }),
        }
    }
    Ok(SweepReport { rows, total_steps, seed: cfg.seed })
}

const SWEEP_CSV_COLUMNS: [&str; 10] = [
    "batch_size",
    "medR_i2r",
    "r1_i2r",
    "r5_i2r",
    "r10_i2r",
    "medR_r2i",
    "r1_r2i",
    "r5_r2i",
    "r10_r2i",
    "fid",
];

/// Renders the sweep as a standalone SVG: median rank and R@1
/// (image-to-recipe) against batch size, one point per successful row.
pub fn sweep_plot_svg(report: &SweepReport) -> String {
    let (w, h, ml, mb, mt, mr) = (640.0, 400.0, 60.0, 50.0, 30.0, 20.0);
    let plot_w = w - ml - mr;
    let plot_h = h - mt - mb;
    let valid: Vec<&SweepRow> = report.rows.iter().filter(|r| r.med_r_i2r.is_finite()).collect();

    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    ));
    s.push_str(&format!(
        "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n<line x1=\"{ml}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n<line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{}\" stroke=\"black\"/>\n",
        h - mb, w - mr, h - mb, h - mb
    ));
    s.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"13\">batch size</text>\n",
        ml + plot_w / 2.0,
        h - 12.0
    ));

    if !valid.is_empty() {
        let bs: Vec<f64> = valid.iter().map(|r| r.batch_size as f64).collect();
        let (bmin, bmax) = (bs.iter().cloned().fold(f64::INFINITY, f64::min), bs.iter().cloned().fold(0.0, f64::max));
        let x_of = |b: f64| {
            if (bmax - bmin).abs() < 1e-12 {
                ml + plot_w / 2.0
            } else {
                ml + (b - bmin) / (bmax - bmin) * plot_w
            }
        };
        let series: [(&str, &str, Vec<f64>); 2] = [
            ("medR (image-to-recipe)", "#d62728", valid.iter().map(|r| r.med_r_i2r).collect()),
            ("R@1 (image-to-recipe)", "#1f77b4", valid.iter().map(|r| r.r1_i2r).collect()),
        ];
        for (si, (label, color, ys)) in series.iter().enumerate() {
            let ymax = ys.iter().cloned().fold(0.0_f64, f64::max).max(1e-12);
            let y_of = |y: f64| h - mb - (y / ymax) * plot_h;
            let pts: Vec<String> = bs.iter().zip(ys).map(|(&b, &y)| format!("{:.1},{:.1}", x_of(b), y_of(y))).collect();
            s.push_str(&format!(
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
                pts.join(" ")
            ));
            for ((&b, &y), row) in bs.iter().zip(ys).zip(&valid) {
                s.push_str(&format!(
                    "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"{color}\"/>\n<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\" fill=\"{color}\">B={} {:.2}</text>\n",
                    x_of(b),
                    y_of(y),
                    x_of(b) + 5.0,
                    y_of(y) - 5.0,
                    row.batch_size,
                    y
                ));
            }
            s.push_str(&format!(
                "<text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{color}\">{label}</text>\n",
                ml + 10.0,
                mt + 15.0 + 16.0 * si as f64
            ));
        }
    } else {
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"13\">no successful runs</text>\n",
            w / 2.0,
            h / 2.0
        ));
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `sweep.json`, `sweep.csv` (the fixed ten-column schema) and
/// `sweep.svg` into `dir`; returns the three paths.
pub fn write_sweep_files(report: &SweepReport, dir: &Path) -> Result<(PathBuf, PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir)?;
    let json_path = dir.join("sweep.json");
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| XmodalError::validation("write_sweep_files", e.to_string()))?;
    std::fs::write(&json_path, json)?;

    let csv_path = dir.join("sweep.csv");
    let mut w = csv::Writer::from_path(&csv_path)
        .map_err(|e| XmodalError::validation("write_sweep_files", e.to_string()))?;
    let io_like = |e: csv::Error| XmodalError::validation("write_sweep_files", e.to_string());
    w.write_record(SWEEP_CSV_COLUMNS).map_err(io_like)?;
    for r in &report.rows {
        w.write_record([
            r.batch_size.to_string(),
            format!("{}", r.med_r_i2r),
            format!("{}", r.r1_i2r),
            format!("{}", r.r5_i2r),
            format!("{}", r.r10_i2r),
            format!("{}", r.med_r_r2i),
            format!("{}", r.r1_r2i),
            format!("{}", r.r5_r2i),
            format!("{}", r.r10_r2i),
            format!("{}", r.fid),
        ])
        .map_err(io_like)?;
    }
    w.flush()?;

    let svg_path = dir.join("sweep.svg");
    std::fs::write(&svg_path, sweep_plot_svg(report))?;
    Ok((json_path, csv_path, svg_path))
}

// ----- gradient probes -----

pub fn gradient_probe_names() -> &'static [&'static str] {
    &[
        "constant",
        "l_rec",
        "l_ret",
        "l_ret_all_negatives",
        "l_ma_critic",
        "l_ma_critic_log_form",
        "l_ma_encoder",
        "l_ma_encoder_log_form",
        "l_r2i",
        "l_cls_r2i",
        "l_i2r",
        "l_cls_i2r",
        "l_trans_i",
        "l_trans_r",
    ]
}

struct FnProbe<F>
where
    F: Fn(&[Param]) -> (Tape, NodeId),
{
    params: Vec<Param>,
    build: F,
}

impl<F> GradCheckProbe for FnProbe<F>
where
    F: Fn(&[Param]) -> (Tape, NodeId),
{
    fn params(&mut self) -> Vec<&mut Param> {
        self.params.iter_mut().collect()
    }
    fn loss(&mut self) -> f64 {
        let (t, root) = (self.build)(&self.params);
        t.scalar(root)
    }
    fn grads(&mut self) -> Gradients {
        let (t, root) = (self.build)(&self.params);
        t.backward(root)
    }
}

fn probe_randn(shape: &[usize], seed: u64) -> ArrayD<f64> {
    let mut rng = seeded(seed, stream::INIT);
    let normal = rand_distr::Normal::new(0.0, 1.0).unwrap();
    ArrayD::from_shape_fn(IxDyn(shape), |_| normal.sample(&mut rng))
}

fn run_probe<F>(params: Vec<Param>, build: F) -> GradCheckReport
where
    F: Fn(&[Param]) -> (Tape, NodeId),
{
    let mut probe = FnProbe { params, build };
    check_gradients(&mut probe, 1e-4)
}

fn probe_encoder(seed: u64) -> RecipeEncoder {
    let mut cfg = EncoderConfig::tiny(24);
    cfg.d_model = 8;
    cfg.d_ret = 8;
    let mut enc = RecipeEncoder::new(&cfg, &mut seeded(5, stream::INIT)).expect("tiny encoder");
    for (k, head) in enc.heads.iter_mut().enumerate() {
        head.w.value.assign(&probe_randn(&[8, 8], 900 + seed * 10 + k as u64));
    }
    enc
}

fn build_probe_report(name: &str, seed: u64) -> Result<GradCheckReport> {
    let loss_cfg = LossConfig::default();
    match name {
        "constant" => Ok(run_probe(vec![Param::new("x", probe_randn(&[3], seed + 1))], |_params| {
            let mut t = Tape::new();
            let root = t.scalar_const(5.0);
            (t, root)
        })),
        "l_ret" | "l_ret_all_negatives" => {
            let params = vec![
                Param::new("v", probe_randn(&[4, 8], seed * 100 + 1)),
                Param::new("r", probe_randn(&[4, 8], seed * 100 + 2)),
            ];
            let margin = loss_cfg.margin;
            let mining = if name == "l_ret" { Mining::HardestInBatch } else { Mining::AllNegatives };
            Ok(run_probe(params, move |params| {
                let mut t = Tape::new();
                let v = t.param(&params[0]);
                let r = t.param(&params[1]);
                let root = retrieval_loss(&mut t, v, r, margin, mining).expect("probe shapes");
                (t, root)
            }))
        }
        "l_rec" => {
            let enc = std::rc::Rc::new(std::cell::RefCell::new(probe_encoder(seed)));
            let mut params = vec![
                Param::new("e_ttl", probe_randn(&[4, 8], seed * 1000 + 1)),
                Param::new("e_ing", probe_randn(&[4, 8], seed * 1000 + 2)),
                Param::new("e_ins", probe_randn(&[4, 8], seed * 1000 + 3)),
            ];
            params.extend(enc.borrow().heads.iter().map(|h| h.w.clone()));
            let margin = loss_cfg.margin;
            Ok(run_probe(params, move |params| {
                let mut e = enc.borrow_mut();
                for (head, p) in e.heads.iter_mut().zip(&params[3..]) {
                    head.w.value.assign(&p.value);
                }
                let mut t = Tape::new();
                let ettl = t.param(&params[0]);
                let eing = t.param(&params[1]);
                let eins = t.param(&params[2]);
                let root = recipe_loss(&mut t, &e, ettl, eing, eins, margin).expect("probe shapes");
                (t, root)
            }))
        }
        "l_ma_critic" | "l_ma_encoder" | "l_ma_critic_log_form" | "l_ma_encoder_log_form" => {
            let critic = TanhMlp::new("dm", 6, &[5], &mut seeded(seed, stream::INIT));
            let vv = probe_randn(&[3, 6], seed * 100 + 1);
            let rv = probe_randn(&[3, 6], seed * 100 + 2);
            let critic_side = name.starts_with("l_ma_critic");
            // The penalty's interpolation points are sampled data, not
            // graph inputs, so the critic-side probe perturbs only
            // critic weights; the encoder side has no penalty term and
            // can probe everything.
            let mut params = if critic_side {
                Vec::new()
            } else {
                vec![Param::new("v", vv.clone()), Param::new("r", rv.clone())]
            };
            params.extend(critic.params().into_iter().cloned());
            let mut cfg2 = loss_cfg.clone();
            if name.ends_with("log_form") {
                cfg2.adversarial_form = AdversarialForm::LogForm;
            } else {
                // Both Wasserstein terms are invariant to the critic's
                // output bias (the mean difference cancels it and the
                // penalty sees only input gradients), so its analytic
                // gradient is exactly zero and finite differences on it
                // measure rounding noise against the 1e-8 floor.
                for p in params.iter_mut() {
                    if p.value.shape() == [1] {
                        p.trainable = false;
                    }
                }
            }
            Ok(run_probe(params, move |params| {
                let mut c = TanhMlp::new("dm", 6, &[5], &mut seeded(seed, stream::INIT));
                let skip = if critic_side { 0 } else { 2 };
                for (slot, p) in c.params_mut().into_iter().zip(&params[skip..]) {
                    slot.value.assign(&p.value);
                }
                let mut t = Tape::new();
                let (v, r) = if critic_side {
                    (t.constant(vv.clone()), t.constant(rv.clone()))
                } else {
                    (t.param(&params[0]), t.param(&params[1]))
                };
                let mut gp_rng = seeded(seed.wrapping_add(999), stream::GP_EPSILON);
                let ma = modality_alignment_losses(&mut t, v, r, &c, &cfg2, &mut gp_rng).expect("probe shapes");
                let root = if critic_side { ma.critic_loss } else { ma.encoder_loss };
                (t, root)
            }))
        }
        "l_trans_r" | "l_r2i" | "l_cls_r2i" => {
            let params = vec![
                Param::new("d_fake", probe_randn(&[4, 1], seed * 10 + 1)),
                Param::new("d_real", probe_randn(&[4, 1], seed * 10 + 2)),
                Param::new("cls_fake", probe_randn(&[4, 3], seed * 10 + 3)),
                Param::new("cls_real", probe_randn(&[4, 3], seed * 10 + 4)),
            ];
            let cfg2 = loss_cfg.clone();
            let pick = match name {
                "l_r2i" => 0,
                "l_cls_r2i" => 1,
                _ => 2,
            };
            Ok(run_probe(params, move |params| {
                let mut t = Tape::new();
                let d_fake = t.param(&params[0]);
                let d_real = t.param(&params[1]);
                let cls_fake = t.param(&params[2]);
                let cls_real = t.param(&params[3]);
                let out = translation_recipe_losses(&mut t, d_fake, d_real, cls_fake, cls_real, &[0, 1, 2, 0], &cfg2)
                    .expect("probe shapes");
                let root = match pick {
                    0 => out.l_r2i,
                    1 => out.l_cls_r2i,
                    _ => t.add(out.l_trans_r, out.d_loss),
                };
                (t, root)
            }))
        }
        "l_trans_i" | "l_i2r" | "l_cls_i2r" => {
            let params = vec![
                Param::new("ing_logits", probe_randn(&[4, 6], seed * 10 + 5)),
                Param::new("cls_logits", probe_randn(&[4, 3], seed * 10 + 6)),
            ];
            let multihot = probe_randn(&[4, 6], seed * 10 + 7).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
            let multihot = multihot.into_dimensionality::<ndarray::Ix2>().expect("2-d");
            let pick = match name {
                "l_i2r" => 0,
                "l_cls_i2r" => 1,
                _ => 2,
            };
            Ok(run_probe(params, move |params| {
                let mut t = Tape::new();
                let ing = t.param(&params[0]);
                let cls = t.param(&params[1]);
                let out = translation_image_losses(&mut t, ing, cls, &multihot, &[0, 1, 2, 0]).expect("probe shapes");
                let root = match pick {
                    0 => out.l_i2r,
                    1 => out.l_cls_i2r,
                    _ => out.l_trans_i,
                };
                (t, root)
            }))
        }
        other => Err(XmodalError::validation(
            "gradient_check",
            format!("unknown probe `{other}`; available: {}", gradient_probe_names().join(", ")),
        )),
    }
}

/// Runs one named finite-difference probe at small dimensions and
/// returns its report; a max relative error above 1e-4 is an error
/// naming the worst coordinate.
pub fn gradient_check(probe_name: &str, seed: u64) -> Result<GradCheckReport> {
    let report = build_probe_report(probe_name, seed)?;
    if !report.passes(1e-4) {
        return Err(XmodalError::validation(
            "gradient_check",
            format!("probe `{probe_name}` seed {seed} failed: {report}"),
        ));
    }
    Ok(report)
}

/// Convenience map over every registered probe.
pub fn gradient_check_all(seed: u64) -> Result<BTreeMap<String, GradCheckReport>> {
    let mut out = BTreeMap::new();
    for name in gradient_probe_names() {
        out.insert(name.to_string(), gradient_check(name, seed)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_corpus, GenSpec};

    fn world(n_train: usize, n_ro: usize, seed: u64) -> (CorpusSplit, EncoderConfig, GenConfig, LossConfig) {
        let spec = GenSpec {
            n_train_paired: n_train,
            n_val_paired: 8,
            n_test_paired: 8,
            n_recipe_only: n_ro,
            seed,
            c_cat: 4,
            c_ing: 12,
            image_size: 8,
            ..GenSpec::default()
        };
        let split = generate_synthetic_corpus(&spec).unwrap();
        let enc_cfg = EncoderConfig::tiny(split.vocab.len());
        let gen_cfg = GenConfig::tiny(enc_cfg.d_ret, 4);
        (split, enc_cfg, gen_cfg, LossConfig::default())
    }

    fn state_for(cfg: TrainConfig, w: &(CorpusSplit, EncoderConfig, GenConfig, LossConfig)) -> TrainState {
        TrainState::new(cfg, w.1.clone(), w.2.clone(), w.3.clone(), 12).unwrap()
    }

    fn paired_batch(split: &CorpusSplit, b: usize, seed: u64) -> Batch {
        make_batches(&split.train_paired, b, BatchMode::Paired, 12, seed).unwrap().remove(0)
    }

    fn ro_batch(split: &CorpusSplit, b: usize, seed: u64) -> Batch {
        make_batches(&split.train_recipe_only, b, BatchMode::RecipeOnly, 12, seed).unwrap().remove(0)
    }

    fn ret_only(cfg: &mut TrainConfig) {
        cfg.use_rec = false;
        cfg.use_ma = false;
        cfg.use_trans_r = false;
        cfg.use_trans_i = false;
        cfg.use_recipe_only = false;
    }

    fn tmp(tag: &str) -> PathBuf {
        let d = std::env::temp_dir().join(format!("xmodal-trainer-{tag}-{}", std::process::id()));
        std::fs::create_dir_all(&d).unwrap();
        d
    }

    #[test]
    fn config_kv_roundtrip_and_rejection() {
        let mut cfg = TrainConfig::default();
        cfg.batch_size = 8;
        cfg.lr = 0.002;
        cfg.use_ma = false;
        cfg.checkpoint_dir = Some(PathBuf::from("/tmp/run"));
        let text = cfg.to_kv_text();
        let back = TrainConfig::from_kv_text(&text).unwrap();
        assert_eq!(back, cfg);

        let sparse = "# comment\n\nbatch_size = 4\nuse_trans_i=false\n";
        let c = TrainConfig::from_kv_text(sparse).unwrap();
        assert_eq!(c.batch_size, 4);
        assert!(!c.use_trans_i);
        assert_eq!(c.epochs, TrainConfig::default().epochs);
        assert!(c.checkpoint_dir.is_none());

        assert!(matches!(
            TrainConfig::from_kv_text("no_such_key=1"),
            Err(XmodalError::Config { .. })
        ));
        assert!(matches!(
            TrainConfig::from_kv_text("epochs=three"),
            Err(XmodalError::Config { .. })
        ));
        assert!(matches!(
            TrainConfig::from_kv_text("just a line"),
            Err(XmodalError::Config { .. })
        ));
        assert!(matches!(
            TrainConfig::from_kv_text("batch_size=1"),
            Err(XmodalError::BatchTooSmall { got: 1 })
        ));
        assert!(matches!(
            TrainConfig::from_kv_text("epochs=0"),
            Err(XmodalError::Config { .. })
        ));
        assert!(matches!(
            TrainConfig::from_kv_text("lr=-0.1"),
            Err(XmodalError::Config { .. })
        ));
    }

    #[test]
    fn fingerprint_ignores_checkpoint_dir_only() {
        let base = TrainConfig::default();
        let mut moved = base.clone();
        moved.checkpoint_dir = Some(PathBuf::from("/elsewhere"));
        assert_eq!(base.fingerprint(), moved.fingerprint());

        for (key, value) in [
            ("batch_size", "16"),
            ("epochs", "3"),
            ("lr", "0.01"),
            ("seed", "9"),
            ("use_ma", "false"),
            ("eval_every", "2"),
        ] {
            let mut changed = base.clone();
            changed.set_field(key, value).unwrap();
            assert_ne!(base.fingerprint(), changed.fingerprint(), "{key} should change the fingerprint");
        }
    }

    #[test]
    fn retrieval_only_total_is_exactly_retrieval() {
        let w = world(8, 8, 3);
        let mut cfg = TrainConfig::default();
        cfg.batch_size = 4;
        ret_only(&mut cfg);
        let mut state = state_for(cfg, &w);
        let batch = paired_batch(&w.0, 4, 0);
        let report = training_step(&mut state, &batch).unwrap();
        assert_eq!(report.l_total, report.l_ret);
        assert!(report.l_ret > 0.0);
        for v in [
            report.l_rec,
            report.l_ma,
            report.l_r2i,
            report.l_cls_r2i,
            report.l_i2r,
            report.l_cls_i2r,
            report.l_trans_r,
            report.l_trans_i,
        ] {
            assert_eq!(v, 0.0);
        }
        assert_eq!(report.composition_residual(&w.3), 0.0);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn zero_lr_leaves_weights_and_losses_fixed() {
        let w = world(8, 8, 4);
        let mut cfg = TrainConfig::default();
        cfg.batch_size = 4;
        cfg.lr = 0.0;
        let mut state = state_for(cfg, &w);
        let batch = paired_batch(&w.0, 4, 0);

        let hashes = |s: &TrainState| {
            vec![
                trainable_hash(&s.rec_enc),
                trainable_hash(&s.img_enc),
                trainable_hash(&s.generator),
                trainable_hash(&s.critic),
                trainable_hash(&s.d_img),
                trainable_hash(&s.cls_img),
                trainable_hash(&s.i2r),
            ]
        };
        let before = hashes(&state);
        let r1 = training_step(&mut state, &batch).unwrap();
        assert_eq!(hashes(&state), before);
        let r2 = training_step(&mut state, &batch).unwrap();
        assert_eq!(hashes(&state), before);
        assert_eq!(r1, r2);
    }

    #[test]
    fn single_batch_overfit_decreases_retrieval_loss() {
        let w = world(4, 4, 5);
        let mut cfg = TrainConfig::default();
        cfg.batch_size = 4;
        cfg.lr = 1e-4;
        ret_only(&mut cfg);
        let mut state = state_for(cfg, &w);
        let batch = paired_batch(&w.0, 4, 0);

        let mut prev = f64::INFINITY;
        let mut decreases = 0;
        for _ in 0..100 {
            let r = training_step(&mut state, &batch).unwrap();
            if r.l_ret < prev {
                decreases += 1;
            }
            prev = r.l_ret;
        }
        assert!(decreases >= 90, "l_ret decreased in only {decreases}/100 steps (final {prev})");
    }

    #[test]
    fn recipe_only_touches_nothing_but_the_recipe_encoder() {
        let w = world(8, 16, 6);
        let mut cfg = TrainConfig::default();
        cfg.batch_size = 4;
        cfg.lr = 1e-3;
        let mut state = state_for(cfg, &w);
        let batch = ro_batch(&w.0, 4, 0);

        let frozen = |s: &TrainState| {
            vec![
                s.img_enc.param_hash(),
                s.generator.param_hash(),
                s.critic.param_hash(),
                s.d_img.param_hash(),
                s.cls_img.param_hash(),
                s.i2r.param_hash(),
            ]
        };
        let before_frozen = frozen(&state);
        let before_rec = state.rec_enc.param_hash();
        let report = recipe_only_step(&mut state, &batch).unwrap();
        assert_eq!(frozen(&state), before_frozen);
        assert_ne!(state.rec_enc.param_hash(), before_rec);
        assert!(report.l_rec.is_finite() && report.l_rec >= 0.0);
        assert_eq!(report.l_total, w.3.lambda1 * report.l_rec);
        assert_eq!(report.l_ret, 0.0);

        let mut off = state.cfg.clone();
        off.use_recipe_only = false;
        state.cfg = off;
        assert!(matches!(recipe_only_step(&mut state, &batch), Err(XmodalError::Scheduling(_))));
        state.cfg.use_recipe_only = true;
        state.cfg.use_rec = false;
        assert!(matches!(recipe_only_step(&mut state, &batch), Err(XmodalError::Scheduling(_))));
        state.cfg.use_rec = true;

        let paired = paired_batch(&w.0, 4, 0);
        assert!(matches!(recipe_only_step(&mut state, &paired), Err(XmodalError::Validation { .. })));
        assert!(matches!(training_step(&mut state, &batch), Err(XmodalError::Validation { .. })));
    }

    #[test]
    fn recipe_only_training_halves_held_out_component_loss() {
        let w = world(8, 256, 7);
        let mut cfg = TrainConfig::default();
        cfg.batch_size = 8;
        cfg.lr = 1e-3;
        let mut state = state_for(cfg, &w);
        let batches = make_batches(&w.0.train_recipe_only, 8, BatchMode::RecipeOnly, 12, 0).unwrap();

        let img_hash = state.img_enc.param_hash();
        let before = held_out_recipe_loss(&state, &w.0.val_paired).unwrap();
        for i in 0..500 {
            recipe_only_step(&mut state, &batches[i % batches.len()]).unwrap();
        }
        let after = held_out_recipe_loss(&state, &w.0.val_paired).unwrap();
        assert_eq!(state.img_enc.param_hash(), img_hash);
        assert!(
            after <= 0.5 * before,
            "held-out component loss went {before:.4} -> {after:.4}, less than 50% reduction"
        );
    }

    #[test]
    fn one_epoch_logs_every_scheduled_step() {
        let w = world(40, 8, 8);
        let mut cfg = TrainConfig::default();
        cfg.batch_size = 4;
        cfg.epochs = 1;
        cfg.eval_every = 1;
        let mut state = state_for(cfg, &w);
        let log = train(&mut state, &w.0, None).unwrap();

        let paired = log.step_reports().filter(|(m, _)| *m == "paired").count();
        let ro = log.step_reports().filter(|(m, _)| *m == "recipe_only").count();
        let evals = log.eval_reports().count();
        assert_eq!(paired, 10);
        assert_eq!(ro, 10);
        assert_eq!(evals, 1);
        assert!(matches!(log.records[0], RunRecord::Meta { .. }));
        assert_eq!(state.step, 20);

        for (_, r) in log.step_reports() {
            assert!(r.composition_residual(&w.3) <= 1e-9);
        }
    }

    #[test]
    fn identical_seeds_yield_identical_runs() {
        let w = world(8, 8, 9);
        let mut cfg = TrainConfig::default();
        cfg.batch_size = 4;
        cfg.epochs = 2;
        cfg.eval_every = 1;

        let run = |cfg: TrainConfig| {
            let mut state = state_for(cfg, &w);
            let log = train(&mut state, &w.0, None).unwrap();
            let losses: Vec<LossReport> = log.step_reports().map(|(_, r)| r.clone()).collect();
            let evals: Vec<String> = log.eval_reports().map(|m| serde_json::to_string(m).unwrap()).collect();
            (losses, evals)
        };
        let a = run(cfg.clone());
        let b = run(cfg);
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn checkpoint_restores_step_and_rejects_other_configs() {
        let dir = tmp("resume");
        let w = world(8, 8, 10);
        let mut cfg = TrainConfig::default();
        cfg.batch_size = 4;
        cfg.epochs = 1;
        cfg.eval_every = 1;
        cfg.checkpoint_dir = Some(dir.clone());

        let mut state = state_for(cfg.clone(), &w);
        train(&mut state, &w.0, None).unwrap();
        let ckpt = dir.join("best.ckpt");
        assert!(ckpt.exists());
        let steps_done = state.step;

        let meta = crate::checkpoint::peek_checkpoint(&ckpt).unwrap();
        assert_eq!(meta.fingerprint, cfg.fingerprint());
        assert_eq!(meta.step, steps_done);

        let mut resumed = state_for(cfg.clone(), &w);
        resumed.restore(&ckpt).unwrap();
        assert_eq!(resumed.step, steps_done);
        assert_eq!(resumed.rec_enc.param_hash(), state.rec_enc.param_hash());
        let log = train(&mut resumed, &w.0, None).unwrap();
        let first_step = log
            .records
            .iter()
            .find_map(|r| match r {
                RunRecord::Step { step, .. } => Some(*step),
                _ => None,
            })
            .unwrap();
        assert_eq!(first_step, steps_done + 1);

        let mut other_cfg = cfg.clone();
        other_cfg.batch_size = 6;
        let mut wrong = state_for(other_cfg, &w);
        assert!(matches!(wrong.restore(&ckpt), Err(XmodalError::Checkpoint(_))));

        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn disabled_flags_freeze_their_parameters() {
        let w = world(8, 8, 11);
        let batch = paired_batch(&w.0, 4, 0);

        let mut cfg = TrainConfig::default();
        cfg.batch_size = 4;
        cfg.lr = 1e-3;
        cfg.use_ma = false;
        let mut state = state_for(cfg, &w);
        let critic_hash = trainable_hash(&state.critic);
        let r = training_step(&mut state, &batch).unwrap();
        assert_eq!(trainable_hash(&state.critic), critic_hash);
        assert_eq!(r.l_ma, 0.0);

        let mut cfg = TrainConfig::default();
        cfg.batch_size = 4;
        cfg.lr = 1e-3;
        cfg.use_trans_r = false;
        let mut state = state_for(cfg, &w);
        let d_hash = trainable_hash(&state.d_img);
        let g_hash = trainable_hash(&state.generator);
        let c_hash = trainable_hash(&state.cls_img);
        let r = training_step(&mut state, &batch).unwrap();
        assert_eq!(trainable_hash(&state.d_img), d_hash);
        assert_eq!(trainable_hash(&state.generator), g_hash);
        assert_eq!(trainable_hash(&state.cls_img), c_hash);
        assert_eq!(r.l_r2i, 0.0);
        assert_eq!(r.l_cls_r2i, 0.0);
        assert_eq!(r.l_trans_r, 0.0);

        let mut cfg = TrainConfig::default();
        cfg.batch_size = 4;
        cfg.lr = 1e-3;
        cfg.use_trans_i = false;
        let mut state = state_for(cfg, &w);
        let i2r_hash = trainable_hash(&state.i2r);
        let r = training_step(&mut state, &batch).unwrap();
        assert_eq!(trainable_hash(&state.i2r), i2r_hash);
        assert_eq!(r.l_i2r, 0.0);
        assert_eq!(r.l_cls_i2r, 0.0);
        assert_eq!(r.l_trans_i, 0.0);
    }

    #[test]
    fn sweep_reports_schema_files_and_error_rows() {
        let w = world(16, 8, 12);
        let mut cfg = TrainConfig::default();
        cfg.batch_size = 4;
        cfg.lr = 1e-3;
        ret_only(&mut cfg);
        cfg.use_rec = true;

        let report = batch_size_sweep(&cfg, &w.1, &w.2, &w.3, 12, &[4, 100], &w.0, 2).unwrap();
        assert_eq!(report.rows.len(), 2);
        assert_eq!(report.total_steps, 2);

        let good = &report.rows[0];
        assert_eq!(good.batch_size, 4);
        assert!(good.error.is_none());
        for v in [
            good.med_r_i2r,
            good.r1_i2r,
            good.r5_i2r,
            good.r10_i2r,
            good.med_r_r2i,
            good.r1_r2i,
            good.r5_r2i,
            good.r10_r2i,
            good.fid,
        ] {
            assert!(v.is_finite());
        }
        assert!(good.fid >= 0.0);

        let bad = &report.rows[1];
        assert_eq!(bad.batch_size, 100);
        assert!(bad.error.is_some());
        assert!(bad.med_r_i2r.is_nan() && bad.fid.is_nan());

        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("\"medR_i2r\""));
        assert!(json.contains("\"medR_r2i\""));

        let dir = tmp("sweep");
        let (json_path, csv_path, svg_path) = write_sweep_files(&report, &dir).unwrap();
        let parsed: SweepReport = serde_json::from_str(&std::fs::read_to_string(&json_path).unwrap()).unwrap();
        assert_eq!(parsed.rows.len(), 2);
        let csv_text = std::fs::read_to_string(&csv_path).unwrap();
        let header = csv_text.lines().next().unwrap();
        assert_eq!(header, SWEEP_CSV_COLUMNS.join(","));
        assert_eq!(csv_text.lines().count(), 3);
        let svg = std::fs::read_to_string(&svg_path).unwrap();
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("polyline"));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn sweep_is_deterministic() {
        let w = world(8, 8, 13);
        let mut cfg = TrainConfig::default();
        cfg.batch_size = 4;
        cfg.lr = 1e-3;
        ret_only(&mut cfg);

        let a = batch_size_sweep(&cfg, &w.1, &w.2, &w.3, 12, &[4, 4], &w.0, 2).unwrap();
        assert_eq!(
            serde_json::to_string(&a.rows[0]).unwrap(),
            serde_json::to_string(&a.rows[1]).unwrap()
        );
        let b = batch_size_sweep(&cfg, &w.1, &w.2, &w.3, 12, &[4, 4], &w.0, 2).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn gradient_probe_registry() {
        let report = gradient_check("constant", 0).unwrap();
        assert_eq!(report.max_rel_err, 0.0);
        assert_eq!(report.n_coords, 3);

        let all = gradient_check_all(1).unwrap();
        assert_eq!(all.len(), gradient_probe_names().len());
        for (name, rep) in &all {
            assert!(rep.passes(1e-4), "{name}: {rep}");
        }

        let err = gradient_check("nope", 0).unwrap_err();
        assert!(matches!(err, XmodalError::Validation { .. }));
        assert!(err.to_string().contains("l_ma_critic"));
    }
}

