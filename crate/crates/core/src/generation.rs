//! Conditional image synthesis from recipe embeddings: the upsampling
//! generator, the image discriminator and category classifier that
//! shape it, the heads predicting recipe structure back from image
//! embeddings, and the alternating update schedule for everything
//! adversarial.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array4, ArrayD, Axis, IxDyn};

use crate::autodiff::{Adam, NodeId, Tape};
use crate::corpus::{Batch, BatchMode, ImageTensor, Recipe};
use crate::encoders::{ImageEncoder, RecipeEncoder};
use crate::error::{Result, XmodalError};
use crate::losses::{modality_alignment_losses, translation_recipe_losses, AdversarialForm, LossConfig};
use crate::nn::{BatchNorm2d, Conv2dLayer, Linear, TanhMlp};
use crate::rng::{seeded, stream, Rng};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct GenConfig {
    pub d_ret: usize,
    /// Extra noise inputs concatenated to the embedding; 0 makes the
    /// generator a deterministic function of the embedding.
    pub d_noise: usize,
    pub g_res: usize,
    pub c_cat: usize,
    /// Channel count at the lowest resolution; halved twice up the stack.
    pub width: usize,
}

impl GenConfig {
    pub fn desk(d_ret: usize, c_cat: usize) -> Self {
        GenConfig { d_ret, d_noise: 0, g_res: 32, c_cat, width: 32 }
    }

    pub fn tiny(d_ret: usize, c_cat: usize) -> Self {
        GenConfig { d_ret, d_noise: 0, g_res: 8, c_cat, width: 8 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_ret == 0 {
            return Err(XmodalError::config("generation", "d_ret must be positive"));
        }
        if self.g_res < 8 || self.g_res % 8 != 0 {
            return Err(XmodalError::config("generation", "g_res must be a positive multiple of 8"));
        }
        if self.width < 8 || self.width % 4 != 0 {
            return Err(XmodalError::config("generation", "width must be at least 8 and divisible by 4"));
        }
        if self.c_cat == 0 {
            return Err(XmodalError::config("generation", "c_cat must be positive"));
        }
        Ok(())
    }
}

/// Projects an embedding to a low-resolution feature map, then runs
/// three upsample/conv/norm stages and squashes to RGB in [0,1].
pub struct Generator {
    pub fc: Linear,
    pub convs: Vec<Conv2dLayer>,
    pub bns: Vec<BatchNorm2d>,
    pub out: Conv2dLayer,
    pub d_ret: usize,
    pub d_noise: usize,
    pub g_res: usize,
    base: usize,
    width: usize,
}

impl Generator {
    pub fn new(cfg: &GenConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let base = cfg.g_res / 8;
        let chans = [cfg.width, cfg.width / 2, cfg.width / 4, cfg.width / 4];
        let fc = Linear::new("gen.fc", cfg.d_ret + cfg.d_noise, chans[0] * base * base, true, rng);
        let mut convs = Vec::new();
        let mut bns = Vec::new();
        for i in 0..3 {
            convs.push(Conv2dLayer::new(&format!("gen.conv{i}"), chans[i], chans[i + 1], 3, 1, 1, rng));
            bns.push(BatchNorm2d::new(&format!("gen.bn{i}"), chans[i + 1]));
        }
        let out = Conv2dLayer::new("gen.out", chans[3], 3, 3, 1, 1, rng);
        Ok(Generator {
            fc,
            convs,
            bns,
            out,
            d_ret: cfg.d_ret,
            d_noise: cfg.d_noise,
            g_res: cfg.g_res,
            base,
            width: cfg.width,
        })
    }

    pub fn d_in(&self) -> usize {
        self.d_ret + self.d_noise
    }

    fn check_input(&self, t: &Tape, z: NodeId) -> Result<usize> {
        let shape = t.value(z).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.d_in() {
            return Err(XmodalError::validation(
                "generator",
                format!("expected input [B, {}], got {shape:?}", self.d_in()),
            ));
        }
        Ok(shape[0])
    }

    fn stack(&self, t: &mut Tape, z: NodeId, b: usize, bn: impl Fn(&mut Tape, usize, NodeId) -> NodeId) -> NodeId {
        let h = self.fc.forward(t, z);
        let h = t.relu(h);
        let mut x = t.reshape(h, &[b, self.width, self.base, self.base]);
        for i in 0..3 {
            x = t.upsample2x(x);
            x = self.convs[i].forward(t, x);
            x = bn(t, i, x);
            x = t.relu(x);
        }
        let x = self.out.forward(t, x);
        t.sigmoid(x)
    }

    /// Training-mode forward: batch-statistic normalization, running
    /// statistics updated as a side effect.
    pub fn forward(&mut self, t: &mut Tape, z: NodeId) -> Result<NodeId> {
        let b = self.check_input(t, z)?;
        // The normalization stages need &mut for their running
        // statistics, so thread them through a cell.
        let bns = std::cell::RefCell::new(std::mem::take(&mut self.bns));
        let y = self.stack(t, z, b, |t, i, x| bns.borrow_mut()[i].forward(t, x, true));
        self.bns = bns.into_inner();
        Ok(y)
    }

    /// Frozen-weight forward using running statistics; no state changes.
    pub fn forward_eval(&self, t: &mut Tape, z: NodeId) -> Result<NodeId> {
        let b = self.check_input(t, z)?;
        Ok(self.stack(t, z, b, |t, i, x| self.bns[i].forward_eval(t, x)))
    }
}

crate::impl_module_via_fields!(Generator, fc, convs, bns, out);

/// Renders one recipe embedding to an image. With `d_noise` = 0 the
/// output is a pure function of the embedding; otherwise `noise_seed`
/// selects the noise draw.
pub fn generate_image(r_ret: &[f64], g: &Generator, noise_seed: u64) -> Result<ImageTensor> {
    if r_ret.len() != g.d_ret {
        return Err(XmodalError::validation(
            "generate_image",
            format!("embedding dim {} does not match generator d_ret {}", r_ret.len(), g.d_ret),
        ));
    }
    if r_ret.iter().any(|v| !v.is_finite()) {
        return Err(XmodalError::validation("generate_image", "embedding must be finite"));
    }
    let mut z = ArrayD::zeros(IxDyn(&[1, g.d_in()]));
    for (j, &v) in r_ret.iter().enumerate() {
        z[[0, j]] = v;
    }
    if g.d_noise > 0 {
        use rand_distr::Distribution;
        let mut rng = seeded(noise_seed, stream::NOISE);
        let normal = rand_distr::Normal::new(0.0, 1.0).unwrap();
        for j in 0..g.d_noise {
            z[[0, g.d_ret + j]] = normal.sample(&mut rng);
        }
    }
    let mut t = Tape::new();
    let zn = t.constant(z);
    let out = g.forward_eval(&mut t, zn)?;
    let v = t.value(out);
    let res = g.g_res;
    let pixels = ndarray::Array3::from_shape_fn((3, res, res), |(c, y, x)| v[[0, c, y, x]]);
    Ok(ImageTensor { pixels })
}

/// PatchGAN-style scorer: strided convolutions (no normalization — the
/// penalty-free least-squares form tolerates it and the Wasserstein
/// literature advises against batch coupling in critics), global average
/// pool, one raw scalar per image.
pub struct ImageDiscriminator {
    pub c1: Conv2dLayer,
    pub c2: Conv2dLayer,
    pub c3: Conv2dLayer,
    pub fc: Linear,
}

impl ImageDiscriminator {
    pub fn new(rng: &mut Rng) -> Self {
        ImageDiscriminator {
            c1: Conv2dLayer::new("dimg.c1", 3, 8, 3, 2, 1, rng),
            c2: Conv2dLayer::new("dimg.c2", 8, 16, 3, 2, 1, rng),
            c3: Conv2dLayer::new("dimg.c3", 16, 32, 3, 2, 1, rng),
            fc: Linear::new("dimg.fc", 32, 1, true, rng),
        }
    }

    pub fn forward(&self, t: &mut Tape, images: NodeId) -> NodeId {
        let mut x = self.c1.forward(t, images);
        x = t.leaky_relu(x, 0.2);
        x = self.c2.forward(t, x);
        x = t.leaky_relu(x, 0.2);
        x = self.c3.forward(t, x);
        x = t.leaky_relu(x, 0.2);
        let p1 = t.mean_axis(x, 3);
        let pooled = t.mean_axis(p1, 2);
        self.fc.forward(t, pooled)
    }
}

crate::impl_module_via_fields!(ImageDiscriminator, c1, c2, c3, fc);

/// Category classifier over images; its pooled penultimate features
/// double as the learned feature map for distribution comparisons.
pub struct ImageClassifier {
    pub c1: Conv2dLayer,
    pub c2: Conv2dLayer,
    pub c3: Conv2dLayer,
    pub fc: Linear,
    pub c_cat: usize,
}

impl ImageClassifier {
    pub fn new(c_cat: usize, rng: &mut Rng) -> Self {
        ImageClassifier {
            c1: Conv2dLayer::new("cls.c1", 3, 8, 3, 2, 1, rng),
            c2: Conv2dLayer::new("cls.c2", 8, 16, 3, 2, 1, rng),
            c3: Conv2dLayer::new("cls.c3", 16, 32, 3, 2, 1, rng),
            fc: Linear::new("cls.fc", 32, c_cat, true, rng),
            c_cat,
        }
    }

    pub fn feature_dim(&self) -> usize {
        32
    }

    pub fn features(&self, t: &mut Tape, images: NodeId) -> NodeId {
        let mut x = self.c1.forward(t, images);
        x = t.relu(x);
        x = self.c2.forward(t, x);
        x = t.relu(x);
        x = self.c3.forward(t, x);
        x = t.relu(x);
        let p1 = t.mean_axis(x, 3);
        t.mean_axis(p1, 2)
    }

    pub fn forward(&self, t: &mut Tape, images: NodeId) -> NodeId {
        let f = self.features(t, images);
        self.fc.forward(t, f)
    }

    /// Penultimate features for a batch of images, frozen weights.
    pub fn features_batch(&self, images: &Array4<f64>) -> Array2<f64> {
        let mut t = Tape::new();
        let x = t.constant(images.clone().into_dyn());
        let f = self.features(&mut t, x);
        let v = t.value(f);
        Array2::from_shape_fn((images.shape()[0], self.feature_dim()), |(i, j)| v[[i, j]])
    }

    pub fn classify(&self, images: &Array4<f64>) -> Vec<usize> {
        let mut t = Tape::new();
        let x = t.constant(images.clone().into_dyn());
        let logits = self.forward(&mut t, x);
        let v = t.value(logits);
        (0..images.shape()[0])
            .map(|i| {
                (0..self.c_cat)
                    .max_by(|&a, &b| v[[i, a]].partial_cmp(&v[[i, b]]).unwrap())
                    .unwrap()
            })
            .collect()
    }
}

crate::impl_module_via_fields!(ImageClassifier, c1, c2, c3, fc);

/// Linear readouts predicting a recipe's ingredient set and category
/// from the image embedding.
pub struct ImageToRecipeHeads {
    pub ing: Linear,
    pub cls: Linear,
}

impl ImageToRecipeHeads {
    pub fn new(d_model: usize, c_ing: usize, c_cat: usize, rng: &mut Rng) -> Self {
        ImageToRecipeHeads {
            ing: Linear::new("i2r.ing", d_model, c_ing, true, rng),
            cls: Linear::new("i2r.cls", d_model, c_cat, true, rng),
        }
    }

    pub fn forward(&self, t: &mut Tape, v: NodeId) -> (NodeId, NodeId) {
        (self.ing.forward(t, v), self.cls.forward(t, v))
    }
}

crate::impl_module_via_fields!(ImageToRecipeHeads, ing, cls);

pub fn n_critic_for(form: AdversarialForm) -> usize {
    match form {
        AdversarialForm::WganGp => 5,
        AdversarialForm::LogForm => 1,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialStats {
    pub critic_updates: usize,
    pub disc_updates: usize,
    pub critic_loss: f64,
    pub gradient_penalty: Option<f64>,
    pub disc_loss: f64,
}

/// One discriminator-side update: the embedding critic `n_critic`
/// times, then (when `update_image_gan`) the image discriminator and
/// classifier once. Encoders and generator are read-only here — their
/// step happens elsewhere, against the discriminators frozen as left by
/// this call. `n_critic` 0 leaves the embedding critic untouched.
#[allow(clippy::too_many_arguments)]
pub fn adversarial_step(
    batch: &Batch,
    rec_enc: &RecipeEncoder,
    img_enc: &ImageEncoder,
    gen: &Generator,
    critic: &mut TanhMlp,
    d_img: &mut ImageDiscriminator,
    cls_img: &mut ImageClassifier,
    critic_opt: &Adam,
    disc_opt: &Adam,
    cfg: &LossConfig,
    n_critic: usize,
    update_image_gan: bool,
    rng: &mut Rng,
) -> Result<AdversarialStats> {
    if batch.mode != BatchMode::Paired {
        return Err(XmodalError::validation("adversarial_step", "requires a paired batch"));
    }
    let images = batch
        .images
        .as_ref()
        .ok_or_else(|| XmodalError::validation("adversarial_step", "paired batch has no images"))?;

    // Frozen-side forwards run in eval mode: the discriminators see the
    // deterministic embeddings and images, and no encoder or generator
    // state is touched.
    let (v_vals, r_vals) = {
        let mut t = Tape::new();
        let mut dummy = seeded(0, stream::DROPOUT);
        let ev = img_enc.encode_batch(&mut t, images, false, &mut dummy)?;
        let v_ret = img_enc.to_retrieval(&mut t, ev);
        let emb = rec_enc.encode_batch(&mut t, &batch.recipes, false, &mut dummy)?;
        let r_ret = rec_enc.to_retrieval(&mut t, emb.r);
        (t.value(v_ret).clone(), t.value(r_ret).clone())
    };

    let mut critic_loss = 0.0;
    let mut gradient_penalty = None;
    for _ in 0..n_critic {
        let mut t = Tape::new();
        let v = t.constant(v_vals.clone());
        let r = t.constant(r_vals.clone());
        let ma = modality_alignment_losses(&mut t, v, r, critic, cfg, rng)?;
        critic_loss = t.scalar(ma.critic_loss);
        gradient_penalty = ma.gradient_penalty.map(|n| t.scalar(n));
        if !critic_loss.is_finite() {
            return Err(XmodalError::NonFinite { term: "critic_loss".to_string() });
        }
        let grads = t.backward(ma.critic_loss);
        critic_opt.step(critic, &grads);
    }

    if !update_image_gan {
        return Ok(AdversarialStats {
            critic_updates: n_critic,
            disc_updates: 0,
            critic_loss,
            gradient_penalty,
            disc_loss: 0.0,
        });
    }

    let fake_vals = {
        let mut t = Tape::new();
        let b = r_vals.shape()[0];
        let mut z = ArrayD::zeros(IxDyn(&[b, gen.d_in()]));
        for i in 0..b {
            for j in 0..gen.d_ret {
                z[[i, j]] = r_vals[[i, j]];
            }
        }
        if gen.d_noise > 0 {
            use rand_distr::Distribution;
            let normal = rand_distr::Normal::new(0.0, 1.0).unwrap();
            for i in 0..b {
                for j in 0..gen.d_noise {
                    z[[i, gen.d_ret + j]] = normal.sample(rng);
                }
            }
        }
        let zn = t.constant(z);
        let out = gen.forward_eval(&mut t, zn)?;
        t.value(out).clone()
    };

    let mut t = Tape::new();
    let fake = t.constant(fake_vals);
    let real = t.constant(images.clone().into_dyn());
    let d_fake = d_img.forward(&mut t, fake);
    let d_real = d_img.forward(&mut t, real);
    let cls_fake = cls_img.forward(&mut t, fake);
    let cls_real = cls_img.forward(&mut t, real);
    let out = translation_recipe_losses(&mut t, d_fake, d_real, cls_fake, cls_real, &batch.categories, cfg)?;
    let disc_loss = t.scalar(out.d_loss);
    if !disc_loss.is_finite() {
        return Err(XmodalError::NonFinite { term: "disc_loss".to_string() });
    }
    let grads = t.backward(out.d_loss);
    disc_opt.step(d_img, &grads);
    disc_opt.step(cls_img, &grads);

    Ok(AdversarialStats {
        critic_updates: n_critic,
        disc_updates: 1,
        critic_loss,
        gradient_penalty,
        disc_loss,
    })
}

/// Renders an image for each recipe from its retrieval embedding.
pub fn generate_for_recipes(
    rec_enc: &RecipeEncoder,
    gen: &Generator,
    recipes: &[Recipe],
    noise_seed: u64,
) -> Result<Vec<(String, ImageTensor)>> {
    let mut t = Tape::new();
    let mut dummy = seeded(0, stream::DROPOUT);
    let emb = rec_enc.encode_batch(&mut t, recipes, false, &mut dummy)?;
    let r_ret = rec_enc.to_retrieval(&mut t, emb.r);
    let vals = t.value(r_ret);
    let mut out = Vec::with_capacity(recipes.len());
    for (i, rec) in recipes.iter().enumerate() {
        let row: Vec<f64> = vals.index_axis(Axis(0), i).iter().copied().collect();
        let img = generate_image(&row, gen, noise_seed.wrapping_add(i as u64))?;
        out.push((rec.id.clone(), img));
    }
    Ok(out)
}

/// Writes each image as 8-bit RGB `{id}.png` plus an `index.json`
/// mapping id to file name; returns the index path.
pub fn dump_generated_images(dir: &Path, items: &[(String, ImageTensor)]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut index = BTreeMap::new();
    for (id, img) in items {
        let file = format!("{id}.png");
        img.save_png(&dir.join(&file))?;
        index.insert(id.clone(), file);
    }
    let index_path = dir.join("index.json");
    let json = serde_json::to_string_pretty(&index)
        .map_err(|e| XmodalError::validation("dump_generated_images", e.to_string()))?;
    std::fs::write(&index_path, json)?;
    Ok(index_path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check::{check_gradients, GradCheckProbe};
    use crate::autodiff::{Gradients, Module, Param};
    use crate::corpus::{generate_synthetic_corpus, make_batches, GenSpec};
    use crate::encoders::EncoderConfig;
    use rand_distr::Distribution;

    fn randn(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = seeded(seed, stream::INIT);
        let n = rand_distr::Normal::new(0.0, 1.0).unwrap();
        ArrayD::from_shape_fn(IxDyn(shape), |_| n.sample(&mut rng))
    }

    #[test]
    fn generator_output_shape_and_range() {
        let cfg = GenConfig::desk(64, 20);
        let mut gen = Generator::new(&cfg, &mut seeded(1, stream::INIT)).unwrap();

        let emb: Vec<f64> = (0..64).map(|i| (i as f64 - 32.0) / 7.0).collect();
        let img = generate_image(&emb, &gen, 0).unwrap();
        assert_eq!(img.pixels.dim(), (3, 32, 32));
        assert!(img.pixels.iter().all(|&v| (0.0..=1.0).contains(&v)));

        let mut t = Tape::new();
        let z = t.constant(randn(&[4, 64], 2));
        let out = gen.forward(&mut t, z).unwrap();
        let v = t.value(out);
        assert_eq!(v.shape(), &[4, 3, 32, 32]);
        assert!(v.iter().all(|&x| (0.0..=1.0).contains(&x) && x.is_finite()));
    }

    #[test]
    fn generator_rejects_bad_input() {
        let cfg = GenConfig::tiny(8, 3);
        let gen = Generator::new(&cfg, &mut seeded(3, stream::INIT)).unwrap();
        assert!(matches!(
            generate_image(&[0.0; 7], &gen, 0),
            Err(XmodalError::Validation { .. })
        ));
        assert!(matches!(
            generate_image(&[f64::NAN; 8], &gen, 0),
            Err(XmodalError::Validation { .. })
        ));

        let mut bad = GenConfig::tiny(8, 3);
        bad.g_res = 12;
        assert!(Generator::new(&bad, &mut seeded(3, stream::INIT)).is_err());
    }

    #[test]
    fn generation_is_deterministic_and_noise_free_without_noise_dims() {
        let cfg = GenConfig::tiny(8, 3);
        let gen = Generator::new(&cfg, &mut seeded(4, stream::INIT)).unwrap();
        let emb: Vec<f64> = (0..8).map(|i| i as f64 * 0.3 - 1.0).collect();

        let a = generate_image(&emb, &gen, 1).unwrap();
        let b = generate_image(&emb, &gen, 1).unwrap();
        assert_eq!(a.pixels, b.pixels);

        // No noise inputs: the seed cannot matter.
        let c = generate_image(&emb, &gen, 99).unwrap();
        assert_eq!(a.pixels, c.pixels);

        let mut noisy_cfg = GenConfig::tiny(8, 3);
        noisy_cfg.d_noise = 4;
        let noisy = Generator::new(&noisy_cfg, &mut seeded(4, stream::INIT)).unwrap();
        let d = generate_image(&emb, &noisy, 1).unwrap();
        let e = generate_image(&emb, &noisy, 1).unwrap();
        let f = generate_image(&emb, &noisy, 2).unwrap();
        assert_eq!(d.pixels, e.pixels);
        assert_ne!(d.pixels, f.pixels);
    }

    #[test]
    fn generator_bounded_under_many_random_embeddings() {
        let cfg = GenConfig::tiny(8, 3);
        let mut gen = Generator::new(&cfg, &mut seeded(5, stream::INIT)).unwrap();
        // Move batch norms off their initial identity statistics.
        {
            let mut t = Tape::new();
            let z = t.constant(randn(&[16, 8], 50));
            gen.forward(&mut t, z).unwrap();
        }
        let mut rng = seeded(6, stream::INIT);
        let total = 10_000;
        let batch = 500;
        for chunk in 0..(total / batch) {
            let z = ArrayD::from_shape_fn(IxDyn(&[batch, 8]), |_| {
                rand::Rng::gen_range(&mut rng, -100.0..100.0)
            });
            let mut t = Tape::new();
            let zn = t.constant(z);
            let out = gen.forward_eval(&mut t, zn).unwrap();
            let v = t.value(out);
            assert!(
                v.iter().all(|&x| x.is_finite() && (0.0..=1.0).contains(&x)),
                "chunk {chunk}"
            );
        }
    }

    #[test]
    fn batch_norm_state_moves_only_in_training_mode() {
        let cfg = GenConfig::tiny(8, 3);
        let mut gen = Generator::new(&cfg, &mut seeded(7, stream::INIT)).unwrap();
        let before = gen.param_hash();

        {
            let mut t = Tape::new();
            let z = t.constant(randn(&[4, 8], 70));
            gen.forward_eval(&mut t, z).unwrap();
        }
        assert_eq!(gen.param_hash(), before);

        {
            let mut t = Tape::new();
            let z = t.constant(randn(&[4, 8], 71));
            gen.forward(&mut t, z).unwrap();
        }
        assert_ne!(gen.param_hash(), before);
    }

    #[test]
    fn discriminator_and_classifier_shapes() {
        let mut rng = seeded(8, stream::INIT);
        let d = ImageDiscriminator::new(&mut rng);
        let c = ImageClassifier::new(5, &mut rng);
        let images = Array4::from_shape_fn((3, 3, 16, 16), |(b, ch, y, x)| {
            ((b + ch + y + x) % 7) as f64 / 7.0
        });

        let mut t = Tape::new();
        let imgs = t.constant(images.clone().into_dyn());
        let score = d.forward(&mut t, imgs);
        assert_eq!(t.value(score).shape(), &[3, 1]);
        let logits = c.forward(&mut t, imgs);
        assert_eq!(t.value(logits).shape(), &[3, 5]);

        let feats = c.features_batch(&images);
        assert_eq!(feats.dim(), (3, 32));
        assert!(feats.iter().all(|v| v.is_finite()));
        assert_eq!(c.classify(&images).len(), 3);
    }

    #[test]
    fn image_to_recipe_heads_shapes() {
        let mut rng = seeded(9, stream::INIT);
        let heads = ImageToRecipeHeads::new(8, 12, 4, &mut rng);
        let mut t = Tape::new();
        let v = t.constant(randn(&[3, 8], 90));
        let (ing, cls) = heads.forward(&mut t, v);
        assert_eq!(t.value(ing).shape(), &[3, 12]);
        assert_eq!(t.value(cls).shape(), &[3, 4]);
    }

    struct GenProbe {
        params: Vec<Param>,
        gen: std::cell::RefCell<Generator>,
        z: ArrayD<f64>,
        weights: ArrayD<f64>,
    }

    impl GenProbe {
        fn build(&self) -> (Tape, NodeId) {
            {
                let mut g = self.gen.borrow_mut();
                for (slot, p) in g.params_mut().into_iter().zip(&self.params) {
                    slot.value.assign(&p.value);
                }
            }
            let mut t = Tape::new();
            let z = t.constant(self.z.clone());
            let out = self.gen.borrow_mut().forward(&mut t, z).unwrap();
            let w = t.constant(self.weights.clone());
            let weighted = t.mul(out, w);
            let root = t.sum_all(weighted);
            (t, root)
        }
    }

    impl GradCheckProbe for GenProbe {
        fn params(&mut self) -> Vec<&mut Param> {
            self.params.iter_mut().collect()
        }
        fn loss(&mut self) -> f64 {
            let (t, root) = self.build();
            t.scalar(root)
        }
        fn grads(&mut self) -> Gradients {
            let (t, root) = self.build();
            t.backward(root)
        }
    }

    #[test]
    fn generator_gradients_match_finite_differences() {
        let cfg = GenConfig::tiny(4, 3);
        let gen = Generator::new(&cfg, &mut seeded(10, stream::INIT)).unwrap();
        let params: Vec<Param> = gen.params().into_iter().cloned().collect();
        let mut probe = GenProbe {
            params,
            gen: std::cell::RefCell::new(gen),
            z: randn(&[2, 4], 100),
            weights: randn(&[2, 3, 8, 8], 101),
        };
        let report = check_gradients(&mut probe, 1e-4);
        assert!(report.passes(2e-4), "{report}");
    }

    fn tiny_setup(
        c_cat: usize,
        n_train: usize,
        corpus_seed: u64,
    ) -> (crate::corpus::CorpusSplit, RecipeEncoder, ImageEncoder, Generator, TanhMlp, ImageDiscriminator, ImageClassifier) {
        let spec = GenSpec {
            n_train_paired: n_train,
            n_val_paired: 2,
            n_test_paired: 2,
            n_recipe_only: 2,
            seed: corpus_seed,
            c_cat,
            c_ing: 8,
            image_size: 8,
            ..GenSpec::default()
        };
        let split = generate_synthetic_corpus(&spec).unwrap();
        let cfg = EncoderConfig::tiny(split.vocab.len());
        let mut rng = seeded(corpus_seed + 1, stream::INIT);
        let rec_enc = RecipeEncoder::new(&cfg, &mut rng).unwrap();
        let img_enc = ImageEncoder::new(&cfg, &mut rng).unwrap();
        let gen = Generator::new(&GenConfig::tiny(cfg.d_ret, c_cat), &mut rng).unwrap();
        let critic = TanhMlp::new("dm", cfg.d_ret, &[8], &mut rng);
        let d_img = ImageDiscriminator::new(&mut rng);
        let cls_img = ImageClassifier::new(c_cat, &mut rng);
        (split, rec_enc, img_enc, gen, critic, d_img, cls_img)
    }

    #[test]
    fn adversarial_step_zero_lr_is_bitwise_inert() {
        let (split, rec_enc, img_enc, gen, mut critic, mut d_img, mut cls_img) = tiny_setup(3, 8, 11);
        let batches = make_batches(&split.train_paired, 4, BatchMode::Paired, 8, 12).unwrap();
        let cfg = LossConfig::default();
        let zero = Adam::new(0.0);

        let hashes = (
            rec_enc.param_hash(),
            img_enc.param_hash(),
            gen.param_hash(),
            critic.param_hash(),
            d_img.param_hash(),
            cls_img.param_hash(),
        );
        let stats = adversarial_step(
            &batches[0], &rec_enc, &img_enc, &gen, &mut critic, &mut d_img, &mut cls_img,
            &zero, &zero, &cfg, 5, true, &mut seeded(13, stream::GP_EPSILON),
        )
        .unwrap();
        assert_eq!(stats.critic_updates, 5);
        assert_eq!(stats.disc_updates, 1);
        assert!(stats.critic_loss.is_finite() && stats.disc_loss.is_finite());
        assert_eq!(
            hashes,
            (
                rec_enc.param_hash(),
                img_enc.param_hash(),
                gen.param_hash(),
                critic.param_hash(),
                d_img.param_hash(),
                cls_img.param_hash(),
            )
        );
    }

    #[test]
    fn adversarial_step_updates_only_discriminators() {
        let (split, rec_enc, img_enc, gen, mut critic, mut d_img, mut cls_img) = tiny_setup(3, 8, 14);
        let batches = make_batches(&split.train_paired, 4, BatchMode::Paired, 8, 15).unwrap();
        let cfg = LossConfig::default();
        let opt = Adam::new(1e-3);

        let frozen = (rec_enc.param_hash(), img_enc.param_hash(), gen.param_hash());
        let trained = (critic.param_hash(), d_img.param_hash(), cls_img.param_hash());
        let stats = adversarial_step(
            &batches[0], &rec_enc, &img_enc, &gen, &mut critic, &mut d_img, &mut cls_img,
            &opt, &opt, &cfg, 2, true, &mut seeded(16, stream::GP_EPSILON),
        )
        .unwrap();
        assert_eq!(stats.critic_updates, 2);
        assert!(stats.gradient_penalty.is_some());
        assert_eq!(frozen, (rec_enc.param_hash(), img_enc.param_hash(), gen.param_hash()));
        assert_ne!(trained.0, critic.param_hash());
        assert_ne!(trained.1, d_img.param_hash());
        assert_ne!(trained.2, cls_img.param_hash());

        let mut log_cfg = LossConfig::default();
        log_cfg.adversarial_form = AdversarialForm::LogForm;
        let stats = adversarial_step(
            &batches[0], &rec_enc, &img_enc, &gen, &mut critic, &mut d_img, &mut cls_img,
            &opt, &opt, &log_cfg, n_critic_for(log_cfg.adversarial_form), true, &mut seeded(17, stream::GP_EPSILON),
        )
        .unwrap();
        assert_eq!(stats.critic_updates, 1);
        assert!(stats.gradient_penalty.is_none());
    }

    #[test]
    fn adversarial_step_rejects_recipe_only_batches() {
        let (split, rec_enc, img_enc, gen, mut critic, mut d_img, mut cls_img) = tiny_setup(3, 8, 18);
        let batches = make_batches(&split.train_recipe_only, 2, BatchMode::RecipeOnly, 8, 19).unwrap();
        let cfg = LossConfig::default();
        let opt = Adam::new(1e-3);
        assert!(matches!(
            adversarial_step(
                &batches[0], &rec_enc, &img_enc, &gen, &mut critic, &mut d_img, &mut cls_img,
                &opt, &opt, &cfg, 1, true, &mut seeded(20, stream::GP_EPSILON),
            ),
            Err(XmodalError::Validation { .. })
        ));
    }

    #[test]
    fn classifier_learns_two_categories_through_adversarial_steps() {
        let (split, rec_enc, img_enc, gen, mut critic, mut d_img, mut cls_img) = tiny_setup(2, 32, 21);
        let cfg = LossConfig::default();
        let critic_opt = Adam::new(1e-4);
        let disc_opt = Adam::new(1e-3);
        let mut rng = seeded(22, stream::GP_EPSILON);

        let batches = make_batches(&split.train_paired, 8, BatchMode::Paired, 8, 23).unwrap();
        for step in 0..200 {
            let batch = &batches[step % batches.len()];
            adversarial_step(
                &batch.clone(), &rec_enc, &img_enc, &gen, &mut critic, &mut d_img, &mut cls_img,
                &critic_opt, &disc_opt, &cfg, 1, true, &mut rng,
            )
            .unwrap();
        }

        let mut correct = 0;
        let mut total = 0;
        for rec in &split.train_paired {
            let img = rec.image.as_ref().unwrap();
            let mut batch = Array4::zeros((1, 3, 8, 8));
            batch.index_axis_mut(Axis(0), 0).assign(&img.pixels);
            let pred = cls_img.classify(&batch)[0];
            total += 1;
            if pred == rec.category {
                correct += 1;
            }
        }
        let acc = correct as f64 / total as f64;
        assert!(acc >= 0.8, "classifier accuracy {acc} after 200 steps");
    }

    #[test]
    fn image_dump_roundtrip() {
        let cfg = GenConfig::tiny(8, 3);
        let gen = Generator::new(&cfg, &mut seeded(24, stream::INIT)).unwrap();
        let items: Vec<(String, ImageTensor)> = (0..3)
            .map(|i| {
                let emb: Vec<f64> = (0..8).map(|j| (i * 8 + j) as f64 * 0.1).collect();
                (format!("rec-{i:03}"), generate_image(&emb, &gen, 0).unwrap())
            })
            .collect();

        let dir = std::env::temp_dir().join(format!("xmodal-gen-dump-{}", std::process::id()));
        let index_path = dump_generated_images(&dir, &items).unwrap();
        let index: BTreeMap<String, String> =
            serde_json::from_str(&std::fs::read_to_string(&index_path).unwrap()).unwrap();
        assert_eq!(index.len(), 3);
        for (id, file) in &index {
            let loaded = ImageTensor::load(&dir.join(file), 8).unwrap();
            let orig = &items.iter().find(|(i, _)| i == id).unwrap().1;
            let max_err = loaded
                .pixels
                .iter()
                .zip(orig.pixels.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(max_err <= 0.5 / 255.0 + 1e-9, "{id}: {max_err}");
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn generate_for_recipes_is_deterministic() {
        let (split, rec_enc, _, gen, _, _, _) = tiny_setup(3, 4, 25);
        let a = generate_for_recipes(&rec_enc, &gen, &split.test_paired, 7).unwrap();
        let b = generate_for_recipes(&rec_enc, &gen, &split.test_paired, 7).unwrap();
        assert_eq!(a.len(), split.test_paired.len());
        for ((ida, imga), (idb, imgb)) in a.iter().zip(&b) {
            assert_eq!(ida, idb);
            assert_eq!(imga.pixels, imgb.pixels);
        }
    }
}
