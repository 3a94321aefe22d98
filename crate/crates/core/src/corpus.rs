//! Data model, synthetic corpus generator, JSON-lines ingestion,
//! tokenization and batch scheduling.
//!
//! The synthetic generator draws every recipe from a latent dish concept
//! (category plus a small category-biased ingredient set) that jointly
//! determines the text of all three components and a procedurally
//! rendered image: the background hue encodes the category and a 4x4
//! cell grid encodes the ingredient ids. Corpora are a pure function of
//! their spec.

use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, Write as _};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Array4};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Result, XmodalError};
use crate::rng::{seeded, stream, Rng};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

/// Token-to-id mapping with fixed special ids (PAD=0, UNK=1, BOS=2,
/// EOS=3). Regular tokens are assigned ids in sorted order, so the
/// vocabulary is a pure function of its token set.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    pub fn from_token_set(tokens: &BTreeSet<String>) -> Self {
        let mut id_to_token: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        for t in tokens {
            if !SPECIALS.contains(&t.as_str()) {
                id_to_token.push(t.clone());
            }
        }
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary {
            token_to_id,
            id_to_token,
        }
    }

    pub fn from_texts<'a>(texts: impl Iterator<Item = &'a str>) -> Self {
        let mut set = BTreeSet::new();
        for text in texts {
            for tok in split_tokens(text) {
                set.insert(tok);
            }
        }
        Vocabulary::from_token_set(&set)
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token_of(&self, id: usize) -> &str {
        &self.id_to_token[id]
    }
}

/// Lowercases and splits on any non-alphanumeric character.
pub fn split_tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

/// BOS + token ids (OOV mapped to UNK), truncated so the total length is
/// exactly `max_len`, PAD-filled on the right.
pub fn tokenize(text: &str, vocab: &Vocabulary, max_len: usize) -> Result<Vec<usize>> {
    assert!(max_len >= 2, "max_len must fit BOS plus one token");
    let words = split_tokens(text);
    if words.is_empty() {
        return Err(XmodalError::EmptySentence);
    }
    let mut ids = Vec::with_capacity(max_len);
    ids.push(BOS);
    for w in words.iter().take(max_len - 1) {
        ids.push(vocab.id_of(w).unwrap_or(UNK));
    }
    while ids.len() < max_len {
        ids.push(PAD);
    }
    Ok(ids)
}

/// RGB image, channel-first, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub pixels: Array3<f64>,
}

impl ImageTensor {
    pub fn new(pixels: Array3<f64>) -> Self {
        assert_eq!(pixels.dim().0, 3);
        ImageTensor { pixels }
    }

    pub fn size(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (_, h, w) = self.pixels.dim();
        let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |c: usize| {
                (self.pixels[(c, y as usize, x as usize)].clamp(0.0, 1.0) * 255.0).round() as u8
            };
            image::Rgb([px(0), px(1), px(2)])
        });
        img.save(path)
            .map_err(|e| XmodalError::validation("image save", e.to_string()))
    }

    pub fn load(path: &Path, size: usize) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| XmodalError::validation("image load", format!("{}: {e}", path.display())))?
            .resize_exact(size as u32, size as u32, image::imageops::FilterType::Triangle)
            .to_rgb8();
        let mut pixels = Array3::<f64>::zeros((3, size, size));
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                pixels[(c, y as usize, x as usize)] = p.0[c] as f64 / 255.0;
            }
        }
        Ok(ImageTensor { pixels })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Recipe {
    pub id: String,
    pub title: String,
    pub ingredients: Vec<String>,
    pub instructions: Vec<String>,
    pub category: usize,
    pub ingredient_ids: Vec<usize>,
    pub image: Option<ImageTensor>,
    pub title_tokens: Vec<usize>,
    pub ingredient_tokens: Vec<Vec<usize>>,
    pub instruction_tokens: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSplit {
    pub train_paired: Vec<Recipe>,
    pub val_paired: Vec<Recipe>,
    pub test_paired: Vec<Recipe>,
    pub train_recipe_only: Vec<Recipe>,
    pub vocab: Vocabulary,
}

impl CorpusSplit {
    pub fn counts(&self) -> (usize, usize, usize, usize) {
        (
            self.train_paired.len(),
            self.val_paired.len(),
            self.test_paired.len(),
            self.train_recipe_only.len(),
        )
    }
}

// ----- synthetic generation -----

const INGREDIENT_POOL: [&str; 50] = [
    "tomato", "onion", "garlic", "pepper", "carrot", "potato", "celery", "spinach", "basil",
    "oregano", "thyme", "rosemary", "chicken", "beef", "pork", "salmon", "tuna", "shrimp",
    "lentil", "chickpea", "rice", "pasta", "quinoa", "barley", "oat", "flour", "butter", "cream",
    "yogurt", "cheese", "milk", "egg", "honey", "sugar", "salt", "cumin", "paprika", "ginger",
    "turmeric", "cinnamon", "nutmeg", "apple", "lemon", "lime", "mango", "banana", "walnut",
    "almond", "mushroom", "zucchini",
];

const CATEGORY_POOL: [&str; 20] = [
    "soup", "salad", "curry", "stew", "pie", "cake", "bread", "risotto", "roast", "casserole",
    "chowder", "tacos", "burger", "pancake", "omelette", "dumpling", "pudding", "skillet",
    "flatbread", "kebab",
];

const VERBS: [&str; 10] = [
    "chop", "mix", "bake", "simmer", "whisk", "grill", "boil", "fry", "stir", "fold",
];
const QUANTITIES: [&str; 6] = ["one", "two", "three", "four", "five", "half"];
const UNITS: [&str; 6] = ["cup", "spoon", "slice", "pound", "dash", "clove"];
const PREPS: [&str; 8] = [
    "chopped", "diced", "minced", "sliced", "grated", "crushed", "dried", "roasted",
];
const ADJECTIVES: [&str; 8] = [
    "classic", "spicy", "creamy", "rustic", "golden", "hearty", "zesty", "smoky",
];
const DONENESS: [&str; 4] = ["golden", "tender", "crisp", "soft"];
const TEMPS: [&str; 3] = ["hot", "cold", "warm"];
const CONNECT: [&str; 6] = ["the", "and", "with", "until", "serve", "in"];

pub fn ingredient_word(id: usize) -> String {
    let base = INGREDIENT_POOL[id % INGREDIENT_POOL.len()];
    let rep = id / INGREDIENT_POOL.len();
    if rep == 0 {
        base.to_string()
    } else {
        format!("{base}{rep}")
    }
}

pub fn category_word(cat: usize) -> String {
    let base = CATEGORY_POOL[cat % CATEGORY_POOL.len()];
    let rep = cat / CATEGORY_POOL.len();
    if rep == 0 {
        base.to_string()
    } else {
        format!("{base}{rep}")
    }
}

/// Every token the generator can emit for the given class counts.
pub fn generator_vocabulary(c_cat: usize, c_ing: usize) -> Vocabulary {
    let mut set = BTreeSet::new();
    for id in 0..c_ing {
        set.insert(ingredient_word(id));
    }
    for cat in 0..c_cat {
        set.insert(category_word(cat));
    }
    for pool in [
        &VERBS[..],
        &QUANTITIES[..],
        &UNITS[..],
        &PREPS[..],
        &ADJECTIVES[..],
        &DONENESS[..],
        &TEMPS[..],
        &CONNECT[..],
    ] {
        for w in pool {
            set.insert(w.to_string());
        }
    }
    Vocabulary::from_token_set(&set)
}

#[derive(Debug, Clone)]
pub struct GenSpec {
    pub n_train_paired: usize,
    pub n_val_paired: usize,
    pub n_test_paired: usize,
    pub n_recipe_only: usize,
    pub seed: u64,
    pub c_cat: usize,
    pub c_ing: usize,
    pub image_size: usize,
    pub max_len_title: usize,
    pub max_len_sentence: usize,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            n_train_paired: 256,
            n_val_paired: 64,
            n_test_paired: 64,
            n_recipe_only: 256,
            seed: 7,
            c_cat: 20,
            c_ing: 100,
            image_size: 32,
            max_len_title: 10,
            max_len_sentence: 10,
        }
    }
}

pub fn generate_synthetic_corpus(spec: &GenSpec) -> Result<CorpusSplit> {
    if spec.n_train_paired == 0 {
        return Err(XmodalError::config("gen_spec", "n_train_paired must be >= 1"));
    }
    if spec.c_cat == 0 || spec.c_ing == 0 {
        return Err(XmodalError::config("gen_spec", "class counts must be >= 1"));
    }
    if spec.image_size % 4 != 0 {
        return Err(XmodalError::config(
            "gen_spec",
            "image_size must be divisible by 4",
        ));
    }

    let vocab = generator_vocabulary(spec.c_cat, spec.c_ing);
    let mut rng = seeded(spec.seed, stream::CORPUS);

    let gen_block = |prefix: &str, n: usize, with_image: bool, rng: &mut Rng| -> Result<Vec<Recipe>> {
        (0..n)
            .map(|i| synth_recipe(format!("syn-{prefix}-{i:05}"), spec, &vocab, with_image, rng))
            .collect()
    };

    let train_paired = gen_block("train", spec.n_train_paired, true, &mut rng)?;
    let val_paired = gen_block("val", spec.n_val_paired, true, &mut rng)?;
    let test_paired = gen_block("test", spec.n_test_paired, true, &mut rng)?;
    let train_recipe_only = gen_block("ronly", spec.n_recipe_only, false, &mut rng)?;

    Ok(CorpusSplit {
        train_paired,
        val_paired,
        test_paired,
        train_recipe_only,
        vocab,
    })
}

fn synth_recipe(
    id: String,
    spec: &GenSpec,
    vocab: &Vocabulary,
    with_image: bool,
    rng: &mut Rng,
) -> Result<Recipe> {
    let category = rng.gen_range(0..spec.c_cat);
    let n_ing = rng.gen_range(2..=4usize);

    // Ingredients come from a window anchored at the category, wide
    // enough to overlap neighbours so categories share some vocabulary.
    let per_cat = (spec.c_ing / spec.c_cat).max(1);
    let width = (3 * per_cat).min(spec.c_ing).max(n_ing);
    let base = category * per_cat;
    let mut ids = Vec::with_capacity(n_ing);
    while ids.len() < n_ing {
        let cand = (base + rng.gen_range(0..width)) % spec.c_ing;
        if !ids.contains(&cand) {
            ids.push(cand);
        }
    }

    let pick = |pool: &[&str], rng: &mut Rng| pool[rng.gen_range(0..pool.len())].to_string();

    let mut title_words = Vec::new();
    if rng.gen_bool(0.5) {
        title_words.push(pick(&ADJECTIVES, rng));
    }
    title_words.push(ingredient_word(ids[0]));
    title_words.push(category_word(category));
    let title = title_words.join(" ");

    let ingredients: Vec<String> = ids
        .iter()
        .map(|&ing| {
            format!(
                "{} {} {} {}",
                pick(&QUANTITIES, rng),
                pick(&UNITS, rng),
                ingredient_word(ing),
                pick(&PREPS, rng)
            )
        })
        .collect();

    let n_ins = rng.gen_range(2..=3usize);
    let mut instructions = Vec::with_capacity(n_ins);
    instructions.push(format!(
        "{} the {} and {}",
        pick(&VERBS, rng),
        ingredient_word(ids[0]),
        ingredient_word(ids[n_ing - 1])
    ));
    instructions.push(format!(
        "{} with {} until {}",
        pick(&VERBS, rng),
        ingredient_word(ids[n_ing / 2]),
        pick(&DONENESS, rng)
    ));
    if n_ins == 3 {
        instructions.push(format!(
            "serve the {} {}",
            category_word(category),
            pick(&TEMPS, rng)
        ));
    }

    let image = with_image
        .then(|| render_dish_image(category, &ids, spec.c_cat, spec.c_ing, spec.image_size, rng));

    build_recipe(
        id,
        title,
        ingredients,
        instructions,
        category,
        ids,
        image,
        vocab,
        spec.max_len_title,
        spec.max_len_sentence,
    )
}

#[allow(clippy::too_many_arguments)]
fn build_recipe(
    id: String,
    title: String,
    ingredients: Vec<String>,
    instructions: Vec<String>,
    category: usize,
    ingredient_ids: Vec<usize>,
    image: Option<ImageTensor>,
    vocab: &Vocabulary,
    max_len_title: usize,
    max_len_sentence: usize,
) -> Result<Recipe> {
    if ingredients.is_empty() || instructions.is_empty() {
        return Err(XmodalError::EmptyComponent);
    }
    let title_tokens = tokenize(&title, vocab, max_len_title)?;
    let ingredient_tokens = ingredients
        .iter()
        .map(|s| tokenize(s, vocab, max_len_sentence))
        .collect::<Result<Vec<_>>>()?;
    let instruction_tokens = instructions
        .iter()
        .map(|s| tokenize(s, vocab, max_len_sentence))
        .collect::<Result<Vec<_>>>()?;
    Ok(Recipe {
        id,
        title,
        ingredients,
        instructions,
        category,
        ingredient_ids,
        image,
        title_tokens,
        ingredient_tokens,
        instruction_tokens,
    })
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = (h.fract() + 1.0).fract() * 6.0;
    let i = h.floor() as i64;
    let f = h - i as f64;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i.rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Category sets the background hue; each ingredient id paints one cell
/// of a 4x4 grid (cell = id mod 16, hue = id div 16). Colliding ids
/// blend by mean. Small uniform pixel noise keeps images distinct.
pub fn render_dish_image(
    category: usize,
    ingredient_ids: &[usize],
    c_cat: usize,
    c_ing: usize,
    size: usize,
    rng: &mut Rng,
) -> ImageTensor {
    let bg = hsv_to_rgb((category as f64 + 0.5) / c_cat as f64, 0.35, 0.55);
    let mut pixels = Array3::<f64>::zeros((3, size, size));
    for c in 0..3 {
        pixels.index_axis_mut(ndarray::Axis(0), c).fill(bg[c]);
    }

    let palette_n = c_ing.div_ceil(16).max(1);
    let mut cell_colors: HashMap<usize, Vec<[f64; 3]>> = HashMap::new();
    for &id in ingredient_ids {
        let cell = id % 16;
        let color = hsv_to_rgb(((id / 16) as f64 + 0.5) / palette_n as f64, 0.95, 0.95);
        cell_colors.entry(cell).or_default().push(color);
    }

    let cell_px = size / 4;
    for (cell, colors) in &cell_colors {
        let n = colors.len() as f64;
        let mixed = [
            colors.iter().map(|c| c[0]).sum::<f64>() / n,
            colors.iter().map(|c| c[1]).sum::<f64>() / n,
            colors.iter().map(|c| c[2]).sum::<f64>() / n,
        ];
        let (cy, cx) = (cell / 4, cell % 4);
        for y in cy * cell_px..(cy + 1) * cell_px {
            for x in cx * cell_px..(cx + 1) * cell_px {
                for c in 0..3 {
                    pixels[(c, y, x)] = mixed[c];
                }
            }
        }
    }

    pixels.mapv_inplace(|v| v.clamp(0.0, 1.0));
    for v in pixels.iter_mut() {
        *v = (*v + rng.gen_range(-0.02..0.02)).clamp(0.0, 1.0);
    }
    ImageTensor { pixels }
}

// ----- ingestion and persistence -----

#[derive(Debug, Serialize, Deserialize)]
struct RecipeRecord {
    id: String,
    title: String,
    ingredients: Vec<String>,
    instructions: Vec<String>,
    category: usize,
    ingredient_ids: Vec<usize>,
    partition: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image: Option<String>,
}

#[derive(Debug, Clone)]
pub struct LoadSpec {
    pub c_cat: usize,
    pub c_ing: usize,
    pub image_size: usize,
    pub max_len_title: usize,
    pub max_len_sentence: usize,
}

impl Default for LoadSpec {
    fn default() -> Self {
        let g = GenSpec::default();
        LoadSpec {
            c_cat: g.c_cat,
            c_ing: g.c_ing,
            image_size: g.image_size,
            max_len_title: g.max_len_title,
            max_len_sentence: g.max_len_sentence,
        }
    }
}

/// Reads a JSON-lines recipe file. Records are routed to splits by their
/// partition field; any record without an image becomes a recipe-only
/// training record. Image paths are resolved relative to the file.
pub fn load_recipe1m_layer(path: &Path, spec: &LoadSpec) -> Result<CorpusSplit> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let base_dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();

    let mut records: Vec<(usize, RecipeRecord)> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RecipeRecord = serde_json::from_str(&line).map_err(|e| XmodalError::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        records.push((line_no, rec));
    }

    let vocab = Vocabulary::from_texts(records.iter().flat_map(|(_, r)| {
        std::iter::once(r.title.as_str())
            .chain(r.ingredients.iter().map(String::as_str))
            .chain(r.instructions.iter().map(String::as_str))
    }));

    let mut split = CorpusSplit {
        train_paired: Vec::new(),
        val_paired: Vec::new(),
        test_paired: Vec::new(),
        train_recipe_only: Vec::new(),
        vocab: vocab.clone(),
    };

    for (line_no, rec) in records {
        if !matches!(rec.partition.as_str(), "train" | "val" | "test") {
            return Err(XmodalError::validation(
                "load_recipe1m_layer",
                format!("line {line_no}: unknown partition `{}`", rec.partition),
            ));
        }
        if rec.category >= spec.c_cat {
            return Err(XmodalError::validation(
                "load_recipe1m_layer",
                format!(
                    "line {line_no}: category {} out of range (c_cat={})",
                    rec.category, spec.c_cat
                ),
            ));
        }
        if let Some(&bad) = rec.ingredient_ids.iter().find(|&&g| g >= spec.c_ing) {
            return Err(XmodalError::validation(
                "load_recipe1m_layer",
                format!("line {line_no}: ingredient id {bad} out of range"),
            ));
        }

        let image = match &rec.image {
            Some(rel) => Some(ImageTensor::load(&base_dir.join(rel), spec.image_size)?),
            None => None,
        };
        let recipe = build_recipe(
            rec.id,
            rec.title,
            rec.ingredients,
            rec.instructions,
            rec.category,
            rec.ingredient_ids,
            image,
            &vocab,
            spec.max_len_title,
            spec.max_len_sentence,
        )
        .map_err(|e| match e {
            XmodalError::EmptySentence | XmodalError::EmptyComponent => XmodalError::Parse {
                line: line_no,
                msg: e.to_string(),
            },
            other => other,
        })?;

        match (recipe.image.is_some(), rec.partition.as_str()) {
            (false, _) => split.train_recipe_only.push(recipe),
            (true, "train") => split.train_paired.push(recipe),
            (true, "val") => split.val_paired.push(recipe),
            (true, "test") => split.test_paired.push(recipe),
            _ => unreachable!(),
        }
    }
    Ok(split)
}

/// Writes `recipes.jsonl` plus an `images/` directory of PNGs, in the
/// format `load_recipe1m_layer` reads back.
pub fn save_corpus(split: &CorpusSplit, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir.join("images"))?;
    let jsonl = dir.join("recipes.jsonl");
    let mut out = std::io::BufWriter::new(std::fs::File::create(&jsonl)?);

    let mut write_block = |recipes: &[Recipe], partition: &str| -> Result<()> {
        for r in recipes {
            let image_rel = match &r.image {
                Some(img) => {
                    let rel = format!("images/{}.png", r.id);
                    img.save_png(&dir.join(&rel))?;
                    Some(rel)
                }
                None => None,
            };
            let rec = RecipeRecord {
                id: r.id.clone(),
                title: r.title.clone(),
                ingredients: r.ingredients.clone(),
                instructions: r.instructions.clone(),
                category: r.category,
                ingredient_ids: r.ingredient_ids.clone(),
                partition: partition.to_string(),
                image: image_rel,
            };
            let line = serde_json::to_string(&rec)
                .map_err(|e| XmodalError::validation("save_corpus", e.to_string()))?;
            writeln!(out, "{line}")?;
        }
        Ok(())
    };

    write_block(&split.train_paired, "train")?;
    write_block(&split.val_paired, "val")?;
    write_block(&split.test_paired, "test")?;
    write_block(&split.train_recipe_only, "train")?;
    Ok(jsonl)
}

// ----- batching -----

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchMode {
    Paired,
    RecipeOnly,
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub mode: BatchMode,
    /// Recipes with their image field stripped; pixel data lives in
    /// `images` (paired mode), aligned index-for-index.
    pub recipes: Vec<Recipe>,
    pub images: Option<Array4<f64>>,
    pub categories: Vec<usize>,
    pub ingredient_multihot: Array2<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.recipes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.recipes.is_empty()
    }
}

/// One epoch of batches: a seeded shuffle cut into fixed-size batches,
/// with the last partial batch dropped. In paired mode every recipe must
/// carry an image; in recipe-only mode images are omitted even if
/// present.
pub fn make_batches(
    recipes: &[Recipe],
    b: usize,
    mode: BatchMode,
    c_ing: usize,
    seed: u64,
) -> Result<Vec<Batch>> {
    if b < 2 {
        return Err(XmodalError::BatchTooSmall { got: b });
    }
    if recipes.is_empty() {
        return Err(XmodalError::config("make_batches", "empty split"));
    }
    if b > recipes.len() {
        return Err(XmodalError::config(
            "make_batches",
            format!("batch size {b} exceeds split size {}", recipes.len()),
        ));
    }
    if mode == BatchMode::Paired {
        if let Some(r) = recipes.iter().find(|r| r.image.is_none()) {
            return Err(XmodalError::validation(
                "make_batches",
                format!("paired mode but recipe `{}` has no image", r.id),
            ));
        }
    }

    let mut order: Vec<usize> = (0..recipes.len()).collect();
    let mut rng = seeded(seed, stream::BATCH);
    order.shuffle(&mut rng);

    let image_size = recipes
        .iter()
        .find_map(|r| r.image.as_ref().map(|i| i.size()))
        .unwrap_or(0);

    let mut batches = Vec::with_capacity(recipes.len() / b);
    for chunk in order.chunks(b) {
        if chunk.len() < b {
            break;
        }
        let mut members = Vec::with_capacity(b);
        let mut categories = Vec::with_capacity(b);
        let mut multihot = Array2::<f64>::zeros((b, c_ing));
        let mut images = (mode == BatchMode::Paired)
            .then(|| Array4::<f64>::zeros((b, 3, image_size, image_size)));

        for (i, &idx) in chunk.iter().enumerate() {
            let src = &recipes[idx];
            if let Some(imgs) = images.as_mut() {
                imgs.index_axis_mut(ndarray::Axis(0), i)
                    .assign(&src.image.as_ref().unwrap().pixels);
            }
            let mut r = src.clone();
            r.image = None;
            categories.push(r.category);
            for &ing in &r.ingredient_ids {
                multihot[(i, ing)] = 1.0;
            }
            members.push(r);
        }
        batches.push(Batch {
            mode,
            recipes: members,
            images,
            categories,
            ingredient_multihot: multihot,
        });
    }
    Ok(batches)
}

// ----- learnability probe -----

/// Mean/variance per channel: the 6-d statistic used by the raw feature
/// pool in evaluation.
pub fn image_stat_features(img: &ImageTensor) -> [f64; 6] {
    let mut out = [0.0; 6];
    for c in 0..3 {
        let chan = img.pixels.index_axis(ndarray::Axis(0), c);
        let n = chan.len() as f64;
        let mean = chan.sum() / n;
        let var = chan.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
        out[c] = mean;
        out[3 + c] = var;
    }
    out
}

/// Fits per-category centroids of raw image statistics on the first half
/// and classifies the second half by nearest centroid. Returns accuracy
/// in [0, 1]. A measure of how much category signal the images carry.
pub fn nearest_centroid_accuracy(recipes: &[Recipe]) -> Result<f64> {
    let imaged: Vec<(&Recipe, [f64; 6])> = recipes
        .iter()
        .filter(|r| r.image.is_some())
        .map(|r| (r, image_stat_features(r.image.as_ref().unwrap())))
        .collect();
    if imaged.len() < 4 {
        return Err(XmodalError::validation(
            "nearest_centroid_accuracy",
            "need at least 4 imaged recipes",
        ));
    }
    let half = imaged.len() / 2;
    let (fit, test) = imaged.split_at(half);

    let mut sums: HashMap<usize, ([f64; 6], usize)> = HashMap::new();
    for (r, f) in fit {
        let entry = sums.entry(r.category).or_insert(([0.0; 6], 0));
        for k in 0..6 {
            entry.0[k] += f[k];
        }
        entry.1 += 1;
    }
    let centroids: Vec<(usize, [f64; 6])> = {
        let mut cs: Vec<_> = sums
            .into_iter()
            .map(|(cat, (s, n))| {
                let mut c = [0.0; 6];
                for k in 0..6 {
                    c[k] = s[k] / n as f64;
                }
                (cat, c)
            })
            .collect();
        cs.sort_by_key(|(cat, _)| *cat);
        cs
    };

    let mut correct = 0usize;
    for (r, f) in test {
        let pred = centroids
            .iter()
            .min_by(|(_, a), (_, b)| {
                let da: f64 = (0..6).map(|k| (f[k] - a[k]).powi(2)).sum();
                let db: f64 = (0..6).map(|k| (f[k] - b[k]).powi(2)).sum();
                da.partial_cmp(&db).unwrap()
            })
            .map(|(cat, _)| *cat)
            .unwrap();
        if pred == r.category {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}
