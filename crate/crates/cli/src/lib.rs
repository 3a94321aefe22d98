//! Operator entry point: dataset generation and ingestion, training,
//! evaluation, batch-size sweeps, image generation, gradient probes,
//! and report emission. Batch-oriented: progress goes to standard
//! error, machine artifacts to the paths each command declares.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use xmodal_core::corpus::{
    generate_synthetic_corpus, load_recipe1m_layer, save_corpus, CorpusSplit, GenSpec, LoadSpec,
};
use xmodal_core::encoders::EncoderConfig;
use xmodal_core::evaluation::{
    export_embeddings_csv, extract_features, fid, sampled_protocol, FeatureExtractor,
    MetricsReport, RankMetric,
};
use xmodal_core::generation::{dump_generated_images, generate_for_recipes, GenConfig};
use xmodal_core::losses::{AdversarialForm, LossConfig, LossReport, Mining};
use xmodal_core::trainer::{
    batch_size_sweep, encode_paired_eval, gradient_check, gradient_check_all,
    gradient_probe_names, sweep_plot_svg, train, write_sweep_files, RunRecord, SweepReport,
    TrainConfig, TrainState,
};
use xmodal_core::{Result, XmodalError};

#[derive(Parser)]
#[command(name = "xmodal", version, about = "Cross-modal recipe embedding toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic recipe corpus (JSON-lines plus PNG images).
    GenData(GenDataArgs),
    /// Train a model and write the run log and best checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on a held-out split.
    Eval(EvalArgs),
    /// Train one model per batch size under an equal step budget.
    Sweep(SweepArgs),
    /// Render images from recipe embeddings with a trained generator.
    GenImages(GenImagesArgs),
    /// Verify analytic gradients against finite differences.
    GradCheck(GradCheckArgs),
    /// Summarize run logs and sweep reports into tables and plots.
    Report(ReportArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Preset {
    /// Desk-scale dimensions (64-d embeddings).
    Desk,
    /// Minimal dimensions for smoke tests (8-d embeddings).
    Tiny,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitName {
    Val,
    Test,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MetricName {
    Euclidean,
    CosineDistance,
}

impl MetricName {
    fn to_core(self) -> RankMetric {
        match self {
            MetricName::Euclidean => RankMetric::Euclidean,
            MetricName::CosineDistance => RankMetric::CosineDistance,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AdvForm {
    WganGp,
    LogForm,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MiningName {
    HardestInBatch,
    AllNegatives,
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory for recipes.jsonl, images/ and meta.json.
    #[arg(long)]
    out: PathBuf,
    /// Paired training recipes.
    #[arg(long, default_value_t = 256)]
    paired: usize,
    /// Recipes without images (self-supervision pool).
    #[arg(long, default_value_t = 256)]
    recipe_only: usize,
    /// Paired validation recipes.
    #[arg(long, default_value_t = 64)]
    val: usize,
    /// Paired test recipes.
    #[arg(long, default_value_t = 64)]
    test: usize,
    /// Number of recipe categories.
    #[arg(long, default_value_t = 20)]
    categories: usize,
    /// Size of the ingredient vocabulary.
    #[arg(long, default_value_t = 100)]
    ingredients: usize,
    /// Square image resolution in pixels.
    #[arg(long, default_value_t = 32)]
    image_size: usize,
    /// Corpus seed (XMODAL_SEED applies when omitted).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ModelArgs {
    /// Training config file (flat key=value lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set batch_size=16 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Seed override (highest precedence: config < XMODAL_SEED < --set < --seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Model size preset.
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    /// Adversarial objective for the modality critic and image GAN.
    #[arg(long, value_enum, default_value_t = AdvForm::WganGp)]
    adversarial_form: AdvForm,
    /// Negative selection for the retrieval triplet loss.
    #[arg(long, value_enum, default_value_t = MiningName::HardestInBatch)]
    mining: MiningName,
}

impl ModelArgs {
    fn loss_config(&self) -> LossConfig {
        let mut cfg = LossConfig::default();
        cfg.adversarial_form = match self.adversarial_form {
            AdvForm::WganGp => AdversarialForm::WganGp,
            AdvForm::LogForm => AdversarialForm::LogForm,
        };
        cfg.mining = match self.mining {
            MiningName::HardestInBatch => Mining::HardestInBatch,
            MiningName::AllNegatives => Mining::AllNegatives,
        };
        cfg
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Corpus directory (as written by gen-data).
    #[arg(long)]
    data: PathBuf,
    /// Output directory for runlog.jsonl and checkpoints/.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to score.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output directory for metrics.json (and embedding CSVs).
    #[arg(long)]
    out: PathBuf,
    /// Which paired split to score.
    #[arg(long, value_enum, default_value_t = SplitName::Test)]
    split: SplitName,
    /// Retrieval gallery size per sampled group (default min(1000, split size)).
    #[arg(long)]
    group_size: Option<usize>,
    /// Number of sampled groups.
    #[arg(long, default_value_t = 10)]
    groups: usize,
    /// Ranking distance.
    #[arg(long, value_enum, default_value_t = MetricName::Euclidean)]
    metric: MetricName,
    /// Also compute image FID over up to 128 split images.
    #[arg(long, default_value_t = false)]
    fid: bool,
    /// Also export image/recipe retrieval embeddings as CSV.
    #[arg(long, default_value_t = false)]
    export_embeddings: bool,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    /// Output directory for sweep.json, sweep.csv and sweep.svg.
    #[arg(long)]
    out: PathBuf,
    /// Batch sizes to compare, comma-separated.
    #[arg(long, value_delimiter = ',', required = true)]
    sizes: Vec<usize>,
    /// Paired optimizer steps per size (equal budgets).
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct GenImagesArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output directory for PNGs and index.json.
    #[arg(long)]
    out: PathBuf,
    /// How many recipes to render.
    #[arg(long, default_value_t = 16)]
    count: usize,
    #[arg(long, value_enum, default_value_t = SplitName::Test)]
    split: SplitName,
    /// Seed for generator noise inputs (unused when the generator is deterministic).
    #[arg(long, default_value_t = 0)]
    noise_seed: u64,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct GradCheckArgs {
    /// Probe name, or `all`.
    #[arg(long, default_value = "all")]
    probe: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ReportArgs {
    /// Output directory for report.json, loss_curves.svg (and ablation.csv).
    #[arg(long)]
    out: PathBuf,
    /// Run log to summarize (repeatable; two or more adds a flag comparison table).
    #[arg(long = "runlog")]
    runlogs: Vec<PathBuf>,
    /// Sweep report (sweep.json) to re-plot.
    #[arg(long)]
    sweep: Option<PathBuf>,
}

/// Parses and dispatches one invocation; returns the process exit
/// code: 0 success, 1 validation or configuration error, 2 runtime
/// failure.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenData(a) => cmd_gen_data(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Sweep(a) => cmd_sweep(a),
        Cmd::GenImages(a) => cmd_gen_images(a),
        Cmd::GradCheck(a) => cmd_grad_check(a),
        Cmd::Report(a) => cmd_report(a),
    }
}

// ----- config plumbing -----

fn env_seed() -> Result<Option<u64>> {
    match std::env::var("XMODAL_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| XmodalError::config("cli", format!("XMODAL_SEED must be an integer, got `{v}`"))),
        Err(_) => Ok(None),
    }
}

/// Seed precedence, lowest to highest: config file, XMODAL_SEED,
/// --set seed=…, --seed.
fn resolve_train_config(
    config_text: Option<&str>,
    env: Option<u64>,
    sets: &[String],
    seed_flag: Option<u64>,
) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(text) = config_text {
        cfg.apply_kv_text(text)?;
    }
    if let Some(s) = env {
        cfg.seed = s;
    }
    for kv in sets {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| XmodalError::config("cli", format!("--set expects key=value, got `{kv}`")))?;
        cfg.set_field(k.trim(), v.trim())?;
    }
    if let Some(s) = seed_flag {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train_config_for(model: &ModelArgs) -> Result<TrainConfig> {
    let text = match &model.config {
        Some(p) => Some(std::fs::read_to_string(p)?),
        None => None,
    };
    resolve_train_config(text.as_deref(), env_seed()?, &model.sets, model.seed)
}

// ----- data plumbing -----

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DataMeta {
    c_cat: usize,
    c_ing: usize,
    image_size: usize,
    max_len_title: usize,
    max_len_sentence: usize,
    seed: u64,
}

impl DataMeta {
    fn load_spec(&self) -> LoadSpec {
        LoadSpec {
            c_cat: self.c_cat,
            c_ing: self.c_ing,
            image_size: self.image_size,
            max_len_title: self.max_len_title,
            max_len_sentence: self.max_len_sentence,
        }
    }
}

fn read_meta(dir: &Path) -> Result<DataMeta> {
    let path = dir.join("meta.json");
    if !path.exists() {
        let d = LoadSpec::default();
        return Ok(DataMeta {
            c_cat: d.c_cat,
            c_ing: d.c_ing,
            image_size: d.image_size,
            max_len_title: d.max_len_title,
            max_len_sentence: d.max_len_sentence,
            seed: 0,
        });
    }
    let text = std::fs::read_to_string(&path)?;
    serde_json::from_str(&text)
        .map_err(|e| XmodalError::validation("cli", format!("bad meta.json: {e}")))
}

fn load_data(dir: &Path) -> Result<(CorpusSplit, DataMeta)> {
    let meta = read_meta(dir)?;
    let split = load_recipe1m_layer(&dir.join("recipes.jsonl"), &meta.load_spec())?;
    Ok((split, meta))
}

fn model_configs(preset: Preset, vocab: usize, meta: &DataMeta) -> (EncoderConfig, GenConfig) {
    let mut enc = match preset {
        Preset::Desk => EncoderConfig::desk(vocab),
        Preset::Tiny => EncoderConfig::tiny(vocab),
    };
    enc.image_size = meta.image_size;
    let mut gen = match preset {
        Preset::Desk => GenConfig::desk(enc.d_ret, meta.c_cat),
        Preset::Tiny => GenConfig::tiny(enc.d_ret, meta.c_cat),
    };
    gen.g_res = meta.image_size;
    (enc, gen)
}

fn build_state(model: &ModelArgs, cfg: TrainConfig, split: &CorpusSplit, meta: &DataMeta) -> Result<TrainState> {
    let (enc_cfg, gen_cfg) = model_configs(model.preset, split.vocab.len(), meta);
    TrainState::new(cfg, enc_cfg, gen_cfg, model.loss_config(), meta.c_ing)
}

fn split_of<'a>(split: &'a CorpusSplit, which: SplitName) -> &'a [xmodal_core::corpus::Recipe] {
    match which {
        SplitName::Val => &split.val_paired,
        SplitName::Test => &split.test_paired,
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| XmodalError::validation("cli", e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

// ----- commands -----

fn cmd_gen_data(a: GenDataArgs) -> Result<()> {
    let seed = match a.seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(GenSpec::default().seed),
    };
    let defaults = GenSpec::default();
    let spec = GenSpec {
        n_train_paired: a.paired,
        n_val_paired: a.val,
        n_test_paired: a.test,
        n_recipe_only: a.recipe_only,
        seed,
        c_cat: a.categories,
        c_ing: a.ingredients,
        image_size: a.image_size,
        ..defaults
    };
    eprintln!(
        "generating corpus: {} paired train / {} val / {} test / {} recipe-only (seed {seed})",
        a.paired, a.val, a.test, a.recipe_only
    );
    let split = generate_synthetic_corpus(&spec)?;
    std::fs::create_dir_all(&a.out)?;
    let jsonl = save_corpus(&split, &a.out)?;
    let meta = DataMeta {
        c_cat: spec.c_cat,
        c_ing: spec.c_ing,
        image_size: spec.image_size,
        max_len_title: spec.max_len_title,
        max_len_sentence: spec.max_len_sentence,
        seed,
    };
    write_json(&a.out.join("meta.json"), &meta)?;
    eprintln!("wrote {}", jsonl.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = train_config_for(&a.model)?;
    let (split, meta) = load_data(&a.data)?;
    std::fs::create_dir_all(&a.out)?;
    if cfg.checkpoint_dir.is_none() {
        cfg.checkpoint_dir = Some(a.out.join("checkpoints"));
    }
    let mut state = build_state(&a.model, cfg, &split, &meta)?;
    eprintln!(
        "training: {} epochs, batch {}, fingerprint {}",
        state.cfg.epochs,
        state.cfg.batch_size,
        state.cfg.fingerprint()
    );
    let log = train(&mut state, &split, Some(&a.out.join("runlog.jsonl")))?;
    if let Some(m) = log.eval_reports().last() {
        eprintln!(
            "final validation: medR {:.1} / R@1 {:.1}% (image-to-recipe)",
            m.image_to_recipe.mean.med_r, m.image_to_recipe.mean.r1
        );
    }
    eprintln!("wrote {}", a.out.join("runlog.jsonl").display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let cfg = train_config_for(&a.model)?;
    let (split, meta) = load_data(&a.data)?;
    let mut state = build_state(&a.model, cfg, &split, &meta)?;
    let ck = state.restore(&a.checkpoint)?;
    eprintln!("loaded checkpoint at step {} (fingerprint {})", ck.step, ck.fingerprint);

    let recipes = split_of(&split, a.split);
    if recipes.is_empty() {
        return Err(XmodalError::validation("cli", "selected split is empty"));
    }
    let (v, r) = encode_paired_eval(&state, recipes)?;
    let group_size = a.group_size.unwrap_or_else(|| recipes.len().min(1000));
    let mut metrics = sampled_protocol(&v, &r, group_size, a.groups, state.cfg.seed, a.metric.to_core())?;

    if a.fid {
        let n = recipes.len().min(128);
        let generated = generate_for_recipes(&state.rec_enc, &state.generator, &recipes[..n], state.cfg.seed)?;
        let gen_imgs: Vec<_> = generated.into_iter().map(|(_, img)| img).collect();
        let real_imgs: Vec<_> = recipes[..n].iter().map(|rec| rec.image.clone().expect("paired split")).collect();
        let f_real = extract_features(&real_imgs, &FeatureExtractor::RawPool)?;
        let f_gen = extract_features(&gen_imgs, &FeatureExtractor::RawPool)?;
        metrics.fid = Some(fid(&f_real.features, &f_gen.features)?);
    }

    std::fs::create_dir_all(&a.out)?;
    write_json(&a.out.join("metrics.json"), &metrics)?;
    eprintln!(
        "image-to-recipe: medR {:.1} / R@1 {:.1}% | recipe-to-image: medR {:.1} / R@1 {:.1}%",
        metrics.image_to_recipe.mean.med_r,
        metrics.image_to_recipe.mean.r1,
        metrics.recipe_to_image.mean.med_r,
        metrics.recipe_to_image.mean.r1
    );
    if let Some(f) = metrics.fid {
        eprintln!("fid: {f:.3}");
    }

    if a.export_embeddings {
        let ids: Vec<String> = recipes.iter().map(|rec| rec.id.clone()).collect();
        export_embeddings_csv(&a.out.join("embeddings_images.csv"), &ids, &v)?;
        export_embeddings_csv(&a.out.join("embeddings_recipes.csv"), &ids, &r)?;
        eprintln!("wrote embedding CSVs");
    }
    eprintln!("wrote {}", a.out.join("metrics.json").display());
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let cfg = train_config_for(&a.model)?;
    let (split, meta) = load_data(&a.data)?;
    let (enc_cfg, gen_cfg) = model_configs(a.model.preset, split.vocab.len(), &meta);
    eprintln!("sweeping batch sizes {:?} at {} paired steps each", a.sizes, a.steps);
    let report = batch_size_sweep(
        &cfg,
        &enc_cfg,
        &gen_cfg,
        &a.model.loss_config(),
        meta.c_ing,
        &a.sizes,
        &split,
        a.steps,
    )?;
    for row in &report.rows {
        match &row.error {
            None => eprintln!(
                "B={}: medR {:.1} / R@1 {:.1}% / fid {:.3}",
                row.batch_size, row.med_r_i2r, row.r1_i2r, row.fid
            ),
            Some(e) => eprintln!("B={}: failed: {e}", row.batch_size),
        }
    }
    let (json, csv, svg) = write_sweep_files(&report, &a.out)?;
    eprintln!("wrote {} {} {}", json.display(), csv.display(), svg.display());
    Ok(())
}

fn cmd_gen_images(a: GenImagesArgs) -> Result<()> {
    let cfg = train_config_for(&a.model)?;
    let (split, meta) = load_data(&a.data)?;
    let mut state = build_state(&a.model, cfg, &split, &meta)?;
    state.restore(&a.checkpoint)?;

    let recipes = split_of(&split, a.split);
    if recipes.is_empty() {
        return Err(XmodalError::validation("cli", "selected split is empty"));
    }
    let n = a.count.min(recipes.len());
    let items = generate_for_recipes(&state.rec_enc, &state.generator, &recipes[..n], a.noise_seed)?;
    let index = dump_generated_images(&a.out, &items)?;
    eprintln!("wrote {n} images and {}", index.display());
    Ok(())
}

fn cmd_grad_check(a: GradCheckArgs) -> Result<()> {
    if a.probe == "all" {
        for (name, report) in gradient_check_all(a.seed)? {
            eprintln!("{name}: {report}");
        }
    } else {
        let report = gradient_check(&a.probe, a.seed)?;
        eprintln!("{}: {report}", a.probe);
    }
    eprintln!("gradient checks passed (probes: {})", gradient_probe_names().join(", "));
    Ok(())
}

// ----- report -----

#[derive(Debug, Serialize)]
struct RunSummary {
    path: String,
    fingerprint: String,
    config: Option<TrainConfig>,
    paired_steps: usize,
    recipe_only_steps: usize,
    final_losses: Option<LossReport>,
    final_eval: Option<MetricsReport>,
}

fn read_runlog(path: &Path) -> Result<Vec<RunRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: RunRecord = serde_json::from_str(line).map_err(|e| XmodalError::Parse {
            line: i + 1,
            msg: format!("{}: {e}", path.display()),
        })?;
        records.push(rec);
    }
    if records.is_empty() {
        return Err(XmodalError::validation("cli", format!("{}: empty run log", path.display())));
    }
    Ok(records)
}

fn summarize(path: &Path, records: &[RunRecord]) -> RunSummary {
    let mut s = RunSummary {
        path: path.display().to_string(),
        fingerprint: String::new(),
        config: None,
        paired_steps: 0,
        recipe_only_steps: 0,
        final_losses: None,
        final_eval: None,
    };
    for r in records {
        match r {
            RunRecord::Meta { fingerprint, config } => {
                s.fingerprint = fingerprint.clone();
                s.config = Some(config.clone());
            }
            RunRecord::Step { mode, losses, .. } => {
                if mode == "paired" {
                    s.paired_steps += 1;
                    s.final_losses = Some(losses.clone());
                } else {
                    s.recipe_only_steps += 1;
                }
            }
            RunRecord::Eval { metrics, .. } => s.final_eval = Some(metrics.clone()),
        }
    }
    s
}

fn loss_curves_svg(curves: &[(String, Vec<(u64, f64)>)]) -> String {
    let (w, h, ml, mb, mt, mr) = (640.0, 400.0, 60.0, 50.0, 30.0, 20.0);
    let (plot_w, plot_h) = (w - ml - mr, h - mt - mb);
    let palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#7f7f7f"];

    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
    );
    s.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n<line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{}\" stroke=\"black\"/>\n<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"13\">step</text>\n<text x=\"15\" y=\"{}\" font-size=\"13\" transform=\"rotate(-90 15 {})\">total loss</text>\n",
        h - mb, w - mr, h - mb, h - mb,
        ml + plot_w / 2.0, h - 12.0,
        mt + plot_h / 2.0, mt + plot_h / 2.0
    ));

    let xmax = curves
        .iter()
        .flat_map(|(_, pts)| pts.iter().map(|(x, _)| *x as f64))
        .fold(1.0_f64, f64::max);
    let ymax = curves
        .iter()
        .flat_map(|(_, pts)| pts.iter().map(|(_, y)| *y))
        .fold(1e-12_f64, f64::max);
    for (i, (label, pts)) in curves.iter().enumerate() {
        if pts.is_empty() {
            continue;
        }
        let color = palette[i % palette.len()];
        let path: Vec<String> = pts
            .iter()
            .map(|(x, y)| {
                format!(
                    "{:.1},{:.1}",
                    ml + (*x as f64 / xmax) * plot_w,
                    h - mb - (y / ymax) * plot_h
                )
            })
            .collect();
        s.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n<text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{color}\">{label}</text>\n",
            path.join(" "),
            ml + 10.0,
            mt + 15.0 + 16.0 * i as f64
        ));
    }
    s.push_str("</svg>\n");
    s
}

fn ablation_csv(summaries: &[RunSummary]) -> String {
    let mut out = String::from(
        "log,use_rec,use_ma,use_trans_r,use_trans_i,use_recipe_only,final_l_total,medR_i2r,r1_i2r\n",
    );
    for s in summaries {
        let flags = s.config.as_ref().map_or(("?".into(), "?".into(), "?".into(), "?".into(), "?".into()), |c| {
            (
                c.use_rec.to_string(),
                c.use_ma.to_string(),
                c.use_trans_r.to_string(),
                c.use_trans_i.to_string(),
                c.use_recipe_only.to_string(),
            )
        });
        let l_total = s.final_losses.as_ref().map_or("".into(), |l| format!("{}", l.l_total));
        let (med, r1) = s.final_eval.as_ref().map_or(("".into(), "".into()), |m| {
            (
                format!("{}", m.image_to_recipe.mean.med_r),
                format!("{}", m.image_to_recipe.mean.r1),
            )
        });
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            s.path, flags.0, flags.1, flags.2, flags.3, flags.4, l_total, med, r1
        ));
    }
    out
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    if a.runlogs.is_empty() && a.sweep.is_none() {
        return Err(XmodalError::config("cli", "report needs at least one --runlog or --sweep"));
    }
    std::fs::create_dir_all(&a.out)?;

    let mut summaries = Vec::new();
    let mut curves = Vec::new();
    for path in &a.runlogs {
        let records = read_runlog(path)?;
        let summary = summarize(path, &records);
        let pts: Vec<(u64, f64)> = records
            .iter()
            .filter_map(|r| match r {
                RunRecord::Step { step, mode, losses, .. } if mode == "paired" => Some((*step, losses.l_total)),
                _ => None,
            })
            .collect();
        let label = path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned());
        curves.push((label, pts));
        summaries.push(summary);
    }

    if !summaries.is_empty() {
        write_json(&a.out.join("report.json"), &summaries)?;
        std::fs::write(a.out.join("loss_curves.svg"), loss_curves_svg(&curves))?;
        eprintln!("wrote {} and loss_curves.svg", a.out.join("report.json").display());
        if summaries.len() >= 2 {
            std::fs::write(a.out.join("ablation.csv"), ablation_csv(&summaries))?;
            eprintln!("wrote {}", a.out.join("ablation.csv").display());
        }
    }

    if let Some(sweep_path) = &a.sweep {
        let text = std::fs::read_to_string(sweep_path)?;
        let report: SweepReport = serde_json::from_str(&text)
            .map_err(|e| XmodalError::validation("cli", format!("bad sweep report: {e}")))?;
        std::fs::write(a.out.join("sweep_plot.svg"), sweep_plot_svg(&report))?;
        eprintln!("wrote {}", a.out.join("sweep_plot.svg").display());
    }
    Ok(())
}
