//! The `comae` command line: corpus generation and statistics, classifier
//! training and annotation, model training over the variant grid,
//! generation and evaluation. Every command writes a run manifest beside
//! its output.

pub mod config;
pub mod manifest;

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use comae::classifier::{annotate_corpus, labeled_texts, train_classifier, ClassifierReport, ClassifierSet, TextClassifier};
use comae::corpus::{
    conditional_distribution, factor_marginals, filter_conversations, generate_synthetic_corpus, load_corpus,
    render_heatmap_svg, save_corpus, Conversation, SyntheticSpec,
};
use comae::decoding::{ChosenFactors, DecodeMode, StageDistributions};
use comae::evaluation::{
    generate_responses, generation_tokens, hits_at_k, perplexity, realization_score, score_texts, EmbeddingTable,
    EvalReport, HitsEntry, RealizationEntry, RealizationItem, SplitScores, DEFAULT_ROUGE_BETA,
};
use comae::model::{ComaeModel, Variant};
use comae::taxonomy::{Axis, FactorAxis, FactorTriple};
use comae::text::tokenize;
use comae::training::{load_checkpoint, metrics_csv, save_checkpoint, train_with};

use config::RunConfig;
use manifest::ManifestBuilder;

/// A malformed invocation: bad flag values, unknown config keys and the like.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// 1 for usage errors, 3 for numeric failures, 2 for everything else.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<comae::Error>() {
            if e.is_numeric() {
                return EXIT_NUMERIC;
            }
        }
    }
    EXIT_DATA
}

#[derive(Debug, Parser)]
#[command(name = "comae", version, about = "Empathy-factor conditioned response models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a corpus from a planted factor spec.
    Synth(SynthArgs),
    /// Conditional factor distributions as CSV tables and SVG heat maps.
    Stats(StatsArgs),
    /// Drop conversations with more than two speakers or no mechanism.
    Filter(FilterArgs),
    /// Train one model variant.
    Train(TrainArgs),
    /// Generate a response for every conversation of a corpus.
    Generate(GenerateArgs),
    /// Perplexity, text metrics, Hits@k and realization for checkpoints.
    Evaluate(EvaluateArgs),
    /// Train factor classifiers.
    TrainClassifier(TrainClassifierArgs),
    /// Relabel a corpus with trained classifiers.
    Annotate(AnnotateArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Planted spec (JSON); the bundled spec when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Validation corpus; otherwise the last tenth of the corpus is held out.
    #[arg(long)]
    pub valid: Option<PathBuf>,
    #[arg(long)]
    pub variant: Variant,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct DecodeFlags {
    #[arg(long)]
    pub top_p: Option<f64>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub factor_top_p: Option<f64>,
    #[arg(long)]
    pub factor_temperature: Option<f64>,
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value = "predicted")]
    pub mode: DecodeMode,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub decode: DecodeFlags,
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSONL output.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Repeat to evaluate several models side by side.
    #[arg(long, required = true)]
    pub checkpoint: Vec<PathBuf>,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Conditioning used for the generated responses scored by BLEU-2,
    /// ROUGE-L and greedy matching.
    #[arg(long, default_value = "ground_truth")]
    pub mode: DecodeMode,
    /// Word vectors (`token v1 v2 ...` per line); the model's word table by default.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Directory written by `train-classifier`.
    #[arg(long)]
    pub classifiers: Option<PathBuf>,
    /// Score factor realization of predicted-mode generations.
    #[arg(long)]
    pub realization: bool,
    #[arg(long, default_value_t = DEFAULT_ROUGE_BETA)]
    pub rouge_beta: f64,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub decode: DecodeFlags,
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSON report; CSV rows go beside it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainClassifierArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// One of cm-er, cm-ip, cm-ex, da, em; all five when omitted.
    #[arg(long)]
    pub axis: Vec<Axis>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AnnotateArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub classifiers: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Stats(a) => cmd_stats(&a),
        Command::Filter(a) => cmd_filter(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Generate(a) => cmd_generate(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::TrainClassifier(a) => cmd_train_classifier(&a),
        Command::Annotate(a) => cmd_annotate(&a),
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn read_corpus(path: &Path) -> Result<Vec<Conversation>> {
    let corpus = load_corpus(path).with_context(|| format!("loading corpus {}", path.display()))?;
    if corpus.is_empty() {
        bail!("corpus {} is empty", path.display());
    }
    Ok(corpus)
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    if a.n == 0 {
        return Err(usage("n must be ≥ 1"));
    }
    let spec = match &a.spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            SyntheticSpec::from_json(&text)?
        }
        None => SyntheticSpec::builtin(),
    };
    spec.validate()?;
    let mut m = ManifestBuilder::start("synth", &serde_json::json!({ "n": a.n, "spec": a.spec }), a.seed)?;
    if let Some(p) = &a.spec {
        m.input(p);
    }
    let corpus = generate_synthetic_corpus(&spec, a.n, a.seed)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    save_corpus(&a.out, &corpus)?;
    m.finish(&a.out, &[a.out.clone()])?;
    Ok(())
}

/// The factor pairs analysed by `stats`; mechanisms are separate binary axes.
pub const STAT_PAIRS: [(Axis, Axis); 7] = [
    (Axis::Er, Axis::Da),
    (Axis::Ip, Axis::Da),
    (Axis::Ex, Axis::Da),
    (Axis::Er, Axis::Em),
    (Axis::Ip, Axis::Em),
    (Axis::Ex, Axis::Em),
    (Axis::Da, Axis::Em),
];

pub fn cmd_stats(a: &StatsArgs) -> Result<()> {
    let corpus = read_corpus(&a.corpus)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut m = ManifestBuilder::start("stats", &serde_json::json!({}), 0)?;
    m.input(&a.corpus);
    let mut outputs = Vec::new();
    for (x, y) in STAT_PAIRS {
        let table = conditional_distribution(&corpus, x, y)?;
        let stem = format!("{}_given_{}", y.name(), x.name());
        let csv = a.out.join(format!("{stem}.csv"));
        let svg = a.out.join(format!("{stem}.svg"));
        write(&csv, table.to_csv())?;
        write(&svg, render_heatmap_svg(&table))?;
        outputs.extend([csv, svg]);
    }
    let marginals = a.out.join("marginals.json");
    write(&marginals, serde_json::to_string_pretty(&factor_marginals(&corpus)?)? + "\n")?;
    outputs.push(marginals);
    m.finish(&a.out, &outputs)?;
    Ok(())
}

pub fn cmd_filter(a: &FilterArgs) -> Result<()> {
    let corpus = read_corpus(&a.corpus)?;
    let mut m = ManifestBuilder::start("filter", &serde_json::json!({}), 0)?;
    m.input(&a.corpus);
    let (kept, report) = filter_conversations(&corpus);
    save_corpus(&a.out, &kept)?;
    let report_path = with_suffix(&a.out, ".filter.json");
    write(&report_path, serde_json::to_string_pretty(&report)? + "\n")?;
    m.finish(&a.out, &[a.out.clone(), report_path])?;
    Ok(())
}

fn apply_decode_flags(cfg: &mut RunConfig, f: &DecodeFlags, seed: Option<u64>) {
    let d = &mut cfg.decode;
    if let Some(v) = f.top_p {
        d.token_top_p = v;
    }
    if let Some(v) = f.temperature {
        d.temperature = v;
    }
    if let Some(v) = f.factor_top_p {
        d.factor_top_p = v;
    }
    if let Some(v) = f.factor_temperature {
        d.factor_temperature = v;
    }
    if let Some(v) = f.max_new_tokens {
        d.max_new_tokens = v;
    }
    if let Some(s) = seed {
        d.seed = s;
    }
}

#[derive(Serialize)]
struct TrainRecord<'a> {
    variant: Variant,
    training: &'a comae::training::TrainingConfig,
    valid: Option<&'a PathBuf>,
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    let t = &mut cfg.training;
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.lambda {
        t.lambda = v;
    }
    if let Some(v) = a.learning_rate {
        t.learning_rate = v;
    }
    if let Some(v) = a.seed {
        t.seed = v;
    }
    t.validate().map_err(|e| usage(e.to_string()))?;
    let record = TrainRecord {
        variant: a.variant,
        training: &cfg.training,
        valid: a.valid.as_ref(),
    };
    let mut m = ManifestBuilder::start("train", &record, cfg.training.seed)?;
    if let Some(p) = &a.config {
        m.input(p);
    }
    m.input(&a.corpus);
    let corpus = read_corpus(&a.corpus)?;
    let (train_set, valid) = match &a.valid {
        Some(p) => {
            m.input(p);
            (corpus, read_corpus(p)?)
        }
        None => {
            if corpus.len() < 2 {
                bail!("need at least two conversations to hold out a validation set");
            }
            let hold = (corpus.len() / 10).max(1);
            let cut = corpus.len() - hold;
            (corpus[..cut].to_vec(), corpus[cut..].to_vec())
        }
    };
    let outcome = train_with(&train_set, &valid, a.variant, &cfg.training, |e| {
        eprintln!("epoch {} step {} loss {:.4} val ppl {:.4}", e.epoch, e.step, e.mean_loss, e.val_ppl);
    })?;
    save_checkpoint(&a.out, &outcome.best)?;
    let metrics = with_suffix(&a.out, ".metrics.csv");
    write(&metrics, metrics_csv(&outcome.log))?;
    let epochs = with_suffix(&a.out, ".epochs.json");
    write(&epochs, serde_json::to_string_pretty(&outcome.epochs)? + "\n")?;
    m.finish(&a.out, &[a.out.clone(), metrics, epochs])?;
    Ok(())
}

fn read_model(path: &Path) -> Result<ComaeModel> {
    Ok(load_checkpoint(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))?
        .model)
}

#[derive(Debug, Serialize)]
struct GenerationRecord<'a> {
    id: &'a str,
    mode: DecodeMode,
    response: String,
    factors: ChosenFactors,
    reference: &'a str,
    reference_factors: FactorTriple,
    #[serde(skip_serializing_if = "Option::is_none")]
    stages: Option<StageDistributions>,
}

pub fn cmd_generate(a: &GenerateArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    apply_decode_flags(&mut cfg, &a.decode, a.seed);
    cfg.decode.validate().map_err(|e| usage(e.to_string()))?;
    let mut m = ManifestBuilder::start(
        "generate",
        &serde_json::json!({ "mode": a.mode, "decode": cfg.decode }),
        cfg.decode.seed,
    )?;
    if let Some(p) = &a.config {
        m.input(p);
    }
    m.input(&a.checkpoint);
    m.input(&a.corpus);
    let model = read_model(&a.checkpoint)?;
    let corpus = read_corpus(&a.corpus)?;
    let gens = generate_responses(&model, &corpus, a.mode, &cfg.decode)?;
    let mut out = String::new();
    for (c, g) in corpus.iter().zip(&gens) {
        let rec = GenerationRecord {
            id: &c.id,
            mode: a.mode,
            response: generation_tokens(&model, g).join(" "),
            factors: g.factors,
            reference: &c.response().text,
            reference_factors: c.response_triple(),
            stages: g.stages.clone(),
        };
        out.push_str(&serde_json::to_string(&rec)?);
        out.push('\n');
    }
    write(&a.out, out)?;
    m.finish(&a.out, &[a.out.clone()])?;
    Ok(())
}

/// Classifiers saved as `<axis>.clf` in a directory; missing files are
/// left empty.
pub fn load_classifiers(dir: &Path) -> Result<ClassifierSet> {
    if !dir.is_dir() {
        bail!("classifier directory {} does not exist", dir.display());
    }
    let mut set = ClassifierSet::default();
    for axis in Axis::ALL {
        let p = dir.join(format!("{}.clf", axis.name()));
        if p.exists() {
            set.insert(TextClassifier::load(&p).with_context(|| format!("loading {}", p.display()))?);
        }
    }
    Ok(set)
}

/// Reports for one or more models evaluated on the same split.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct EvalBundle {
    pub reports: Vec<EvalReport>,
}

const HIT_PAIRS: [(FactorAxis, FactorAxis); 3] = [
    (FactorAxis::Cm, FactorAxis::Da),
    (FactorAxis::Cm, FactorAxis::Em),
    (FactorAxis::Da, FactorAxis::Em),
];

fn models_axis(v: Variant, axis: FactorAxis) -> bool {
    match axis {
        FactorAxis::Cm => v.cm,
        FactorAxis::Da => v.da,
        FactorAxis::Em => v.em,
    }
}

fn evaluate_model(
    model_id: &str,
    model: &ComaeModel,
    corpus: &[Conversation],
    a: &EvaluateArgs,
    cfg: &RunConfig,
    classifiers: Option<&ClassifierSet>,
) -> Result<EvalReport> {
    let mut report = EvalReport {
        model_id: model_id.to_string(),
        ..Default::default()
    };
    let ppl = perplexity(model, corpus)?;
    let table = match &a.embeddings {
        Some(p) => EmbeddingTable::load(p)?,
        None => EmbeddingTable::from_model(model),
    };
    let gens = generate_responses(model, corpus, a.mode, &cfg.decode)?;
    let hyps: Vec<Vec<String>> = gens.iter().map(|g| generation_tokens(model, g)).collect();
    let refs: Vec<Vec<String>> = corpus.iter().map(|c| tokenize(&c.response().text)).collect();
    let text = score_texts(&hyps, &refs, Some(&table), a.rouge_beta)?;
    if text.empty_hypotheses > 0 {
        report
            .notes
            .push(format!("{} empty generations scored 0 on BLEU-2 and ROUGE-L", text.empty_hypotheses));
    }
    report.splits.push(SplitScores {
        split: a.split.clone(),
        ppl,
        text: Some(text),
    });
    let v = model.variant();
    for (x, y) in HIT_PAIRS {
        if !(models_axis(v, x) && models_axis(v, y)) {
            continue;
        }
        match (hits_at_k(model, corpus, x, y, 1), hits_at_k(model, corpus, x, y, 3)) {
            (Ok(h1), Ok(h3)) => report.hits.push(HitsEntry {
                split: a.split.clone(),
                hits_at_1: h1,
                hits_at_3: h3,
            }),
            (Err(e), _) | (_, Err(e)) => report.notes.push(format!("hits {x}->{y} skipped: {e}")),
        }
    }
    if a.realization {
        let set = classifiers.expect("checked by caller");
        let axes: Vec<FactorAxis> = [FactorAxis::Cm, FactorAxis::Da, FactorAxis::Em]
            .into_iter()
            .filter(|&ax| models_axis(v, ax))
            .collect();
        if axes.is_empty() {
            report.notes.push("realization skipped: the model has no factors".into());
        } else {
            let predicted = generate_responses(model, corpus, DecodeMode::Predicted, &cfg.decode)?;
            let items: Vec<RealizationItem> = predicted
                .iter()
                .map(|g| RealizationItem {
                    text: generation_tokens(model, g).join(" "),
                    intended: g.factors,
                })
                .collect();
            for result in realization_score(&items, set, &axes)? {
                report.realization.push(RealizationEntry {
                    split: a.split.clone(),
                    result,
                });
            }
        }
    }
    Ok(report)
}

pub fn cmd_evaluate(a: &EvaluateArgs) -> Result<()> {
    if a.realization && a.classifiers.is_none() {
        return Err(usage("--realization needs --classifiers"));
    }
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    apply_decode_flags(&mut cfg, &a.decode, a.seed);
    cfg.decode.validate().map_err(|e| usage(e.to_string()))?;
    let mut m = ManifestBuilder::start(
        "evaluate",
        &serde_json::json!({
            "split": a.split, "mode": a.mode, "decode": cfg.decode,
            "realization": a.realization, "rouge_beta": a.rouge_beta,
        }),
        cfg.decode.seed,
    )?;
    for p in a.config.iter().chain(&a.checkpoint).chain([&a.corpus]).chain(&a.embeddings) {
        m.input(p);
    }
    let corpus = read_corpus(&a.corpus)?;
    let classifiers = match &a.classifiers {
        Some(dir) => Some(load_classifiers(dir)?),
        None => None,
    };
    let mut bundle = EvalBundle { reports: Vec::new() };
    for path in &a.checkpoint {
        let model = read_model(path)?;
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| model.variant().to_string());
        bundle
            .reports
            .push(evaluate_model(&id, &model, &corpus, a, &cfg, classifiers.as_ref())?);
    }
    write(&a.out, serde_json::to_string_pretty(&bundle)? + "\n")?;
    let csv_path = with_suffix(&a.out, ".csv");
    let mut csv = String::from("model_id,split,metric,value\n");
    for r in &bundle.reports {
        csv.extend(r.to_csv().lines().skip(1).map(|l| format!("{l}\n")));
    }
    write(&csv_path, csv)?;
    m.finish(&a.out, &[a.out.clone(), csv_path])?;
    Ok(())
}

pub fn cmd_train_classifier(a: &TrainClassifierArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    if let Some(v) = a.epochs {
        cfg.classifier.epochs = v;
    }
    if let Some(v) = a.seed {
        cfg.classifier.seed = v;
    }
    let axes = if a.axis.is_empty() { Axis::ALL.to_vec() } else { a.axis.clone() };
    let mut m = ManifestBuilder::start(
        "train-classifier",
        &serde_json::json!({ "axes": axes, "classifier": cfg.classifier }),
        cfg.classifier.seed,
    )?;
    if let Some(p) = &a.config {
        m.input(p);
    }
    m.input(&a.corpus);
    let corpus = read_corpus(&a.corpus)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut reports: Vec<ClassifierReport> = Vec::new();
    let mut outputs = Vec::new();
    for axis in axes {
        let data = labeled_texts(&corpus, axis);
        let (clf, report) = train_classifier(&data, axis, &cfg.classifier)?;
        eprintln!(
            "{}: accuracy {:.4} macro-F1 {:.4} on {} held-out texts",
            axis.name(),
            report.accuracy,
            report.macro_f1,
            report.holdout_size
        );
        let p = a.out.join(format!("{}.clf", axis.name()));
        clf.save(&p)?;
        outputs.push(p);
        reports.push(report);
    }
    let rp = a.out.join("reports.json");
    write(&rp, serde_json::to_string_pretty(&reports)? + "\n")?;
    outputs.push(rp);
    m.finish(&a.out, &outputs)?;
    Ok(())
}

pub fn cmd_annotate(a: &AnnotateArgs) -> Result<()> {
    let mut m = ManifestBuilder::start("annotate", &serde_json::json!({}), 0)?;
    m.input(&a.corpus);
    let set = load_classifiers(&a.classifiers)?;
    for axis in Axis::ALL {
        let p = a.classifiers.join(format!("{}.clf", axis.name()));
        if p.exists() {
            m.input(&p);
        }
    }
    let corpus = read_corpus(&a.corpus)?;
    let annotated = annotate_corpus(&corpus, &set)?;
    save_corpus(&a.out, &annotated)?;
    m.finish(&a.out, &[a.out.clone()])?;
    Ok(())
}
