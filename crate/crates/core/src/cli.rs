//! Command-line surface. Every command works on one working directory:
//!
//! ```text
//! covr synth   --n 512 --seed 7 --out DIR
//! covr ingest  --embeddings E --manifest M --descriptions D --out DIR
//! covr filter-desc --in DIR --captions C --percentile Q --out DIR2
//! covr train   --dir DIR
//! covr eval    --dir DIR --ks 1,5,10,50
//! covr query   --dir DIR --video 3 --change "make it red"
//! covr ablate  --dir DIR --grid inputs
//! covr export  --dir DIR --out FILE
//! ```
//!
//! Output goes to the supplied writer so commands can be driven in-process.
//! A directory is owned by one command at a time; nothing is locked.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use serde_json::json;

use crate::dataset::{
    assign_splits, clean_lines, read_descriptions, read_manifest, DescriptionLine, Split, WorkDir, CHECKPOINT_FILE,
    HISTORY_FILE,
};
use crate::descriptions::{calibrate_threshold, filter_descriptions, CalibrationSet, CleanConfig};
use crate::embedding::{Tokenizer, VideoId, DEFAULT_VOCAB};
use crate::encoders::{encode_text, joint_embedding, EncoderConfig, EncoderParams, InputMask, JointInputs};
use crate::error::{Error, Result};
use crate::loss::{LossConfig, LossTerms};
use crate::retrieval::top_k;
use crate::store::{save_target_databases, EmbeddingStore, StoreKind};
use crate::synthetic::{generate_synthetic, SyntheticSpec};
use crate::targets::build_target_databases;
use crate::trainer::{
    ablate_inputs, ablate_losses, ablation_table, evaluate, train_with, visual_index, EvalOptions,
    TrainConfig,
};

pub const DIR_ENV: &str = "COVR_DIR";
pub const FILTER_SUMMARY_FILE: &str = "filter_summary.json";

#[derive(Debug, Parser)]
#[command(name = "covr", version, about = "Composed video retrieval")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate raw inputs and create a working directory.
    Ingest(IngestArgs),
    /// Score descriptions against their videos and discard hallucinations.
    FilterDesc(FilterArgs),
    /// Generate a planted synthetic working directory.
    Synth(SynthArgs),
    Train(TrainArgs),
    /// Print Recall@K on one split.
    Eval(EvalArgs),
    /// Print the top-K gallery videos for one composed query.
    Query(QueryArgs),
    /// Run an input-mask or loss-term grid.
    Ablate(AblateArgs),
    /// Write the visual store, or the target tables, back out.
    Export(ExportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub descriptions: PathBuf,
    #[arg(long, env = DIR_ENV)]
    pub out: PathBuf,
    /// Seed for the train/val/test split when the manifest has none.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Checkpoint to load; without it the encoder is initialised from --seed.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 1)]
    pub blocks: usize,
    #[arg(long, default_value_t = DEFAULT_VOCAB)]
    pub vocab: usize,
}

#[derive(Debug, Clone, Args)]
pub struct FilterArgs {
    #[arg(long = "in", env = DIR_ENV)]
    pub input: PathBuf,
    /// JSON-lines `{"id", "text"}` reference captions.
    #[arg(long)]
    pub captions: PathBuf,
    #[arg(long, default_value_t = 0.0)]
    pub percentile: f64,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// Number of triplets; the gallery holds twice as many videos.
    #[arg(long, default_value_t = 512)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 4)]
    pub frames: usize,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, env = DIR_ENV)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long, env = DIR_ENV)]
    pub dir: PathBuf,
    /// Where to write the trained checkpoint (default DIR/checkpoint.cvrc).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Start from this checkpoint instead of a fresh initialisation.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 1)]
    pub blocks: usize,
    #[arg(long, default_value_t = DEFAULT_VOCAB)]
    pub vocab: usize,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Clone, Args)]
pub struct TrainFlags {
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Loss terms, e.g. `ve,mme,te`.
    #[arg(long, default_value = "all")]
    pub loss: String,
    /// Query inputs, e.g. `video,description,change`.
    #[arg(long, default_value = "all")]
    pub inputs: String,
    #[arg(long, default_value = "sgd")]
    pub optimizer: String,
    #[arg(long, default_value = "constant")]
    pub schedule: String,
    /// Multi-modal target table policy: snapshot, per-epoch or per-step.
    #[arg(long, default_value = "snapshot")]
    pub refresh: String,
    #[arg(long, default_value_t = 0.07)]
    pub temperature: f64,
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.5)]
    pub beta: f64,
    /// Keep the loss weights fixed at their initial values.
    #[arg(long)]
    pub detach_weights: bool,
}

impl TrainFlags {
    pub fn config(&self) -> Result<TrainConfig> {
        let config = TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.lr,
            seed: self.seed,
            loss_terms: self.loss.parse()?,
            inputs: self.inputs.parse()?,
            loss: LossConfig {
                temperature: self.temperature,
                alpha: self.alpha,
                beta: self.beta,
                detach_weights: self.detach_weights,
            },
            optimizer: self.optimizer.parse()?,
            schedule: self.schedule.parse()?,
            refresh: self.refresh.parse()?,
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long, env = DIR_ENV)]
    pub dir: PathBuf,
    /// Default DIR/checkpoint.cvrc.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Evaluate a fresh initialisation from this seed instead of a checkpoint.
    #[arg(long, conflicts_with = "checkpoint")]
    pub untrained: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "1,5,10,50")]
    pub ks: String,
    #[arg(long, default_value_t = Split::Test)]
    pub split: Split,
    #[arg(long, default_value = "all")]
    pub inputs: String,
    #[arg(long)]
    pub exclude_query: bool,
    /// Also write the metrics as JSON to this file.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct QueryArgs {
    #[arg(long, env = DIR_ENV)]
    pub dir: PathBuf,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub video: u64,
    /// Query description; defaults to the video's kept description.
    #[arg(long)]
    pub description: Option<String>,
    #[arg(long)]
    pub change: String,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    #[arg(long, default_value = "all")]
    pub inputs: String,
    #[arg(long)]
    pub exclude_query: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Grid {
    Inputs,
    Losses,
}

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    #[arg(long, env = DIR_ENV)]
    pub dir: PathBuf,
    #[arg(long, value_enum)]
    pub grid: Grid,
    /// Semicolon-separated cells; defaults to the three-row grid of each kind.
    #[arg(long)]
    pub cells: Option<String>,
    /// Checkpoint for the inputs grid (default DIR/checkpoint.cvrc).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "1,5,10,50")]
    pub ks: String,
    #[arg(long)]
    pub exclude_query: bool,
    #[arg(long)]
    pub json: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 1)]
    pub blocks: usize,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Clone, Args)]
pub struct ExportArgs {
    #[arg(long, env = DIR_ENV)]
    pub dir: PathBuf,
    /// Output file, or output directory with --targets.
    #[arg(long)]
    pub out: PathBuf,
    /// Export the three target tables built with the checkpoint.
    #[arg(long)]
    pub targets: bool,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Ingest(a) => cmd_ingest(&a, out),
        Command::FilterDesc(a) => cmd_filter_desc(&a, out),
        Command::Synth(a) => cmd_synth(&a, out),
        Command::Train(a) => cmd_train(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Query(a) => cmd_query(&a, out),
        Command::Ablate(a) => cmd_ablate(&a, out),
        Command::Export(a) => cmd_export(&a, out),
    }
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))
}

pub fn parse_ks(s: &str) -> Result<Vec<usize>> {
    let ks = s
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .ok()
                .filter(|&k| k > 0)
                .ok_or_else(|| Error::InvalidConfig(format!("bad cutoff {p:?} in {s:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if ks.is_empty() || ks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidConfig(format!("cutoffs must be increasing: {s:?}")));
    }
    Ok(ks)
}

fn unresolved(path: &Path, line: usize, what: &str, id: VideoId) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: format!("{what} {id} is not in the embedding store"),
    }
}

pub fn cmd_ingest(a: &IngestArgs, out: &mut dyn Write) -> Result<()> {
    let store = EmbeddingStore::load(&a.embeddings)?;
    if store.kind != StoreKind::VisualContext {
        return Err(Error::Format {
            path: a.embeddings.clone(),
            message: format!("expected a visual context store, found {:?}", store.kind),
        });
    }
    let provider = store.to_provider()?;
    let manifest = read_manifest(&a.manifest)?;
    for (line, t) in &manifest {
        for id in [t.query_id, t.target_id] {
            if !provider.contains(id) {
                return Err(unresolved(&a.manifest, *line, "video id", id));
            }
        }
        if let Some(subset) = &t.subset {
            if let Some(&id) = subset.iter().find(|id| !provider.contains(**id)) {
                return Err(unresolved(&a.manifest, *line, "subset id", id));
            }
            if !subset.contains(&t.target_id) {
                return Err(Error::Parse {
                    path: a.manifest.clone(),
                    line: *line,
                    message: format!("subset does not contain target {}", t.target_id),
                });
            }
        }
    }
    let descriptions = read_descriptions(&a.descriptions)?;
    for (line, d) in &descriptions {
        if !provider.contains(d.id) {
            return Err(unresolved(&a.descriptions, *line, "description id", d.id));
        }
    }
    let mut triplets: Vec<_> = manifest.into_iter().map(|(_, t)| t).collect();
    let with_split = triplets.iter().filter(|t| t.split.is_some()).count();
    if with_split == 0 {
        assign_splits(&mut triplets, a.seed);
    } else if with_split != triplets.len() {
        return Err(Error::InvalidConfig("either every triplet or none carries a split".into()));
    }
    let lines: Vec<DescriptionLine> = descriptions.into_iter().map(|(_, d)| d).collect();
    let work = WorkDir { store, triplets, descriptions: clean_lines(&lines)? };
    let dataset = work.dataset()?;
    work.save(&a.out)?;
    emit(
        out,
        &format!(
            "{}\n",
            json!({
                "videos": dataset.provider.len(),
                "triplets": work.triplets.len(),
                "usable_triplets": dataset.triplets.len(),
                "kept_descriptions": dataset.descriptions.len(),
            })
        ),
    )
}

fn model_params(m: &ModelArgs, dim: usize) -> Result<EncoderParams> {
    match &m.checkpoint {
        Some(path) => EncoderParams::load(path),
        None => EncoderParams::init(
            EncoderConfig { dim, hidden: m.hidden, heads: m.heads, blocks: m.blocks, vocab: m.vocab },
            m.seed,
        ),
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CaptionLine {
    id: VideoId,
    #[serde(alias = "caption")]
    text: String,
}

fn read_captions(path: &Path, work: &WorkDir) -> Result<CalibrationSet> {
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pairs = Vec::new();
    for (i, raw) in text.split(|&b| b == b'\n').enumerate() {
        let parse_err = |message: String| Error::Parse { path: path.to_path_buf(), line: i + 1, message };
        let line = std::str::from_utf8(raw).map_err(|e| parse_err(format!("invalid UTF-8: {e}")))?;
        if line.trim().is_empty() {
            continue;
        }
        let c: CaptionLine = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        if !work.store.records.iter().any(|(id, _)| *id == c.id) {
            return Err(unresolved(path, i + 1, "caption id", c.id));
        }
        pairs.push((c.text, c.id));
    }
    Ok(CalibrationSet { pairs })
}

pub fn cmd_filter_desc(a: &FilterArgs, out: &mut dyn Write) -> Result<()> {
    let work = WorkDir::load(&a.input)?;
    let cal = read_captions(&a.captions, &work)?;
    let provider = work.store.to_provider()?;
    let params = model_params(&a.model, work.store.dim)?;
    let threshold = calibrate_threshold(&cal, &params, &provider, a.percentile)?;
    let records: Vec<(VideoId, String)> =
        work.descriptions.iter().map(|d| (d.id, d.original().to_string())).collect();
    let filtered = filter_descriptions(&records, threshold, &params, &provider, &CleanConfig::default())?;
    let descriptions: Vec<DescriptionLine> = filtered.iter().map(DescriptionLine::from).collect();
    let kept = filtered.iter().filter(|r| r.status.is_kept()).count();
    let result = WorkDir { descriptions, ..work };
    result.save(&a.out)?;
    let summary = json!({
        "threshold": threshold,
        "percentile": a.percentile,
        "calibration": cal.pairs.len(),
        "kept": kept,
        "discarded": filtered.len() - kept,
    })
    .to_string();
    let path = a.out.join(FILTER_SUMMARY_FILE);
    fs::write(&path, format!("{summary}\n")).map_err(|e| Error::io(path, e))?;
    emit(out, &format!("{summary}\n"))
}

pub fn cmd_synth(a: &SynthArgs, out: &mut dyn Write) -> Result<()> {
    let spec = SyntheticSpec { n: a.n, dim: a.dim, seed: a.seed, frames: a.frames, noise: a.noise, ..Default::default() };
    let data = generate_synthetic(&spec)?;
    data.workdir().save(&a.out)?;
    emit(
        out,
        &format!("{}\n", json!({ "triplets": data.triplets.len(), "videos": data.provider.len(), "dim": a.dim })),
    )
}

fn checkpoint_path(dir: &Path, explicit: &Option<PathBuf>) -> PathBuf {
    explicit.clone().unwrap_or_else(|| dir.join(CHECKPOINT_FILE))
}

fn fresh_params(dim: usize, hidden: usize, heads: usize, blocks: usize, vocab: usize, seed: u64) -> Result<EncoderParams> {
    EncoderParams::init(EncoderConfig { dim, hidden, heads, blocks, vocab }, seed)
}

pub fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let config = a.train.config()?;
    let work = WorkDir::load(&a.dir)?;
    let dataset = work.dataset()?;
    let init = match &a.init {
        Some(path) => EncoderParams::load(path)?,
        None => fresh_params(work.store.dim, a.hidden, a.heads, a.blocks, a.vocab, config.seed)?,
    };
    let target = checkpoint_path(&a.dir, &a.out);
    let mut history = String::new();
    let mut write_err = None;
    let result = train_with(&config, &dataset, &init, |rec| {
        let line = format!("{}\n", rec.to_json());
        history.push_str(&line);
        if let Err(e) = emit(out, &line) {
            write_err.get_or_insert(e);
        }
    });
    let history_path = a.dir.join(HISTORY_FILE);
    fs::write(&history_path, &history).map_err(|e| Error::io(&history_path, e))?;
    if let Some(e) = write_err {
        return Err(e);
    }
    match result {
        Ok(outcome) => outcome.params.save(&target),
        Err(Error::DivergedTraining { epoch, step, last_finite }) => {
            last_finite.save(&target.with_extension("last-finite.cvrc"))?;
            Err(Error::DivergedTraining { epoch, step, last_finite })
        }
        Err(e) => Err(e),
    }
}

fn load_or_fresh(dir: &Path, checkpoint: &Option<PathBuf>, untrained: bool, dim: usize, seed: u64) -> Result<EncoderParams> {
    if untrained {
        fresh_params(dim, 64, 4, 1, DEFAULT_VOCAB, seed)
    } else {
        EncoderParams::load(&checkpoint_path(dir, checkpoint))
    }
}

pub fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let ks = parse_ks(&a.ks)?;
    let mode: InputMask = a.inputs.parse()?;
    let work = WorkDir::load(&a.dir)?;
    let params = load_or_fresh(&a.dir, &a.checkpoint, a.untrained, work.store.dim, a.seed)?;
    let dataset = work.dataset()?;
    let triplets = dataset.split(a.split);
    if triplets.is_empty() {
        return Err(Error::InvalidConfig(format!("split {} has no usable triplets", a.split)));
    }
    let options = EvalOptions { exclude_query: a.exclude_query };
    let report = evaluate(&params, &dataset, &triplets, mode, &ks, options)?;
    if let Some(path) = &a.json {
        fs::write(path, format!("{}\n", report.to_json())).map_err(|e| Error::io(path, e))?;
    }
    emit(out, &report.to_table())
}

pub fn cmd_query(a: &QueryArgs, out: &mut dyn Write) -> Result<()> {
    let mode: InputMask = a.inputs.parse()?;
    let work = WorkDir::load(&a.dir)?;
    let params = EncoderParams::load(&checkpoint_path(&a.dir, &a.checkpoint))?;
    let dataset = work.dataset()?;
    let video = VideoId(a.video);
    let visual = dataset.provider.get(video)?;
    let description = match &a.description {
        Some(d) => crate::descriptions::clean_description(d)?,
        None => dataset.descriptions.get(&video).cloned().ok_or(Error::MissingDescription(video))?,
    };
    let tok: Tokenizer = params.tokenizer();
    let description = tok.tokenize(&description)?;
    let context = encode_text(&params, &description)?.sequence;
    let change = tok.tokenize(&crate::descriptions::clean_description(&a.change)?)?;
    let inputs = JointInputs { visual, description: &description, description_context: &context, change: &change };
    let query = joint_embedding(&params, &inputs, mode)?;
    let index = visual_index(&dataset)?;
    let exclude = a.exclude_query.then_some(video);
    let ranked = top_k(&index, video, &query, a.k, exclude)?;
    let mut text = String::new();
    for (id, score) in &ranked.hits {
        text.push_str(&format!("{id}\t{score:.6}\n"));
    }
    emit(out, &text)
}

fn split_cells(s: &str) -> impl Iterator<Item = &str> {
    s.split(';').map(str::trim).filter(|c| !c.is_empty())
}

pub fn cmd_ablate(a: &AblateArgs, out: &mut dyn Write) -> Result<()> {
    let ks = parse_ks(&a.ks)?;
    let work = WorkDir::load(&a.dir)?;
    let dataset = work.dataset()?;
    let options = EvalOptions { exclude_query: a.exclude_query };
    let rows = match a.grid {
        Grid::Inputs => {
            let masks = match &a.cells {
                Some(c) => split_cells(c).map(str::parse).collect::<Result<Vec<InputMask>>>()?,
                None => vec![InputMask::VIDEO, InputMask::VIDEO_CHANGE, InputMask::ALL],
            };
            let params = EncoderParams::load(&checkpoint_path(&a.dir, &a.checkpoint))?;
            ablate_inputs(&params, &dataset, &masks, &ks, options)?
        }
        Grid::Losses => {
            let sets = match &a.cells {
                Some(c) => split_cells(c).map(str::parse).collect::<Result<Vec<LossTerms>>>()?,
                None => vec![LossTerms::VISUAL, LossTerms::VISUAL_MULTIMODAL, LossTerms::ALL],
            };
            let config = a.train.config()?;
            let init = fresh_params(work.store.dim, a.hidden, a.heads, a.blocks, DEFAULT_VOCAB, config.seed)?;
            ablate_losses(&config, &dataset, &init, &sets, &ks, options)?
        }
    };
    if let Some(path) = &a.json {
        let body = serde_json::to_string(&rows).expect("serializable rows");
        fs::write(path, format!("{body}\n")).map_err(|e| Error::io(path, e))?;
    }
    emit(out, &ablation_table(&rows, &ks))
}

pub fn cmd_export(a: &ExportArgs, out: &mut dyn Write) -> Result<()> {
    let work = WorkDir::load(&a.dir)?;
    if a.targets {
        let params = EncoderParams::load(&checkpoint_path(&a.dir, &a.checkpoint))?;
        let dataset = work.dataset()?;
        let ids: BTreeSet<VideoId> = dataset.descriptions.keys().copied().collect();
        let dbs = build_target_databases(&dataset.provider, &dataset.descriptions, &params, ids.iter().copied())?;
        fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
        save_target_databases(&dbs, &a.out)?;
        emit(out, &format!("{}\n", json!({ "targets": ids.len() })))
    } else {
        work.store.save(&a.out)?;
        emit(out, &format!("{}\n", json!({ "records": work.store.records.len() })))
    }
}
