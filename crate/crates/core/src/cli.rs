//! The `fbasis` command line.
//!
//! Exit codes: 0 success, 1 input or configuration error, 2 numerical or
//! convergence failure, 3 partial failure (some inputs skipped).

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::classify::{component_weight_summary, nested_loo_evaluate, subsample_weights, CvConfig, LabeledDataset};
use crate::coding::{encode_series, CodingConfig};
use crate::error::{Error, Result};
use crate::io::{self, FeatureTable, FrameKind, PayloadEncoding, PipelineConfig, Provenance};
use crate::learn::{learn, mean_abs_activation, rank_by_activation, InitStrategy, LearnConfig};
use crate::model::{
    synthesize_deformation, validate_dictionary, CoefficientSeries, DeformationSample,
    ExpressionModel, GroupCode, LandmarkTopology, POSE_CHANNELS,
};
use crate::synth::{generate_labeled_series, generate_planted_corpus, LabeledSeriesSpec, SynthSpec};
use crate::wcc::{video_features, WccConfig};

#[derive(Debug, Parser)]
#[command(name = "fbasis", version, about = "Localized sparse facial expression coding")]
pub struct Cli {
    /// TOML pipeline configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every randomized stage; overrides the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (default: current directory).
    #[arg(long, short = 'o', global = true)]
    pub output: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Learn a localized dictionary from a deformation corpus.
    Learn(LearnArgs),
    /// Code per-frame inputs into BU coefficient series.
    Encode(EncodeArgs),
    /// Order atoms by mean absolute activation.
    Rank(RankArgs),
    /// Windowed cross-correlation features per video.
    Wcc(WccArgs),
    /// Nested leave-one-out SVM evaluation and weight summaries.
    Classify(ClassifyArgs),
    /// Write synthetic corpora and labeled series.
    #[command(subcommand)]
    Synth(SynthCommand),
    /// Check a dictionary file's invariants.
    Validate(ValidateArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PayloadArg {
    Binary,
    Csv,
}

impl From<PayloadArg> for PayloadEncoding {
    fn from(p: PayloadArg) -> Self {
        match p {
            PayloadArg::Binary => PayloadEncoding::F64le,
            PayloadArg::Csv => PayloadEncoding::Csv,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum InitArg {
    Gaussian,
    Samples,
}

#[derive(Debug, Args)]
pub struct LearnArgs {
    /// Frame table with d_<i> deformation columns or eps_<m> columns.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Landmark topology JSON (default: built-in iBUG-51).
    #[arg(long)]
    pub topology: Option<PathBuf>,
    /// Expression model JSON, required for eps_<m> corpora.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub atoms: Option<usize>,
    /// Atoms per group, e.g. `LB=2,RB=2,LE=2,RE=2,NO=2,MO=2`.
    #[arg(long)]
    pub allocation: Option<String>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub tolerance: Option<f64>,
    #[arg(long, value_enum)]
    pub init: Option<InitArg>,
    #[arg(long, value_enum, default_value = "binary")]
    pub payload: PayloadArg,
    /// Also write the corpus codes.
    #[arg(long)]
    pub write_codes: bool,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    #[arg(long)]
    pub dictionary: PathBuf,
    /// Expression model JSON, required for eps_<m> inputs.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Frame rate, when the input does not declare one.
    #[arg(long)]
    pub fps: Option<f64>,
    /// Omit pose columns, allowing inputs without them.
    #[arg(long)]
    pub no_pose: bool,
    /// Sparsity weight (default: the dictionary's).
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Expected BU count; an error if the dictionary differs.
    #[arg(long)]
    pub atoms: Option<usize>,
    /// Per-video frame tables.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RankArgs {
    #[arg(long)]
    pub dictionary: PathBuf,
    /// Coefficient CSVs written by `encode`.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct WccArgs {
    #[arg(long)]
    pub window: Option<f64>,
    #[arg(long)]
    pub stride: Option<f64>,
    #[arg(long)]
    pub lag: Option<f64>,
    #[arg(long)]
    pub lag_step: Option<usize>,
    /// Comma-separated channel names to keep, in order.
    #[arg(long, value_delimiter = ',')]
    pub channels: Option<Vec<String>>,
    /// Coefficient CSVs written by `encode`.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    #[arg(long)]
    pub features: PathBuf,
    /// CSV with video_id and label columns.
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub c_grid: Option<Vec<f64>>,
    #[arg(long)]
    pub inner_folds: Option<usize>,
    #[arg(long)]
    pub no_standardize: bool,
    /// Weight vectors for the summary; 0 skips it.
    #[arg(long)]
    pub subsamples: Option<usize>,
    #[arg(long)]
    pub fraction: Option<f64>,
    /// Rank manifest from `rank`, for accuracy over the first k components.
    #[arg(long, requires = "first_k")]
    pub rank_manifest: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', requires = "rank_manifest")]
    pub first_k: Option<Vec<usize>>,
}

#[derive(Debug, Subcommand)]
pub enum SynthCommand {
    /// Corpus of sparse combinations of planted localized atoms.
    Corpus(SynthCorpusArgs),
    /// Two-class coefficient series with a lagged coupling in class A.
    Series(SynthSeriesArgs),
}

#[derive(Debug, Args)]
pub struct SynthCorpusArgs {
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub atoms_per_group: Option<usize>,
    #[arg(long)]
    pub active: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub topology: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthSeriesArgs {
    #[arg(long)]
    pub videos_per_class: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub fps: Option<f64>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub lag_frames: Option<usize>,
    #[arg(long)]
    pub coupling: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub no_pose: bool,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    pub dictionary: PathBuf,
}

/// What a successful command reports back.
#[derive(Debug, PartialEq, Eq)]
pub enum Outcome {
    Success,
    /// Some inputs were skipped.
    Partial,
    /// The command ran but found the input invalid.
    Rejected,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        match self {
            Outcome::Success => 0,
            Outcome::Rejected => 1,
            Outcome::Partial => 3,
        }
    }
}

/// Parses `args` (including the program name), runs, and returns the exit
/// code. Errors are printed to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let recorded = recorded_command_line(&argv);
    match execute(cli, recorded) {
        Ok(outcome) => outcome.exit_code(),
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// The arguments after the program name with `--output` and its value
/// dropped, so that the same command writing elsewhere records the same line.
fn recorded_command_line(argv: &[OsString]) -> Vec<String> {
    let mut out = Vec::new();
    let mut skip = false;
    for a in argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()) {
        if std::mem::take(&mut skip) {
            continue;
        }
        if a == "--output" || a == "-o" {
            skip = true;
        } else if !a.starts_with("--output=") {
            out.push(a);
        }
    }
    out
}

struct Context {
    config: PipelineConfig,
    output: PathBuf,
    command_line: Vec<String>,
}

impl Context {
    fn out(&self, name: &str) -> PathBuf {
        self.output.join(name)
    }
}

pub fn execute(cli: Cli, command_line: Vec<String>) -> Result<Outcome> {
    let mut config = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    config.check_paths()?;
    if let Some(seed) = cli.seed.or(config.seed) {
        config.seed = Some(seed);
        config.learn.seed = seed;
        config.cv.seed = seed;
    }
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::config("--threads must be positive"));
        }
        if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            warn!("thread pool already initialized; --threads {n} ignored");
        }
    }
    let output = cli
        .output
        .clone()
        .or_else(|| config.output.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    let ctx = Context {
        config,
        output,
        command_line,
    };
    match cli.command {
        Command::Learn(a) => cmd_learn(&ctx, a),
        Command::Encode(a) => cmd_encode(&ctx, a),
        Command::Rank(a) => cmd_rank(&ctx, a),
        Command::Wcc(a) => cmd_wcc(&ctx, a),
        Command::Classify(a) => cmd_classify(&ctx, a),
        Command::Synth(SynthCommand::Corpus(a)) => cmd_synth_corpus(&ctx, a),
        Command::Synth(SynthCommand::Series(a)) => cmd_synth_series(&ctx, a),
        Command::Validate(a) => cmd_validate(a),
    }
}

fn load_topology(flag: Option<&PathBuf>, config: &PipelineConfig) -> Result<LandmarkTopology> {
    match flag.or(config.topology.as_ref()) {
        Some(p) => io::read_topology(p),
        None => Ok(LandmarkTopology::ibug51()),
    }
}

fn load_model(flag: Option<&PathBuf>, config: &PipelineConfig) -> Result<Option<ExpressionModel>> {
    flag.or(config.model.as_ref()).map(|p| io::read_expression_model(p)).transpose()
}

/// Deformation rows of a frame table, converting eps rows through the model.
fn deformations(frames: &io::FrameTable, model: Option<&ExpressionModel>, landmarks: usize) -> Result<Array2<f64>> {
    match frames.kind {
        FrameKind::Deformation => {
            if frames.values.ncols() != 3 * landmarks {
                return Err(Error::input(format!(
                    "{}: {} deformation columns, expected 3L = {}",
                    frames.table.path.display(),
                    frames.values.ncols(),
                    3 * landmarks
                )));
            }
            Ok(frames.values.clone())
        }
        FrameKind::Expression => {
            let model = model.ok_or_else(|| {
                Error::config(format!(
                    "{} holds eps_<m> columns; an expression model (--model) is required",
                    frames.table.path.display()
                ))
            })?;
            if model.landmark_count() != landmarks {
                return Err(Error::input(format!(
                    "expression model has {} landmarks, topology has {landmarks}",
                    model.landmark_count()
                )));
            }
            let rows: Vec<Array1<f64>> = frames
                .values
                .rows()
                .into_iter()
                .enumerate()
                .map(|(t, r)| {
                    synthesize_deformation(model, r.as_slice().expect("row-major table"))
                        .map(DeformationSample::into_inner)
                        .map_err(|e| Error::Frame {
                            frame: t,
                            source: Box::new(e),
                        })
                })
                .collect::<Result<_>>()?;
            let mut out = Array2::zeros((rows.len(), 3 * landmarks));
            for (mut dst, src) in out.rows_mut().into_iter().zip(rows) {
                dst.assign(&src);
            }
            Ok(out)
        }
    }
}

fn parse_allocation(text: &str) -> Result<BTreeMap<GroupCode, usize>> {
    text.split(',')
        .map(|part| {
            let (g, n) = part
                .split_once('=')
                .ok_or_else(|| Error::config(format!("allocation entry {part:?} is not GROUP=COUNT")))?;
            let g: GroupCode = g.trim().parse()?;
            let n: usize = n
                .trim()
                .parse()
                .map_err(|_| Error::config(format!("allocation count {n:?} is not an integer")))?;
            Ok((g, n))
        })
        .collect()
}

fn cmd_learn(ctx: &Context, a: LearnArgs) -> Result<Outcome> {
    let topology = load_topology(a.topology.as_ref(), &ctx.config)?;
    let model = load_model(a.model.as_ref(), &ctx.config)?;
    let mut cfg: LearnConfig = ctx.config.learn.clone();
    if let Some(l) = a.lambda {
        cfg.lambda = l;
    }
    if let Some(k) = a.atoms {
        cfg.atom_count = k;
    }
    if let Some(s) = &a.allocation {
        let alloc = parse_allocation(s)?;
        if a.atoms.is_none() {
            cfg.atom_count = alloc.values().sum();
        }
        cfg.group_allocation = Some(alloc);
    }
    if let Some(n) = a.iterations {
        cfg.outer_iterations = n;
    }
    if let Some(t) = a.tolerance {
        cfg.convergence_tol = t;
    }
    if let Some(init) = a.init {
        cfg.init = match init {
            InitArg::Gaussian => InitStrategy::MaskedGaussian,
            InitArg::Samples => InitStrategy::MaskedDataSamples,
        };
    }
    cfg.validate()?;
    let frames = io::read_frames(&a.corpus, false)?;
    let samples = deformations(&frames, model.as_ref(), topology.landmark_count())?;
    info!("learning {} atoms from {} samples", cfg.atom_count, samples.nrows());
    let outcome = learn(samples.view(), &topology, &cfg)?;
    let hash = io::config_hash(&json!({ "command": "learn", "learn": &cfg, "topology": &topology }));
    let provenance = Provenance {
        config_hash: hash.clone(),
        learn_config: Some(cfg),
        command_line: ctx.command_line.clone(),
    };
    io::write_dictionary(&ctx.out("dictionary.json"), &outcome.dictionary, &provenance, a.payload.into())?;
    io::write_training_log(&ctx.out("training_log.csv"), &outcome.log, &hash)?;
    if a.write_codes {
        io::write_codes(&ctx.out("codes.csv"), outcome.dictionary.atom_names(), &outcome.codes, &hash)?;
    }
    Ok(Outcome::Success)
}

/// `clip.frames.csv` → `clip`.
fn video_id(path: &Path) -> String {
    let name = path.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
    let mut id = name.as_str();
    for suffix in [".csv", ".coefficients", ".frames"] {
        id = id.strip_suffix(suffix).unwrap_or(id);
    }
    id.to_string()
}

fn unique_ids(inputs: &[PathBuf]) -> Result<Vec<String>> {
    let ids: Vec<String> = inputs.iter().map(|p| video_id(p)).collect();
    let mut seen = BTreeMap::new();
    for (id, p) in ids.iter().zip(inputs) {
        if let Some(prev) = seen.insert(id.clone(), p) {
            return Err(Error::input(format!(
                "{} and {} share video id {id:?}",
                prev.display(),
                p.display()
            )));
        }
    }
    Ok(ids)
}

fn cmd_encode(ctx: &Context, a: EncodeArgs) -> Result<Outcome> {
    let (dict, _) = io::read_dictionary(&a.dictionary)?;
    if let Some(k) = a.atoms {
        if k != dict.atom_count() {
            return Err(Error::input(format!(
                "--atoms {k} requested but {} holds {} atoms",
                a.dictionary.display(),
                dict.atom_count()
            )));
        }
    }
    let model = load_model(a.model.as_ref(), &ctx.config)?;
    let coding = CodingConfig {
        lambda: a.lambda.unwrap_or(dict.lambda_used()),
        ..ctx.config.coding
    };
    coding.validate()?;
    let ids = unique_ids(&a.inputs)?;
    let hash = io::config_hash(&json!({
        "command": "encode",
        "coding": &coding,
        "pose": !a.no_pose,
        "fps": a.fps,
        "dictionary_atoms": dict.atom_names(),
    }));
    for (input, id) in a.inputs.iter().zip(&ids) {
        let frames = io::read_frames(input, !a.no_pose)?;
        let fps = match (a.fps, frames.table.meta_f64("frame_rate")?) {
            (Some(f), _) | (None, Some(f)) => f,
            (None, None) => {
                return Err(Error::input(format!(
                    "{}: no frame_rate in the metadata line; pass --fps",
                    input.display()
                )))
            }
        };
        let d = deformations(&frames, model.as_ref(), dict.topology().landmark_count())?;
        let samples: Vec<DeformationSample> = d
            .rows()
            .into_iter()
            .map(|r| DeformationSample::new(r.to_owned(), dict.topology().landmark_count()))
            .collect::<Result<_>>()?;
        if samples.is_empty() {
            return Err(Error::input(format!("{}: no frames", input.display())));
        }
        let z = encode_series(&dict, &samples, &coding)?;
        let pose = if a.no_pose { None } else { frames.pose.clone() };
        let series = CoefficientSeries::with_names(fps, z, pose, dict.atom_names().to_vec())?;
        io::write_coefficients(&ctx.out(&format!("{id}.coefficients.csv")), &series, &hash)?;
        info!("encoded {} ({} frames)", input.display(), series.frame_count());
    }
    Ok(Outcome::Success)
}

fn cmd_rank(ctx: &Context, a: RankArgs) -> Result<Outcome> {
    let (dict, doc) = io::read_dictionary(&a.dictionary)?;
    let series: Vec<CoefficientSeries> = a.inputs.iter().map(|p| io::read_coefficients(p)).collect::<Result<_>>()?;
    for (s, p) in series.iter().zip(&a.inputs) {
        if s.bu_names() != dict.atom_names() {
            return Err(Error::input(format!(
                "{}: BU columns {:?} do not match the dictionary's {} atoms",
                p.display(),
                s.bu_names(),
                dict.atom_count()
            )));
        }
    }
    let ranked = rank_by_activation(&dict, &series)?;
    let means = mean_abs_activation(&series);
    let hash = io::config_hash(&json!({ "command": "rank", "dictionary": &doc.config_hash }));
    let provenance = Provenance {
        config_hash: hash.clone(),
        learn_config: doc.learn_config.clone(),
        command_line: ctx.command_line.clone(),
    };
    io::write_dictionary(&ctx.out("dictionary.json"), &ranked, &provenance, doc.payload.encoding)?;
    let order = ranked.activation_rank().expect("rank set");
    let header = ["rank", "name", "atom_index", "group", "mean_abs_activation"]
        .map(String::from)
        .to_vec();
    let rows: Vec<Vec<String>> = order
        .iter()
        .enumerate()
        .map(|(r, &k)| {
            vec![
                (r + 1).to_string(),
                ranked.atom_names()[k].clone(),
                k.to_string(),
                ranked.atom_groups()[k].to_string(),
                io::fmt_f64(means[k]),
            ]
        })
        .collect();
    let meta = io::metadata_line(io::RANK_MANIFEST_FORMAT, &[("config_hash", hash)]);
    io::write_csv(&ctx.out("rank_manifest.csv"), &meta, &header, &rows)?;
    Ok(Outcome::Success)
}

#[derive(Serialize)]
struct SkippedVideo {
    video_id: String,
    path: String,
    reason: String,
}

#[derive(Serialize)]
struct WccMeta<'a> {
    config_hash: &'a str,
    wcc: &'a WccConfig,
    stride_seconds: f64,
    channel_count: usize,
    feature_count: usize,
    conventions: &'a [&'a str],
    videos: Vec<serde_json::Value>,
    skipped: Vec<SkippedVideo>,
}

const WCC_CONVENTIONS: &[&str] = &[
    "window, stride and lag range are converted from seconds to frames by rounding",
    "each lagged correlation uses only the overlapping part of the window",
    "the signed value with the largest |r| over the lag set is kept; ties keep the smaller |lag|, negative first",
    "a constant segment contributes r = 0; a channel constant over a whole window gets a zero row and column",
    "features are flattened row-major, index i*Q + j, and averaged over all full windows",
];

fn cmd_wcc(ctx: &Context, a: WccArgs) -> Result<Outcome> {
    let mut cfg = ctx.config.wcc.clone();
    if let Some(w) = a.window {
        cfg.window_seconds = w;
    }
    if a.stride.is_some() {
        cfg.window_stride_seconds = a.stride;
    }
    if let Some(l) = a.lag {
        cfg.lag_range_seconds = l;
    }
    if let Some(s) = a.lag_step {
        cfg.lag_step_frames = s;
    }
    if a.channels.is_some() {
        cfg.selected_channels = a.channels.clone();
    }
    let ids = unique_ids(&a.inputs)?;
    let results: Vec<Result<(CoefficientSeries, crate::wcc::FeatureVector)>> = a
        .inputs
        .par_iter()
        .map(|p| {
            let s = io::read_coefficients(p)?;
            let f = video_features(&s, &cfg)?;
            Ok((s, f))
        })
        .collect();
    let mut kept: Vec<(String, crate::wcc::FeatureVector, usize)> = Vec::new();
    let mut skipped = Vec::new();
    for ((res, id), path) in results.into_iter().zip(ids).zip(&a.inputs) {
        match res {
            Ok((s, f)) => kept.push((id, f, s.frame_count())),
            Err(e @ Error::Input(_)) => {
                warn!("skipping {}: {e}", path.display());
                skipped.push(SkippedVideo {
                    video_id: id,
                    path: path.display().to_string(),
                    reason: e.to_string(),
                });
            }
            Err(e) => return Err(e),
        }
    }
    if kept.is_empty() {
        return Err(Error::input(format!("all {} videos were skipped", a.inputs.len())));
    }
    let names = kept[0].1.channel_names.clone();
    if let Some((id, f, _)) = kept.iter().find(|(_, f, _)| f.channel_names != names) {
        return Err(Error::input(format!(
            "video {id:?} has channels {:?}, the first video has {names:?}",
            f.channel_names
        )));
    }
    let hash = io::config_hash(&json!({ "command": "wcc", "wcc": &cfg }));
    let q = names.len();
    let mut features = Array2::zeros((kept.len(), q * q));
    for (mut row, (_, f, _)) in features.rows_mut().into_iter().zip(&kept) {
        row.assign(&Array1::from_vec(f.values.clone()));
    }
    let table = FeatureTable {
        video_ids: kept.iter().map(|(id, _, _)| id.clone()).collect(),
        features,
        channel_names: names.clone(),
    };
    io::write_features(&ctx.out("features.csv"), &table, &hash)?;
    io::write_feature_map(&ctx.out("feature_map.csv"), &names, &hash)?;
    let meta = WccMeta {
        config_hash: &hash,
        wcc: &cfg,
        stride_seconds: cfg.stride_seconds(),
        channel_count: q,
        feature_count: q * q,
        conventions: WCC_CONVENTIONS,
        videos: kept
            .iter()
            .map(|(id, f, t)| json!({ "video_id": id, "frames": t, "windows": f.window_count }))
            .collect(),
        skipped,
    };
    let partial = !meta.skipped.is_empty();
    io::write_json_versioned(&ctx.out("wcc_meta.json"), io::WCC_META_FORMAT, &meta)?;
    Ok(if partial { Outcome::Partial } else { Outcome::Success })
}

#[derive(Serialize)]
struct SubsampleInfo {
    count: usize,
    fraction: f64,
    chosen_c: f64,
}

#[derive(Serialize)]
struct ClassifyReport<'a> {
    config_hash: &'a str,
    cv: &'a CvConfig,
    channel_names: &'a [String],
    evaluation: &'a crate::classify::EvaluationReport,
    subsample: Option<SubsampleInfo>,
}

/// Feature columns whose both channels are in `keep`.
fn pair_columns(names: &[String], keep: &[String]) -> Vec<usize> {
    let q = names.len();
    let inside: Vec<bool> = names.iter().map(|n| keep.contains(n)).collect();
    (0..q * q).filter(|&idx| inside[idx / q] && inside[idx % q]).collect()
}

fn cmd_classify(ctx: &Context, a: ClassifyArgs) -> Result<Outcome> {
    let mut cv = ctx.config.cv.clone();
    if let Some(g) = &a.c_grid {
        cv.c_grid = g.clone();
    }
    if let Some(f) = a.inner_folds {
        cv.inner_folds = f;
    }
    if a.no_standardize {
        cv.standardize = false;
    }
    cv.validate()?;
    let count = a.subsamples.unwrap_or(ctx.config.classify.subsample_count);
    let fraction = a.fraction.unwrap_or(ctx.config.classify.subsample_fraction);
    let features = io::read_features(&a.features)?;
    let labels = io::read_labels(&a.labels)?;
    let data = io::join_labels(&features, &labels)?;
    let report = nested_loo_evaluate(&data, &cv)?;
    let hash = io::config_hash(&json!({
        "command": "classify",
        "cv": &cv,
        "subsamples": count,
        "fraction": fraction,
        "first_k": &a.first_k,
    }));
    let subsample = if count > 0 {
        let sw = subsample_weights(&data, &cv, count, fraction)?;
        let summary = component_weight_summary(&sw.weights, &features.channel_names)?;
        let header = ["rank", "component", "median", "q1", "q3", "min", "max", "mean", "samples"]
            .map(String::from)
            .to_vec();
        let rows: Vec<Vec<String>> = summary
            .iter()
            .enumerate()
            .map(|(r, c)| {
                vec![
                    (r + 1).to_string(),
                    c.component.clone(),
                    io::fmt_f64(c.median),
                    io::fmt_f64(c.q1),
                    io::fmt_f64(c.q3),
                    io::fmt_f64(c.min),
                    io::fmt_f64(c.max),
                    io::fmt_f64(c.mean),
                    c.values.len().to_string(),
                ]
            })
            .collect();
        let meta = io::metadata_line(
            io::WEIGHT_SUMMARY_FORMAT,
            &[("chosen_c", io::fmt_f64(sw.chosen_c)), ("config_hash", hash.clone())],
        );
        io::write_csv(&ctx.out("weight_summary.csv"), &meta, &header, &rows)?;
        Some(SubsampleInfo {
            count,
            fraction,
            chosen_c: sw.chosen_c,
        })
    } else {
        None
    };
    if let (Some(manifest), Some(ks)) = (&a.rank_manifest, &a.first_k) {
        let t = io::Table::read(manifest)?;
        t.require_format(io::RANK_MANIFEST_FORMAT)?;
        let col = t
            .column("name")
            .ok_or_else(|| Error::parse(manifest, 2, "rank manifest lacks a name column"))?;
        let ranked: Vec<String> = t.rows.iter().map(|r| r[col].clone()).collect();
        let mut rows = Vec::new();
        for &k in ks {
            if k == 0 || k > ranked.len() {
                return Err(Error::config(format!("first-k value {k} outside 1..={}", ranked.len())));
            }
            let keep: Vec<String> = ranked[..k]
                .iter()
                .cloned()
                .chain(POSE_CHANNELS.iter().map(|s| s.to_string()))
                .collect();
            let cols = pair_columns(&features.channel_names, &keep);
            let sub = LabeledDataset::from_indices(
                data.features().select(ndarray::Axis(1), &cols),
                data.labels().to_vec(),
                data.class_names().clone(),
                data.video_ids().to_vec(),
            )?;
            let r = nested_loo_evaluate(&sub, &cv)?;
            let channels = features.channel_names.iter().filter(|n| keep.contains(n)).count();
            rows.push(vec![k.to_string(), channels.to_string(), cols.len().to_string(), io::fmt_f64(r.accuracy)]);
        }
        let header = ["k", "channels", "features", "accuracy"].map(String::from).to_vec();
        let meta = io::metadata_line("facial-basis/accuracy-vs-k/1", &[("config_hash", hash.clone())]);
        io::write_csv(&ctx.out("accuracy_vs_k.csv"), &meta, &header, &rows)?;
    }
    let doc = ClassifyReport {
        config_hash: &hash,
        cv: &cv,
        channel_names: &features.channel_names,
        evaluation: &report,
        subsample,
    };
    io::write_json_versioned(&ctx.out("report.json"), io::REPORT_FORMAT, &doc)?;
    println!("accuracy {}", report.accuracy);
    Ok(Outcome::Success)
}

fn cmd_synth_corpus(ctx: &Context, a: SynthCorpusArgs) -> Result<Outcome> {
    let mut spec = SynthSpec::planted_benchmark(ctx.config.seed.unwrap_or(0));
    if let Some(p) = a.topology.as_ref().or(ctx.config.topology.as_ref()) {
        spec.topology = io::read_topology(p)?;
    }
    let per_group = a.atoms_per_group.unwrap_or(2);
    spec.per_group_allocation = spec.topology.groups().iter().map(|g| (g.code, per_group)).collect();
    if let Some(n) = a.samples {
        spec.samples = n;
    }
    if let Some(n) = a.active {
        spec.active_atoms_per_sample = n;
    }
    if let Some(s) = a.noise {
        spec.noise_sigma = s;
    }
    let corpus = generate_planted_corpus(&spec)?;
    let hash = io::config_hash(&json!({ "command": "synth-corpus", "spec": &spec }));
    io::write_frames(
        &ctx.out("corpus.csv"),
        FrameKind::Deformation,
        &corpus.samples,
        None,
        &[("config_hash", hash.clone())],
    )?;
    let provenance = Provenance {
        config_hash: hash.clone(),
        learn_config: None,
        command_line: ctx.command_line.clone(),
    };
    io::write_dictionary(&ctx.out("truth.json"), &corpus.truth, &provenance, PayloadEncoding::F64le)?;
    io::write_codes(&ctx.out("truth_codes.csv"), corpus.truth.atom_names(), &corpus.codes, &hash)?;
    io::write_topology(&ctx.out("topology.json"), &spec.topology)?;
    Ok(Outcome::Success)
}

fn cmd_synth_series(ctx: &Context, a: SynthSeriesArgs) -> Result<Outcome> {
    let mut spec = LabeledSeriesSpec {
        seed: ctx.config.seed.unwrap_or(0),
        ..Default::default()
    };
    if let Some(n) = a.videos_per_class {
        spec.videos_per_class = n;
    }
    if let Some(n) = a.frames {
        spec.frames = n;
    }
    if let Some(f) = a.fps {
        spec.frame_rate = f;
    }
    if let Some(n) = a.channels {
        spec.bu_channels = n;
    }
    if let Some(n) = a.lag_frames {
        spec.lag_frames = n;
    }
    if let Some(c) = a.coupling {
        spec.coupling = c;
    }
    if let Some(s) = a.noise {
        spec.noise_sigma = s;
    }
    if a.no_pose {
        spec.include_pose = false;
    }
    let videos = generate_labeled_series(&spec)?;
    let hash = io::config_hash(&json!({ "command": "synth-series", "spec": &spec }));
    for v in &videos {
        io::write_coefficients(&ctx.out(&format!("series/{}.coefficients.csv", v.video_id)), &v.series, &hash)?;
    }
    let labels: Vec<(String, String)> = videos.iter().map(|v| (v.video_id.clone(), v.label.clone())).collect();
    io::write_labels(&ctx.out("labels.csv"), &labels)?;
    Ok(Outcome::Success)
}

fn cmd_validate(a: ValidateArgs) -> Result<Outcome> {
    let (dict, _) = io::read_dictionary(&a.dictionary)?;
    let report = validate_dictionary(&dict);
    let doc = json!({ "format": io::VALIDATION_FORMAT, "violations": &report.violations });
    println!("{}", serde_json::to_string_pretty(&doc).expect("report serializes"));
    if report.is_valid() {
        Ok(Outcome::Success)
    } else {
        for v in &report.violations {
            eprintln!("{v}");
        }
        Ok(Outcome::Rejected)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn video_ids_strip_known_suffixes() {
        assert_eq!(video_id(Path::new("a/clip.frames.csv")), "clip");
        assert_eq!(video_id(Path::new("A-001.coefficients.csv")), "A-001");
        assert_eq!(video_id(Path::new("x.y.csv")), "x.y");
    }

    #[test]
    fn output_flag_not_recorded() {
        let argv: Vec<OsString> = ["fbasis", "--output", "/tmp/x", "learn", "--lambda", "0.2", "--output=z"]
            .iter()
            .map(OsString::from)
            .collect();
        assert_eq!(recorded_command_line(&argv), vec!["learn", "--lambda", "0.2"]);
    }

    #[test]
    fn allocation_parsing() {
        let a = parse_allocation("LB=2, MO=3").unwrap();
        assert_eq!(a[&GroupCode::LB], 2);
        assert_eq!(a[&GroupCode::MO], 3);
        assert!(parse_allocation("XX=1").is_err());
        assert!(parse_allocation("LB").is_err());
    }

    #[test]
    fn pair_column_selection() {
        let names: Vec<String> = ["a", "b", "c"].map(String::from).to_vec();
        assert_eq!(pair_columns(&names, &["a".into(), "c".into()]), vec![0, 2, 6, 8]);
    }
}
