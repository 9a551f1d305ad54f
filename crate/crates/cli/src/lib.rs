//! Command-line driver for concept-tree analysis.
//!
//! Every subcommand is a plain function over parsed arguments, so tests can
//! call them in-process. Data goes to files or stdout; progress and errors go
//! to stderr.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use concept_tree::analysis::{
    aggregate_curves, correlation_report, delta_h_alignment, pair_embedding_distance,
    value_similarity_curve, CaseSample, CorrelationTable, LayerCurve,
};
use concept_tree::capture::{read_bundle, write_bundle, CaptureBundle};
use concept_tree::concept::{AnalysisParams, Analyzer, Mode, PairAnalysis};
use concept_tree::pipeline::{
    run_pipeline, CaptureSource, ChatClient, HttpTransport, LlmEndpointConfig, MockTransport,
    PipelineReport, ToyAdapter, Transport,
};
use concept_tree::toymodel::{make_toy_bundle, splitmix64, ToyConfig, ToyInput, ToyModel};
use concept_tree::tree::{build_tree, ConceptPairSpec, ConceptTree};
use concept_tree::Error;

#[derive(Debug, Parser)]
#[command(
    name = "concept-tree",
    version,
    about = "Concept-path analysis and concept trees"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a seeded toy bundle and run the whole analysis on it
    ToyDemo(ToyDemoArgs),
    /// Score pairs and build the concept tree
    Tree(TreeArgs),
    /// Per-layer value-similarity and residual-alignment curves
    Diagnostics(DiagnosticsArgs),
    /// Correlate embedding distance with branching layer across case files
    Correlate(CorrelateArgs),
    /// Check a bundle directory against the format invariants
    Validate(ValidateArgs),
    /// LLM-driven concept discovery followed by analysis
    Pipeline(PipelineArgs),
}

#[derive(Debug, Clone, Args)]
pub struct AnalysisFlags {
    /// Components kept by top-k filtering [default: 10]
    #[arg(long)]
    pub k: Option<usize>,
    /// Branching threshold [default: 0.9, or 0.99 with --mode raw]
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long, default_value = "svd")]
    pub mode: Mode,
    /// Worker threads for per-pair analysis
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

impl Default for AnalysisFlags {
    fn default() -> Self {
        Self {
            k: None,
            tau: None,
            mode: Mode::Svd,
            jobs: 1,
        }
    }
}

impl AnalysisFlags {
    pub fn params(&self) -> Result<AnalysisParams> {
        Ok(AnalysisParams::resolve(self.k, self.tau, self.mode)?)
    }
}

#[derive(Debug, Clone, Args)]
pub struct PairFlags {
    /// `orig/cf[@index]`, or a JSON file holding a list of such strings or
    /// pair objects. Repeatable.
    #[arg(long = "pairs", required = true, num_args = 1..)]
    pub pairs: Vec<String>,
    /// Trace label of the original text for inline pairs
    #[arg(long, default_value = "base")]
    pub base: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Json,
    Dot,
    Csv,
}

#[derive(Debug, Clone, Args)]
pub struct ToyDemoArgs {
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 6)]
    pub layers: usize,
    #[arg(long, default_value_t = 32)]
    pub d_model: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 64)]
    pub vocab: usize,
    /// Drop the MLP sublayer
    #[arg(long)]
    pub no_mlp: bool,
    #[arg(long, default_value = "toy-demo-out")]
    pub out: PathBuf,
}

impl Default for ToyDemoArgs {
    fn default() -> Self {
        Self {
            seed: 7,
            layers: 6,
            d_model: 32,
            heads: 4,
            vocab: 64,
            no_mlp: false,
            out: PathBuf::from("toy-demo-out"),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct TreeArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[command(flatten)]
    pub pairs: PairFlags,
    #[command(flatten)]
    pub analysis: AnalysisFlags,
    #[arg(long, value_enum, default_value_t = OutputFormat::Json)]
    pub format: OutputFormat,
    /// Output file; stdout when absent
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct DiagnosticsArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[command(flatten)]
    pub pairs: PairFlags,
    #[command(flatten)]
    pub analysis: AnalysisFlags,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct CorrelateArgs {
    /// Case CSV files with `distance` and `branching_layer` columns; the file
    /// stem names the case
    #[arg(required = true)]
    pub cases: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub bundle: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct PipelineArgs {
    #[arg(long)]
    pub text: String,
    /// Chat-completion base URL, e.g. http://localhost:8000/v1
    #[arg(long, conflicts_with = "mock_endpoint")]
    pub endpoint: Option<String>,
    #[arg(long, default_value = "default")]
    pub model: String,
    #[arg(long, default_value = concept_tree::pipeline::client::DEFAULT_API_KEY_ENV)]
    pub api_key_env: String,
    /// JSON list of scripted replies used instead of a live endpoint
    #[arg(long)]
    pub mock_endpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 60.0)]
    pub timeout: f64,
    #[arg(long, default_value_t = concept_tree::pipeline::client::DEFAULT_MAX_RETRIES)]
    pub retries: u32,
    /// Pre-exported bundle holding the base and counterfactual texts;
    /// the seeded toy model is used when absent
    #[arg(long)]
    pub bundle: Option<PathBuf>,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[command(flatten)]
    pub analysis: AnalysisFlags,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::ToyDemo(a) => cmd_toy_demo(&a).map(|_| ()),
        Command::Tree(a) => cmd_tree(&a).map(|_| ()),
        Command::Diagnostics(a) => cmd_diagnostics(&a),
        Command::Correlate(a) => cmd_correlate(&a).map(|_| ()),
        Command::Validate(a) => cmd_validate(&a),
        Command::Pipeline(a) => cmd_pipeline(&a).map(|_| ()),
    }
}

/// What `tree` writes as JSON: the resolved parameters, every pair's scores,
/// and the tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeReport {
    pub model_id: String,
    pub params: AnalysisParams,
    pub pairs: Vec<PairAnalysis>,
    pub tree: ConceptTree,
}

impl TreeReport {
    pub fn scores_csv(&self) -> String {
        scores_csv(&self.pairs)
    }

    pub fn dot(&self) -> String {
        format!(
            "// k={} tau={} mode={}\n{}",
            self.params.k,
            self.params.tau,
            self.params.mode,
            self.tree.to_dot()
        )
    }
}

fn scores_csv(pairs: &[PairAnalysis]) -> String {
    let mut s = String::from("pair,layer,score\n");
    for p in pairs {
        for (l, v) in p.scores.iter().enumerate() {
            s.push_str(&format!("{},{l},{v}\n", csv_field(&p.pair_label)));
        }
    }
    s
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn to_pretty_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => write_file(path, text),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            stdout.flush()?;
            Ok(())
        }
    }
}

fn load_bundle(path: &Path) -> Result<CaptureBundle> {
    read_bundle(path).with_context(|| format!("loading bundle {}", path.display()))
}

#[derive(Deserialize)]
#[serde(untagged)]
enum PairEntry {
    Inline(String),
    Full(ConceptPairSpec),
}

/// Resolves `--pairs` values: existing files are read as JSON lists,
/// anything else is parsed as an inline pair.
pub fn resolve_pairs(flags: &PairFlags) -> Result<Vec<ConceptPairSpec>> {
    let mut out = Vec::new();
    for item in &flags.pairs {
        let path = Path::new(item);
        if path.is_file() {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading pair file {}", path.display()))?;
            let entries: Vec<PairEntry> = serde_json::from_str(&text)
                .with_context(|| format!("parsing pair file {}", path.display()))?;
            for e in entries {
                out.push(match e {
                    PairEntry::Inline(s) => ConceptPairSpec::parse_inline(&s, &flags.base)?,
                    PairEntry::Full(spec) => spec,
                });
            }
        } else {
            out.push(ConceptPairSpec::parse_inline(item, &flags.base)?);
        }
    }
    Ok(out)
}

/// Checks that every referenced trace exists before any work starts.
fn check_labels(bundle: &CaptureBundle, pairs: &[ConceptPairSpec]) -> Result<()> {
    for p in pairs {
        for label in [&p.original_trace_label, &p.counterfactual_trace_label] {
            bundle
                .trace(label)
                .with_context(|| format!("pair {}", p.label()))?;
        }
    }
    Ok(())
}

fn analyze_all(
    bundle: &CaptureBundle,
    pairs: &[ConceptPairSpec],
    params: AnalysisParams,
    jobs: usize,
) -> Result<Vec<PairAnalysis>> {
    Analyzer::new(bundle)
        .analyze_many(pairs, params, jobs)
        .into_iter()
        .zip(pairs)
        .map(|(r, p)| r.with_context(|| format!("analyzing pair {}", p.label())))
        .collect()
}

pub fn cmd_tree(args: &TreeArgs) -> Result<TreeReport> {
    let params = args.analysis.params()?;
    let bundle = load_bundle(&args.bundle)?;
    let pairs = resolve_pairs(&args.pairs)?;
    check_labels(&bundle, &pairs)?;
    let analyses = analyze_all(&bundle, &pairs, params, args.analysis.jobs)?;
    for a in &analyses {
        if !a.degenerate_layers.is_empty() {
            eprintln!(
                "warning: {} has degenerate concept paths at layers {:?}",
                a.pair_label, a.degenerate_layers
            );
        }
    }
    let tree = build_tree(&analyses)?;
    let report = TreeReport {
        model_id: bundle.meta.model_id.clone(),
        params,
        pairs: analyses,
        tree,
    };
    let text = match args.format {
        OutputFormat::Json => to_pretty_json(&report)?,
        OutputFormat::Dot => report.dot(),
        OutputFormat::Csv => report.scores_csv(),
    };
    emit(args.out.as_deref(), &text)?;
    Ok(report)
}

/// One row of a case file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRow {
    #[serde(default)]
    pub pair: Option<String>,
    pub distance: f64,
    /// Empty for inseparable pairs.
    pub branching_layer: Option<usize>,
}

fn write_case_csv(path: &Path, rows: &[CaseRow]) -> Result<()> {
    let mut w =
        csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn read_case_csv(path: &Path) -> Result<Vec<CaseRow>> {
    let mut r =
        csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    r.deserialize()
        .enumerate()
        .map(|(i, row)| row.with_context(|| format!("{} row {}", path.display(), i + 1)))
        .collect()
}

/// Writes per-pair curves, their means, and (when embeddings exist) a case
/// file of distance against branching layer.
fn write_diagnostics(
    bundle: &CaptureBundle,
    pairs: &[ConceptPairSpec],
    analyses: &[PairAnalysis],
    dir: &Path,
) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut value_curves = Vec::new();
    let mut delta_curves = Vec::new();
    let mut index = String::from("file_prefix,pair\n");
    for (i, p) in pairs.iter().enumerate() {
        let (a, b) = (&p.original_trace_label, &p.counterfactual_trace_label);
        let prefix = format!("pair{i}");
        index.push_str(&format!("{prefix},{}\n", csv_field(&p.label())));
        let v = value_similarity_curve(bundle, a, b)?;
        write_file(&dir.join(format!("{prefix}_value_cos.csv")), &v.to_csv())?;
        value_curves.push(v);
        if bundle.n_layers() >= 2 {
            let d = delta_h_alignment(bundle, a, b)?;
            write_file(&dir.join(format!("{prefix}_delta_h_cos.csv")), &d.to_csv())?;
            delta_curves.push(d);
        }
    }
    write_file(&dir.join("pairs.csv"), &index)?;
    let write_mean = |curves: &[LayerCurve], name: &str| -> Result<()> {
        if !curves.is_empty() {
            let mean = aggregate_curves(curves, name)?;
            write_file(&dir.join(format!("{name}.csv")), &mean.to_csv())?;
        }
        Ok(())
    };
    write_mean(&value_curves, "value_cos_mean")?;
    write_mean(&delta_curves, "delta_h_cos_mean")?;

    let mut rows = Vec::new();
    for (p, a) in pairs.iter().zip(analyses) {
        match pair_embedding_distance(bundle, p) {
            Ok(distance) => rows.push(CaseRow {
                pair: Some(p.label()),
                distance,
                branching_layer: a.branching_layer,
            }),
            Err(Error::MissingEmbedding(label)) => eprintln!(
                "warning: {}: trace {label:?} has no edited-token embedding; left out of case.csv",
                p.label()
            ),
            Err(e) => return Err(e.into()),
        }
    }
    if !rows.is_empty() {
        write_case_csv(&dir.join("case.csv"), &rows)?;
    }
    Ok(())
}

pub fn cmd_diagnostics(args: &DiagnosticsArgs) -> Result<()> {
    let params = args.analysis.params()?;
    let bundle = load_bundle(&args.bundle)?;
    let pairs = resolve_pairs(&args.pairs)?;
    check_labels(&bundle, &pairs)?;
    let analyses = analyze_all(&bundle, &pairs, params, args.analysis.jobs)?;
    write_diagnostics(&bundle, &pairs, &analyses, &args.out)?;
    eprintln!(
        "wrote diagnostics for {} pairs to {}",
        pairs.len(),
        args.out.display()
    );
    Ok(())
}

pub fn cmd_correlate(args: &CorrelateArgs) -> Result<CorrelationTable> {
    let mut cases = Vec::new();
    for path in &args.cases {
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        let samples = read_case_csv(path)?
            .into_iter()
            .map(|r| CaseSample {
                distance: r.distance,
                branching_layer: r.branching_layer,
            })
            .collect();
        cases.push((name, samples));
    }
    let table = correlation_report(&cases);
    for row in &table.rows {
        if let Some(note) = &row.note {
            eprintln!("note: {}: {note}", row.case);
        }
    }
    emit(args.out.as_deref(), &table.to_csv())?;
    Ok(table)
}

pub fn cmd_validate(args: &ValidateArgs) -> Result<()> {
    match read_bundle(&args.bundle) {
        Ok(_) => {
            println!("0 violations");
            Ok(())
        }
        Err(Error::InvalidBundle(violations)) => {
            for v in &violations {
                println!("{v}");
            }
            println!("{} violations", violations.len());
            bail!("{} failed validation", args.bundle.display())
        }
        Err(e) => Err(e).with_context(|| format!("loading bundle {}", args.bundle.display())),
    }
}

/// Files written by [`cmd_toy_demo`], relative to its output directory.
pub const TOY_DEMO_FILES: &[&str] = &[
    "bundle/manifest.json",
    "analyses.json",
    "tree.json",
    "tree.dot",
    "scores.csv",
    "diagnostics/pairs.csv",
    "diagnostics/value_cos_mean.csv",
    "diagnostics/case.csv",
];

const TOY_SEQ_LEN: usize = 8;
const TOY_EDIT_POS: usize = 2;

/// Seeded base sequence plus two single-token edits at the same position.
fn toy_inputs(seed: u64, vocab: usize) -> Result<(Vec<ToyInput>, Vec<ConceptPairSpec>)> {
    if vocab < 3 {
        bail!("toy demo needs a vocabulary of at least 3 tokens, got {vocab}");
    }
    let base: Vec<usize> = (0..TOY_SEQ_LEN as u64)
        .map(|i| (splitmix64(seed.wrapping_add(i)) % vocab as u64) as usize)
        .collect();
    let orig = base[TOY_EDIT_POS];
    let mut inputs = vec![ToyInput::new("base", base.clone(), Some(TOY_EDIT_POS))];
    let mut pairs = Vec::new();
    for j in 0..2 {
        let cf = (orig + 1 + j * (vocab / 2)) % vocab;
        let mut tokens = base.clone();
        tokens[TOY_EDIT_POS] = cf;
        let label = format!("cf{j}");
        inputs.push(ToyInput::new(label.clone(), tokens, Some(TOY_EDIT_POS)));
        pairs.push(ConceptPairSpec {
            original_token: format!("t{orig}"),
            counterfactual_token: format!("t{cf}"),
            original_trace_label: "base".into(),
            counterfactual_trace_label: label,
            edited_token_index: Some(TOY_EDIT_POS),
        });
    }
    Ok((inputs, pairs))
}

pub fn cmd_toy_demo(args: &ToyDemoArgs) -> Result<TreeReport> {
    let config = ToyConfig {
        n_layers: args.layers,
        d_model: args.d_model,
        n_heads: args.heads,
        vocab_size: args.vocab,
        seed: args.seed,
        use_mlp: !args.no_mlp,
    };
    let model = ToyModel::init_seeded(config)?;
    let (inputs, pairs) = toy_inputs(args.seed, args.vocab)?;
    let bundle_dir = args.out.join("bundle");
    write_bundle(&make_toy_bundle(&model, &inputs)?, &bundle_dir)?;
    // analyze what was written, not the in-memory copy
    let bundle = load_bundle(&bundle_dir)?;

    let params = AnalysisParams::default();
    let analyses = analyze_all(&bundle, &pairs, params, 1)?;
    let tree = build_tree(&analyses)?;
    let report = TreeReport {
        model_id: bundle.meta.model_id.clone(),
        params,
        pairs: analyses,
        tree,
    };
    write_file(&args.out.join("analyses.json"), &to_pretty_json(&report)?)?;
    write_file(
        &args.out.join("tree.json"),
        &format!("{}\n", report.tree.to_json()),
    )?;
    write_file(&args.out.join("tree.dot"), &report.dot())?;
    write_file(&args.out.join("scores.csv"), &report.scores_csv())?;
    write_diagnostics(
        &bundle,
        &pairs,
        &report.pairs,
        &args.out.join("diagnostics"),
    )?;
    eprintln!("wrote toy demo to {}", args.out.display());
    Ok(report)
}

fn read_mock_replies(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading mock replies {}", path.display()))?;
    serde_json::from_str(&text)
        .with_context(|| format!("{} must be a JSON list of reply strings", path.display()))
}

pub fn cmd_pipeline(args: &PipelineArgs) -> Result<PipelineReport> {
    let params = args.analysis.params()?;
    let transport: Box<dyn Transport> = match (&args.mock_endpoint, &args.endpoint) {
        (Some(path), _) => Box::new(MockTransport::new(read_mock_replies(path)?)),
        (None, Some(url)) => {
            let mut config = LlmEndpointConfig::new(url.clone(), args.model.clone());
            config.api_key_env = args.api_key_env.clone();
            config.timeout_secs = args.timeout;
            config.max_retries = args.retries;
            Box::new(HttpTransport::from_config(&config)?)
        }
        (None, None) => bail!("pipeline needs --endpoint or --mock-endpoint"),
    };
    let client = ChatClient::new(transport, args.model.clone()).with_retries(args.retries);
    let source = match &args.bundle {
        Some(path) => CaptureSource::Bundle(load_bundle(path)?),
        None => {
            let config = ToyConfig {
                seed: args.seed,
                ..ToyConfig::default()
            };
            CaptureSource::Toy(ToyAdapter::new(ToyModel::init_seeded(config)?))
        }
    };
    let report = run_pipeline(&args.text, &client, &source, params, args.analysis.jobs)?;
    for w in &report.warnings {
        match &w.pair {
            Some(p) => eprintln!("warning: stage {}: {p}: {}", w.stage, w.message),
            None => eprintln!("warning: stage {}: {}", w.stage, w.message),
        }
    }
    emit(args.out.as_deref(), &to_pretty_json(&report)?)?;
    Ok(report)
}
