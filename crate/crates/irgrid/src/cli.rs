//! Subcommands and exit codes: 0 on success, 1 when the input is invalid
//! (usage, config, netlist or file format), 2 when the run itself fails.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use irgrid_core::error::Error as CoreError;
use irgrid_core::explain::{
    apply_upsize, baseline_no_saliency, optimize, rank_contributors, resistance_channels, saliency, select_hotspots,
    Differentiable, ExplainOptions,
};
use irgrid_core::featurize::{augment, featurize, resize, FeatureStack, Provenance, TestCase, CHANNEL_NAMES};
use irgrid_core::grid::{DropSource, Grid, IrDropMap};
use irgrid_core::model::AttUNet;
use irgrid_core::netlist::parse_netlist;
use irgrid_core::solver::analyze;
use irgrid_core::synth::SynthParams;
use irgrid_core::train::{self, case_metrics, target_scale, EpochRecord, Metrics, Phase, TrainConfig};
use serde::Serialize;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::container::{FormatError, Meta, TensorContainer};
use crate::corpus;
use crate::pool;
use crate::render;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;

/// Marks an error as a problem with the caller's input.
#[derive(Debug)]
pub struct Invalid(pub String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(Invalid(msg.into()))
}

/// Reclassifies any error from loading user input as invalid input.
fn input<T>(r: Result<T>, what: impl fmt::Display) -> Result<T> {
    r.map_err(|e| invalid(format!("{what}: {e:#}")))
}

fn require(path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(invalid(format!("{} does not exist", path.display())));
    }
    Ok(())
}

pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<Invalid>() || cause.is::<serde_json::Error>() {
            return EXIT_INVALID;
        }
        if let Some(f) = cause.downcast_ref::<FormatError>() {
            if !matches!(f, FormatError::Io(_)) {
                return EXIT_INVALID;
            }
        }
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            return match e {
                CoreError::Parse { .. }
                | CoreError::InvalidNetlist(_)
                | CoreError::MultipleSupplies { .. }
                | CoreError::InvalidParameter(_)
                | CoreError::Shape(_) => EXIT_INVALID,
                _ => EXIT_FAILURE,
            };
        }
    }
    EXIT_FAILURE
}

#[derive(Debug, Parser)]
#[command(name = "irgrid", version, about = "Static IR-drop analysis, prediction and saliency-guided upsizing")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve a netlist and write its drop map.
    Solve(SolveArgs),
    /// Build the twelve-channel feature stack of a netlist.
    Featurize(FeaturizeArgs),
    /// Generate a synthetic corpus.
    Synth(SynthArgs),
    /// Pretrain or finetune a model on a corpus.
    Train(TrainArgs),
    /// Predict drop maps with a checkpoint.
    Predict(PredictArgs),
    /// Score predictions against ground truth, one row per case.
    Eval(EvalArgs),
    /// Saliency maps, hotspot report and heatmaps for one case.
    Explain(ExplainArgs),
    /// One saliency-guided upsizing pass; writes the modified features.
    Optimize(OptimizeArgs),
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    pub netlist: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write node voltages as CSV.
    #[arg(long)]
    pub voltages: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FeaturizeArgs {
    pub netlist: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 512)]
    pub size: usize,
    /// Also solve the netlist and write the drop map here.
    #[arg(long)]
    pub truth: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub count: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Index of the first case; lets two runs share a seed without overlap.
    #[arg(long, default_value_t = 0)]
    pub first: u64,
    #[arg(long)]
    pub size: Option<usize>,
    /// JSON file with generator parameters.
    #[arg(long, conflicts_with = "config")]
    pub params: Option<PathBuf>,
    /// Run config; its `synth` and `featureSize` are used.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PhaseArg {
    Pretrain,
    Finetune,
}

impl From<PhaseArg> for Phase {
    fn from(p: PhaseArg) -> Self {
        match p {
            PhaseArg::Pretrain => Phase::Pretrain,
            PhaseArg::Finetune => Phase::Finetune,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub phase: Option<PhaseArg>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Checkpoint to start from.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Feature file, or a corpus directory.
    #[arg(long)]
    pub input: PathBuf,
    /// Output file, or a directory when the input is one.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of ground-truth maps (a corpus directory works).
    #[arg(long)]
    pub truth: PathBuf,
    /// Directory of predicted maps.
    #[arg(long, required_unless_present = "checkpoint", conflicts_with = "checkpoint")]
    pub pred: Option<PathBuf>,
    /// Predict the truth corpus with this checkpoint instead.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Write per-case metrics as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExplainFlags {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Feature stack file.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Pixels to upsize.
    #[arg(long)]
    pub k: Option<usize>,
    /// Hotspot threshold as a fraction of the predicted maximum.
    #[arg(long)]
    pub factor: Option<f64>,
    /// Resistance reduction per chosen pixel.
    #[arg(long)]
    pub fraction: Option<f64>,
    /// Candidate channels, comma separated; defaults to the resistance maps.
    #[arg(long, value_delimiter = ',')]
    pub channels: Option<Vec<usize>>,
    /// Run config; its `explain` block supplies defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[command(flatten)]
    pub flags: ExplainFlags,
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    #[command(flatten)]
    pub flags: ExplainFlags,
    /// Upsize every resistance channel at the hotspots, ignoring saliency.
    #[arg(long)]
    pub baseline: bool,
}

/// Parses `args` (program name first) and runs; returns the exit code.
pub fn run_from<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    match run(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Solve(a) => solve(a),
        Command::Featurize(a) => featurize_cmd(a),
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Predict(a) => predict(a),
        Command::Eval(a) => eval(a),
        Command::Explain(a) => explain(a),
        Command::Optimize(a) => optimize_cmd(a),
    }
}

fn read_netlist(path: &Path) -> Result<irgrid_core::netlist::PdnNetlist> {
    require(path)?;
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_netlist(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => {
            require(p)?;
            input(RunConfig::load(p), format!("config {}", p.display()))
        }
        None => Ok(RunConfig::default()),
    }
}

fn load_checkpoint(path: &Path) -> Result<checkpoint::Checkpoint> {
    require(path)?;
    input(checkpoint::load(path), "checkpoint")
}

fn load_features(path: &Path) -> Result<FeatureStack> {
    require(path)?;
    let c = TensorContainer::load(path).with_context(|| format!("loading {}", path.display()))?;
    c.to_features().with_context(|| format!("loading {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn solve(a: SolveArgs) -> Result<()> {
    let net = read_netlist(&a.netlist)?;
    let (volts, map) = analyze(&net).with_context(|| format!("solving {}", a.netlist.display()))?;
    TensorContainer::from_drop(&map).save(&a.out)?;
    if let Some(p) = &a.voltages {
        let mut w = csv::Writer::from_path(p).with_context(|| format!("creating {}", p.display()))?;
        w.write_record(["node", "volts"])?;
        for (node, v) in &volts.volts {
            w.write_record([node.to_string(), format!("{v:.12e}")])?;
        }
        w.flush()?;
    }
    eprintln!(
        "{}: {}x{} map, max drop {:.6} V",
        a.netlist.display(),
        map.drop.height,
        map.drop.width,
        map.drop.max()
    );
    Ok(())
}

fn featurize_cmd(a: FeaturizeArgs) -> Result<()> {
    if a.size == 0 {
        return Err(invalid("--size must be positive"));
    }
    let net = read_netlist(&a.netlist)?;
    let f = featurize(&net, a.size)?;
    TensorContainer::from_features(&f).save(&a.out)?;
    if let Some(t) = &a.truth {
        let (_, map) = analyze(&net)?;
        TensorContainer::from_drop(&map).save(t)?;
    }
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let (mut params, mut size) = match (&a.params, &a.config) {
        (Some(p), _) => {
            require(p)?;
            let text = fs::read_to_string(p)?;
            let params: SynthParams =
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
            (params, 512)
        }
        (None, c) => {
            let cfg = load_config(c.as_deref())?;
            (cfg.synth, cfg.feature_size)
        }
    };
    if let Some(s) = a.seed {
        params.seed = s;
    }
    if let Some(s) = a.size {
        size = s;
    }
    if size == 0 {
        return Err(invalid("--size must be positive"));
    }
    input(params.check().map_err(Into::into), "generator parameters")?;
    let m = corpus::synthesize(&a.out, &params, a.first, a.count, size)?;
    eprintln!("wrote {} cases to {}", m.cases.len(), a.out.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct HistoryRow {
    epoch: usize,
    lr: f64,
    loss: f64,
    mae: f64,
    f1: f64,
}

impl From<&EpochRecord> for HistoryRow {
    fn from(r: &EpochRecord) -> Self {
        Self {
            epoch: r.epoch,
            lr: r.lr,
            loss: r.loss,
            mae: r.mae_mv,
            f1: r.f1,
        }
    }
}

pub const HISTORY_FILE: &str = "history.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.irgc";

fn train_cmd(a: TrainArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let phase: Phase = match a.phase {
        Some(p) => p.into(),
        None if cfg.train_given => cfg.train.phase,
        None => return Err(invalid("--phase is required when the config has no train block")),
    };
    let mut tc = if cfg.train_given {
        cfg.train.clone()
    } else {
        match phase {
            Phase::Pretrain => TrainConfig::pretrain(),
            Phase::Finetune => TrainConfig::finetune(),
        }
    };
    tc.phase = phase;
    if let Some(s) = a.seed {
        tc.seed = s;
    }
    if let Some(e) = a.epochs {
        tc.epochs = e;
    }
    input(tc.check().map_err(Into::into), "training configuration")?;

    let corpus_dir = a
        .corpus
        .or(cfg.paths.corpus.clone())
        .ok_or_else(|| invalid("no corpus given (--corpus or paths.corpus)"))?;
    let init = a.init.or(cfg.paths.init_checkpoint.clone());
    let out = a.out.or(cfg.paths.output.clone()).unwrap_or_else(|| PathBuf::from("."));

    let cases = input(corpus::load(&corpus_dir, true), "corpus")?;
    let (mut model, scale) = match &init {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            (ck.model, ck.meta.target_scale)
        }
        None => {
            if phase == Phase::Finetune {
                eprintln!("warning: finetuning without --init starts from random weights");
            }
            (AttUNet::<f32>::new(cfg.model.clone(), tc.seed)?, target_scale(&cases)?)
        }
    };
    let cases = if cfg.augment {
        let mut all = Vec::with_capacity(6 * cases.len());
        for c in &cases {
            all.extend(augment(c)?);
        }
        all
    } else {
        cases
    };

    create_dir(&out)?;
    let ckpt = out.join(CHECKPOINT_FILE);
    let hist_path = out.join(HISTORY_FILE);
    let mut hist = csv::Writer::from_path(&hist_path).with_context(|| format!("creating {}", hist_path.display()))?;
    let mut io_err: Option<anyhow::Error> = None;
    let result = train::train(&mut model, &cases, &tc, scale, |rec, m| {
        let step = (|| -> Result<()> {
            hist.serialize(HistoryRow::from(rec))?;
            hist.flush()?;
            checkpoint::save(&ckpt, m, phase, Some(&tc), rec.epoch + 1, scale)
        })();
        match step {
            Ok(()) => {
                eprintln!(
                    "epoch {:>4}  lr {:.6}  loss {:.6}  mae {:.4} mV  f1 {:.4}",
                    rec.epoch, rec.lr, rec.loss, rec.mae_mv, rec.f1
                );
                Ok(())
            }
            Err(e) => {
                io_err = Some(e);
                Err(CoreError::InvalidParameter("stopped: could not write outputs".into()))
            }
        }
    });
    if let Some(e) = io_err {
        return Err(e);
    }
    let history = result.context("training")?;
    if history.is_empty() {
        checkpoint::save(&ckpt, &model, phase, Some(&tc), 0, scale)?;
    }
    Ok(())
}

fn predict_stack(model: &AttUNet<f32>, f: FeatureStack, scale: f64, id: &str) -> Result<IrDropMap> {
    let tc = TestCase {
        id: id.to_string(),
        features: f,
        ground_truth: None,
        provenance: Provenance::Real,
    };
    Ok(train::predict_case(model, &tc, scale)?)
}

fn predict(a: PredictArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let scale = ck.meta.target_scale;
    if a.input.is_dir() {
        let ids = input(corpus::case_ids(&a.input), "corpus")?;
        create_dir(&a.out)?;
        let results = pool::map(&ids, |id| -> Result<()> {
            let f = load_features(&a.input.join(corpus::features_file(id)))?;
            let map = predict_stack(&ck.model, f, scale, id)?;
            TensorContainer::from_drop(&map).save(&a.out.join(format!("{id}.pred.irgt")))?;
            Ok(())
        });
        results.into_iter().collect::<Result<Vec<_>>>()?;
        eprintln!("predicted {} cases into {}", ids.len(), a.out.display());
    } else {
        let f = load_features(&a.input)?;
        let map = predict_stack(&ck.model, f, scale, "input")?;
        TensorContainer::from_drop(&map).save(&a.out)?;
    }
    Ok(())
}

fn load_drop(path: &Path) -> Result<IrDropMap> {
    let c = TensorContainer::load(path).with_context(|| format!("loading {}", path.display()))?;
    c.to_drop().with_context(|| format!("loading {}", path.display()))
}

/// Per-case table: case, MAE in mV, F1, precision, recall, then the mean row.
pub fn format_table(m: &Metrics) -> String {
    let w = m.per_case.iter().map(|c| c.id.len()).max().unwrap_or(4).max(8);
    let mut s = format!(
        "{:<w$}  {:>10}  {:>6}  {:>9}  {:>6}\n",
        "testcase", "MAE (mV)", "F1", "precision", "recall"
    );
    for c in &m.per_case {
        let mark = if c.degenerate { " *" } else { "" };
        s += &format!(
            "{:<w$}  {:>10.4}  {:>6.3}  {:>9.3}  {:>6.3}{mark}\n",
            c.id, c.mae_mv, c.f1, c.precision, c.recall
        );
    }
    s += &format!(
        "{:<w$}  {:>10.4}  {:>6.3}  {:>9.3}  {:>6.3}\n",
        "average", m.mae_mv, m.f1, m.precision, m.recall
    );
    if m.per_case.iter().any(|c| c.degenerate) {
        s += "* constant ground truth; F1 is not meaningful\n";
    }
    s
}

fn eval(a: EvalArgs) -> Result<()> {
    let truth = input(corpus::drop_maps(&a.truth), "truth")?;
    if truth.is_empty() {
        return Err(invalid(format!("no maps in {}", a.truth.display())));
    }
    let pairs: Vec<(String, Grid, Grid)> = if let Some(pred_dir) = &a.pred {
        let preds = input(corpus::drop_maps(pred_dir), "predictions")?;
        let mut out = Vec::new();
        for (id, tpath) in &truth {
            let ppath = preds
                .iter()
                .find(|(k, _)| k == id)
                .map(|(_, p)| p)
                .ok_or_else(|| invalid(format!("no prediction for case {id}")))?;
            out.push((id.clone(), load_drop(ppath)?.drop, load_drop(tpath)?.drop));
        }
        out
    } else {
        let ck = load_checkpoint(a.checkpoint.as_deref().expect("clap requires one"))?;
        let results = pool::map(&truth, |(id, tpath)| -> Result<(String, Grid, Grid)> {
            let f = load_features(&a.truth.join(corpus::features_file(id)))?;
            let p = predict_stack(&ck.model, f, ck.meta.target_scale, id)?;
            Ok((id.clone(), p.drop, load_drop(tpath)?.drop))
        });
        results.into_iter().collect::<Result<_>>()?
    };
    let mut per_case = Vec::with_capacity(pairs.len());
    for (id, p, t) in &pairs {
        let p = if p.dims() == t.dims() { p.clone() } else { resize(p, t.height, t.width) };
        per_case.push(case_metrics(id, &p, t)?);
    }
    let m = Metrics::from_cases(per_case);
    print!("{}", format_table(&m));
    if let Some(j) = &a.json {
        fs::write(j, serde_json::to_string_pretty(&m)? + "\n")?;
    }
    Ok(())
}

fn explain_options(f: &ExplainFlags) -> Result<(usize, ExplainOptions)> {
    let cfg = load_config(f.config.as_deref())?;
    let mut e = cfg.explain;
    if let Some(k) = f.k {
        e.k = k;
    }
    if let Some(v) = f.factor {
        e.factor = v;
    }
    if let Some(v) = f.fraction {
        e.fraction = v;
    }
    if let Some(c) = &f.channels {
        e.channels = c.clone();
    }
    let check = RunConfig {
        explain: e.clone(),
        ..RunConfig::default()
    };
    input(check.check(), "explain options")?;
    Ok((e.k, e.options()))
}

#[derive(Debug, Serialize)]
#[serde(rename_all = "camelCase")]
struct ExplainReport {
    k: usize,
    factor: f64,
    fraction: f64,
    candidate_channels: Vec<usize>,
    /// Mean top-K saliency magnitude per candidate channel.
    channel_scores: Vec<(usize, String, f64)>,
    winner_channel: Option<usize>,
    winner_name: Option<String>,
    chosen_pixels: Vec<(usize, usize)>,
    hotspot_pixels: Vec<(usize, usize)>,
    dr_max: f64,
    dr_th: f64,
    high_drop_before: usize,
    high_drop_after: usize,
    reduction_percent: f64,
}

fn save_grid_png(path: &Path, g: &Grid, marks: &[(&[(usize, usize)], [u8; 3])]) -> Result<()> {
    let mut rgb = render::heatmap(g);
    for (px, color) in marks {
        render::overlay(&mut rgb, g.width, px, *color);
    }
    render::write_png(path, &rgb, g.height, g.width, render::default_scale(g.height, g.width))
}

fn explain(a: ExplainArgs) -> Result<()> {
    let f = &a.flags;
    let (k, opts) = explain_options(f)?;
    let ck = load_checkpoint(&f.checkpoint)?;
    let stack = load_features(&f.input)?;
    let model = &ck.model;
    let pred = Differentiable::predict(model, &stack)?;
    let hot = select_hotspots(&pred, opts.factor)?;
    if hot.pixels.is_empty() {
        bail!(CoreError::EmptyHotspots);
    }
    let sal = saliency(model, &stack, &hot)?;
    let best = if k > 0 {
        Some(rank_contributors(&sal, &stack, k, &opts.channels)?)
    } else {
        None
    };
    let rep = optimize(model, &stack, k, &opts)?;

    create_dir(&f.out)?;
    let shape = vec![sal.channels, sal.height, sal.width];
    let names = Some(CHANNEL_NAMES.iter().map(|s| s.to_string()).collect::<Vec<_>>());
    let meta = Meta {
        channel_names: names,
        ..Meta::default()
    };
    let to_f32 = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
    TensorContainer::new(shape.clone(), to_f32(&sal.signed), meta.clone()).save(&f.out.join("saliency.irgt"))?;
    TensorContainer::new(shape, to_f32(&sal.magnitude()), meta).save(&f.out.join("saliency_abs.irgt"))?;

    let scale = ck.meta.target_scale;
    let pred_v = Grid::from_vec(pred.height, pred.width, pred.data.iter().map(|v| v * scale).collect());
    TensorContainer::from_drop(&IrDropMap {
        drop: pred_v.clone(),
        source: DropSource::Predicted,
    })
    .save(&f.out.join("prediction.irgt"))?;
    save_grid_png(&f.out.join("prediction.png"), &pred_v, &[])?;
    save_grid_png(&f.out.join("hotspots.png"), &pred_v, &[(&hot.pixels, render::HOTSPOT)])?;
    if let Some(b) = &best {
        let plane = Grid::from_vec(sal.height, sal.width, sal.plane(b.channel).iter().map(|v| v.abs()).collect());
        save_grid_png(&f.out.join("saliency.png"), &plane, &[(&b.pixels, render::TOP_K)])?;
        save_grid_png(
            &f.out.join("topk.png"),
            &pred_v,
            &[(&hot.pixels, render::HOTSPOT), (&b.pixels, render::TOP_K)],
        )?;
    }

    let report = ExplainReport {
        k,
        factor: opts.factor,
        fraction: opts.fraction,
        candidate_channels: opts.channels.clone(),
        channel_scores: best
            .as_ref()
            .map(|b| b.scores.iter().map(|&(c, s)| (c, CHANNEL_NAMES[c].to_string(), s)).collect())
            .unwrap_or_default(),
        winner_channel: rep.contributor_channel,
        winner_name: rep.contributor_name.clone(),
        chosen_pixels: rep.chosen_pixels.clone(),
        hotspot_pixels: hot.pixels.clone(),
        dr_max: rep.dr_max * scale,
        dr_th: rep.dr_th * scale,
        high_drop_before: rep.high_drop_before,
        high_drop_after: rep.high_drop_after,
        reduction_percent: rep.reduction_percent,
    };
    fs::write(f.out.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    let mut out = std::io::stdout().lock();
    writeln!(
        out,
        "winner {}  hotspots {} -> {}  reduction {:.2}%",
        rep.contributor_name.as_deref().unwrap_or("-"),
        rep.high_drop_before,
        rep.high_drop_after,
        rep.reduction_percent
    )?;
    Ok(())
}

fn optimize_cmd(a: OptimizeArgs) -> Result<()> {
    let f = &a.flags;
    let (k, opts) = explain_options(f)?;
    let ck = load_checkpoint(&f.checkpoint)?;
    let stack = load_features(&f.input)?;
    let (rep, next) = if a.baseline {
        let rep = baseline_no_saliency(&ck.model, &stack, &opts)?;
        let mut next = stack.clone();
        for ch in resistance_channels() {
            next = apply_upsize(&next, ch, &rep.chosen_pixels, opts.fraction)?;
        }
        (rep, next)
    } else {
        let rep = optimize(&ck.model, &stack, k, &opts).map_err(|e| match e {
            CoreError::EmptyHotspots => anyhow!("the predicted map has no hotspots"),
            other => other.into(),
        })?;
        let next = match rep.contributor_channel {
            Some(ch) => apply_upsize(&stack, ch, &rep.chosen_pixels, opts.fraction)?,
            None => stack.clone(),
        };
        (rep, next)
    };
    create_dir(&f.out)?;
    TensorContainer::from_features(&next).save(&f.out.join("features.irgt"))?;
    fs::write(f.out.join("report.json"), serde_json::to_string_pretty(&rep)? + "\n")?;
    println!(
        "hotspots {} -> {}  reduction {:.2}%",
        rep.high_drop_before, rep.high_drop_after, rep.reduction_percent
    );
    Ok(())
}
