//! `relprop`: explain single images and run the masking evaluation protocol.
//!
//! Exit codes: 0 success, 1 usage, 2 I/O, 3 numeric or engine failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use relprop::eval::{
    accuracy_curve, cross_compare, localization, make_mask, validate_percentages, Dataset, EvalMethod, EvalOptions,
    EvalReport, Mask, MaskMode, DEFAULT_PERCENTAGES,
};
use relprop::model::argmax;
use relprop::model_io::{load_image, load_model, save_mask, write_contributions};
use relprop::verify::{conservation_suite, fixture_oracle_check, oracle_suite, SuiteSummary};
use relprop::{attribute, ErrorClass, MethodConfig, Network, Rule};

#[derive(Parser, Debug)]
#[command(name = "relprop", version, about = "Layer-wise relevance propagation and mask-based evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Relevance map and top-p% masks for one image.
    Explain(ExplainArgs),
    /// Masked re-classification accuracy curves.
    Eval(EvalArgs),
    /// Share of selected pixels inside the object masks.
    Pointing(EvalArgs),
    /// Mean normalized distance of selected pixels to the object masks.
    Distance(EvalArgs),
    /// Masks from one network scored by another.
    Cross(CrossArgs),
    /// Engine against the edge oracle, and conservation checks.
    Verify(VerifyArgs),
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// Model manifest (JSON).
    #[arg(long)]
    model: PathBuf,
    /// Weight blob; defaults to the manifest path with a `.bin` extension.
    #[arg(long)]
    blob: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct HyperArgs {
    #[arg(long, default_value_t = 0.01)]
    eps: f64,
    #[arg(long, default_value_t = 0.25)]
    gamma: f64,
    #[arg(long, default_value_t = 2.0, allow_hyphen_values = true)]
    alpha: f64,
    #[arg(long, default_value_t = -1.0, allow_hyphen_values = true)]
    beta: f64,
}

#[derive(Args, Debug, Clone)]
struct MaskArgs {
    /// input-signed, input-abs, pixel-signed or pixel-abs.
    #[arg(long, default_value = "pixel-abs")]
    mode: String,
    /// Comma-separated percentages in (0, 100], strictly increasing.
    #[arg(long, value_delimiter = ',')]
    percentages: Option<Vec<f64>>,
}

#[derive(Args, Debug)]
struct ExplainArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Input image (PPM or PGM).
    #[arg(long)]
    image: PathBuf,
    /// Output to explain; defaults to the predicted class.
    #[arg(long)]
    class: Option<usize>,
    /// lrp0, lrp-eps, lrp-gamma, lrp-ab or rlrp.
    #[arg(long, default_value = "rlrp")]
    method: String,
    #[command(flatten)]
    hyper: HyperArgs,
    #[command(flatten)]
    masks: MaskArgs,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Dataset manifest (JSON).
    #[arg(long)]
    dataset: PathBuf,
    /// One or more of lrp0, lrp-eps, lrp-gamma, lrp-ab, rlrp and random.
    #[arg(long, value_delimiter = ',', default_value = "rlrp")]
    method: Vec<String>,
    #[command(flatten)]
    hyper: HyperArgs,
    #[command(flatten)]
    masks: MaskArgs,
    /// CSV output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 0)]
    workers: usize,
    /// Seed for random baseline masks.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct CrossArgs {
    /// Network whose relevance builds the masks.
    #[command(flatten)]
    model: ModelArgs,
    /// Network that classifies the masked images.
    #[arg(long)]
    model_b: PathBuf,
    #[arg(long)]
    blob_b: Option<PathBuf>,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "rlrp")]
    method: String,
    #[command(flatten)]
    hyper: HyperArgs,
    #[command(flatten)]
    masks: MaskArgs,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    workers: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// Directory of model manifests to check against the oracle.
    #[arg(long)]
    fixtures: Option<PathBuf>,
    /// Minimum number of random networks per check.
    #[arg(long, default_value_t = 100)]
    nets: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

enum Failure {
    Usage(String),
    Engine(relprop::Error),
    Checks(usize),
}

impl From<relprop::Error> for Failure {
    fn from(e: relprop::Error) -> Self {
        Failure::Engine(e)
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn method_config(name: &str, h: &HyperArgs) -> CliResult<MethodConfig> {
    let rule = match name {
        "lrp0" => Rule::Lrp0,
        "lrp-eps" => Rule::LrpEpsilon { epsilon: h.eps },
        "lrp-gamma" => Rule::LrpGamma { gamma: h.gamma },
        "lrp-ab" => Rule::LrpAlphaBeta { alpha: h.alpha, beta: h.beta },
        "rlrp" => Rule::Rlrp,
        other => {
            return Err(Failure::Usage(format!(
                "unknown method '{other}' (expected lrp0, lrp-eps, lrp-gamma, lrp-ab or rlrp)"
            )))
        }
    };
    let cfg = MethodConfig::new(rule);
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn eval_method(name: &str, h: &HyperArgs) -> CliResult<EvalMethod> {
    if name == "random" {
        return Ok(EvalMethod::Random);
    }
    method_config(name, h).map(EvalMethod::Attribution)
}

fn mask_mode(args: &MaskArgs) -> CliResult<MaskMode> {
    args.mode.parse().map_err(|e: relprop::Error| Failure::Usage(e.to_string()))
}

fn percentages(args: &MaskArgs) -> CliResult<Option<Vec<f64>>> {
    if let Some(p) = &args.percentages {
        validate_percentages(p).map_err(|e| Failure::Usage(e.to_string()))?;
    }
    Ok(args.percentages.clone())
}

fn load(model: &Path, blob: Option<&Path>) -> CliResult<Network> {
    let blob = blob.map(Path::to_path_buf).unwrap_or_else(|| model.with_extension("bin"));
    Ok(load_model(model, blob)?)
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| Failure::Engine(relprop::Error::Io {
        path: dir.to_path_buf(),
        source: e,
    }))
}

fn emit(report: &EvalReport, out: Option<&Path>) -> CliResult<()> {
    for s in &report.skipped {
        eprintln!("skipped {} ({}): {}", s.image.display(), s.method, s.reason);
    }
    let csv = report.to_csv();
    match out {
        Some(path) => {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                create_dir(parent)?;
            }
            fs::write(path, csv).map_err(|e| {
                Failure::Engine(relprop::Error::Io {
                    path: path.to_path_buf(),
                    source: e,
                })
            })
        }
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn mask_file_name(percent: f64, mask: &Mask) -> String {
    let ext = if mask.shape().len() == 3 && mask.shape()[2] == 3 { "ppm" } else { "pgm" };
    format!("mask_{percent}.{ext}")
}

fn cmd_explain(args: &ExplainArgs) -> CliResult<()> {
    let net = load(&args.model.model, args.model.blob.as_deref())?;
    let cfg = method_config(&args.method, &args.hyper)?;
    let mode = mask_mode(&args.masks)?;
    let pcts = percentages(&args.masks)?.unwrap_or_else(|| DEFAULT_PERCENTAGES.to_vec());

    let raw = load_image(&args.image)?;
    if raw.shape() != net.input_shape() {
        return Err(relprop::Error::Dimension(format!(
            "image shape {:?} does not match the network input {:?}",
            raw.shape(),
            net.input_shape()
        ))
        .into());
    }
    let (logits, trace) = net.forward(&net.preprocessing.apply(&raw)?)?;
    let k = args.class.unwrap_or_else(|| argmax(logits.data()));
    let map = attribute(&net, &trace, k, &cfg)?;
    for d in &map.diagnostics {
        eprintln!("note: {d}");
    }

    create_dir(&args.out)?;
    write_contributions(&map, args.out.join("contributions.bin"), args.out.join("contributions.json"))?;
    for &p in &pcts {
        let mask = make_mask(&map, p, mode)?;
        save_mask(&mask, args.out.join(mask_file_name(p, &mask)))?;
    }
    let label = net
        .class_labels
        .as_ref()
        .map(|l| format!(" ({})", l[k]))
        .unwrap_or_default();
    println!("explained output {k}{label} with {}, logit {}", cfg.rule, logits.data()[k]);
    Ok(())
}

fn eval_options(masks: &MaskArgs, workers: usize, seed: u64) -> CliResult<EvalOptions> {
    Ok(EvalOptions {
        percentages: percentages(masks)?,
        mode: mask_mode(masks)?,
        workers,
        seed,
    })
}

#[derive(Clone, Copy)]
enum EvalKind {
    Accuracy,
    Pointing,
    Distance,
}

fn cmd_eval(args: &EvalArgs, kind: EvalKind) -> CliResult<()> {
    let methods = args
        .method
        .iter()
        .map(|m| eval_method(m, &args.hyper))
        .collect::<CliResult<Vec<_>>>()?;
    let opts = eval_options(&args.masks, args.workers, args.seed)?;
    let net = load(&args.model.model, args.model.blob.as_deref())?;
    let dataset = Dataset::load(&args.dataset)?;
    if !matches!(kind, EvalKind::Accuracy) && dataset.records.iter().all(|r| r.mask.is_none()) {
        return Err(Failure::Usage("this command needs a dataset with object masks".into()));
    }
    let mut report = EvalReport::default();
    for method in &methods {
        let part = match kind {
            EvalKind::Accuracy => accuracy_curve(&net, &dataset, method, &opts)?,
            EvalKind::Pointing | EvalKind::Distance => {
                let keep = if matches!(kind, EvalKind::Pointing) { "pointing_game" } else { "avg_distance" };
                let mut r = localization(&net, &dataset, method, &opts)?;
                r.rows.retain(|row| row.metric == keep);
                r
            }
        };
        report.extend(part);
    }
    emit(&report, args.out.as_deref())
}

fn cmd_cross(args: &CrossArgs) -> CliResult<()> {
    let cfg = method_config(&args.method, &args.hyper)?;
    let opts = eval_options(&args.masks, args.workers, args.seed)?;
    let net_a = load(&args.model.model, args.model.blob.as_deref())?;
    let net_b = load(&args.model_b, args.blob_b.as_deref())?;
    let dataset = Dataset::load(&args.dataset)?;
    let report = cross_compare(&net_a, &net_b, &dataset, &cfg, &opts)?;
    emit(&report, args.out.as_deref())
}

fn fixture_manifests(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| {
        Failure::Engine(relprop::Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })
    })?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json") && p.with_extension("bin").is_file())
        .collect();
    paths.sort();
    Ok(paths)
}

fn cmd_verify(args: &VerifyArgs) -> CliResult<()> {
    let mut summaries: Vec<SuiteSummary> = Vec::new();
    if let Some(dir) = &args.fixtures {
        for manifest in fixture_manifests(dir)? {
            let net = load(&manifest, None)?;
            match fixture_oracle_check(&net, args.seed, 5)? {
                Some(s) => summaries.push(s),
                None => println!("SKIP oracle equivalence on {}: not representable as an edge graph", net.name),
            }
        }
    }
    summaries.extend(oracle_suite(args.seed, args.nets)?);
    summaries.extend(conservation_suite(args.seed, args.nets)?);
    let mut failed = 0;
    for s in &summaries {
        println!("{}", s.line());
        if !s.passed() {
            failed += 1;
        }
    }
    if failed > 0 {
        return Err(Failure::Checks(failed));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Explain(a) => cmd_explain(a),
        Command::Eval(a) => cmd_eval(a, EvalKind::Accuracy),
        Command::Pointing(a) => cmd_eval(a, EvalKind::Pointing),
        Command::Distance(a) => cmd_eval(a, EvalKind::Distance),
        Command::Cross(a) => cmd_cross(a),
        Command::Verify(a) => cmd_verify(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Engine(e)) => {
            eprintln!("error: {}: {e}", e.name());
            ExitCode::from(match e.class() {
                ErrorClass::Io => 2,
                ErrorClass::Numeric => 3,
            })
        }
        Err(Failure::Checks(n)) => {
            eprintln!("error: {n} check(s) failed");
            ExitCode::from(3)
        }
    }
}
