//! `tnjet`: train, evaluate, quantize and analyze tensor-network jet
//! classifiers.

mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use manifest::RunManifest;
use tnjet_core::hwmodel::{self, build_dag, latency_breakdown};
use tnjet_core::ingest::{self, fit_scaler, FeatureColumns, CLASS_NAMES, N_CLASSES};
use tnjet_core::mps::default_label_site;
use tnjet_core::quant::ptq_sweep;
use tnjet_core::synth::{self, SynthConfig};
use tnjet_core::train::{epoch_permutation, evaluate, train_model};
use tnjet_core::{
    qmi_matrix, Arch, Classifier, CostModel, EmbeddingSpec, FxpFormat, JetRecord, LabeledJets, Layout, Loss,
    MpsModel, Network, OpMode, TrainConfig, TtnModel,
};

#[derive(Parser)]
#[command(name = "tnjet", version, about = "Tensor-network jet classifiers", arg_required_else_help = true)]
struct Cli {
    /// Seed recorded in every manifest and used by every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a classifier on a JTN1 file and write a checkpoint.
    Train(TrainArgs),
    /// Accuracy and per-class AUC of a checkpoint.
    Eval(EvalArgs),
    /// Post-training quantization sweep over fractional bit widths.
    PtqSweep(SweepArgs),
    /// Quantum mutual information matrix between input sites.
    Qmi(QmiArgs),
    /// Latency and memory estimate of the hardware schedule.
    Estimate(EstimateArgs),
    /// Print the parameter count of an architecture.
    Params(NetArgs),
    /// Validate a JTN1 file and summarize it.
    ConvertCheck(CheckArgs),
    /// Write synthetic jets as a JTN1 file.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum LayoutArg {
    PerParticle,
    PerFeature,
}

impl From<LayoutArg> for Layout {
    fn from(l: LayoutArg) -> Self {
        match l {
            LayoutArg::PerParticle => Layout::PerParticle,
            LayoutArg::PerFeature => Layout::PerFeature,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum ArchArg {
    Mps,
    Ttn,
}

#[derive(Args, Serialize, Clone)]
struct NetArgs {
    #[arg(long, value_enum)]
    arch: ArchArg,
    /// Number of constituents per jet.
    #[arg(long)]
    n: usize,
    /// MPS bond dimension cap.
    #[arg(long, default_value_t = 10)]
    bond: usize,
    /// TTN bond dimension cap.
    #[arg(long, default_value_t = 10)]
    chi: usize,
    #[arg(long, value_enum, default_value = "per-particle")]
    layout: LayoutArg,
    /// Order per-feature sites as all p_T sites, then all ΔR sites.
    #[arg(long)]
    pt_first: bool,
    /// MPS label position (default: middle of the chain).
    #[arg(long)]
    label_site: Option<usize>,
    #[arg(long, default_value_t = N_CLASSES)]
    classes: usize,
}

impl NetArgs {
    fn embedding(&self) -> EmbeddingSpec {
        EmbeddingSpec {
            layout: self.layout.into(),
            pt_first: self.pt_first,
        }
    }

    fn build(&self, seed: u64) -> Result<Network> {
        let layout: Layout = self.layout.into();
        let sites = layout.n_sites(self.n);
        let d = layout.phys_dim();
        Ok(match self.arch {
            ArchArg::Mps => {
                let label = self.label_site.unwrap_or_else(|| default_label_site(sites));
                Network::Mps(MpsModel::new(sites, d, self.bond, self.classes, label, seed)?)
            }
            ArchArg::Ttn => {
                if self.label_site.is_some() {
                    bail!("--label-site only applies to --arch mps");
                }
                Network::Ttn(TtnModel::new(sites, d, self.chi, self.classes, seed)?)
            }
        })
    }
}

#[derive(Args, Serialize)]
struct TrainArgs {
    #[command(flatten)]
    net: NetArgs,
    #[arg(long)]
    data: PathBuf,
    /// Held-out JTN1 file; without it a seeded fraction of `--data` is held out.
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
    /// Use only the first jets of the training file.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Metrics report (default: `<out>.report.json`).
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 512)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum ModeArg {
    Fpop,
    Qop,
    Both,
}

#[derive(Args, Serialize)]
struct SweepArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// `lo..hi`, a comma list, or a single value.
    #[arg(long, default_value = "2..14")]
    fb: String,
    #[arg(long, value_enum, default_value = "both")]
    mode: ModeArg,
    /// Jets from the start of `--data` used to size intermediate values;
    /// 0 quantizes the checkpoint as stored.
    #[arg(long, default_value_t = 1000)]
    calib: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct QmiArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct EstimateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 14)]
    fb: u32,
    /// Cycles per multiplication (default depends on the architecture).
    #[arg(long)]
    nreg: Option<u32>,
    #[arg(long, default_value_t = 250.0)]
    clock_mhz: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct CheckArgs {
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args, Serialize)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    n_jets: usize,
    #[arg(long, default_value_t = 64)]
    max_constituents: usize,
}

fn parse_fb_list(s: &str) -> Result<Vec<u32>> {
    let list: Vec<u32> = if let Some((lo, hi)) = s.split_once("..") {
        let lo: u32 = lo.trim().parse().context("fb range start")?;
        let hi: u32 = hi.trim().parse().context("fb range end")?;
        if lo > hi {
            bail!("empty fb range {s}");
        }
        (lo..=hi).collect()
    } else {
        s.split(',')
            .map(|p| p.trim().parse::<u32>().with_context(|| format!("fb value {p:?}")))
            .collect::<Result<_>>()?
    };
    for &fb in &list {
        FxpFormat::new(fb)?;
    }
    Ok(list)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_records(path: &Path) -> Result<Vec<JetRecord>> {
    ingest::load_dataset(path).with_context(|| format!("loading {}", path.display()))
}

#[derive(Serialize)]
struct ClassAuc {
    class: &'static str,
    auc: Option<f64>,
}

fn class_aucs(auc: &[Option<f64>]) -> Vec<ClassAuc> {
    auc.iter()
        .enumerate()
        .map(|(i, &a)| ClassAuc {
            class: CLASS_NAMES.get(i).copied().unwrap_or("?"),
            auc: a,
        })
        .collect()
}

#[derive(Serialize)]
struct TrainReport {
    arch: Arch,
    n_sites: usize,
    params: usize,
    train_jets: usize,
    test_jets: usize,
    accuracy: f64,
    auc: Vec<ClassAuc>,
    loss_curve: Vec<f64>,
}

fn train(args: &TrainArgs, seed: u64) -> Result<()> {
    let mut records = load_records(&args.data)?;
    if let Some(limit) = args.limit {
        records.truncate(limit);
    }
    let (train_recs, test_recs) = match &args.test {
        Some(p) => (records, load_records(p)?),
        None => {
            if !(args.test_fraction > 0.0 && args.test_fraction < 1.0) {
                bail!("--test-fraction must be in (0, 1)");
            }
            let order = epoch_permutation(records.len(), seed, usize::MAX);
            let n_test = (records.len() as f64 * args.test_fraction).round() as usize;
            let pick = |idx: &[usize]| idx.iter().map(|&i| records[i].clone()).collect::<Vec<_>>();
            (pick(&order[n_test..]), pick(&order[..n_test]))
        }
    };
    let scaler = fit_scaler(&train_recs, &FeatureColumns::HLS4ML.as_array())?;
    let classifier = Classifier::new(args.net.build(seed)?, args.net.embedding(), Some(scaler))?;
    let train_set = classifier.prepare(&train_recs)?;
    let test_set = classifier.prepare(&test_recs)?;
    let mut cfg = TrainConfig {
        batch_size: args.batch,
        learning_rate: args.lr,
        epochs: args.epochs,
        seed,
        ..Default::default()
    };
    let (network, metrics) = match classifier.network.clone() {
        Network::Mps(m) => {
            cfg.loss = Loss::CrossEntropy;
            let (m, met) = train_model(m, &train_set, &test_set, &cfg)?;
            (Network::Mps(m), met)
        }
        Network::Ttn(m) => {
            cfg.loss = Loss::Mse;
            let (m, met) = train_model(m, &train_set, &test_set, &cfg)?;
            (Network::Ttn(m), met)
        }
    };
    let trained = Classifier { network, ..classifier };
    trained.save(&args.out)?;
    let report = TrainReport {
        arch: trained.network.arch(),
        n_sites: trained.network.n_sites(),
        params: trained.network.param_count(),
        train_jets: train_set.len(),
        test_jets: test_set.len(),
        accuracy: metrics.accuracy,
        auc: class_aucs(&metrics.auc),
        loss_curve: metrics.loss_curve,
    };
    let report_path = args.report.clone().unwrap_or_else(|| with_suffix(&args.out, ".report.json"));
    write_json(&report_path, &report)?;
    let mut inputs = vec![args.data.as_path()];
    inputs.extend(args.test.as_deref());
    let manifest = RunManifest::new("train", args, seed, &inputs)?;
    manifest.write_for(&args.out)?;
    manifest.write_for(&report_path)?;
    println!("accuracy {:.4}", report.accuracy);
    Ok(())
}

fn load_eval_set(ckpt: &Path, data: &Path) -> Result<(Classifier, LabeledJets)> {
    let classifier = Classifier::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let set = classifier.prepare(&load_records(data)?)?;
    Ok((classifier, set))
}

#[derive(Serialize)]
struct EvalReport {
    arch: Arch,
    n_sites: usize,
    jets: usize,
    accuracy: f64,
    auc: Vec<ClassAuc>,
}

fn eval(args: &EvalArgs, seed: u64) -> Result<()> {
    let (c, set) = load_eval_set(&args.ckpt, &args.data)?;
    let (accuracy, auc) = match &c.network {
        Network::Mps(m) => evaluate(m, &set, Loss::CrossEntropy)?,
        Network::Ttn(m) => evaluate(m, &set, Loss::Mse)?,
    };
    let report = EvalReport {
        arch: c.network.arch(),
        n_sites: c.network.n_sites(),
        jets: set.len(),
        accuracy,
        auc: class_aucs(&auc),
    };
    match &args.out {
        Some(out) => {
            write_json(out, &report)?;
            RunManifest::new("eval", args, seed, &[&args.ckpt, &args.data])?.write_for(out)?;
        }
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    Ok(())
}

fn ptq(args: &SweepArgs, seed: u64) -> Result<()> {
    let (c, set) = load_eval_set(&args.ckpt, &args.data)?;
    let fbs = parse_fb_list(&args.fb)?;
    let modes = match args.mode {
        ModeArg::Fpop => vec![OpMode::Fpop],
        ModeArg::Qop => vec![OpMode::Qop],
        ModeArg::Both => vec![OpMode::Fpop, OpMode::Qop],
    };
    let calib = &set.jets[..args.calib.min(set.len())];
    let calib = (args.calib > 0).then_some(calib);
    let table = match &c.network {
        Network::Mps(m) => ptq_sweep(m, &set, &fbs, &modes, calib)?,
        Network::Ttn(m) => ptq_sweep(m, &set, &fbs, &modes, calib)?,
    };
    std::fs::write(&args.out, table.to_csv(&c.network.arch().to_string(), c.n_particles()))
        .with_context(|| format!("writing {}", args.out.display()))?;
    RunManifest::new("ptq-sweep", args, seed, &[&args.ckpt, &args.data])?.write_for(&args.out)?;
    println!("float accuracy {:.4}", table.float_accuracy);
    for mode in modes {
        match table.knee(mode, 0.02) {
            Some(fb) => println!("{mode}: accuracy drops by more than 0.02 at FB <= {fb}"),
            None => println!("{mode}: no drop above 0.02"),
        }
    }
    Ok(())
}

fn qmi(args: &QmiArgs, seed: u64) -> Result<()> {
    let c = Classifier::load(&args.ckpt).with_context(|| format!("loading {}", args.ckpt.display()))?;
    let labels = c.site_labels();
    let m = match &c.network {
        Network::Mps(m) => qmi_matrix(m, labels)?,
        Network::Ttn(m) => qmi_matrix(m, labels)?,
    };
    std::fs::write(&args.out, m.to_csv()).with_context(|| format!("writing {}", args.out.display()))?;
    RunManifest::new("qmi", args, seed, &[&args.ckpt])?.write_for(&args.out)?;
    if c.embedding.layout == Layout::PerFeature {
        let groups: Vec<usize> = m.site_labels.iter().map(|l| l.starts_with("dR") as usize).collect();
        let (same, mixed) = m.group_means(&groups);
        println!(
            "mean QMI same-feature {:.6e}, mixed {:.6e}",
            same.unwrap_or(0.0),
            mixed.unwrap_or(0.0)
        );
    }
    Ok(())
}

fn estimate(args: &EstimateArgs, seed: u64) -> Result<()> {
    let c = Classifier::load(&args.ckpt).with_context(|| format!("loading {}", args.ckpt.display()))?;
    let topo = c.network.topology();
    let mut cost = CostModel::for_arch(topo.arch());
    cost.clock_mhz = args.clock_mhz;
    if let Some(n) = args.nreg {
        cost.n_reg = n;
    }
    let report = hwmodel::report(&topo, FxpFormat::new(args.fb)?, &cost)?;
    write_json(&args.out, &report)?;
    RunManifest::new("estimate", args, seed, &[&args.ckpt])?.write_for(&args.out)?;
    let lat = latency_breakdown(&build_dag(&topo)?, &cost);
    println!(
        "{} stages, {} cycles, {:.0} ns, {:.2} kb",
        report.n_stages, lat.cycles, report.latency_ns, report.memory_kbits
    );
    Ok(())
}

fn params(args: &NetArgs) -> Result<()> {
    let net = args.build(0)?;
    Classifier::new(net.clone(), args.embedding(), None)?;
    println!("{}", net.param_count());
    Ok(())
}

#[derive(Serialize)]
struct CheckReport {
    n_jets: usize,
    max_constituents: u16,
    n_features: u16,
    class_counts: Vec<(String, usize)>,
    mean_constituents: f64,
}

fn convert_check(args: &CheckArgs) -> Result<()> {
    let bytes = std::fs::read(&args.data).with_context(|| format!("reading {}", args.data.display()))?;
    let (header, records) = ingest::decode_dataset(&bytes, &FeatureColumns::HLS4ML)?;
    let mut counts = vec![0usize; N_CLASSES];
    for r in &records {
        counts[r.label as usize] += 1;
    }
    let total: usize = records.iter().map(|r| r.n_constituents()).sum();
    let report = CheckReport {
        n_jets: records.len(),
        max_constituents: header.max_constituents,
        n_features: header.n_features,
        class_counts: CLASS_NAMES.iter().map(|s| s.to_string()).zip(counts).collect(),
        mean_constituents: total as f64 / records.len().max(1) as f64,
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn synth_cmd(args: &SynthArgs, seed: u64) -> Result<()> {
    let cfg = SynthConfig {
        n_jets: args.n_jets,
        seed,
        max_constituents: args.max_constituents,
        ..Default::default()
    };
    let records = synth::generate(&cfg)?;
    ingest::write_dataset(&args.out, &records, ingest::RAW_FEATURES)?;
    RunManifest::new("synth", &cfg, seed, &[])?.write_for(&args.out)?;
    Ok(())
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("TNT_THREADS") {
        let n: usize = v.parse().map_err(|_| anyhow!("TNT_THREADS={v:?} is not a positive integer"))?;
        if n == 0 {
            bail!("TNT_THREADS must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    let seed = cli.seed;
    match &cli.command {
        Command::Train(a) => train(a, seed),
        Command::Eval(a) => eval(a, seed),
        Command::PtqSweep(a) => ptq(a, seed),
        Command::Qmi(a) => qmi(a, seed),
        Command::Estimate(a) => estimate(a, seed),
        Command::Params(a) => params(a),
        Command::ConvertCheck(a) => convert_check(a),
        Command::Synth(a) => synth_cmd(a, seed),
    }
}

/// Variant name of a library error, e.g. `Truncated`.
fn error_kind(e: &anyhow::Error) -> String {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<tnjet_core::Error>() {
            let dbg = format!("{err:?}");
            return dbg
                .split(|c: char| !c.is_alphanumeric())
                .next()
                .unwrap_or("Error")
                .to_string();
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "Io".into();
        }
    }
    "Error".into()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let record = serde_json::json!({
                "error": {
                    "kind": error_kind(&e),
                    "message": format!("{e:#}"),
                }
            });
            eprintln!("{record}");
            ExitCode::from(1)
        }
    }
}
