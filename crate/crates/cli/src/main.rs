use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use srcflow::data_io::{
    self, gen_class_mixture, gen_low_rank, read_checkpoint, read_dataset, write_checkpoint, write_dataset, write_stats,
    write_text_atomic, Compressor, Dataset, FlowArtifact, PipelineConfig, SrcArtifact,
};
use srcflow::rng::derive_seed;
use srcflow::tokenfield::{compute_channel_stats, intrinsic_dim, pca_spectrum, NoiseSpec};
use srcflow::training::{
    compute_compact_stats, noise_schedule_report, train_flow, train_src, CompactPath, FlowData, MetricsRow, TrainConfig,
};
use srcflow::verify::verify_suite;
use srcflow::{Error, FlowModel, GuidanceSpec, Real, TokenField};

#[derive(Parser)]
#[command(name = "srcflow", version, about = "Compressed-token normalizing flow pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Pipeline config file ([src], [flow], [train], [noise]).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value = "32")]
    precision: Precision,
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    #[value(name = "32")]
    F32,
    #[value(name = "64")]
    F64,
}

#[derive(Clone, Copy, ValueEnum)]
enum DataKind {
    LowRank,
    Mixture,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long, value_enum, default_value = "low-rank")]
        kind: DataKind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4096)]
        examples: usize,
        #[arg(long, default_value_t = 16)]
        tokens: usize,
        #[arg(long, default_value_t = 64)]
        channels: usize,
        #[arg(long, default_value_t = 8)]
        rank: usize,
        /// Comma-separated descending variances; defaults to rank, rank-1, ..., 1.
        #[arg(long, value_delimiter = ',')]
        spectrum: Option<Vec<f64>>,
        #[arg(long, default_value_t = 0.01)]
        noise_std: f64,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 1)]
        components: usize,
    },
    /// Per-channel mean and standard deviation of a dataset.
    Stats {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// PCA spectrum CSV with the intrinsic dimension at `threshold`.
    Pca {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.99)]
        threshold: f64,
    },
    /// Train the compressor.
    TrainSrc {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Metrics CSV (default: OUT with a .metrics.csv suffix).
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Train the flow, on compressor outputs when --ckpt names a compressor checkpoint.
    TrainFlow {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Draw samples from a flow checkpoint (EMA weights).
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Decoded token fields (default: OUT with a .decoded.sftk suffix).
        #[arg(long)]
        decoded: Option<PathBuf>,
        #[arg(long)]
        label: Option<u32>,
        /// Guidance weight; 0 is plain conditional sampling.
        #[arg(long, default_value_t = 0.0)]
        cfg: f64,
        #[arg(long, default_value_t = 16)]
        count: usize,
    },
    /// Per-example negative log-likelihood CSV.
    Nll {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Evaluate the raw parameters instead of the EMA.
        #[arg(long)]
        raw: bool,
    },
    /// Run the oracle suite; exits 1 if any check fails.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Flow checkpoint to check; without it a fresh model is used.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Token count of the fresh model.
        #[arg(long, default_value_t = 4)]
        tokens: usize,
        /// Channel count of the fresh model.
        #[arg(long, default_value_t = 2)]
        channels: usize,
    },
    /// Constant vs per-example noise training comparison CSV.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Compressor checkpoint; without it the flow models the data directly.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.4)]
        sigma: f64,
        #[arg(long, default_value_t = 0.8)]
        per_sample_max: f64,
        /// Fraction of examples held out for evaluation.
        #[arg(long, default_value_t = 0.2)]
        test_fraction: f64,
    },
}

enum Failure {
    Lib(Error),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_config(common: &Common) -> CliResult<PipelineConfig> {
    let mut c = match &common.config {
        Some(p) => PipelineConfig::parse(&std::fs::read_to_string(p).map_err(Error::from)?)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = common.seed {
        c.set_seed(s);
    }
    Ok(c)
}

fn load_data<T: Real>(path: &Path) -> CliResult<Dataset<T>> {
    Ok(read_dataset(path)?.cast())
}

fn data_shape<T: Real>(d: &Dataset<T>) -> CliResult<(usize, usize)> {
    Ok(d.shape().ok_or(Error::NoData)?)
}

fn fill(slot: &mut usize, value: usize, what: &str) -> CliResult<()> {
    if *slot == 0 {
        *slot = value;
    } else if *slot != value {
        return Err(Error::Config(format!("{what} is {slot} in the config but {value} in the data")).into());
    }
    Ok(())
}

fn progress(stage: &'static str, every: usize) -> impl FnMut(&MetricsRow) {
    move |m: &MetricsRow| {
        if m.step.is_multiple_of(every) {
            eprintln!("{stage} step {} lr {:.3e} loss {:.5} grad {:.3}", m.step, m.lr, m.loss, m.grad_norm);
        }
    }
}

fn cmd_train_src<T: Real>(common: &Common, data: &Path, out: &Path, metrics: Option<&Path>) -> CliResult<()> {
    let mut config = load_config(common)?;
    let ds: Dataset<T> = load_data(data)?;
    let (tokens, channels) = data_shape(&ds)?;
    fill(&mut config.src.n, channels, "src.n")?;
    config.src.width = config.src.n;
    fill(&mut config.src.tokens, tokens, "src.tokens")?;
    let rae_stats = compute_channel_stats(&ds.fields)?;
    let mut rows = Vec::new();
    let mut report = progress("src", 100);
    let src = train_src(&ds.fields, &rae_stats, config.src.clone(), &config.src_train, &mut |m| {
        report(m);
        rows.push(*m);
    })?;
    let art = SrcArtifact { config, src, rae_stats };
    write_checkpoint(out, &art.to_checkpoint())?;
    let metrics = metrics.map_or_else(|| with_suffix(out, ".metrics.csv"), Path::to_path_buf);
    write_text_atomic(&metrics, &data_io::metrics_csv(&rows))?;
    Ok(())
}

/// Config and compressor for a flow run: from a compressor checkpoint when
/// given, otherwise the flow models the data directly.
fn flow_setup<T: Real>(
    common: &Common,
    ds: &Dataset<T>,
    ckpt: Option<&Path>,
) -> CliResult<(PipelineConfig, Option<Compressor<T>>)> {
    let mut config = load_config(common)?;
    let (tokens, channels) = data_shape(ds)?;
    let compressor = match ckpt {
        None => {
            fill(&mut config.flow.channels, channels, "flow.channels")?;
            None
        }
        Some(p) => {
            let art = SrcArtifact::<T>::from_checkpoint(&read_checkpoint(p)?)?;
            if art.src.config().n != channels {
                return Err(Error::Config(format!(
                    "compressor expects {} channels, data has {channels}",
                    art.src.config().n
                ))
                .into());
            }
            config.src = art.config.src.clone();
            config.src_train = TrainConfig { seed: config.src_train.seed, ..art.config.src_train.clone() };
            fill(&mut config.flow.channels, art.src.config().d, "flow.channels")?;
            let compact_stats = compute_compact_stats(
                &ds.fields,
                &art.src,
                &art.rae_stats,
                config.flow_train.noise,
                derive_seed(config.flow_train.seed, &[0xc5]),
            )?;
            Some(Compressor { src: art.src, rae_stats: art.rae_stats, compact_stats })
        }
    };
    fill(&mut config.flow.tokens, tokens, "flow.tokens")?;
    if config.flow.num_classes == 0 {
        config.flow.num_classes = ds.num_classes();
    }
    Ok((config, compressor))
}

fn path_of<'a, T: Real>(c: &'a Option<Compressor<T>>) -> CompactPath<'a, T> {
    match c {
        None => CompactPath::Direct,
        Some(c) => CompactPath::Compressed { src: &c.src, rae_stats: &c.rae_stats, compact_stats: &c.compact_stats },
    }
}

fn cmd_train_flow<T: Real>(
    common: &Common,
    data: &Path,
    ckpt: Option<&Path>,
    out: &Path,
    metrics: Option<&Path>,
) -> CliResult<()> {
    let ds: Dataset<T> = load_data(data)?;
    let (config, compressor) = flow_setup(common, &ds, ckpt)?;
    let mut rows = Vec::new();
    let mut report = progress("flow", 500);
    let (flow, ema) = train_flow(
        FlowData { fields: &ds.fields, labels: ds.labels.as_deref() },
        &path_of(&compressor),
        config.flow.clone(),
        &config.flow_train,
        &mut |m| {
            report(m);
            rows.push(*m);
        },
    )?;
    let ema = FlowModel::from_params(config.flow.clone(), &ema.shadow)?;
    let art = FlowArtifact { config, compressor, flow, ema };
    write_checkpoint(out, &art.to_checkpoint())?;
    let metrics = metrics.map_or_else(|| with_suffix(out, ".metrics.csv"), Path::to_path_buf);
    write_text_atomic(&metrics, &data_io::metrics_csv(&rows))?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_sample<T: Real>(
    common: &Common,
    ckpt: &Path,
    out: &Path,
    decoded: Option<&Path>,
    label: Option<u32>,
    w: f64,
    count: usize,
) -> CliResult<()> {
    let art = FlowArtifact::<T>::from_checkpoint(&read_checkpoint(ckpt)?)?;
    let seed = common.seed.unwrap_or(art.config.flow_train.seed);
    let compact = art.ema.sample(count, label, GuidanceSpec::new(w)?, seed)?;
    let labels = label.map(|l| vec![l; count]);
    write_dataset(out, &Dataset { fields: compact.clone(), labels: labels.clone() })?;
    if art.compressor.is_some() {
        let decoded = decoded.map_or_else(|| with_suffix(out, ".decoded.sftk"), Path::to_path_buf);
        write_dataset(&decoded, &Dataset { fields: art.decode(&compact)?, labels })?;
    }
    Ok(())
}

fn cmd_nll<T: Real>(ckpt: &Path, data: &Path, out: &Path, raw: bool) -> CliResult<()> {
    let art = FlowArtifact::<T>::from_checkpoint(&read_checkpoint(ckpt)?)?;
    let ds: Dataset<T> = load_data(data)?;
    let labels: Vec<Option<u32>> = match &ds.labels {
        Some(l) => l.iter().map(|&c| Some(c)).collect(),
        None => vec![None; ds.len()],
    };
    let model = if raw { &art.flow } else { &art.ema };
    let path = art.path();
    let (mut nll, mut per_dim) = (Vec::new(), Vec::new());
    for (chunk, lab) in ds.fields.chunks(256).zip(labels.chunks(256)) {
        let refs: Vec<&TokenField<T>> = chunk.iter().collect();
        let compact = path.compact(&refs, NoiseSpec::None, &vec![0; refs.len()])?;
        let crefs: Vec<&TokenField<T>> = compact.iter().collect();
        nll.extend(model.nll_batch(&crefs, lab)?.into_iter().map(|v| v.as_f64()));
        per_dim.extend(model.full_nll_per_dim(&crefs, lab)?);
    }
    write_text_atomic(out, &data_io::nll_csv(&labels, &nll, &per_dim))?;
    let mean = per_dim.iter().sum::<f64>() / per_dim.len() as f64;
    println!("mean_nll_per_dim {mean:.6}");
    Ok(())
}

fn cmd_verify(
    common: &Common,
    ckpt: Option<&Path>,
    out: Option<&Path>,
    tokens: usize,
    channels: usize,
) -> CliResult<()> {
    let config = load_config(common)?;
    let seed = config.flow_train.seed;
    let (model, fresh) = match ckpt {
        Some(p) => (FlowArtifact::<f64>::from_checkpoint(&read_checkpoint(p)?)?.ema, false),
        None => {
            let mut fc = config.flow.clone();
            if fc.tokens == 0 {
                fc.tokens = tokens;
            }
            if fc.channels == 0 {
                fc.channels = channels;
            }
            (FlowModel::new(fc, seed)?, true)
        }
    };
    let reports = verify_suite(&model, fresh, seed)?;
    let csv = data_io::verify_csv(&reports);
    match out {
        Some(p) => write_text_atomic(p, &csv)?,
        None => print!("{csv}"),
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!("failed checks: {}", failed.join(", "))))
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_report<T: Real>(
    common: &Common,
    data: &Path,
    ckpt: Option<&Path>,
    out: &Path,
    sigma: f64,
    per_sample_max: f64,
    test_fraction: f64,
) -> CliResult<()> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!("test_fraction {test_fraction} outside (0, 1)")).into());
    }
    let ds: Dataset<T> = load_data(data)?;
    let (train, test) = ds.split(ds.len() - ((ds.len() as f64 * test_fraction).round() as usize).max(1));
    if train.is_empty() {
        return Err(Error::NoData.into());
    }
    let (mut config, compressor) = flow_setup(common, &train, ckpt)?;
    config.flow.num_classes = config.flow.num_classes.max(ds.num_classes());
    let mut last = [0usize; 2];
    let report = noise_schedule_report(
        FlowData { fields: &train.fields, labels: train.labels.as_deref() },
        FlowData { fields: &test.fields, labels: test.labels.as_deref() },
        &path_of(&compressor),
        &config.flow,
        &config.flow_train,
        sigma,
        per_sample_max,
        &mut |name, m| {
            let slot = usize::from(name != "constant");
            if m.step >= last[slot] + 500 {
                last[slot] = m.step;
                eprintln!("{name} step {} loss {:.5}", m.step, m.loss);
            }
        },
    )?;
    let csv = data_io::noise_report_csv(&report);
    write_text_atomic(out, &csv)?;
    print!("{csv}");
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_gen_data(
    kind: DataKind,
    out: &Path,
    seed: u64,
    examples: usize,
    tokens: usize,
    channels: usize,
    rank: usize,
    spectrum: Option<Vec<f64>>,
    noise_std: f64,
    classes: usize,
    components: usize,
) -> CliResult<()> {
    let ds: Dataset<f32> = match kind {
        DataKind::LowRank => {
            let spectrum = spectrum.unwrap_or_else(|| (1..=rank).rev().map(|v| v as f64).collect());
            gen_low_rank(examples, tokens, channels, rank, &spectrum, noise_std, seed)?
        }
        DataKind::Mixture => gen_class_mixture(examples, classes, components, seed)?,
    };
    write_dataset(out, &ds)?;
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    macro_rules! dispatch {
        ($common:expr, $f:ident($($arg:expr),*)) => {
            match $common.precision {
                Precision::F32 => $f::<f32>($($arg),*),
                Precision::F64 => $f::<f64>($($arg),*),
            }
        };
    }
    match cli.command {
        Command::GenData {
            kind,
            out,
            seed,
            examples,
            tokens,
            channels,
            rank,
            spectrum,
            noise_std,
            classes,
            components,
        } => cmd_gen_data(kind, &out, seed, examples, tokens, channels, rank, spectrum, noise_std, classes, components),
        Command::Stats { data, out } => {
            let ds: Dataset<f64> = load_data(&data)?;
            write_stats(&out, &compute_channel_stats(&ds.fields)?)?;
            Ok(())
        }
        Command::Pca { data, out, threshold } => {
            let ds: Dataset<f64> = load_data(&data)?;
            let report = pca_spectrum(&ds.fields)?;
            let k = intrinsic_dim(&report, threshold)?;
            write_text_atomic(&out, &data_io::spectrum_csv(&report, threshold, k))?;
            println!("intrinsic_dim {k}");
            Ok(())
        }
        Command::TrainSrc { common, data, out, metrics } => {
            dispatch!(common, cmd_train_src(&common, &data, &out, metrics.as_deref()))
        }
        Command::TrainFlow { common, data, ckpt, out, metrics } => {
            dispatch!(common, cmd_train_flow(&common, &data, ckpt.as_deref(), &out, metrics.as_deref()))
        }
        Command::Sample { common, ckpt, out, decoded, label, cfg, count } => {
            dispatch!(common, cmd_sample(&common, &ckpt, &out, decoded.as_deref(), label, cfg, count))
        }
        Command::Nll { common, ckpt, data, out, raw } => dispatch!(common, cmd_nll(&ckpt, &data, &out, raw)),
        Command::Verify { common, ckpt, out, tokens, channels } => {
            cmd_verify(&common, ckpt.as_deref(), out.as_deref(), tokens, channels)
        }
        Command::Report { common, data, ckpt, out, sigma, per_sample_max, test_fraction } => {
            dispatch!(common, cmd_report(&common, &data, ckpt.as_deref(), &out, sigma, per_sample_max, test_fraction))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            let code = match e {
                e if e.is_io() => 3,
                Error::Config(_)
                | Error::ShapeMismatch(_)
                | Error::UnknownLabel(_)
                | Error::InvalidThreshold(_)
                | Error::InvalidNoise(_)
                | Error::InvalidSpectrum(_)
                | Error::NoData
                | Error::InsufficientData { .. } => 2,
                _ => 1,
            };
            ExitCode::from(code)
        }
    }
}
