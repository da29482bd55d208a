use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use iccnn::density::{self, DensityMap};
use iccnn::io::{self, annotations, heatmap, raster, Checkpoint, SynthSpec};
use iccnn::train::{format_loss_log, train_stages};
use iccnn::{eval, gradient_suite, DotAnnotations, Network, TrainConfig, TrainSample};
use iccnn::model::LayerSpec;

#[derive(Parser)]
#[command(name = "iccnn", version, about = "Two-branch iterative crowd counting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train stage by stage, writing one checkpoint per stage and the loss log.
    Train(TrainArgs),
    /// Count every image of a dataset and report MAE / RMSE.
    Eval(EvalArgs),
    /// Predict one image and export its density maps.
    Predict(PredictArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Per-layer and total parameter counts.
    Paramcount(ConfigArgs),
    /// Write a synthetic dataset of blob images with CSV annotations.
    Synth(SynthArgs),
}

/// Config file plus per-field overrides; flags win over the file.
#[derive(Args, Default)]
struct ConfigArgs {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set crop_fraction=1/2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    learning_rate: Option<String>,
    #[arg(long)]
    momentum: Option<String>,
    #[arg(long)]
    iterations: Option<String>,
    #[arg(long)]
    stages: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    sigma: Option<String>,
    #[arg(long)]
    crop_fraction: Option<String>,
    #[arg(long)]
    lambda_l: Option<String>,
    #[arg(long)]
    lambda_h: Option<String>,
    #[arg(long)]
    lr_resolution: Option<String>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    width_divisor: Option<String>,
}

impl ConfigArgs {
    fn flags(&self) -> Vec<(&'static str, &String)> {
        [
            ("learning_rate", &self.learning_rate),
            ("momentum", &self.momentum),
            ("iterations", &self.iterations),
            ("stages", &self.stages),
            ("seed", &self.seed),
            ("sigma", &self.sigma),
            ("crop_fraction", &self.crop_fraction),
            ("lambda_l", &self.lambda_l),
            ("lambda_h", &self.lambda_h),
            ("lr_resolution", &self.lr_resolution),
            ("variant", &self.variant),
            ("width_divisor", &self.width_divisor),
        ]
        .into_iter()
        .filter_map(|(k, v)| Some((k, v.as_ref()?)))
        .collect()
    }

    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            io::apply_config(&mut cfg, &text).with_context(|| format!("in {}", path.display()))?;
        }
        let mut overrides: Vec<(String, String, String)> = Vec::new();
        for s in &self.set {
            let Some((k, v)) = s.split_once('=') else {
                bail!("--set expects KEY=VALUE, got `{s}`");
            };
            overrides.push((k.trim().to_string(), v.trim().to_string(), format!("--set {}", k.trim())));
        }
        for (k, v) in self.flags() {
            overrides.push((k.to_string(), v.clone(), format!("--{}", k.replace('_', "-"))));
        }
        for (i, (k, v, flag)) in overrides.iter().enumerate() {
            if let Some((_, other_v, other_flag)) = overrides[..i].iter().find(|(ok, ..)| ok == k) {
                if other_v != v {
                    bail!("conflicting values for {k}: {other_flag} gives `{other_v}`, {flag} gives `{v}`");
                }
            }
            io::set_config_value(&mut cfg, k, v).with_context(|| format!("flag {flag}"))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Start from this checkpoint: stages it already trained keep their
    /// weights frozen and training resumes with the next stage.
    #[arg(long)]
    init: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// Also report mean counts for N groups of images sorted by true count.
    #[arg(long)]
    groups: Option<usize>,
    /// Report path; defaults to `<ckpt>.eval.tsv`.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Optional CSV annotations; adds the ground-truth map and count.
    #[arg(long)]
    annotations: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    images: usize,
    #[arg(long, default_value_t = 48)]
    size: usize,
    #[arg(long, default_value_t = 5)]
    min_count: usize,
    #[arg(long, default_value_t = 20)]
    max_count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn load_samples(root: &Path, cfg: &TrainConfig) -> Result<Vec<TrainSample>> {
    let multiple = cfg.net_config().input_multiple();
    let entries = io::load_dataset(root)?;
    if entries.is_empty() {
        bail!("no images found under {}", root.join("images").display());
    }
    Ok(entries
        .iter()
        .map(|e| e.to_sample(cfg.sigma, multiple))
        .collect::<iccnn::Result<_>>()?)
}

fn train(args: &TrainArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    let samples = load_samples(&args.data, &cfg)?;
    create_dir(&args.out)?;
    io::write_atomic(&args.out.join("config.txt"), io::format_config(&cfg).as_bytes())?;

    let mut net = Network::new(cfg.net_config())?;
    let mut first = 1;
    if let Some(init) = &args.init {
        let ckpt = io::load_checkpoint(init)?;
        let loaded = ckpt.load_into(&mut net)?;
        first = ckpt.snapshot.trained_stages + 1;
        if first > cfg.stages {
            bail!(
                "{} already holds {} trained stages; raise --stages to train more",
                init.display(),
                ckpt.snapshot.trained_stages
            );
        }
        eprintln!("loaded {loaded} tensors from {}", init.display());
    }
    eprintln!(
        "training {} stage(s) of {} on {} images, {} iterations each",
        cfg.stages,
        cfg.variant,
        samples.len(),
        cfg.iterations
    );
    train_stages(&mut net, &samples, &cfg, first, |k, net, log| {
        let ckpt = Checkpoint::from_network(net, io::Snapshot::new(cfg.clone(), k));
        io::save_checkpoint(&args.out.join(format!("stage{k}.ckpt")), &ckpt)?;
        io::write_atomic(&args.out.join(format!("loss_stage{k}.tsv")), format_loss_log(log).as_bytes())?;
        if let Some(last) = log.last() {
            eprintln!("stage {k}: final loss {:.6}", last.loss);
        }
        Ok(())
    })?;
    let final_ckpt = Checkpoint::from_network(&net, io::Snapshot::new(cfg.clone(), cfg.stages));
    io::save_checkpoint(&args.out.join("model.ckpt"), &final_ckpt)?;
    println!("{}", args.out.join("model.ckpt").display());
    Ok(())
}

fn load_network(path: &Path) -> Result<(Network, TrainConfig)> {
    let ckpt = io::load_checkpoint(path)?;
    let net = ckpt.to_network().with_context(|| format!("rebuilding network from {}", path.display()))?;
    Ok((net, ckpt.snapshot.config))
}

fn evaluate(args: &EvalArgs) -> Result<()> {
    let (net, cfg) = load_network(&args.ckpt)?;
    let samples = load_samples(&args.data, &cfg)?;
    let records = eval::evaluate(&net, &samples)?;
    let report = eval::format_report(&records, args.groups)?;
    let path = args.report.clone().unwrap_or_else(|| {
        let mut p = args.ckpt.as_os_str().to_owned();
        p.push(".eval.tsv");
        PathBuf::from(p)
    });
    io::write_atomic(&path, report.as_bytes())?;
    print!("{report}");
    Ok(())
}

fn crop_lr(map: &DensityMap, original: (usize, usize), divisor: usize) -> iccnn::Result<DensityMap> {
    density::crop_back(map, (original.0.div_ceil(divisor), original.1.div_ceil(divisor)))
}

fn predict(args: &PredictArgs) -> Result<()> {
    let (net, cfg) = load_network(&args.ckpt)?;
    let rgb = raster::read_image(&args.image)?;
    let image = rgb.to_tensor();
    let padded = density::pad_to_multiple(&image, &[], net.config().input_multiple())?;
    let out = net.predict(&padded.image)?;
    let y = density::crop_back(&out.y_hat, padded.original)?;
    let z = crop_lr(&out.z_hat, padded.original, cfg.lr_resolution.divisor())?;

    create_dir(&args.out)?;
    io::write_atomic(&args.out.join("input.ppm"), &raster::encode_ppm(&rgb))?;
    let lr_stats = io::export_heatmap(&z, &args.out.join("lr.pgm"))?;
    let hr_stats = io::export_heatmap(&y, &args.out.join("hr.pgm"))?;
    let mut counts = format!(
        "lr_count {}\nhr_count {}\ncount {}\n",
        lr_stats.sum,
        hr_stats.sum,
        eval::count_from_map(&y)
    );
    if let Some(path) = &args.annotations {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let ann = DotAnnotations::new(annotations::parse_csv(&text)?, rgb.width, rgb.height)?;
        let gt = density::gaussian_density(&ann, cfg.sigma)?;
        heatmap::export_heatmap(&gt, &args.out.join("gt.pgm"))?;
        counts.push_str(&format!("gt_count {}\n", ann.count()));
    }
    io::write_atomic(&args.out.join("counts.txt"), counts.as_bytes())?;
    print!("{counts}");
    Ok(())
}

fn gradcheck(seed: u64) -> Result<bool> {
    let results = gradient_suite::run_suite(seed)?;
    for r in &results {
        println!("{}", r.summary());
    }
    let failed = results.iter().filter(|r| !r.passed()).count();
    println!("{} checks, {failed} failed", results.len());
    Ok(failed == 0)
}

fn paramcount(args: &ConfigArgs) -> Result<()> {
    let cfg = args.resolve()?;
    let net = Network::new(cfg.net_config())?;
    println!("stage\tbranch\tlayer\tin\tout\tparams");
    for l in net.param_breakdown() {
        println!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            l.stage,
            l.branch.tag(),
            LayerSpec::Conv(l.spec),
            l.spec.in_channels,
            l.spec.out_channels,
            l.count
        );
    }
    println!("total\t{}", net.param_count());
    Ok(())
}

fn synth(args: &SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        images: args.images,
        size: args.size,
        min_count: args.min_count,
        max_count: args.max_count,
        seed: args.seed,
    };
    let written = io::synth::write_dataset(&spec, &args.out)?;
    for img in &written {
        println!("{}\t{}", img.stem, img.annotations.count());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match &cli.command {
        Command::Train(a) => train(a)?,
        Command::Eval(a) => evaluate(a)?,
        Command::Predict(a) => predict(a)?,
        Command::Gradcheck { seed } => return gradcheck(*seed),
        Command::Paramcount(a) => paramcount(a)?,
        Command::Synth(a) => synth(a)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
