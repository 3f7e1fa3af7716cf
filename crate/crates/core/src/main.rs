use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use fedsda::ampnorm::{normalize_corpus, DEFAULT_DECAY};
use fedsda::diffusion::{load_model, sample_many, save_model};
use fedsda::fedsim::{run_federated_training, ClientShard};
use fedsda::io::{
    create_dir, generate_synthetic_federation, load_config, read_png, read_png_dir, read_stain_csv,
    write_png, write_round_log, write_stain_csv, write_stain_records, FederationManifest,
    StainRecord, SyntheticSpec, MANIFEST_FILE,
};
use fedsda::metrics::{frechet_distance, ssim, summarize_stain_set, wasserstein_1d};
use fedsda::pipeline::{
    align_and_write, run_pipeline, separate_images, write_separations, PipelineConfig,
};
use fedsda::rng::{derive, Domain};
use fedsda::stain::SeparationParams;
use fedsda::{Error, Result};

const EXIT_VALIDATION: u8 = 2;
const EXIT_STAGE: u8 = 3;

#[derive(Parser)]
#[command(
    name = "fedsda",
    version,
    about = "Federated stain distribution alignment"
)]
struct Cli {
    /// Global seed; overrides the seed in a config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// JSON or key=value config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic federation with known stain matrices.
    Synth(SynthArgs),
    /// Fit stain matrices (and optionally density maps) for a folder of PNGs.
    Separate(SeparateArgs),
    /// Federated training of the conditional stain diffusion model.
    TrainDiffusion(TrainArgs),
    /// Draw stain matrices for one condition as CSV.
    Sample(SampleArgs),
    /// Re-render one client's images with sampled stain matrices.
    Align(AlignArgs),
    /// Fourier amplitude-normalization baseline over several client folders.
    Ampnorm(AmpnormArgs),
    /// Compute one metric, or a per-image report of a pipeline run.
    Eval(EvalArgs),
    /// Separate, train, align and evaluate a whole federation.
    Pipeline(PipelineArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    clients: Option<usize>,
    #[arg(long)]
    images: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    cluster_std: Option<f64>,
}

#[derive(Args)]
struct SeparationFlags {
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
}

impl SeparationFlags {
    fn apply(&self, mut p: SeparationParams) -> SeparationParams {
        p.lambda = self.lambda.unwrap_or(p.lambda);
        p.max_iters = self.max_iters.unwrap_or(p.max_iters);
        p.tol = self.tol.unwrap_or(p.tol);
        p
    }
}

#[derive(Args)]
struct SeparateArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    sep: SeparationFlags,
    /// Also write one 16-bit density PNG per stain.
    #[arg(long)]
    densities: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory for model.bin and rounds.csv.
    #[arg(long)]
    out: PathBuf,
    /// Stain CSVs in client order; overrides `stain_csvs` in the config.
    #[arg(long, value_delimiter = ',')]
    stains: Vec<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    condition: usize,
    #[arg(long)]
    count: usize,
    /// Output CSV (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AlignArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    client_id: usize,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Number of target conditions (default: all of the model's).
    #[arg(long)]
    k: Option<usize>,
    #[command(flatten)]
    sep: SeparationFlags,
}

#[derive(Args)]
struct AmpnormArgs {
    #[arg(long, value_delimiter = ',', required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_DECAY)]
    v: f64,
    #[arg(long, default_value_t = 32)]
    batch: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalMode {
    Fd,
    Wd,
    Ssim,
}

#[derive(Args)]
struct EvalArgs {
    /// fd compares two stain CSVs; wd and ssim compare two PNGs.
    #[arg(long, required_unless_present = "report")]
    mode: Option<EvalMode>,
    #[arg(long, requires = "mode")]
    a: Option<PathBuf>,
    #[arg(long, requires = "mode")]
    b: Option<PathBuf>,
    /// Pipeline output directory; prints one CSV row per image and stage.
    #[arg(long, conflicts_with = "mode")]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct PipelineArgs {
    /// Manifest file, or a directory holding manifest.json.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_VALIDATION);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(EXIT_VALIDATION)
            } else {
                ExitCode::from(EXIT_STAGE)
            }
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => synth(cli, a),
        Command::Separate(a) => separate_cmd(cli, a),
        Command::TrainDiffusion(a) => train(cli, a),
        Command::Sample(a) => sample(cli, a),
        Command::Align(a) => align(cli, a),
        Command::Ampnorm(a) => ampnorm(a),
        Command::Eval(a) => eval(a),
        Command::Pipeline(a) => pipeline(cli, a),
    }
}

fn pipeline_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg: PipelineConfig = match &cli.config {
        Some(p) => load_config(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.fed.seed = s;
    }
    Ok(cfg)
}

fn seed(cli: &Cli) -> u64 {
    cli.seed.unwrap_or(0)
}

fn synth(cli: &Cli, a: &SynthArgs) -> Result<()> {
    let mut spec: SyntheticSpec = match &cli.config {
        Some(p) => load_config(p)?,
        None => SyntheticSpec::default(),
    };
    if let Some(k) = a.clients {
        spec = SyntheticSpec {
            cluster_means: SyntheticSpec::with_clients(k).cluster_means,
            ..spec
        };
    }
    spec.images_per_client = a.images.unwrap_or(spec.images_per_client);
    spec.width = a.width.unwrap_or(spec.width);
    spec.height = a.height.unwrap_or(spec.height);
    spec.cluster_std = a.cluster_std.unwrap_or(spec.cluster_std);
    let m = generate_synthetic_federation(&spec, seed(cli), &a.out)?;
    log::info!(
        "wrote {} clients x {} images to {}",
        m.num_clients(),
        spec.images_per_client,
        a.out.display()
    );
    Ok(())
}

fn separation_params(cli: &Cli, flags: &SeparationFlags) -> Result<SeparationParams> {
    let base = match &cli.config {
        Some(_) => pipeline_config(cli)?.separation,
        None => SeparationParams::default(),
    };
    let p = flags.apply(base);
    p.validate()?;
    Ok(p)
}

fn separate_cmd(cli: &Cli, a: &SeparateArgs) -> Result<()> {
    let params = separation_params(cli, &a.sep)?;
    let images = read_png_dir(&a.input)?;
    if images.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} has no PNG files",
            a.input.display()
        )));
    }
    let seps = separate_images(&images, &params);
    let records = write_separations(&a.out, &images, &seps, a.densities)?;
    log::info!("separated {}/{} images", records.len(), images.len());
    Ok(())
}

fn train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let mut cfg = pipeline_config(cli)?;
    if !a.stains.is_empty() {
        cfg.stain_csvs = a.stains.clone();
    }
    if cfg.stain_csvs.is_empty() {
        return Err(Error::InvalidArgument(
            "no training data: pass --stains or set stain_csvs in the config".into(),
        ));
    }
    let shards = cfg
        .stain_csvs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let w: Vec<_> = read_stain_csv(p)?.into_iter().map(|r| r.stains).collect();
            Ok(ClientShard::new(i + 1, &w))
        })
        .collect::<Result<Vec<_>>>()?;
    cfg.fed.clients = shards.len();
    let arch = cfg.arch(shards.len());
    let (model, logs) = run_federated_training(&cfg.fed, &shards, arch, cfg.schedule.build()?)?;
    create_dir(&a.out)?;
    save_model(&model, &a.out.join("model.bin"))?;
    write_round_log(&a.out.join("rounds.csv"), &logs)?;
    Ok(())
}

fn sample(cli: &Cli, a: &SampleArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let mut rng = derive(seed(cli), Domain::Sampling, a.condition as u64, 0);
    let drawn = sample_many(&model, a.condition, a.count, &mut rng)?;
    let records: Vec<StainRecord> = drawn
        .into_iter()
        .enumerate()
        .map(|(i, w)| StainRecord {
            image: format!("sample_{i:05}"),
            stains: w,
        })
        .collect();
    match &a.out {
        Some(p) => write_stain_csv(p, &records),
        None => write_stain_records(std::io::stdout().lock(), &records),
    }
}

fn align(cli: &Cli, a: &AlignArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let params = separation_params(cli, &a.sep)?;
    let k = a.k.unwrap_or(model.num_conditions());
    let images = read_png_dir(&a.input)?;
    let (_, records) =
        align_and_write(&images, &model, a.client_id, k, seed(cli), &params, &a.out)?;
    let mean = records.iter().map(|r| r.ssim).sum::<f64>() / records.len().max(1) as f64;
    log::info!("aligned {} images, mean SSIM {mean:.4}", records.len());
    Ok(())
}

fn ampnorm(a: &AmpnormArgs) -> Result<()> {
    let corpora = a
        .inputs
        .iter()
        .map(|d| read_png_dir(d))
        .collect::<Result<Vec<_>>>()?;
    let images: Vec<Vec<_>> = corpora
        .iter()
        .map(|c| c.iter().map(|(_, img)| img.clone()).collect())
        .collect();
    let out = normalize_corpus(&images, a.batch, a.v)?;
    for (k, (names, imgs)) in corpora.iter().zip(&out).enumerate() {
        let dir = a.out.join(format!("client_{}", k + 1));
        create_dir(&dir)?;
        for ((stem, _), img) in names.iter().zip(imgs) {
            write_png(&dir.join(format!("{stem}.png")), img)?;
        }
    }
    Ok(())
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::InvalidArgument(format!("--{flag} is required")))
}

fn eval(a: &EvalArgs) -> Result<()> {
    if let Some(dir) = &a.report {
        return report(dir);
    }
    let (pa, pb) = (required(&a.a, "a")?, required(&a.b, "b")?);
    let out = match a.mode.expect("clap requires mode without --report") {
        EvalMode::Fd => {
            let load = |p: &Path| -> Result<Vec<_>> {
                Ok(read_stain_csv(p)?.into_iter().map(|r| r.stains).collect())
            };
            let (sa, sb) = (
                summarize_stain_set(&load(pa)?)?,
                summarize_stain_set(&load(pb)?)?,
            );
            json!({"mode": "fd", "value": frechet_distance(&sa, &sb)?, "n_a": sa.n, "n_b": sb.n})
        }
        EvalMode::Wd => {
            json!({"mode": "wd", "value": wasserstein_1d(&read_png(pa)?, &read_png(pb)?)})
        }
        EvalMode::Ssim => json!({"mode": "ssim", "value": ssim(&read_png(pa)?, &read_png(pb)?)?}),
    };
    println!("{out}");
    Ok(())
}

/// Long-format rows `client,image,stage,target_condition,ssim,w11..w32`.
fn report(dir: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(std::io::stdout());
    w.write_record([
        "client",
        "image",
        "stage",
        "target_condition",
        "ssim",
        "w11",
        "w21",
        "w31",
        "w12",
        "w22",
        "w32",
    ])?;
    for k in 1.. {
        let before_dir = dir.join("separation").join(format!("client_{k}"));
        let after_dir = dir.join("aligned").join(format!("client_{k}"));
        if !before_dir.is_dir() {
            if k == 1 {
                return Err(Error::InvalidArgument(format!(
                    "{} is not a pipeline output directory",
                    dir.display()
                )));
            }
            break;
        }
        let before = read_stain_csv(&before_dir.join("stains.csv"))?;
        let after = if after_dir.is_dir() {
            read_stain_csv(&after_dir.join("stains.csv"))?
        } else {
            Vec::new()
        };
        let align_path = after_dir.join("alignment.csv");
        let mut targets = std::collections::HashMap::new();
        if align_path.is_file() {
            for row in csv::Reader::from_path(&align_path)?.deserialize() {
                let r: fedsda::pipeline::AlignRecord = row?;
                targets.insert(r.dst.trim_end_matches(".png").to_string(), r);
            }
        }
        let client = k.to_string();
        for r in &before {
            let v = r.stains.to_column_major().map(|x| x.to_string());
            let mut row = vec![
                client.clone(),
                r.image.clone(),
                "before".into(),
                String::new(),
                String::new(),
            ];
            row.extend(v);
            w.write_record(&row)?;
        }
        for r in &after {
            let (cond, s) = targets
                .get(&r.image)
                .map(|a| (a.target_condition.to_string(), a.ssim.to_string()))
                .unwrap_or_default();
            let v = r.stains.to_column_major().map(|x| x.to_string());
            let mut row = vec![client.clone(), r.image.clone(), "after".into(), cond, s];
            row.extend(v);
            w.write_record(&row)?;
        }
    }
    w.flush().map_err(|e| Error::Io {
        path: "<stdout>".into(),
        source: e,
    })
}

fn pipeline(cli: &Cli, a: &PipelineArgs) -> Result<()> {
    let cfg = pipeline_config(cli)?;
    let path = if a.manifest.is_dir() {
        a.manifest.join(MANIFEST_FILE)
    } else {
        a.manifest.clone()
    };
    let manifest = FederationManifest::load(&path)?;
    let summary = run_pipeline(&manifest, &cfg, &a.out)?;
    match (
        summary.before.mean_pairwise_fd,
        summary.after.mean_pairwise_fd,
    ) {
        (Some(b), Some(f)) => log::info!(
            "mean inter-client FD {b:.4} -> {f:.4}, mean SSIM {:.4}",
            summary.alignment.mean_ssim
        ),
        _ => log::info!("mean SSIM {:.4}", summary.alignment.mean_ssim),
    }
    Ok(())
}
