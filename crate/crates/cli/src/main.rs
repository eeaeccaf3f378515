use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use s2d4d_core::baseline::{fit_landmarks, PcaModel, Ridge};
use s2d4d_core::checkpoint::Checkpoint;
use s2d4d_core::curve::{
    geodesic_interpolate, read_frame_csv, read_sequence_csv, srvf_decode, write_frame_csv, write_sequence_csv, LandmarkFrame,
    SpherePoint,
};
use s2d4d_core::decoder::{export_sequence, S2dDecoder};
use s2d4d_core::gan::{load_motion, save_motion, MotionGan};
use s2d4d_core::mesh::{
    extract_landmarks, load_mesh, read_landmark_indices, write_landmark_indices, write_obj, LandmarkIndexTable, Mesh,
    MeshTopology, SparseDisplacement,
};
use s2d4d_core::pipeline::PipelineConfig;
use s2d4d_core::synth::{class_name, ingest_sequence_dir};
use s2d4d_core::Error;

const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (checkpoint format S2D4DCK1)");
const FPS: f64 = 30.0;

#[derive(Parser)]
#[command(name = "s2d4d", version = VERSION, about = "Landmark-driven 4D facial expression generation")]
struct Cli {
    /// Print failures as a JSON object on stderr.
    #[arg(long, global = true)]
    error_json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct OutArgs {
    /// Output directory; must be empty or absent unless --force is given.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct ConfigArg {
    /// Pipeline configuration (JSON); built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct DecoderArgs {
    #[arg(long)]
    decoder: PathBuf,
    /// Landmark vertex indices; defaults to the table stored with the decoder.
    #[arg(long)]
    landmarks: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate and export the synthetic corpus.
    Synth {
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        out: OutArgs,
        /// Export only the first N identities.
        #[arg(long)]
        identities: Option<usize>,
    },
    /// Train the sparse-to-dense decoder.
    TrainS2d {
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Train the conditional motion GAN.
    TrainGan {
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Sample a motion and decode it into a mesh sequence.
    Generate {
        #[arg(long)]
        gan: PathBuf,
        #[command(flatten)]
        decoder: DecoderArgs,
        #[arg(long)]
        label: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        neutral: PathBuf,
        /// Motion amplitude; class mean scaled to the neutral's size by default.
        #[arg(long)]
        scale: Option<f64>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Decode evenly spaced points on the geodesic between two saved motions.
    Interpolate {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value_t = 5)]
        steps: usize,
        #[command(flatten)]
        decoder: DecoderArgs,
        #[arg(long)]
        neutral: PathBuf,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Replay the motion of a mesh sequence on another neutral face.
    Transfer {
        /// Sequence directory: a landmarks.csv trajectory, or mesh frames
        /// plus landmarks.txt.
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[command(flatten)]
        decoder: DecoderArgs,
        #[arg(long)]
        scale: Option<f64>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Remove the expression from a mesh given neutral template landmarks.
    Neutralize {
        #[arg(long)]
        input: PathBuf,
        /// Single-frame landmark CSV.
        #[arg(long)]
        template: PathBuf,
        #[command(flatten)]
        decoder: DecoderArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Build the PCA displacement model, optionally fitting one mesh with it.
    FitPca {
        #[command(flatten)]
        config: ConfigArg,
        /// Use an existing model instead of building one.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        components: Option<usize>,
        /// Ridge relative to the largest eigenvalue of the landmark system.
        #[arg(long)]
        ridge: Option<f64>,
        /// Landmarks to fit: a single-frame CSV or a mesh.
        #[arg(long, requires_all = ["neutral", "landmarks"])]
        target: Option<PathBuf>,
        #[arg(long)]
        neutral: Option<PathBuf>,
        #[arg(long)]
        landmarks: Option<PathBuf>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Per-vertex error report of the decoder and the PCA baselines.
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        decoder: Option<PathBuf>,
        #[arg(long)]
        pca: Option<PathBuf>,
        #[command(flatten)]
        out: OutArgs,
    },
}

enum CliError {
    Usage(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) if e.is_input_format() || matches!(e, Error::Hierarchy(_)) => 3,
            CliError::Core(_) => 4,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Core(e) => e.kind(),
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Usage(m) => m.clone(),
            CliError::Core(e) => e.to_string(),
        }
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

fn main() -> ExitCode {
    // Every reduction is sequential, so deterministic mode needs no switch;
    // the variable is accepted for compatibility.
    let _deterministic = std::env::var_os("S2D4D_DETERMINISTIC");
    let error_json = std::env::args().any(|a| a == "--error-json");
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            if !e.use_stderr() {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            if error_json {
                report(&CliError::Usage(e.to_string().trim().to_string()), true);
            } else {
                let _ = e.print();
            }
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report(&e, cli.error_json);
            ExitCode::from(e.code())
        }
    }
}

fn report(e: &CliError, as_json: bool) {
    if as_json {
        eprintln!(
            "{}",
            json!({ "error": e.kind(), "exit_code": e.code(), "message": e.message() })
        );
    } else {
        eprintln!("error: {}", e.message());
    }
}

fn run(command: Command) -> CliResult {
    match command {
        Command::Synth { config, out, identities } => synth(&load_config(&config)?, &out, identities),
        Command::TrainS2d { config, out } => train_s2d(&load_config(&config)?, &out),
        Command::TrainGan { config, out } => train_gan(&load_config(&config)?, &out),
        Command::Generate {
            gan,
            decoder,
            label,
            seed,
            neutral,
            scale,
            out,
        } => generate(&gan, &decoder, label, seed, &neutral, scale, &out),
        Command::Interpolate {
            a,
            b,
            steps,
            decoder,
            neutral,
            out,
        } => interpolate(&a, &b, steps, &decoder, &neutral, &out),
        Command::Transfer {
            source,
            target,
            decoder,
            scale,
            out,
        } => transfer(&source, &target, &decoder, scale, &out),
        Command::Neutralize {
            input,
            template,
            decoder,
            out,
        } => neutralize(&input, &template, &decoder, &out),
        Command::FitPca {
            config,
            model,
            components,
            ridge,
            target,
            neutral,
            landmarks,
            out,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(n) = components {
                cfg.pca_components = n;
            }
            if let Some(r) = ridge {
                cfg.relative_ridge = r;
            }
            cfg.validate()?;
            let fit = target.map(|t| (t, neutral.unwrap(), landmarks.unwrap()));
            fit_pca(&cfg, model.as_deref(), fit, &out)
        }
        Command::Eval {
            config,
            decoder,
            pca,
            out,
        } => eval(&load_config(&config)?, decoder.as_deref(), pca.as_deref(), &out),
    }
}

fn load_config(arg: &ConfigArg) -> CliResult<PipelineConfig> {
    Ok(match &arg.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    })
}

fn prepare_out(out: &OutArgs) -> CliResult<&Path> {
    let dir = out.out.as_path();
    if dir.exists() {
        if !dir.is_dir() {
            return Err(CliError::Usage(format!("{} exists and is not a directory", dir.display())));
        }
        let occupied = std::fs::read_dir(dir)
            .map_err(|e| io_err(dir, e))?
            .next()
            .is_some();
        if occupied && !out.force {
            return Err(CliError::Usage(format!(
                "{} is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    Ok(dir)
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(Error::Io {
        context: path.display().to_string(),
        source: e,
    })
}

fn write_json(path: &Path, value: &serde_json::Value) -> CliResult {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    std::fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

fn write_text(path: &Path, text: &str) -> CliResult {
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn synth(cfg: &PipelineConfig, out: &OutArgs, identities: Option<usize>) -> CliResult {
    let dir = prepare_out(out)?;
    let corpus = cfg.corpus()?;
    let dirs = corpus.export(dir, identities)?;
    let template = corpus.template_neutral();
    write_obj(&dir.join("neutral.obj"), &template)?;
    write_landmark_indices(&dir.join("landmarks.txt"), corpus.face.landmarks())?;
    write_frame_csv(
        &dir.join("template_landmarks.csv"),
        &extract_landmarks(&template, corpus.face.landmarks())?,
    )?;
    eprintln!("wrote {} sequences to {}", dirs.len(), dir.display());
    Ok(())
}

fn train_s2d(cfg: &PipelineConfig, out: &OutArgs) -> CliResult {
    let dir = prepare_out(out)?;
    let corpus = cfg.corpus()?;
    let mut net = cfg.new_decoder(&corpus)?;
    let log = cfg.train_decoder(&corpus, &mut net, |e| {
        eprintln!("epoch {:4}  loss {:.6}  val {:.6}", e.epoch, e.train_loss, e.val_error);
    })?;
    write_text(&dir.join("train_log.csv"), &log.to_csv())?;
    let meta = json!({
        "landmarks": corpus.face.landmarks().indices(),
        "topology_hash": corpus.face.topology().hash(),
        "train": cfg.s2d_config(),
        "best_epoch": log.best_epoch,
        "best_val_error": log.best_val_error,
    });
    net.save(&dir.join("decoder.ck"), meta)?;
    write_obj(&dir.join("neutral.obj"), &corpus.template_neutral())?;
    eprintln!(
        "validation error {:.6} -> {:.6} (epoch {})",
        log.initial_val_error, log.best_val_error, log.best_epoch
    );
    Ok(())
}

fn train_gan(cfg: &PipelineConfig, out: &OutArgs) -> CliResult {
    let dir = prepare_out(out)?;
    let corpus = cfg.corpus()?;
    let (gan, log) = cfg.train_gan(&corpus, |e| {
        eprintln!(
            "epoch {:4}  w {:.5}  l_r {:.5}  gp {:.5}",
            e.epoch, e.wasserstein_estimate, e.l_r, e.penalty
        );
    })?;
    write_text(&dir.join("train_log.csv"), &log.to_csv())?;
    gan.save(&dir.join("gan.ck"))?;
    let labels: Vec<_> = cfg
        .gan_classes()
        .iter()
        .enumerate()
        .map(|(label, &c)| json!({ "label": label, "class": c, "name": class_name(c) }))
        .collect();
    write_json(&dir.join("labels.json"), &json!(labels))?;
    Ok(())
}

/// Decoder plus the landmark table to drive it with.
fn load_decoder(args: &DecoderArgs) -> CliResult<(S2dDecoder, LandmarkIndexTable)> {
    let ck = Checkpoint::load(&args.decoder)?;
    let net = S2dDecoder::from_checkpoint(&ck)?;
    let n = net.vertex_count();
    let table = match &args.landmarks {
        Some(p) => read_landmark_indices(p, n)?,
        None => {
            let stored = ck.meta["extra"]["landmarks"].as_array().ok_or_else(|| {
                Error::Checkpoint("decoder checkpoint carries no landmark table; pass --landmarks".into())
            })?;
            let indices = stored
                .iter()
                .map(|v| v.as_u64().map(|i| i as usize))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| Error::Checkpoint("malformed landmark table in decoder checkpoint".into()))?;
            LandmarkIndexTable::new(indices, n)?
        }
    };
    if table.k() != net.config().k {
        return Err(Error::Table(format!(
            "landmark table has {} entries, decoder expects {}",
            table.k(),
            net.config().k
        ))
        .into());
    }
    Ok((net, table))
}

fn fine_topology(net: &S2dDecoder) -> &Arc<MeshTopology> {
    net.hierarchy().fine_topology()
}

/// Worst vertex offset the decoder adds for a zero landmark displacement,
/// i.e. how far a decoded frame 0 may sit from the neutral.
fn zero_offset(net: &S2dDecoder) -> CliResult<f64> {
    let field = net.forward(&SparseDisplacement::zeros(net.config().k))?;
    Ok(field
        .values()
        .iter()
        .flatten()
        .fold(0.0f64, |m, v| m.max(v.abs())))
}

fn decode_motion(
    net: &S2dDecoder,
    table: &LandmarkIndexTable,
    neutral: &Mesh,
    base: &LandmarkFrame,
    q: &SpherePoint,
    dir: &Path,
) -> CliResult<Vec<Mesh>> {
    let seq = srvf_decode(q, base, q.scale())?;
    let meshes = net.generate_4d(neutral, &seq, table)?;
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    export_sequence(dir, &meshes, FPS)?;
    write_landmark_indices(&dir.join("landmarks.txt"), table)?;
    write_sequence_csv(&dir.join("landmarks.csv"), &seq)?;
    Ok(meshes)
}

fn generate(
    gan_path: &Path,
    dec: &DecoderArgs,
    label: usize,
    seed: u64,
    neutral_path: &Path,
    scale: Option<f64>,
    out: &OutArgs,
) -> CliResult {
    let gan = MotionGan::load(gan_path)?;
    let (net, table) = load_decoder(dec)?;
    let neutral = load_mesh(neutral_path, Some(fine_topology(&net)))?;
    let base = extract_landmarks(&neutral, &table)?;
    let q = gan.sample_point(label, seed, &base, scale)?;
    let dir = prepare_out(out)?;
    decode_motion(&net, &table, &neutral, &base, &q, dir)?;
    save_motion(&dir.join("motion.ck"), &q, json!({ "label": label, "seed": seed }))?;
    write_json(
        &dir.join("generation.json"),
        &json!({
            "label": label,
            "seed": seed,
            "scale": q.scale(),
            "frame0_epsilon": zero_offset(&net)?,
        }),
    )?;
    Ok(())
}

fn interpolate(a: &Path, b: &Path, steps: usize, dec: &DecoderArgs, neutral_path: &Path, out: &OutArgs) -> CliResult {
    if steps < 2 {
        return Err(CliError::Usage("--steps must be at least 2".into()));
    }
    let qa = load_motion(a)?;
    let qb = load_motion(b)?;
    let (net, table) = load_decoder(dec)?;
    let neutral = load_mesh(neutral_path, Some(fine_topology(&net)))?;
    let base = extract_landmarks(&neutral, &table)?;
    let dir = prepare_out(out)?;
    let mut taus = Vec::with_capacity(steps);
    for i in 0..steps {
        let tau = i as f64 / (steps - 1) as f64;
        let q = geodesic_interpolate(&qa, &qb, tau)?;
        let step_dir = dir.join(format!("step_{i:02}"));
        decode_motion(&net, &table, &neutral, &base, &q, &step_dir)?;
        save_motion(&step_dir.join("motion.ck"), &q, json!({ "tau": tau }))?;
        taus.push(tau);
    }
    write_json(
        &dir.join("interpolation.json"),
        &json!({ "steps": steps, "tau": taus, "distance": qa.distance(&qb) }),
    )?;
    Ok(())
}

fn transfer(source: &Path, target: &Path, dec: &DecoderArgs, scale: Option<f64>, out: &OutArgs) -> CliResult {
    // A recorded trajectory beats landmarks re-read from decoded frames.
    let csv = source.join("landmarks.csv");
    let seq = if csv.is_file() {
        read_sequence_csv(&csv)?
    } else {
        ingest_sequence_dir(source)?.1
    };
    let (net, table) = load_decoder(dec)?;
    let neutral = load_mesh(target, Some(fine_topology(&net)))?;
    let meshes = net.transfer(&seq, &neutral, &table, scale)?;
    let dir = prepare_out(out)?;
    export_sequence(dir, &meshes, FPS)?;
    write_landmark_indices(&dir.join("landmarks.txt"), &table)?;
    Ok(())
}

fn neutralize(input: &Path, template: &Path, dec: &DecoderArgs, out: &OutArgs) -> CliResult {
    let (net, table) = load_decoder(dec)?;
    let expressive = load_mesh(input, Some(fine_topology(&net)))?;
    let template = read_frame_csv(template)?;
    let mesh = net.neutralize(&expressive, &template, &table)?;
    let dir = prepare_out(out)?;
    write_obj(&dir.join("neutral.obj"), &mesh)?;
    Ok(())
}

fn fit_pca(cfg: &PipelineConfig, model: Option<&Path>, fit: Option<(PathBuf, PathBuf, PathBuf)>, out: &OutArgs) -> CliResult {
    let pca = match model {
        Some(p) => PcaModel::from_checkpoint(&Checkpoint::load(p)?)?,
        None => {
            let corpus = cfg.corpus()?;
            cfg.fit_pca(&corpus)?
        }
    };
    let dir = prepare_out(out)?;
    if model.is_none() {
        pca.to_checkpoint().save(&dir.join("pca.ck"))?;
        let mut csv = String::from("component,eigenvalue,explained\n");
        for (i, (e, x)) in pca.eigenvalues().iter().zip(pca.explained_variance()).enumerate() {
            csv.push_str(&format!("{i},{e},{x}\n"));
        }
        write_text(&dir.join("spectrum.csv"), &csv)?;
    }
    if let Some((target, neutral, landmarks)) = fit {
        let neutral = load_mesh(&neutral, None)?;
        let table = read_landmark_indices(&landmarks, neutral.vertex_count())?;
        let target = if target.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
            read_frame_csv(&target)?
        } else {
            extract_landmarks(&load_mesh(&target, Some(neutral.topology()))?, &table)?
        };
        let result = fit_landmarks(&pca, &neutral, &target, &table, Ridge::Relative(cfg.relative_ridge))?;
        write_obj(&dir.join("fitted.obj"), &result.mesh)?;
        write_json(
            &dir.join("fit.json"),
            &json!({
                "components": pca.n_components(),
                "residual": result.residual,
                "ridge": result.ridge,
                "rank_deficient": result.rank_deficient,
                "coefficients": result.coefficients,
            }),
        )?;
    }
    Ok(())
}

fn eval(cfg: &PipelineConfig, decoder: Option<&Path>, pca: Option<&Path>, out: &OutArgs) -> CliResult {
    if decoder.is_none() && pca.is_none() {
        return Err(CliError::Usage("eval needs --decoder, --pca or both".into()));
    }
    let net = decoder.map(S2dDecoder::load).transpose()?;
    let pca = pca
        .map(|p| Checkpoint::load(p).and_then(|ck| PcaModel::from_checkpoint(&ck)))
        .transpose()?;
    let corpus = cfg.corpus()?;
    let report = cfg.evaluate(&corpus, net.as_ref(), pca.as_ref())?;
    let dir = prepare_out(out)?;
    write_text(&dir.join("report.csv"), &report.to_csv())?;
    write_text(&dir.join("curves.csv"), &report.curves_csv())?;
    write_text(&dir.join("report.txt"), &report.to_text())?;
    print!("{}", report.to_text());
    Ok(())
}
