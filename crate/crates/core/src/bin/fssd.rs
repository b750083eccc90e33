use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use fssd::error::{Error, Result};
use fssd::eval::Interpolation;
use fssd::harness::ablate::Progress;
use fssd::harness::gradcheck::run_suite;
use fssd::harness::shapeworld::write_dataset;
use fssd::harness::{
    config_hash, detect_image, evaluate, generate_dataset, load_detector, run_ablation, AxesSpec, Checkpoint,
    RgbImage, RunConfig, ShapeWorldSpec, Trainer,
};
use fssd::model::{Detector, ModelConfig};
use fssd::multibox::PriorSpec;
use fssd::params::ParamStore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "fssd", version, about = "Feature-fusion single-shot detector")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a detector and write a checkpoint plus `<out>.metrics.jsonl`.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        init_ckpt: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint; prints the JSON report.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        eleven_point: bool,
    },
    /// Run a checkpoint on one PNG.
    Detect {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        conf_threshold: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate a grid of variants.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// `table1`, `table2`, or `key=v1,v2;key=...[;baseline]`.
        #[arg(long)]
        axes: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks over ten seeds.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        tolerance: Option<f64>,
    },
    /// Prior count and per-level layout of the default model.
    Priors {
        #[arg(long, value_parser = ["300", "512"])]
        input_size: String,
    },
    /// Write a ShapeWorld split to a directory.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })
}

fn train(config: &Path, out: &Path, init_ckpt: Option<PathBuf>, seed: Option<u64>) -> Result<()> {
    let mut run = RunConfig::load(config)?;
    if let Some(s) = seed {
        run.train.seed = s;
    }
    if init_ckpt.is_some() {
        run.train.init_checkpoint = init_ckpt;
    }
    let data = run.dataset("train")?;
    let mut t = Trainer::new(run.model.clone(), run.train.clone(), &data)?;
    if let Some(r) = &t.init_report {
        eprintln!(
            "init: {} tensors loaded, {} missing, {} unused, {} shape mismatches{}",
            r.loaded.len(),
            r.missing.len(),
            r.unused.len(),
            r.shape_mismatch.len(),
            if r.hash_mismatch { " (different model config)" } else { "" }
        );
    }
    eprintln!(
        "training {} parameters on {} images for {} iterations",
        t.store.trainable_count(""),
        data.len(),
        run.train.iterations
    );
    let log_path = PathBuf::from(format!("{}.metrics.jsonl", out.display()));
    let file = fs::File::create(&log_path).map_err(|e| Error::Io {
        path: log_path.clone(),
        source: e,
    })?;
    let mut log = BufWriter::new(file);
    let start = Instant::now();
    let first = t.step;
    let mut io_err = None;
    t.run(|t, e| {
        if let Err(err) = serde_json::to_writer(&mut log, e).map_err(Error::from).and_then(|_| {
            writeln!(log).map_err(|source| Error::Io {
                path: log_path.clone(),
                source,
            })
        }) {
            io_err.get_or_insert(err);
        }
        if e.iteration % 50 == 0 || e.iteration == t.config.iterations {
            let per = start.elapsed().as_secs_f64() / (e.iteration - first) as f64;
            eprintln!(
                "iter {:>6}  lr {:.2e}  loss {:.4}  loc {:.4}  conf {:.4}  pos {:>4}  {:.2} s/it",
                e.iteration, e.lr, e.loss, e.loc, e.conf, e.num_pos, per
            );
        }
    })?;
    if let Some(e) = io_err {
        return Err(e);
    }
    log.flush().map_err(|source| Error::Io {
        path: log_path.clone(),
        source,
    })?;
    t.checkpoint().save(out)?;
    eprintln!("wrote {} and {}", out.display(), log_path.display());
    Ok(())
}

fn eval(config: &Path, ckpt: &Path, split: &str, eleven_point: bool) -> Result<()> {
    let mut run = RunConfig::load(config)?;
    if eleven_point {
        run.eval.interpolation = Interpolation::ElevenPoint;
    }
    let data = run.dataset(split)?;
    let ck = Checkpoint::load(ckpt)?;
    let mut store = ParamStore::new();
    let detector = Detector::build(run.model.clone(), &mut store, &mut ChaCha8Rng::seed_from_u64(0))?;
    let report = ck.apply(&mut store, config_hash(&run.model), |_| true, false);
    if let Some(n) = report.missing.first().or(report.shape_mismatch.first()) {
        return Err(Error::Config(format!("checkpoint does not match the configured model (`{n}`)")));
    }
    if report.hash_mismatch {
        eprintln!("warning: checkpoint was trained with a different model configuration");
    }
    let r = evaluate(&detector, &mut store, &data, &run.eval)?;
    eprintln!(
        "{} images, {} objects: mAP {:.4} (small {}, large {})",
        r.num_images,
        r.num_objects,
        r.map,
        r.small.map.map_or("-".into(), |v| format!("{v:.4}")),
        r.large.map.map_or("-".into(), |v| format!("{v:.4}"))
    );
    print!("{}", r.to_json());
    Ok(())
}

fn detect(ckpt: &Path, image: &Path, conf_threshold: Option<f64>, out: Option<&Path>) -> Result<()> {
    let ck = Checkpoint::load(ckpt)?;
    let (detector, mut store) = load_detector(&ck)?;
    let img = RgbImage::load(image)?;
    let mut cfg = RunConfig::default().eval.postprocess;
    if let Some(t) = conf_threshold {
        cfg.conf_threshold = t;
    }
    let dets = detect_image(&detector, &mut store, &img, &cfg)?;
    let json = serde_json::to_string_pretty(&serde_json::json!({
        "image": image,
        "width": img.width,
        "height": img.height,
        "detections": dets,
    }))? + "\n";
    match out {
        Some(p) => {
            write_file(p, json.as_bytes())?;
            eprintln!("{} detections written to {}", dets.len(), p.display());
        }
        None => print!("{json}"),
    }
    Ok(())
}

fn ablate(config: &Path, axes: &str, out: &Path) -> Result<()> {
    let run = RunConfig::load(config)?;
    let axes: AxesSpec = axes.parse()?;
    let train = run.dataset("train")?;
    let test = run.dataset("test")?;
    let start = Instant::now();
    let report = run_ablation(&run, &axes, &train, &test, |p| match p {
        Progress::Pretrain { seed } => eprintln!("[{:>6.0}s] pre-training baseline, seed {seed}", start.elapsed().as_secs_f64()),
        Progress::Cell { label, seed } => eprintln!("[{:>6.0}s] {label}, seed {seed}", start.elapsed().as_secs_f64()),
        Progress::Done { label, seed, report } => {
            eprintln!("[{:>6.0}s] {label}, seed {seed}: mAP {:.4}", start.elapsed().as_secs_f64(), report.map)
        }
    })?;
    write_file(out, (serde_json::to_string_pretty(&report)? + "\n").as_bytes())?;
    print!("{}", report.table);
    Ok(())
}

fn gradcheck(seed: u64, tolerance: Option<f64>) -> Result<bool> {
    let mut failed = 0;
    let mut total = 0;
    for s in seed..seed + 10 {
        for r in run_suite(s, tolerance)? {
            total += 1;
            if !r.passed() {
                failed += 1;
                println!("seed {s}: {r}");
            }
        }
        eprintln!("seed {s} done");
    }
    println!("{} of {total} checks passed", total - failed);
    Ok(failed == 0)
}

fn priors(input_size: usize) -> Result<()> {
    let model = ModelConfig::preset(input_size)?;
    let specs = model.prior_specs()?;
    let total: usize = specs.iter().map(PriorSpec::count).sum();
    println!("{total} priors for a {input_size}x{input_size} input");
    println!("level  size  per-cell  scale   next    priors");
    for (k, s) in specs.iter().enumerate() {
        println!(
            "{k:>5}  {:>4}  {:>8}  {:.3}  {:.3}  {:>6}",
            s.feature_size,
            s.priors_per_location(),
            s.scale,
            s.next_scale,
            s.count()
        );
    }
    Ok(())
}

fn gen_data(spec: &Path, out: &Path) -> Result<()> {
    let text = fs::read_to_string(spec).map_err(|e| Error::Io {
        path: spec.into(),
        source: e,
    })?;
    let spec: ShapeWorldSpec = serde_json::from_str(&text)?;
    let data = generate_dataset(&spec)?;
    write_dataset(&data, &spec, out)?;
    let objects: usize = data.samples.iter().map(|s| s.boxes.len()).sum();
    println!(
        "{} images, {objects} objects ({} dropped after retries) written to {}",
        data.len(),
        data.dropped_objects(),
        out.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train {
            config,
            out,
            init_ckpt,
            seed,
        } => train(&config, &out, init_ckpt, seed),
        Command::Eval {
            config,
            ckpt,
            split,
            eleven_point,
        } => eval(&config, &ckpt, &split, eleven_point),
        Command::Detect {
            ckpt,
            image,
            conf_threshold,
            out,
        } => detect(&ckpt, &image, conf_threshold, out.as_deref()),
        Command::Ablate { config, axes, out } => ablate(&config, &axes, &out),
        Command::Gradcheck { seed, tolerance } => match gradcheck(seed, tolerance) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::FAILURE,
            Err(e) => Err(e),
        },
        Command::Priors { input_size } => priors(input_size.parse().expect("validated by clap")),
        Command::GenData { spec, out } => gen_data(&spec, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
