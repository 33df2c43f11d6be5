mod pgm;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use abc_core::approx::{approximate, default_shifts, rmse};
use abc_core::config::RunConfig;
use abc_core::data::load_spec;
use abc_core::infer::{eval_bitpacked, eval_float, EvalReport};
use abc_core::model::Model;
use abc_core::tensor::{Rng, Tensor};
use abc_core::train::{init_from_full_precision, train_epochs};

#[derive(Parser)]
#[command(name = "abc", about = "Binary CNN engine: approximate, train, evaluate", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Engine {
    Float,
    Bitpacked,
}

#[derive(Subcommand)]
enum Command {
    /// Fit binary weight bases to a tensor and report RMSE per M
    Approx {
        /// Weight tensor file (ABCT format)
        #[arg(long)]
        weights: PathBuf,
        /// Comma-separated list of base counts to fit
        #[arg(long, default_value = "1,2,3,5")]
        m: String,
        /// Ridge regularization for the least-squares solve
        #[arg(long, default_value_t = abc_core::approx::DEFAULT_RIDGE_LAMBDA)]
        ridge: f32,
        /// Write per-M reconstruction tensors here
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model from a config file
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the config seed
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config dataset spec
        #[arg(long)]
        dataset: Option<String>,
        /// Warm-start weights from a full-precision checkpoint
        #[arg(long)]
        init_from: Option<PathBuf>,
        /// Output directory for checkpoint and log
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset spec: synth:blobs:<n> or idx:<images>:<labels>
        #[arg(long)]
        dataset: String,
        #[arg(long, value_enum, default_value = "float")]
        engine: Engine,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
    },
    /// Static cost model for a topology
    Estimate {
        #[arg(long)]
        config: PathBuf,
        /// Also write the report as CSV here
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render one layer's feature maps as PGM images
    DumpFeaturemaps {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input image: PGM (P5) or an ABCT tensor
        #[arg(long)]
        image: PathBuf,
        /// Layer index (0-based) whose output to dump
        #[arg(long)]
        layer: usize,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Approx { weights, m, ridge, out } => cmd_approx(&weights, &m, ridge, out.as_deref()),
        Command::Train { config, seed, dataset, init_from, out } => {
            cmd_train(&config, seed, dataset, init_from.as_deref(), &out)
        }
        Command::Eval { checkpoint, dataset, engine, seed, batch_size } => {
            cmd_eval(&checkpoint, &dataset, engine, seed, batch_size)
        }
        Command::Estimate { config, out } => cmd_estimate(&config, out.as_deref()),
        Command::DumpFeaturemaps { checkpoint, image, layer, out } => {
            cmd_dump_featuremaps(&checkpoint, &image, layer, &out)
        }
    }
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg = RunConfig::parse(&text).with_context(|| format!("parsing {}", path.display()))?;
    let violations = cfg.validate();
    if !violations.is_empty() {
        bail!("invalid config {}:\n  {}", path.display(), violations.join("\n  "));
    }
    Ok(cfg)
}

fn cmd_approx(weights: &Path, m_list: &str, ridge: f32, out: Option<&Path>) -> Result<()> {
    let mut f = fs::File::open(weights).with_context(|| format!("opening {}", weights.display()))?;
    let w = Tensor::read_from(&mut f).with_context(|| format!("parsing {}", weights.display()))?;
    let ms: Vec<usize> = m_list
        .split(',')
        .map(|s| s.trim().parse().with_context(|| format!("bad m value {s:?}")))
        .collect::<Result<_>>()?;
    if ms.is_empty() {
        bail!("empty m list");
    }
    println!("m,rmse");
    for &m in &ms {
        let set = approximate(&w, &default_shifts(m), ridge)?;
        let recon = set.reconstruct();
        println!("{m},{}", rmse(&recon, &w)?);
        if let Some(dir) = out {
            fs::create_dir_all(dir)?;
            let path = dir.join(format!("recon_m{m}.abct"));
            let mut f = fs::File::create(&path)?;
            recon.write_to(&mut f)?;
        }
    }
    Ok(())
}

fn cmd_train(
    config: &Path,
    seed: Option<u64>,
    dataset: Option<String>,
    init_from: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(seed) = seed {
        cfg.train.seed = seed;
    }
    if let Some(spec) = dataset {
        cfg.dataset = spec;
    }
    let ds = load_spec(&cfg.dataset, cfg.train.seed)?;
    if ds.shape != cfg.model.input {
        bail!(
            "dataset samples are {:?} but the model expects {:?}",
            ds.shape,
            cfg.model.input
        );
    }
    let (train, val) = ds.split(cfg.train.val_fraction);

    let mut model = match init_from {
        Some(path) => {
            let mut f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
            let source = Model::read_from(&mut f)?;
            init_from_full_precision(&cfg, &source)?
        }
        None => {
            let mut rng = Rng::new(cfg.train.seed);
            Model::from_spec(&cfg.model, &cfg.train, &mut rng)?
        }
    };

    let log = train_epochs(&mut model, &train, &val, &cfg.train)?;
    fs::create_dir_all(out)?;
    let ckpt_path = out.join("checkpoint.abcm");
    let mut f = fs::File::create(&ckpt_path)?;
    model.write_to(&mut f)?;
    let log_path = out.join("train_log.csv");
    fs::write(&log_path, log.to_csv())?;

    if let Some(last) = log.epochs.last() {
        println!(
            "epochs={} final_train_loss={} final_train_acc={} final_val_acc={}",
            log.epochs.len(),
            last.train_loss,
            last.train_acc,
            last.val_acc
        );
    }
    println!("checkpoint={}", ckpt_path.display());
    println!("log={}", log_path.display());
    Ok(())
}

fn print_report(engine: &str, r: &EvalReport) {
    println!("engine={engine}");
    println!("samples={}", r.total);
    println!("top1_correct={}", r.correct);
    println!("top1_accuracy={}", r.accuracy);
    if let Some(t5) = r.top5_accuracy {
        println!("top5_accuracy={t5}");
    }
}

fn cmd_eval(
    checkpoint: &Path,
    dataset: &str,
    engine: Engine,
    seed: u64,
    batch_size: usize,
) -> Result<()> {
    let mut f =
        fs::File::open(checkpoint).with_context(|| format!("opening {}", checkpoint.display()))?;
    let mut model = Model::read_from(&mut f)?;
    let ds = load_spec(dataset, seed)?;
    if ds.shape != model.input {
        bail!(
            "dataset samples are {:?} but the checkpoint expects {:?}",
            ds.shape,
            model.input
        );
    }
    let report = match engine {
        Engine::Float => {
            let r = eval_float(&mut model, &ds, batch_size)?;
            print_report("float", &r);
            r
        }
        Engine::Bitpacked => {
            let r = eval_bitpacked(&mut model, &ds, batch_size)?;
            print_report("bitpacked", &r);
            r
        }
    };
    drop(report);
    Ok(())
}

fn cmd_estimate(config: &Path, out: Option<&Path>) -> Result<()> {
    let cfg = load_config(config)?;
    let report = abc_core::cost::estimate_costs(&cfg.model);
    print!("{}", report.to_text());
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        let path = dir.join("costs.csv");
        fs::write(&path, report.to_csv())?;
        println!("csv={}", path.display());
    }
    Ok(())
}

fn cmd_dump_featuremaps(checkpoint: &Path, image: &Path, layer: usize, out: &Path) -> Result<()> {
    let mut f =
        fs::File::open(checkpoint).with_context(|| format!("opening {}", checkpoint.display()))?;
    let mut model = Model::read_from(&mut f)?;
    if layer >= model.layers.len() {
        bail!(
            "layer index {layer} out of range (model has {} layers)",
            model.layers.len()
        );
    }

    let x = read_image(image, model.input)?;
    let outputs = model.forward_collect(&x)?;
    let map = &outputs[layer];
    let dims = map.dims();
    if dims.len() != 4 {
        bail!(
            "layer {layer} output has rank {} (dims {:?}); pick a spatial layer",
            dims.len(),
            dims
        );
    }
    let (channels, h, w) = (dims[1], dims[2], dims[3]);
    fs::create_dir_all(out)?;
    for c in 0..channels {
        let plane = &map.data()[c * h * w..(c + 1) * h * w];
        let path = out.join(format!("layer{layer}_ch{c}.pgm"));
        pgm::write_normalized(&path, plane, w, h)?;
    }
    println!("wrote {channels} maps ({h}x{w}) to {}", out.display());
    Ok(())
}

/// Loads a single input sample: PGM (P5) grayscale or an ABCT tensor.
fn read_image(path: &Path, input: [usize; 3]) -> Result<Tensor> {
    let is_pgm = path.extension().map(|e| e == "pgm").unwrap_or(false);
    let t = if is_pgm {
        let (pixels, w, h) = pgm::read(path)?;
        if input[0] != 1 {
            bail!("PGM input is single-channel but the model expects {} channels", input[0]);
        }
        Tensor::new(vec![1, 1, h, w], pixels)?
    } else {
        let mut f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
        let raw = Tensor::read_from(&mut f)?;
        let n: usize = input.iter().product();
        if raw.len() != n {
            bail!("tensor has {} elements, expected {:?}", raw.len(), input);
        }
        raw.reshape(vec![1, input[0], input[1], input[2]])?
    };
    let dims = t.dims();
    if dims[1] != input[0] || dims[2] != input[1] || dims[3] != input[2] {
        bail!("image shape {:?} does not match model input {:?}", &dims[1..], input);
    }
    Ok(t)
}
