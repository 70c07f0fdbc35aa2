use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use dualprec_core::data::{load_cifar10_dir, load_mnist, resolve_data_dir, DataSplits, Dataset, Standardizer};
use dualprec_core::dual::{run_training, DatasetId, Precision, TrainConfig};
use dualprec_core::metrics::level_histogram;
use dualprec_core::nn::{Architecture, Layer};
use dualprec_core::pack::{attach_bitplane, pack, switch_precision, unpack, Direction};
use dualprec_core::{Error, QuantizedModel};

/// Train, evaluate and convert dual-precision quantized models.
#[derive(Parser)]
#[command(name = "dualprec", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a dual-precision model and write runs/<name>/.
    Train {
        /// `key = value` config file; defaults are used for missing keys.
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Parent directory of the run directory.
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        #[arg(long)]
        name: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        phase1_epochs: Option<usize>,
        #[arg(long)]
        bits: Option<u8>,
        /// Extra `key=value` override, may be repeated.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Replace an existing run directory.
        #[arg(long)]
        force: bool,
    },
    /// Report test accuracy of a packed model.
    Eval {
        model: PathBuf,
        #[arg(long, default_value = "high")]
        precision: Precision,
        /// Detached up-scaling plane for a low-precision stream.
        #[arg(long)]
        bitplane: Option<PathBuf>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Defaults to the dataset the architecture accepts.
        #[arg(long)]
        dataset: Option<DatasetId>,
        /// Evaluate only the first N test samples.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Convert between the low- and high-precision streams.
    Switch {
        model: PathBuf,
        #[arg(long)]
        direction: Direction,
        /// Plane to attach (up) or where to write the detached plane (down;
        /// defaults to the output path with a .dpb extension).
        #[arg(long)]
        bitplane: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the layers, scales and level usage of a packed model.
    Inspect { model: PathBuf },
}

/// Invalid invocation or configuration; exits with status 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn exit_status(err: &anyhow::Error) -> u8 {
    let is_usage = err.chain().any(|e| {
        e.is::<UsageError>() || matches!(e.downcast_ref::<Error>(), Some(Error::Config { .. }))
    });
    if is_usage {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train {
            config,
            seed,
            data_dir,
            out,
            name,
            epochs,
            phase1_epochs,
            bits,
            overrides,
            force,
        } => {
            let mut overrides = overrides;
            let flags = [
                ("seed", seed.map(|v| v.to_string())),
                ("name", name),
                ("epochs", epochs.map(|v| v.to_string())),
                ("phase1_epochs", phase1_epochs.map(|v| v.to_string())),
                ("bits", bits.map(|v| v.to_string())),
                ("data_dir", data_dir.map(|v| v.display().to_string())),
            ];
            overrides.extend(flags.into_iter().filter_map(|(k, v)| Some(format!("{k}={}", v?))));
            train(config.as_deref(), &overrides, &out, force)
        }
        Command::Eval {
            model,
            precision,
            bitplane,
            data_dir,
            dataset,
            limit,
        } => eval(&model, precision, bitplane.as_deref(), data_dir.as_deref(), dataset, limit),
        Command::Switch {
            model,
            direction,
            bitplane,
            out,
        } => switch(&model, direction, bitplane.as_deref(), &out),
        Command::Inspect { model } => inspect(&model),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_status(&err))
        }
    }
}

fn load_dataset(dataset: DatasetId, dir: &Path) -> anyhow::Result<(Dataset, Dataset)> {
    let loaded = match dataset {
        DatasetId::Mnist => load_mnist(dir),
        DatasetId::Cifar10 => load_cifar10_dir(dir),
    };
    loaded.with_context(|| format!("loading {} from {}", dataset.as_str(), dir.display()))
}

fn data_dir_or_default(dir: Option<&Path>) -> PathBuf {
    resolve_data_dir(dir).unwrap_or_else(|| PathBuf::from("data"))
}

/// Writes through a temporary sibling so readers never see a partial file.
fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn train(config_path: Option<&Path>, overrides: &[String], out: &Path, force: bool) -> anyhow::Result<()> {
    let mut config = match config_path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            TrainConfig::from_text(&text)?
        }
        None => TrainConfig::default(),
    };
    for kv in overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| usage(format!("override `{kv}` is not KEY=VALUE")))?;
        config.set(k.trim(), v.trim())?;
    }
    config.validate()?;
    let data_dir = data_dir_or_default(config.data_dir.as_deref());
    config.data_dir = Some(data_dir.clone());

    let run_dir = out.join(&config.name);
    if run_dir.exists() && !force {
        return Err(usage(format!(
            "{} already exists (use --force or another --name)",
            run_dir.display()
        )));
    }
    let (train, test) = load_dataset(config.dataset, &data_dir)?;
    let data = DataSplits::prepare(train, test, config.train_limit, config.test_limit);
    fs::create_dir_all(&run_dir).with_context(|| format!("creating {}", run_dir.display()))?;
    fs::write(run_dir.join("config.resolved"), config.to_resolved())?;
    let history_path = run_dir.join("history.log");
    let mut history = fs::File::create(&history_path)
        .with_context(|| format!("creating {}", history_path.display()))?;
    let model_path = run_dir.join("model.dpw");
    eprintln!(
        "training {} ({} train / {} test samples, {} epochs) into {}",
        config.arch,
        data.train.len(),
        data.test.len(),
        config.plan.total_epochs,
        run_dir.display()
    );
    let standardizer = data.standardizer.clone();
    let outcome = run_training(&config, &data, |record, model| {
        writeln!(history, "{}", record.to_json_line())?;
        history.flush()?;
        eprintln!(
            "epoch {:>3} phase {} loss {:.4} low {:.2}% high {:.2}%",
            record.epoch,
            record.phase,
            record.train_loss,
            100.0 * record.low_accuracy,
            100.0 * record.high_accuracy
        );
        let snap = model.snapshot()?.with_input_norm(standardizer.clone());
        let bytes = pack(&snap)?;
        write_atomic(&model_path, &bytes).map_err(|e| Error::Io(std::io::Error::other(format!("{e:#}"))))?;
        Ok(())
    })?;
    if let Some(last) = outcome.history.last() {
        println!(
            "{}: low {:.2}% high {:.2}% -> {}",
            config.name,
            100.0 * last.low_accuracy,
            100.0 * last.high_accuracy,
            model_path.display()
        );
    }
    Ok(())
}

fn read_model(path: &Path) -> anyhow::Result<(Vec<u8>, QuantizedModel)> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let model = unpack(&bytes).with_context(|| format!("decoding {}", path.display()))?;
    Ok((bytes, model))
}

fn dataset_for(arch: &Architecture) -> anyhow::Result<DatasetId> {
    for id in [DatasetId::Mnist, DatasetId::Cifar10] {
        let (c, side) = id.image_shape();
        let fits = match arch {
            Architecture::Mlp { dims } => dims[0] == c * side * side,
            Architecture::MiniConvBn { channels, size, .. } => *channels == c && *size == side,
        };
        if fits {
            return Ok(id);
        }
    }
    Err(usage(format!("no known dataset fits {arch}; pass --dataset")))
}

fn eval(
    model_path: &Path,
    precision: Precision,
    bitplane: Option<&Path>,
    data_dir: Option<&Path>,
    dataset: Option<DatasetId>,
    limit: Option<usize>,
) -> anyhow::Result<()> {
    let (_, mut model) = read_model(model_path)?;
    if let Some(p) = bitplane {
        let plane = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
        model = attach_bitplane(&model, &plane).with_context(|| format!("attaching {}", p.display()))?;
    }
    if precision == Precision::High && !model.has_upscale() {
        return Err(usage(format!(
            "{} is a low-precision stream; pass --bitplane or --precision low",
            model_path.display()
        )));
    }
    let dataset = match dataset {
        Some(d) => d,
        None => dataset_for(&model.arch)?,
    };
    let dir = data_dir_or_default(data_dir);
    let (train, test) = load_dataset(dataset, &dir)?;
    let norm = match &model.input_norm {
        Some(n) => n.clone(),
        None => Standardizer::fit(&train),
    };
    let mut test = test.take(limit.unwrap_or(0));
    norm.apply(&mut test);
    let acc = model.evaluate(&test, precision, 1000)?;
    let bits = match precision {
        Precision::Low => model.spec.bits(),
        Precision::High => model.spec.bits() + 1,
    };
    println!(
        "{} {}-bit accuracy {:.4} on {} {} test samples",
        precision.as_str(),
        bits,
        acc,
        test.len(),
        dataset.as_str()
    );
    Ok(())
}

fn switch(model_path: &Path, direction: Direction, bitplane: Option<&Path>, out: &Path) -> anyhow::Result<()> {
    let same = |a: &Path, b: &Path| match (a.canonicalize(), b.canonicalize()) {
        (Ok(a), Ok(b)) => a == b,
        _ => a == b,
    };
    if same(model_path, out) {
        return Err(usage("--out must differ from the input model"));
    }
    let stream = fs::read(model_path).with_context(|| format!("reading {}", model_path.display()))?;
    match direction {
        Direction::Up => {
            let plane_path = bitplane.ok_or_else(|| usage("switching up needs --bitplane"))?;
            let plane = fs::read(plane_path).with_context(|| format!("reading {}", plane_path.display()))?;
            let switched = switch_precision(&stream, Direction::Up, Some(&plane))?;
            write_atomic(out, &switched.stream)?;
            println!("{} ({} bytes)", out.display(), switched.stream.len());
        }
        Direction::Down => {
            let plane_path = bitplane.map(Path::to_path_buf).unwrap_or_else(|| out.with_extension("dpb"));
            if same(model_path, &plane_path) || same(out, &plane_path) {
                return Err(usage("--bitplane must differ from the model paths"));
            }
            let switched = switch_precision(&stream, Direction::Down, None)?;
            let plane = switched.bitplane.ok_or_else(|| anyhow!("no plane produced"))?;
            write_atomic(out, &switched.stream)?;
            write_atomic(&plane_path, &plane)?;
            println!(
                "{} ({} bytes), {} ({} bytes)",
                out.display(),
                switched.stream.len(),
                plane_path.display(),
                plane.len()
            );
        }
    }
    Ok(())
}

fn inspect(model_path: &Path) -> anyhow::Result<()> {
    let (bytes, model) = read_model(model_path)?;
    let mode = if model.quantized_count() == 0 {
        "full precision"
    } else if model.has_upscale() {
        "high"
    } else {
        "low"
    };
    println!("architecture  {}", model.arch);
    println!(
        "precision     {} ({} shared bits, scale rule {})",
        mode,
        model.spec.bits(),
        model.spec.scale_rule().as_str()
    );
    println!("stream        {} bytes", bytes.len());
    if let Some(norm) = &model.input_norm {
        println!("input norm    mean {:?} std {:?}", norm.mean, norm.std);
    }
    for (i, (layer, name)) in model.net.layers().iter().zip(model.net.names()).enumerate() {
        let shape = match layer {
            Layer::Dense(_) | Layer::Conv2d(_) => format!("{:?}", layer.weight_shape().unwrap_or_default()),
            Layer::BatchNorm(b) => format!("[{}]", b.channels),
            _ => String::new(),
        };
        print!("{name:<8} {:<10} {shape:<16}", format!("{:?}", layer.kind()));
        match &model.layers[i] {
            Some(q) => {
                let hist: Vec<String> = level_histogram(&q.low).iter().map(|(l, c)| format!("{l}:{c}")).collect();
                print!(" scale {:.6} levels {}", q.low.scale(), hist.join(" "));
                if q.upscale.is_some() {
                    let hi = q.high(name)?;
                    let used = level_histogram(&hi).values().filter(|&&c| c > 0).count();
                    print!(" | high scale {:.6} levels used {used}/{}", hi.scale(), hi.spec().level_count());
                }
                println!();
            }
            None if matches!(layer, Layer::Dense(_) | Layer::Conv2d(_)) => println!(" f32"),
            None => println!(),
        }
    }
    Ok(())
}
