//! Command-line front end. Every stage reads and writes plain files, so the
//! pipeline can be re-run from any saved artifact.
//!
//! Exit status: 0 on success (and for `--help`/`--version`), 2 on usage
//! errors, 1 on runtime errors with a one-line `error: ...` diagnostic.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::approx::{error_profile, fit_chebyshev, write_profile_csv, ActivationKind, ChebyshevSeries};
use crate::circuit::depth_report;
use crate::data::{load_mnist, one_hot, Split, MNIST_CLASSES};
use crate::error::{Error, Result};
use crate::fold::{divfree_rewrite, fold_minmax, swap_activations, uniform_plan, SwapPlan};
use crate::layers::{Network, NetworkConfig};
use crate::train::{evaluate_accuracy, fit, TrainConfig};

const BINARY_MAGIC: &[u8; 8] = b"MMHEBIN1";

#[derive(Debug, Parser)]
#[command(name = "mmhe", version, about = "Min-Max normalized networks with polynomial activations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FnName {
    Relu,
    Elu,
}

impl FnName {
    fn kind(self, alpha: f64) -> ActivationKind {
        match self {
            FnName::Relu => ActivationKind::Relu,
            FnName::Elu => ActivationKind::Elu { alpha },
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitName {
    Train,
    Test,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a network from a config and train it on MNIST.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        mnist_dir: PathBuf,
        #[arg(long, default_value_t = 5)]
        epochs: usize,
        #[arg(long, default_value_t = crate::train::DEFAULT_BATCH_SIZE)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Training images held out for per-epoch validation.
        #[arg(long, default_value_t = 5000)]
        val_size: usize,
        /// Use only the first N remaining training images.
        #[arg(long)]
        train_limit: Option<usize>,
    },
    /// Fit a Chebyshev series to an activation.
    FitPoly {
        #[arg(long = "fn", value_enum)]
        func: FnName,
        #[arg(long, default_value_t = crate::approx::DEFAULT_ELU_ALPHA)]
        alpha: f64,
        #[arg(long)]
        degree: usize,
        #[arg(long, num_args = 2, value_names = ["LO", "HI"], allow_negative_numbers = true, required = true)]
        range: Vec<f64>,
        #[arg(long, default_value_t = crate::approx::DEFAULT_SAMPLES)]
        samples: usize,
        /// Defaults to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Replace activation layers with polynomial series.
    Swap {
        #[arg(long)]
        model: PathBuf,
        /// JSON object mapping activation-layer index to series.
        #[arg(long, required_unless_present = "series", conflicts_with = "series")]
        plan: Option<PathBuf>,
        /// Install one series at every activation.
        #[arg(long)]
        series: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fold Min-Max layers into the preceding dense/conv2d layers.
    Fold {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rewrite average pooling as sum pooling.
    Divfree {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print `accuracy,<fraction>` on an MNIST split.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        mnist_dir: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitName::Test)]
        split: SplitName,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Absolute error of a series against its activation as `x,abs_error` CSV.
    Profile {
        #[arg(long)]
        series: PathBuf,
        #[arg(long = "fn", value_enum)]
        func: FnName,
        #[arg(long, default_value_t = crate::approx::DEFAULT_ELU_ALPHA)]
        alpha: f64,
        #[arg(long, num_args = 3, value_names = ["LO", "HI", "COUNT"], allow_negative_numbers = true, required = true)]
        grid: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Multiplicative depth and fixed-point scale report.
    ReportDepth {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        fixed_point_k: u32,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a model in the compact binary format.
    Export {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert a compact binary model back to JSON.
    Import {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            1
        }
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Train {
            config,
            mnist_dir,
            epochs,
            batch,
            seed,
            out,
            val_size,
            train_limit,
        } => {
            let config: NetworkConfig = read_json(&config)?;
            let mut net = Network::from_config(&config, seed)?;
            let full = load_mnist(&mnist_dir, Split::Train)?;
            let (train, val) = full.split(val_size, seed)?;
            let train = match train_limit {
                Some(n) => train.head(n)?,
                None => train,
            };
            let targets = one_hot(&train.labels, MNIST_CLASSES)?;
            let validation = (!val.is_empty()).then_some((&val.images, val.labels.as_slice()));
            let cfg = TrainConfig {
                batch_size: batch,
                epochs,
                seed,
                shuffle: true,
            };
            let stdout = std::io::stdout();
            fit(&mut net, &train.images, &targets, validation, &cfg, |r| {
                let mut lock = stdout.lock();
                let _ = writeln!(lock, "{r}");
                let _ = lock.flush();
            })?;
            write_json(&out, &net, false)
        }
        Command::FitPoly {
            func,
            alpha,
            degree,
            range,
            samples,
            out,
        } => {
            let series = fit_chebyshev(func.kind(alpha), degree, (range[0], range[1]), samples)?;
            emit_json(out.as_deref(), &series)
        }
        Command::Swap {
            model,
            plan,
            series,
            out,
        } => {
            let net: Network = read_json(&model)?;
            let plan: SwapPlan = match (plan, series) {
                (Some(p), _) => read_json(&p)?,
                (None, Some(s)) => uniform_plan(&net, &read_json::<ChebyshevSeries>(&s)?),
                (None, None) => unreachable!("clap requires one of --plan/--series"),
            };
            write_json(&out, &swap_activations(&net, &plan)?, false)
        }
        Command::Fold { model, out } => {
            let net: Network = read_json(&model)?;
            write_json(&out, &fold_minmax(&net)?, false)
        }
        Command::Divfree { model, out } => {
            let net: Network = read_json(&model)?;
            write_json(&out, &divfree_rewrite(&net)?, false)
        }
        Command::Eval {
            model,
            mnist_dir,
            split,
            limit,
        } => {
            let net: Network = read_json(&model)?;
            let split = match split {
                SplitName::Train => Split::Train,
                SplitName::Test => Split::Test,
            };
            let mut data = load_mnist(&mnist_dir, split)?;
            if let Some(n) = limit {
                data = data.head(n)?;
            }
            let acc = evaluate_accuracy(&net, &data.images, &data.labels)?;
            println!("accuracy,{acc}");
            Ok(())
        }
        Command::Profile {
            series,
            func,
            alpha,
            grid,
            out,
        } => {
            let series: ChebyshevSeries = read_json(&series)?;
            let parse_f = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| Error::InvalidArgument(format!("bad grid bound {s:?}")))
            };
            let lo = parse_f(&grid[0])?;
            let hi = parse_f(&grid[1])?;
            let count: usize = grid[2]
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad grid count {:?}", grid[2])))?;
            let profile = error_profile(&series, func.kind(alpha), (lo, hi, count))?;
            match out {
                Some(path) => {
                    let mut w = BufWriter::new(create(&path)?);
                    write_profile_csv(&profile, &mut w)
                        .and_then(|()| w.flush())
                        .map_err(|source| io_err(&path, source))
                }
                None => write_profile_csv(&profile, std::io::stdout().lock())
                    .map_err(|source| io_err(Path::new("<stdout>"), source)),
            }
        }
        Command::ReportDepth {
            model,
            fixed_point_k,
            out,
        } => {
            let net: Network = read_json(&model)?;
            emit_json(out.as_deref(), &depth_report(&net, fixed_point_k)?)
        }
        Command::Export { model, out } => {
            let net: Network = read_json(&model)?;
            let bytes = export_binary(&net)?;
            std::fs::write(&out, bytes).map_err(|source| io_err(&out, source))
        }
        Command::Import { input, out } => {
            let mut bytes = Vec::new();
            File::open(&input)
                .and_then(|mut f| f.read_to_end(&mut bytes))
                .map_err(|source| io_err(&input, source))?;
            write_json(&out, &import_binary(&bytes)?, false)
        }
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create(path: &Path) -> Result<File> {
    File::create(path).map_err(|source| io_err(path, source))
}

/// Reads and validates a JSON artifact.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|source| io_err(path, source))?;
    Ok(serde_json::from_str(&text)?)
}

/// Writes a JSON artifact. Floats are written in shortest round-trip form.
pub fn write_json<T: Serialize>(path: &Path, value: &T, pretty: bool) -> Result<()> {
    let mut w = BufWriter::new(create(path)?);
    if pretty {
        serde_json::to_writer_pretty(&mut w, value)?;
    } else {
        serde_json::to_writer(&mut w, value)?;
    }
    w.write_all(b"\n")
        .and_then(|()| w.flush())
        .map_err(|source| io_err(path, source))
}

fn emit_json<T: Serialize>(out: Option<&Path>, value: &T) -> Result<()> {
    match out {
        Some(path) => write_json(path, value, true),
        None => {
            println!("{}", serde_json::to_string_pretty(value)?);
            Ok(())
        }
    }
}

/// Compact binary model: the magic, a little-endian `u64` header length, the
/// JSON model with every tensor's `data` array replaced by an element offset
/// (`data_offset`) into the trailing blob of little-endian `f64` values.
pub fn export_binary(net: &Network) -> Result<Vec<u8>> {
    let mut value = serde_json::to_value(net)?;
    let mut blob = Vec::new();
    strip_tensors(&mut value, &mut blob);
    let header = serde_json::to_vec(&value)?;
    let mut out = Vec::with_capacity(16 + header.len() + blob.len() * 8);
    out.extend_from_slice(BINARY_MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for v in blob {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Inverse of [`export_binary`].
pub fn import_binary(bytes: &[u8]) -> Result<Network> {
    if bytes.len() < 16 {
        return Err(Error::Truncated {
            expected: 16,
            found: bytes.len(),
        });
    }
    if &bytes[..8] != BINARY_MAGIC {
        let found = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
        let expected = u32::from_be_bytes([BINARY_MAGIC[0], BINARY_MAGIC[1], BINARY_MAGIC[2], BINARY_MAGIC[3]]);
        return Err(Error::BadMagic { expected, found });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header_end = 16usize.saturating_add(header_len);
    let header = bytes.get(16..header_end).ok_or(Error::Truncated {
        expected: header_end,
        found: bytes.len(),
    })?;
    let tail = &bytes[header_end..];
    if !tail.len().is_multiple_of(8) {
        return Err(Error::Truncated {
            expected: bytes.len() + 8 - tail.len() % 8,
            found: bytes.len(),
        });
    }
    let blob: Vec<f64> = tail
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut value: Value = serde_json::from_slice(header)?;
    restore_tensors(&mut value, &blob)?;
    Ok(serde_json::from_value(value)?)
}

fn is_tensor(map: &Map<String, Value>) -> bool {
    map.len() == 2 && map.get("shape").is_some_and(Value::is_array) && map.get("data").is_some_and(Value::is_array)
}

fn strip_tensors(value: &mut Value, blob: &mut Vec<f64>) {
    match value {
        Value::Object(map) if is_tensor(map) => {
            let Some(Value::Array(data)) = map.remove("data") else {
                unreachable!("checked by is_tensor")
            };
            map.insert("data_offset".into(), Value::from(blob.len()));
            blob.extend(data.iter().map(|v| v.as_f64().unwrap_or(f64::NAN)));
        }
        Value::Object(map) => map.values_mut().for_each(|v| strip_tensors(v, blob)),
        Value::Array(items) => items.iter_mut().for_each(|v| strip_tensors(v, blob)),
        _ => {}
    }
}

fn restore_tensors(value: &mut Value, blob: &[f64]) -> Result<()> {
    match value {
        Value::Object(map) if map.contains_key("data_offset") => {
            let offset = map
                .remove("data_offset")
                .and_then(|v| v.as_u64())
                .ok_or_else(|| Error::InvalidArgument("bad tensor offset".into()))? as usize;
            let len: usize = map
                .get("shape")
                .and_then(Value::as_array)
                .ok_or_else(|| Error::InvalidArgument("tensor without shape".into()))?
                .iter()
                .map(|d| d.as_u64().map(|d| d as usize))
                .product::<Option<usize>>()
                .ok_or_else(|| Error::InvalidArgument("bad tensor shape".into()))?;
            let end = offset.checked_add(len).filter(|&e| e <= blob.len()).ok_or(Error::Truncated {
                expected: offset.saturating_add(len),
                found: blob.len(),
            })?;
            let data = blob[offset..end]
                .iter()
                .map(|&v| {
                    serde_json::Number::from_f64(v)
                        .map(Value::Number)
                        .ok_or_else(|| Error::NonFinite("binary import".into()))
                })
                .collect::<Result<Vec<_>>>()?;
            map.insert("data".into(), Value::Array(data));
            Ok(())
        }
        Value::Object(map) => map.values_mut().try_for_each(|v| restore_tensors(v, blob)),
        Value::Array(items) => items.iter_mut().try_for_each(|v| restore_tensors(v, blob)),
        _ => Ok(()),
    }
}
