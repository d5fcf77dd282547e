use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sscnn::checkpoint::{load_checkpoint, load_config, save_checkpoint};
use sscnn::datasets::{
    load_idx, make_local2, make_scaled, split, write_idx, write_manifest, LabeledImageSet, Synthesized,
};
use sscnn::filterbank::{build_basis, evenly_spaced_orientations, BasisSpec};
use sscnn::network::{Network, METRICS_HEADER};
use sscnn::render::{average_activation, parse_pgm, render_grid, Normalize};
use sscnn::steering::{oracle_resample, steer, CoefficientSet, ScalingIdentityReport};
use sscnn::{Error, Result};

#[derive(Parser)]
#[command(name = "sscnn", version, about = "Scale-steerable filters and scale-invariant CNNs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum DataKind {
    MnistScale,
    FmnistScale,
    Local2,
}

#[derive(Subcommand)]
enum Command {
    /// Write magnitude, real-part and phase montages of the basis plus a manifest.
    GenBasis {
        #[arg(long)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
        /// Filter orders k.
        #[arg(long, value_delimiter = ',', default_values_t = [0.5, 1.0, 2.0])]
        orders: Vec<f64>,
        /// Number of orientations, spaced pi/J apart.
        #[arg(long, default_value_t = 8)]
        orientations: usize,
        #[arg(long, default_value_t = std::f64::consts::PI / 16.0)]
        sigma_phi: f64,
        #[arg(long, default_value_t = 0.0)]
        beta: f64,
        #[arg(long, default_value_t = 1.0)]
        m: f64,
        #[arg(long, default_value_t = 1.0)]
        radial_scale: f64,
    },
    /// Check steering against direct resampling and the response identity.
    VerifySteer {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, value_delimiter = ',', default_values_t = [0.7, 1.0, 1.3, 2.0, 2.4])]
        scales: Vec<f64>,
        #[arg(long, default_value_t = 7)]
        base_size: usize,
        /// Largest allowed steer/oracle error relative to the kernel maximum.
        #[arg(long, default_value_t = 1e-10)]
        tolerance: f64,
    },
    /// Synthesize a scaled dataset from IDX sources and write IDX splits.
    SynthData {
        #[arg(long, value_enum)]
        kind: DataKind,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Scale range lo,hi (mnist-scale and fmnist-scale only).
        #[arg(long, value_delimiter = ',')]
        range: Option<Vec<f64>>,
        /// Number of digit pairs to build (local2 only; default: source size).
        #[arg(long)]
        count: Option<usize>,
        /// Train, validation and test sizes.
        #[arg(long, value_delimiter = ',')]
        split: Option<Vec<usize>>,
    },
    /// Train a network and write a checkpoint plus a metrics CSV.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Metrics CSV path (default: checkpoint path with `.csv` appended).
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Print the error rate of a checkpoint on a data split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Render a layer's steered filters and, given an input, its activations.
    Render {
        #[arg(long)]
        ckpt: PathBuf,
        /// Conv layer, counted from 1.
        #[arg(long)]
        layer: usize,
        #[arg(long)]
        out: PathBuf,
        /// Binary PGM with the network's input size.
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn gen_basis(spec: BasisSpec, size: usize, radial_scale: f64, out: &Path) -> Result<()> {
    let basis = build_basis(&spec, size, radial_scale)?;
    create_dir(out)?;
    let layout = (spec.orders.len(), spec.orientations.len());
    let pick = |f: fn(&num_complex::Complex64) -> f64| -> Vec<Array2<f64>> {
        basis.filters.iter().map(|g| g.map(f)).collect()
    };
    // Magnitudes are dominated by the unit centre; log compresses the range.
    let magnitude: Vec<Array2<f64>> = pick(|z| z.norm()).into_iter().map(|g| g.mapv(f64::ln_1p)).collect();
    write_file(&out.join("basis_magnitude.pgm"), &render_grid(&magnitude, layout, Normalize::PerTile)?)?;
    write_file(&out.join("basis_real.pgm"), &render_grid(&pick(|z| z.re), layout, Normalize::PerTile)?)?;
    write_file(&out.join("basis_phase.pgm"), &render_grid(&pick(|z| z.arg()), layout, Normalize::Global)?)?;
    let mut manifest = format!(
        "size = {size}\nradial_scale = {radial_scale}\nsigma_phi = {}\nbeta = {}\nm = {}\nfilters = {}\n# index order_k orientation l2_norm\n",
        spec.sigma_phi,
        spec.beta,
        spec.m,
        spec.len()
    );
    for (ki, &k) in spec.orders.iter().enumerate() {
        for (ji, &phi) in spec.orientations.iter().enumerate() {
            let g = basis.filter(ki, ji);
            let norm = g.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            manifest.push_str(&format!("{} {k} {phi} {norm}\n", spec.index(ki, ji)));
        }
    }
    write_file(&out.join("basis.txt"), manifest.as_bytes())?;
    println!("wrote {} filters of size {size} to {}", spec.len(), out.display());
    Ok(())
}

/// Smooth anisotropic blob used for the response-identity sweep.
fn sweep_pattern(x: f64, y: f64) -> f64 {
    let (c, s) = (0.5f64.cos(), 0.5f64.sin());
    let (u, v) = (c * x + s * y, -s * x + c * y);
    (-(u * u) / (2.0 * 1.6 * 1.6) - (v * v) / (2.0 * 1.0 * 1.0)).exp()
}

/// Coefficients with every orientation of order `ki` set to one.
fn order_group(spec: &BasisSpec, ki: usize) -> CoefficientSet {
    let mut set = CoefficientSet::zeros(spec);
    for ji in 0..spec.orientations.len() {
        set.c[spec.index(ki, ji)] = num_complex::Complex64::new(1.0, 0.0);
    }
    set
}

fn verify_steer(trials: usize, seed: u64, scales: &[f64], base_size: usize, tolerance: f64) -> Result<bool> {
    let spec = BasisSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sets: Vec<CoefficientSet> = (0..trials).map(|_| CoefficientSet::random(&spec, 1.0, &mut rng)).collect();
    let mut ok = true;
    println!("steer vs direct resampling ({trials} coefficient sets, base size {base_size})");
    println!("{:>8} {:>6} {:>14}", "scale", "size", "max rel err");
    for &s in scales {
        let mut worst: f64 = 0.0;
        let mut size = 0;
        for set in &sets {
            let k = steer(set, s, base_size)?;
            let o = oracle_resample(set, s, base_size)?;
            let peak = o.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let diff = k.values.iter().zip(&o).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            worst = worst.max(diff / peak);
            size = k.size;
        }
        let pass = worst < tolerance;
        ok &= pass;
        println!("{s:>8} {size:>6} {worst:>14.3e} {}", if pass { "ok" } else { "FAIL" });
    }

    println!("response identity, per order, resolution x1 / x2 / x4");
    println!("{:>6} {:>6} {:>12} {:>12} {:>12}", "scale", "order", "x1", "x2", "x4");
    for s in [1.3, 1.5, 2.0] {
        for (ki, &k) in spec.orders.iter().enumerate() {
            let set = order_group(&spec, ki);
            let errs: Vec<f64> = [1, 2, 4]
                .iter()
                .map(|&u| {
                    let report: ScalingIdentityReport = sscnn::steering::verify_scaling_identity(&sweep_pattern, &set, s, base_size, u)?;
                    Ok(report.per_order[ki])
                })
                .collect::<Result<_>>()?;
            let pass = errs[1] < errs[0] && errs[2] <= errs[1] * 1.1;
            ok &= pass;
            println!(
                "{s:>6} {k:>6} {:>12.4e} {:>12.4e} {:>12.4e} {}",
                errs[0],
                errs[1],
                errs[2],
                if pass { "ok" } else { "FAIL" }
            );
        }
    }
    Ok(ok)
}

/// Finds an IDX image/label pair in `dir` whose names start with `prefix`
/// (e.g. `train-`), accepting optional `.gz` compression.
fn find_idx(dir: &Path, prefix: &str) -> Result<(PathBuf, PathBuf)> {
    let pick = |stem: &str| -> Option<PathBuf> {
        [format!("{prefix}{stem}"), format!("{prefix}{stem}.gz")]
            .into_iter()
            .map(|n| dir.join(n))
            .find(|p| p.is_file())
    };
    match (pick("images-idx3-ubyte"), pick("labels-idx1-ubyte")) {
        (Some(i), Some(l)) => Ok((i, l)),
        _ => Err(Error::Io {
            path: dir.join(format!("{prefix}images-idx3-ubyte")),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "IDX image/label pair not found"),
        }),
    }
}

fn load_source(dir: &Path) -> Result<LabeledImageSet> {
    let (i, l) = find_idx(dir, "train-").or_else(|_| find_idx(dir, ""))?;
    load_idx(&i, &l)
}

/// The 10k/2k/50k proportions, shrunk when the source is smaller.
fn default_split(n: usize) -> (usize, usize, usize) {
    if n >= 62_000 {
        (10_000, 2_000, 50_000)
    } else {
        let train = n * 10 / 62;
        let val = n * 2 / 62;
        (train, val, n - train - val)
    }
}

#[allow(clippy::too_many_arguments)]
fn synth_data(
    kind: DataKind,
    input: &Path,
    out: &Path,
    seed: u64,
    range: Option<Vec<f64>>,
    count: Option<usize>,
    sizes: Option<Vec<usize>>,
) -> Result<()> {
    let source = load_source(input)?;
    let (name, synth, range_text): (&str, Synthesized, String) = match kind {
        DataKind::MnistScale | DataKind::FmnistScale => {
            if count.is_some() {
                return Err(Error::InvalidArgument("--count applies to local2 only".into()));
            }
            let r = range.unwrap_or_else(|| vec![0.3, 1.0]);
            if r.len() != 2 {
                return Err(Error::InvalidArgument("--range takes two values: lo,hi".into()));
            }
            let name = if matches!(kind, DataKind::MnistScale) {
                "mnist-scale"
            } else {
                "fmnist-scale"
            };
            (name, make_scaled(&source, (r[0], r[1]), seed)?, format!("{},{}", r[0], r[1]))
        }
        DataKind::Local2 => {
            if range.is_some() {
                return Err(Error::InvalidArgument("local2 uses the fixed range 0.7,1".into()));
            }
            let n = count.unwrap_or(source.len());
            ("local2", make_local2(&source, n, seed)?, "0.7,1".to_string())
        }
    };
    let set = &synth.set;
    let (a, b, c) = match sizes {
        Some(v) if v.len() == 3 => (v[0], v[1], v[2]),
        Some(_) => return Err(Error::InvalidArgument("--split takes three sizes: train,val,test".into())),
        None => default_split(set.len()),
    };
    let (train, val, test) = split(set, (a, b, c), seed)?;
    create_dir(out)?;
    for (prefix, part) in [("train", &train), ("val", &val), ("test", &test)] {
        write_idx(
            part,
            &out.join(format!("{prefix}-images-idx3-ubyte")),
            &out.join(format!("{prefix}-labels-idx1-ubyte")),
        )?;
    }
    let (lo, hi) = synth
        .factors
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &f| (l.min(f), h.max(f)));
    let counts = |s: &LabeledImageSet| {
        s.class_counts()
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(",")
    };
    write_manifest(
        &out.join("manifest.txt"),
        &[
            ("kind", name.to_string()),
            ("seed", seed.to_string()),
            ("scale_range", range_text),
            ("observed_factor_min", lo.to_string()),
            ("observed_factor_max", hi.to_string()),
            ("source_count", source.len().to_string()),
            ("image_height", set.height.to_string()),
            ("image_width", set.width.to_string()),
            ("train_count", train.len().to_string()),
            ("val_count", val.len().to_string()),
            ("test_count", test.len().to_string()),
            ("train_class_counts", counts(&train)),
            ("val_class_counts", counts(&val)),
            ("test_class_counts", counts(&test)),
        ],
    )?;
    println!(
        "wrote {name}: {} train, {} val, {} test to {}",
        train.len(),
        val.len(),
        test.len(),
        out.display()
    );
    Ok(())
}

fn load_split(dir: &Path, name: &str) -> Result<LabeledImageSet> {
    let (i, l) = find_idx(dir, &format!("{name}-"))?;
    load_idx(&i, &l)
}

fn train(config: &Path, data: &Path, out: &Path, metrics: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(config)?;
    let train_set = load_split(data, "train")?;
    let val_set = load_split(data, "val").ok().filter(|v| !v.is_empty());
    let net = Network::new(cfg.clone())?;
    let mut state = net.init_state();
    let metrics_path = metrics.unwrap_or_else(|| {
        let mut p = out.as_os_str().to_owned();
        p.push(".csv");
        PathBuf::from(p)
    });
    let mut csv = fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    writeln!(csv, "{METRICS_HEADER}").map_err(|e| Error::io(&metrics_path, e))?;
    let mut write_err = None;
    net.train(&mut state, &train_set, val_set.as_ref(), |m| {
        eprintln!(
            "epoch {} step {} loss {:.4} train_acc {:.4}{}",
            m.epoch,
            m.step,
            m.loss,
            m.train_acc,
            m.val_acc.map(|v| format!(" val_acc {v:.4}")).unwrap_or_default()
        );
        if let Err(e) = writeln!(csv, "{}", m.csv_row()) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(Error::io(&metrics_path, e));
    }
    save_checkpoint(out, &cfg, state.params())?;
    println!("wrote {} and {}", out.display(), metrics_path.display());
    Ok(())
}

fn eval(ckpt: &Path, data: &Path, split_name: &str) -> Result<()> {
    let (net, state) = load_checkpoint(ckpt)?;
    let set = load_split(data, split_name)?;
    let err = net.evaluate(&state, &set)?;
    println!("{err}");
    Ok(())
}

fn render(ckpt: &Path, layer: usize, out: &Path, input: Option<&Path>) -> Result<()> {
    let (net, state) = load_checkpoint(ckpt)?;
    if layer == 0 {
        return Err(Error::InvalidArgument("layers are counted from 1".into()));
    }
    let li = layer - 1;
    let kernels = net.layer_kernels(&state, li)?;
    create_dir(out)?;
    let conv = state
        .params()
        .conv
        .get(li)
        .ok_or_else(|| Error::InvalidArgument(format!("layer {layer} out of range")))?;
    for (si, per_scale) in kernels.iter().enumerate() {
        let path = out.join(format!("layer{layer}_scale{si}_filters.pgm"));
        write_file(
            &path,
            &render_grid(per_scale, (conv.out_channels, conv.in_channels), Normalize::Global)?,
        )?;
    }
    if let Some(input) = input {
        let bytes = fs::read(input).map_err(|e| Error::io(input, e))?;
        let image = parse_pgm(&bytes, input)?;
        let responses = net.layer_responses(&state, &image, li)?;
        let avg = average_activation(&responses)?;
        write_file(
            &out.join(format!("layer{layer}_average_activation.pgm")),
            &render_grid(&[avg], (1, 1), Normalize::PerTile)?,
        )?;
        let pooled: Vec<Array2<f64>> = responses.iter().map(|r| r.pooled.clone()).collect();
        let cols = (pooled.len() as f64).sqrt().ceil() as usize;
        let rows = pooled.len().div_ceil(cols);
        write_file(
            &out.join(format!("layer{layer}_channels_pooled.pgm")),
            &render_grid(&pooled, (rows, cols), Normalize::PerTile)?,
        )?;
        let argmax: Vec<Array2<f64>> = responses.iter().map(|r| r.argmax_scale.mapv(|a| a as f64)).collect();
        write_file(
            &out.join(format!("layer{layer}_channels_argmax_scale.pgm")),
            &render_grid(&argmax, (rows, cols), Normalize::Global)?,
        )?;
    }
    println!("wrote layer {layer} renders to {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenBasis {
            size,
            out,
            orders,
            orientations,
            sigma_phi,
            beta,
            m,
            radial_scale,
        } => {
            let spec = BasisSpec {
                orders,
                orientations: evenly_spaced_orientations(orientations),
                sigma_phi,
                beta,
                m,
            };
            gen_basis(spec, size, radial_scale, &out)?;
        }
        Command::VerifySteer {
            trials,
            seed,
            scales,
            base_size,
            tolerance,
        } => return verify_steer(trials, seed, &scales, base_size, tolerance),
        Command::SynthData {
            kind,
            input,
            out,
            seed,
            range,
            count,
            split,
        } => synth_data(kind, &input, &out, seed, range, count, split)?,
        Command::Train {
            config,
            data,
            out,
            metrics,
        } => train(&config, &data, &out, metrics)?,
        Command::Eval { ckpt, data, split } => eval(&ckpt, &data, &split)?,
        Command::Render {
            ckpt,
            layer,
            out,
            input,
        } => render(&ckpt, layer, &out, input.as_deref())?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = std::env::var("SSCNN_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("warning: could not set thread count: {e}");
        }
    }
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: tolerance check failed");
            ExitCode::from(1)
        }
        Err(e @ Error::InvalidArgument(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
