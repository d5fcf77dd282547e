//! Text formats for network configurations and trained checkpoints.
//!
//! A config is one `key = value` per line, lists comma-separated, `#`
//! starting a comment. A checkpoint is
//!
//! ```text
//! sscnn-checkpoint
//! format_version = 1
//! <config lines>
//! params
//! tensor <name> <dim> <dim> ...
//! <values separated by spaces>
//! ...
//! end
//! ```
//!
//! Values are written with the shortest representation that parses back to
//! the same `f64`, so a reload is bit-exact.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::filterbank::BasisSpec;
use crate::network::{ConvKind, ConvWeights, Network, NetworkConfig, NetworkState, Params, Preconditioner, ScaleNorm};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "sscnn-checkpoint";

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

pub fn config_to_text(cfg: &NetworkConfig) -> String {
    let kind = match cfg.conv_kind {
        ConvKind::Steered => "steered",
        ConvKind::Plain => "plain",
    };
    let norm = match cfg.scale_norm {
        ScaleNorm::None => "none",
        ScaleNorm::L2 => "l2",
    };
    let precond = match cfg.preconditioner {
        Preconditioner::None => "none",
        Preconditioner::Gram => "gram",
    };
    let b = &cfg.basis;
    let lines = [
        ("input_height", cfg.input_height.to_string()),
        ("input_width", cfg.input_width.to_string()),
        ("channel_widths", join(&cfg.channel_widths)),
        ("scales", join(&cfg.scales)),
        ("base_kernel_size", cfg.base_kernel_size.to_string()),
        ("spatial_pool_sizes", join(&cfg.spatial_pool_sizes)),
        ("upsample_factor", cfg.upsample_factor.to_string()),
        ("dense_widths", join(&cfg.dense_widths)),
        ("orders", join(&b.orders)),
        ("orientations", join(&b.orientations)),
        ("sigma_phi", b.sigma_phi.to_string()),
        ("beta", b.beta.to_string()),
        ("m", b.m.to_string()),
        ("conv_kind", kind.to_string()),
        ("scale_norm", norm.to_string()),
        ("preconditioner", precond.to_string()),
        ("learning_rate", cfg.learning_rate.to_string()),
        ("momentum", cfg.momentum.to_string()),
        ("epochs", cfg.epochs.to_string()),
        ("batch_size", cfg.batch_size.to_string()),
        ("seed", cfg.seed.to_string()),
    ];
    let mut out = String::new();
    for (k, v) in lines {
        writeln!(out, "{k} = {v}").expect("writing to a String");
    }
    out
}

struct LineCtx<'a> {
    path: &'a Path,
    offset: u64,
}

impl LineCtx<'_> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            offset: self.offset,
            message: message.into(),
        }
    }

    fn scalar<T: std::str::FromStr>(&self, key: &str, v: &str) -> Result<T> {
        v.parse().map_err(|_| self.err(format!("bad value for {key}: {v:?}")))
    }

    fn list<T: std::str::FromStr>(&self, key: &str, v: &str) -> Result<Vec<T>> {
        if v.is_empty() {
            return Ok(Vec::new());
        }
        v.split(',').map(|item| self.scalar(key, item.trim())).collect()
    }
}

/// Applies one `key = value` pair to `cfg`.
fn apply(cfg: &mut NetworkConfig, ctx: &LineCtx, key: &str, v: &str) -> Result<()> {
    let basis: &mut BasisSpec = &mut cfg.basis;
    match key {
        "input_height" => cfg.input_height = ctx.scalar(key, v)?,
        "input_width" => cfg.input_width = ctx.scalar(key, v)?,
        "channel_widths" => cfg.channel_widths = ctx.list(key, v)?,
        "scales" => cfg.scales = ctx.list(key, v)?,
        "base_kernel_size" => cfg.base_kernel_size = ctx.scalar(key, v)?,
        "spatial_pool_sizes" => cfg.spatial_pool_sizes = ctx.list(key, v)?,
        "upsample_factor" => cfg.upsample_factor = ctx.scalar(key, v)?,
        "dense_widths" => cfg.dense_widths = ctx.list(key, v)?,
        "orders" => basis.orders = ctx.list(key, v)?,
        "orientations" => basis.orientations = ctx.list(key, v)?,
        "sigma_phi" => basis.sigma_phi = ctx.scalar(key, v)?,
        "beta" => basis.beta = ctx.scalar(key, v)?,
        "m" => basis.m = ctx.scalar(key, v)?,
        "conv_kind" => {
            cfg.conv_kind = match v {
                "steered" => ConvKind::Steered,
                "plain" => ConvKind::Plain,
                _ => return Err(ctx.err(format!("conv_kind must be steered or plain, got {v:?}"))),
            }
        }
        "scale_norm" => {
            cfg.scale_norm = match v {
                "none" => ScaleNorm::None,
                "l2" => ScaleNorm::L2,
                _ => return Err(ctx.err(format!("scale_norm must be none or l2, got {v:?}"))),
            }
        }
        "preconditioner" => {
            cfg.preconditioner = match v {
                "none" => Preconditioner::None,
                "gram" => Preconditioner::Gram,
                _ => return Err(ctx.err(format!("preconditioner must be none or gram, got {v:?}"))),
            }
        }
        "learning_rate" => cfg.learning_rate = ctx.scalar(key, v)?,
        "momentum" => cfg.momentum = ctx.scalar(key, v)?,
        "epochs" => cfg.epochs = ctx.scalar(key, v)?,
        "batch_size" => cfg.batch_size = ctx.scalar(key, v)?,
        "seed" => cfg.seed = ctx.scalar(key, v)?,
        _ => return Err(ctx.err(format!("unknown key {key:?}"))),
    }
    Ok(())
}

/// Lines of `text` with their byte offsets, comments stripped, blanks skipped.
fn content_lines(text: &str) -> impl Iterator<Item = (u64, &str)> {
    let mut offset = 0u64;
    text.split_inclusive('\n').filter_map(move |raw| {
        let start = offset;
        offset += raw.len() as u64;
        let line = raw.split('#').next().unwrap_or("").trim();
        (!line.is_empty()).then_some((start, line))
    })
}

/// Parses a config file body. Keys not present keep the values of `base`.
pub fn parse_config(text: &str, path: &Path, base: NetworkConfig) -> Result<NetworkConfig> {
    let mut cfg = base;
    for (offset, line) in content_lines(text) {
        let ctx = LineCtx { path, offset };
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| ctx.err(format!("expected `key = value`, got {line:?}")))?;
        apply(&mut cfg, &ctx, k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Reads a config file on top of [`NetworkConfig::desk`].
pub fn load_config(path: &Path) -> Result<NetworkConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text, path, NetworkConfig::desk())
}

fn write_tensor(out: &mut String, name: &str, dims: &[usize], values: impl Iterator<Item = f64>) {
    let dims: Vec<String> = dims.iter().map(usize::to_string).collect();
    writeln!(out, "tensor {name} {}", dims.join(" ")).expect("writing to a String");
    let vals: Vec<String> = values.map(|v| v.to_string()).collect();
    writeln!(out, "{}", vals.join(" ")).expect("writing to a String");
}

pub fn checkpoint_to_text(cfg: &NetworkConfig, params: &Params) -> String {
    let mut out = format!("{MAGIC}\nformat_version = {FORMAT_VERSION}\n");
    out.push_str(&config_to_text(cfg));
    out.push_str("params\n");
    for (li, layer) in params.conv.iter().enumerate() {
        let (o, i) = (layer.out_channels, layer.in_channels);
        match &layer.weights {
            ConvWeights::Steered(sets) => {
                let n = sets.first().map_or(0, |s| s.c.len());
                let vals = sets.iter().flat_map(|s| &s.c).flat_map(|c| [c.re, c.im]);
                write_tensor(&mut out, &format!("conv{li}.coefficients"), &[o, i, n, 2], vals);
            }
            ConvWeights::Plain(kernels) => {
                let k = kernels.first().map_or(0, |k| k.nrows());
                let vals = kernels.iter().flatten().copied();
                write_tensor(&mut out, &format!("conv{li}.kernels"), &[o, i, k, k], vals);
            }
        }
        write_tensor(&mut out, &format!("conv{li}.bias"), &[o], layer.bias.iter().copied());
    }
    for (li, layer) in params.dense.iter().enumerate() {
        let (r, c) = layer.weights.dim();
        write_tensor(&mut out, &format!("dense{li}.weights"), &[r, c], layer.weights.iter().copied());
        write_tensor(&mut out, &format!("dense{li}.bias"), &[r], layer.bias.iter().copied());
    }
    out.push_str("end\n");
    out
}

pub fn save_checkpoint(path: &Path, cfg: &NetworkConfig, params: &Params) -> Result<()> {
    std::fs::write(path, checkpoint_to_text(cfg, params)).map_err(|e| Error::io(path, e))
}

/// Parses a checkpoint, returning the network it describes and its state.
pub fn parse_checkpoint(text: &str, path: &Path) -> Result<(Network, NetworkState)> {
    let mut lines = content_lines(text).peekable();
    let perr = |offset: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        offset,
        message,
    };
    match lines.next() {
        Some((_, MAGIC)) => {}
        _ => return Err(perr(0, format!("missing {MAGIC:?} header"))),
    }
    let (off, line) = lines
        .next()
        .ok_or_else(|| perr(text.len() as u64, "missing format_version".into()))?;
    let version = line
        .strip_prefix("format_version")
        .and_then(|r| r.trim().strip_prefix('='))
        .and_then(|v| v.trim().parse::<u32>().ok())
        .ok_or_else(|| perr(off, format!("expected format_version, got {line:?}")))?;
    if version != FORMAT_VERSION {
        return Err(perr(off, format!("unsupported format_version {version}")));
    }

    let mut cfg = NetworkConfig::default();
    loop {
        let (offset, line) = lines
            .next()
            .ok_or_else(|| perr(text.len() as u64, "missing params section".into()))?;
        if line == "params" {
            break;
        }
        let ctx = LineCtx { path, offset };
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| ctx.err(format!("expected `key = value`, got {line:?}")))?;
        apply(&mut cfg, &ctx, k.trim(), v.trim())?;
    }
    let net = Network::new(cfg)?;
    let mut params = net.init_state().into_params();

    let mut next_tensor = |name: &str, dims: &[usize]| -> Result<Vec<f64>> {
        let (off, header) = lines
            .next()
            .ok_or_else(|| perr(text.len() as u64, format!("missing tensor {name}")))?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some("tensor") || parts.next() != Some(name) {
            return Err(perr(off, format!("expected tensor {name}, got {header:?}")));
        }
        let got: Vec<usize> = parts
            .map(|p| p.parse().map_err(|_| perr(off, format!("bad dimension {p:?}"))))
            .collect::<Result<_>>()?;
        if got != dims {
            return Err(perr(off, format!("tensor {name} has shape {got:?}, expected {dims:?}")));
        }
        let (voff, body) = lines
            .next()
            .ok_or_else(|| perr(text.len() as u64, format!("missing values of {name}")))?;
        let vals: Vec<f64> = body
            .split_whitespace()
            .map(|v| v.parse().map_err(|_| perr(voff, format!("bad number {v:?}"))))
            .collect::<Result<_>>()?;
        let expected: usize = dims.iter().product();
        if vals.len() != expected {
            return Err(perr(voff, format!("tensor {name} has {} values, expected {expected}", vals.len())));
        }
        Ok(vals)
    };

    for (li, layer) in params.conv.iter_mut().enumerate() {
        let (o, i) = (layer.out_channels, layer.in_channels);
        match &mut layer.weights {
            ConvWeights::Steered(sets) => {
                let n = sets[0].c.len();
                let vals = next_tensor(&format!("conv{li}.coefficients"), &[o, i, n, 2])?;
                for (c, pair) in sets.iter_mut().flat_map(|s| &mut s.c).zip(vals.chunks(2)) {
                    *c = Complex64::new(pair[0], pair[1]);
                }
            }
            ConvWeights::Plain(kernels) => {
                let k = kernels[0].nrows();
                let vals = next_tensor(&format!("conv{li}.kernels"), &[o, i, k, k])?;
                for (kern, chunk) in kernels.iter_mut().zip(vals.chunks(k * k)) {
                    *kern = Array2::from_shape_vec((k, k), chunk.to_vec()).expect("checked length");
                }
            }
        }
        layer.bias = next_tensor(&format!("conv{li}.bias"), &[o])?;
    }
    for (li, layer) in params.dense.iter_mut().enumerate() {
        let dim = layer.weights.dim();
        let vals = next_tensor(&format!("dense{li}.weights"), &[dim.0, dim.1])?;
        layer.weights = Array2::from_shape_vec(dim, vals).expect("checked length");
        layer.bias = next_tensor(&format!("dense{li}.bias"), &[dim.0])?;
    }
    match lines.next() {
        Some((_, "end")) => {}
        Some((off, line)) => return Err(perr(off, format!("expected end, got {line:?}"))),
        None => return Err(perr(text.len() as u64, "missing end marker".into())),
    }
    let state = net.state_from_params(params)?;
    Ok((net, state))
}

pub fn load_checkpoint(path: &Path) -> Result<(Network, NetworkState)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&text, path)
}
