//! Flat binary tensor archive with a plain-text shape manifest.
//!
//! An archive named `stem` is two files:
//!
//! ```text
//! stem.manifest   text, one record per line
//! stem.bin        every tensor as little-endian f64, concatenated
//! ```
//!
//! Manifest lines, in order:
//!
//! ```text
//! fedbreach-archive 1
//! config <key> <value>          one line per ModelConfig field
//! token_count <n>               only for gradient updates
//! tensor <name> <rows> <cols> <offset>
//! ```
//!
//! `offset` counts f64 elements from the start of `stem.bin`. Tensors appear
//! in the canonical order of [`ModelParams::for_each_tensor`].

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{Activation, ModelConfig, ModelParams, Task};

const MAGIC: &str = "fedbreach-archive 1";

/// Parameters (or gradients) read back from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Archive<T> {
    pub params: ModelParams<T>,
    /// Present when the archive holds a gradient update.
    pub token_count: Option<usize>,
}

fn with_ext(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

pub fn save_archive<T: Scalar>(stem: &Path, params: &ModelParams<T>, token_count: Option<usize>) -> Result<()> {
    let c = &params.config;
    let mut manifest = format!("{MAGIC}\n");
    let act = match c.activation {
        Activation::Relu => "relu",
        Activation::Gelu => "gelu",
    };
    let task = match c.task {
        Task::Causal => "causal",
        Task::Masked => "masked",
    };
    for (k, v) in [
        ("vocab_size", c.vocab_size.to_string()),
        ("d_model", c.d_model.to_string()),
        ("n_layers", c.n_layers.to_string()),
        ("n_heads", c.n_heads.to_string()),
        ("ffn_width", c.ffn_width.to_string()),
        ("max_positions", c.max_positions.to_string()),
        ("activation", act.to_string()),
        ("task", task.to_string()),
        ("tied_embedding", c.tied_embedding.to_string()),
        ("decoder_bias", c.decoder_bias.to_string()),
        ("dropout_rate", format!("{:?}", c.dropout_rate)),
        ("mask_token", c.mask_token.to_string()),
    ] {
        manifest.push_str(&format!("config {k} {v}\n"));
    }
    if let Some(n) = token_count {
        manifest.push_str(&format!("token_count {n}\n"));
    }
    let mut bytes = Vec::with_capacity(params.num_parameters() * 8);
    let mut offset = 0;
    params.for_each_tensor(|t| {
        manifest.push_str(&format!("tensor {} {} {} {}\n", t.name, t.shape.0, t.shape.1, offset));
        for x in t.data {
            bytes.extend_from_slice(&x.as_f64().to_le_bytes());
        }
        offset += t.data.len();
    });
    let mpath = with_ext(stem, "manifest");
    let bpath = with_ext(stem, "bin");
    fs::write(&bpath, bytes).map_err(|e| Error::io(&bpath, e))?;
    fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
    Ok(())
}

pub fn load_archive<T: Scalar>(stem: &Path) -> Result<Archive<T>> {
    let mpath = with_ext(stem, "manifest");
    let bpath = with_ext(stem, "bin");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let bytes = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    let where_ = mpath.display().to_string();
    let perr = |line: usize, msg: String| Error::Parse {
        path: where_.clone(),
        line,
        msg,
    };

    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == MAGIC => {}
        _ => return Err(perr(1, format!("expected header `{MAGIC}`"))),
    }
    let mut cfg = ModelConfig::default();
    let mut token_count = None;
    let mut tensors: Vec<(String, usize, usize, usize)> = Vec::new();
    for (i, line) in lines {
        let ln = i + 1;
        let f: Vec<&str> = line.split_whitespace().collect();
        let num = |s: &str| s.parse::<usize>().map_err(|e| perr(ln, format!("{s}: {e}")));
        match f.as_slice() {
            [] => {}
            ["config", key, value] => {
                let bad = |e: String| perr(ln, format!("config {key}: {e}"));
                match *key {
                    "vocab_size" => cfg.vocab_size = num(value)?,
                    "d_model" => cfg.d_model = num(value)?,
                    "n_layers" => cfg.n_layers = num(value)?,
                    "n_heads" => cfg.n_heads = num(value)?,
                    "ffn_width" => cfg.ffn_width = num(value)?,
                    "max_positions" => cfg.max_positions = num(value)?,
                    "mask_token" => cfg.mask_token = num(value)?,
                    "activation" => {
                        cfg.activation = match *value {
                            "relu" => Activation::Relu,
                            "gelu" => Activation::Gelu,
                            v => return Err(bad(format!("unknown activation {v}"))),
                        }
                    }
                    "task" => {
                        cfg.task = match *value {
                            "causal" => Task::Causal,
                            "masked" => Task::Masked,
                            v => return Err(bad(format!("unknown task {v}"))),
                        }
                    }
                    "tied_embedding" => cfg.tied_embedding = value.parse().map_err(|e| bad(format!("{e}")))?,
                    "decoder_bias" => cfg.decoder_bias = value.parse().map_err(|e| bad(format!("{e}")))?,
                    "dropout_rate" => cfg.dropout_rate = value.parse().map_err(|e| bad(format!("{e}")))?,
                    _ => return Err(bad("unknown key".into())),
                }
            }
            ["token_count", n] => token_count = Some(num(n)?),
            ["tensor", name, r, c, off] => tensors.push((name.to_string(), num(r)?, num(c)?, num(off)?)),
            _ => return Err(perr(ln, format!("unrecognised line `{line}`"))),
        }
    }

    let mut params = ModelParams::<T>::zeros(&cfg)?;
    let total = bytes.len() / 8;
    if bytes.len() % 8 != 0 {
        return Err(Error::Shape(format!("{}: length not a multiple of 8", bpath.display())));
    }
    let mut idx = 0;
    let mut err = None;
    params.for_each_tensor_mut(|t| {
        if err.is_some() {
            return;
        }
        let Some((name, r, c, off)) = tensors.get(idx) else {
            err = Some(Error::Shape(format!("manifest lacks tensor {}", t.name)));
            return;
        };
        idx += 1;
        if *name != t.name || (*r, *c) != t.shape || off + r * c > total {
            err = Some(Error::Shape(format!(
                "manifest entry {name} {r}x{c}@{off} does not match expected {} {}x{}",
                t.name, t.shape.0, t.shape.1
            )));
            return;
        }
        for (k, x) in t.data.iter_mut().enumerate() {
            let at = (off + k) * 8;
            let raw: [u8; 8] = bytes[at..at + 8].try_into().expect("8 bytes");
            *x = T::lit(f64::from_le_bytes(raw));
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if idx != tensors.len() {
        return Err(Error::Shape(format!(
            "manifest lists {} tensors, config implies {idx}",
            tensors.len()
        )));
    }
    Ok(Archive { params, token_count })
}
