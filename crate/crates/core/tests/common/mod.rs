#![allow(dead_code)]

use fedbreach::model::{dropout_loss, forward_loss, gradient, Activation, Batch, ModelConfig, ModelParams, Task};
use fedbreach::numkernel::{erf, Rng};

/// Worst per-tensor relative error `|g - g_fd| / |g_fd|` between the analytic
/// gradient and central finite differences with step `h`. Tensors whose true
/// gradient vanishes (the key bias, by softmax shift invariance) are compared
/// against an absolute floor instead.
pub fn finite_difference_check(
    params: &ModelParams<f64>,
    batch: &Batch,
    h: f64,
    dropout_seed: Option<u64>,
) -> (f64, String) {
    let analytic = gradient(params, batch, dropout_seed.map(Rng::new).as_mut()).unwrap();
    let loss = |p: &ModelParams<f64>| match dropout_seed {
        Some(s) => dropout_loss(p, batch, &mut Rng::new(s)).unwrap(),
        None => forward_loss(p, batch).unwrap(),
    };
    let flat_grad = analytic.grads.to_flat();
    let mut layout = Vec::new();
    let mut offset = 0;
    params.for_each_tensor(|t| {
        layout.push((t.name.clone(), offset, t.data.len()));
        offset += t.data.len();
    });
    let mut worst = (0.0, String::new());
    let mut probe = params.clone();
    for (name, start, len) in layout {
        let mut diff2 = 0.0;
        let mut ref2 = 0.0;
        for k in start..start + len {
            let orig = get(&probe, k);
            set(&mut probe, k, orig + h);
            let up = loss(&probe);
            set(&mut probe, k, orig - h);
            let down = loss(&probe);
            set(&mut probe, k, orig);
            let fd = (up - down) / (2.0 * h);
            diff2 += (fd - flat_grad[k]).powi(2);
            ref2 += fd * fd;
        }
        let rel = diff2.sqrt() / ref2.sqrt().max(1e-3);
        if rel > worst.0 {
            worst = (rel, name);
        }
    }
    worst
}

fn get(p: &ModelParams<f64>, index: usize) -> f64 {
    let mut out = 0.0;
    let mut offset = 0;
    p.for_each_tensor(|t| {
        if index >= offset && index < offset + t.data.len() {
            out = t.data[index - offset];
        }
        offset += t.data.len();
    });
    out
}

fn set(p: &mut ModelParams<f64>, index: usize, value: f64) {
    let mut offset = 0;
    p.for_each_tensor_mut(|t| {
        if index >= offset && index < offset + t.data.len() {
            t.data[index - offset] = value;
        }
        offset += t.data.len();
    });
}

pub fn tiny_config(activation: Activation, task: Task, tied: bool) -> ModelConfig {
    ModelConfig {
        vocab_size: 32,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        ffn_width: 6,
        max_positions: 8,
        activation,
        task,
        tied_embedding: tied,
        decoder_bias: true,
        ..ModelConfig::default()
    }
}

/// Random parameters scaled up from the default init so every nonlinearity
/// is exercised away from its linear regime.
pub fn lively_params(cfg: &ModelConfig, seed: u64) -> ModelParams<f64> {
    let mut rng = Rng::new(seed);
    let mut p = ModelParams::init(cfg, &mut rng).unwrap();
    p.for_each_tensor_mut(|t| {
        let is_ln = t.name.contains("ln");
        for x in t.data.iter_mut() {
            *x = if is_ln {
                *x + 0.3 * rng.normal()
            } else {
                0.5 * rng.normal()
            };
        }
    });
    p
}

/// Straight-line reference forward pass, written against plain nested
/// vectors and sharing no code with the library model.
pub fn naive_loss(p: &ModelParams<f64>, batch: &Batch) -> f64 {
    let cfg = &p.config;
    let d = cfg.d_model;
    let nh = cfg.n_heads;
    let dk = d / nh;
    let v = cfg.vocab_size;
    let ln = |x: &[f64], g: &[f64], b: &[f64]| -> Vec<f64> {
        let mean = x.iter().sum::<f64>() / d as f64;
        let var = x.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / d as f64;
        (0..d)
            .map(|c| (x[c] - mean) / (var + 1e-5).sqrt() * g[c] + b[c])
            .collect()
    };
    let lin = |x: &[f64], w: &fedbreach::numkernel::Matrix<f64>, b: &[f64]| -> Vec<f64> {
        (0..w.rows())
            .map(|o| b[o] + (0..w.cols()).map(|i| w[(o, i)] * x[i]).sum::<f64>())
            .collect()
    };
    let act = |y: f64| match cfg.activation {
        Activation::Relu => y.max(0.0),
        Activation::Gelu => 0.5 * y * (1.0 + erf(y / 2f64.sqrt())),
    };
    let mut total = 0.0;
    let mut count = 0;
    for (si, seq) in batch.sequences.iter().enumerate() {
        let ids = seq.ids();
        let s = ids.len();
        let mut inputs = ids.to_vec();
        let mut targets: Vec<(usize, usize)> = Vec::new();
        match cfg.task {
            Task::Causal => {
                for i in 0..s - 1 {
                    targets.push((i, ids[i + 1]));
                }
            }
            Task::Masked => {
                let mut m = batch.masks.as_ref().unwrap()[si].clone();
                m.sort();
                m.dedup();
                for &pos in &m {
                    inputs[pos] = cfg.mask_token;
                    targets.push((pos, ids[pos]));
                }
            }
        }
        let mut x: Vec<Vec<f64>> = (0..s)
            .map(|i| {
                (0..d)
                    .map(|c| p.token_embedding[(inputs[i], c)] + p.positional_embedding[(i, c)])
                    .collect()
            })
            .collect();
        for b in &p.blocks {
            let a: Vec<Vec<f64>> = x.iter().map(|r| ln(r, &b.ln1_scale, &b.ln1_shift)).collect();
            let q: Vec<Vec<f64>> = a.iter().map(|r| lin(r, &b.wq, &b.bq)).collect();
            let k: Vec<Vec<f64>> = a.iter().map(|r| lin(r, &b.wk, &b.bk)).collect();
            let vv: Vec<Vec<f64>> = a.iter().map(|r| lin(r, &b.wv, &b.bv)).collect();
            let mut heads = vec![vec![0.0; d]; s];
            for h in 0..nh {
                for i in 0..s {
                    let scores: Vec<f64> = (0..s)
                        .map(|j| {
                            if cfg.task == Task::Causal && j > i {
                                f64::NEG_INFINITY
                            } else {
                                (0..dk).map(|c| q[i][h * dk + c] * k[j][h * dk + c]).sum::<f64>() / (dk as f64).sqrt()
                            }
                        })
                        .collect();
                    let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = scores.iter().map(|sc| (sc - mx).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for j in 0..s {
                        for c in 0..dk {
                            heads[i][h * dk + c] += e[j] / z * vv[j][h * dk + c];
                        }
                    }
                }
            }
            for i in 0..s {
                let o = lin(&heads[i], &b.wo, &b.bo);
                for c in 0..d {
                    x[i][c] += o[c];
                }
                let u = ln(&x[i], &b.ln2_scale, &b.ln2_shift);
                let hdn: Vec<f64> = lin(&u, &b.w1, &b.b1).into_iter().map(act).collect();
                let f = lin(&hdn, &b.w2, &b.b2);
                for c in 0..d {
                    x[i][c] += f[c];
                }
            }
        }
        let dec = p.decoder_weight.as_ref().unwrap_or(&p.token_embedding);
        for &(pos, t) in &targets {
            let hf = ln(&x[pos], &p.lnf_scale, &p.lnf_shift);
            let logits: Vec<f64> = (0..v)
                .map(|w| {
                    p.decoder_bias.as_ref().map_or(0.0, |bb| bb[w]) + (0..d).map(|c| dec[(w, c)] * hf[c]).sum::<f64>()
                })
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + logits.iter().map(|l| (l - mx).exp()).sum::<f64>().ln();
            total += lse - logits[t];
            count += 1;
        }
    }
    total / count as f64
}

/// Every combination of activation, task and embedding tying.
pub fn all_variants() -> Vec<(Activation, Task, bool)> {
    let mut out = Vec::new();
    for act in [Activation::Relu, Activation::Gelu] {
        for task in [Task::Causal, Task::Masked] {
            for tied in [false, true] {
                out.push((act, task, tied));
            }
        }
    }
    out
}

pub fn tiny_batch(cfg: &ModelConfig, rng: &mut Rng, n: usize, s: usize) -> Batch {
    let seqs: Vec<_> = (0..n)
        .map(|_| fedbreach::model::TokenSequence((0..s).map(|_| 3 + rng.below(cfg.vocab_size - 3)).collect()))
        .collect();
    match cfg.task {
        Task::Causal => Batch::causal(seqs),
        Task::Masked => Batch::with_random_masks(seqs, 0.3, rng),
    }
}
