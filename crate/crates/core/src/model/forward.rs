use crate::error::{Error, Result};
use crate::numkernel::{gemm_into, Matrix, Rng, Transpose};
use crate::scalar::Scalar;

use super::{check_tokens, Activation, Batch, BlockParams, GradientUpdate, ModelParams, Task};

const LN_EPS: f64 = 1e-5;

struct LnCache<T> {
    xhat: Matrix<T>,
    inv_std: Vec<T>,
}

/// Intermediate tensors of one block for one sequence (`s` = sequence length).
pub struct BlockTrace<T> {
    /// LN1 output, the attention input (`s x d`).
    pub attn_input: Matrix<T>,
    pub q: Matrix<T>,
    pub k: Matrix<T>,
    pub v: Matrix<T>,
    /// Softmax attention weights per head, before dropout (`s x s`).
    pub attn_probs: Vec<Matrix<T>>,
    /// Concatenated head outputs before the output projection.
    pub head_out: Matrix<T>,
    /// Attention sub-layer output added to the residual stream.
    pub attn_out: Matrix<T>,
    /// LN2 output, the input of the first FFN linear layer.
    pub ffn_input: Matrix<T>,
    /// First FFN linear layer output, before the activation (`s x ffn_width`).
    pub ffn_preact: Matrix<T>,
    pub ffn_act: Matrix<T>,
    /// FFN output added to the residual stream (after dropout).
    pub ffn_out: Matrix<T>,
    ln1: LnCache<T>,
    ln2: LnCache<T>,
    attn_drop: Option<Vec<Matrix<T>>>,
    ffn_drop: Option<Matrix<T>>,
}

/// Every intermediate of a forward pass over one sequence.
pub struct SequenceTrace<T> {
    /// Model input ids (after `[MASK]` substitution).
    pub inputs: Vec<usize>,
    pub embedded: Matrix<T>,
    pub blocks: Vec<BlockTrace<T>>,
    pub final_hidden: Matrix<T>,
    pub logits: Matrix<T>,
    lnf: LnCache<T>,
}

fn layer_norm<T: Scalar>(x: &Matrix<T>, scale: &[T], shift: &[T]) -> (Matrix<T>, LnCache<T>) {
    let (s, d) = x.shape();
    let dn = T::lit(d as f64);
    let mut xhat = Matrix::zeros(s, d);
    let mut out = Matrix::zeros(s, d);
    let mut inv_std = Vec::with_capacity(s);
    for i in 0..s {
        let row = x.row(i);
        let mean = row.iter().copied().sum::<T>() / dn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let is = T::one() / (var + T::lit(LN_EPS)).sqrt();
        inv_std.push(is);
        for c in 0..d {
            let h = (row[c] - mean) * is;
            xhat[(i, c)] = h;
            out[(i, c)] = h * scale[c] + shift[c];
        }
    }
    (out, LnCache { xhat, inv_std })
}

fn layer_norm_backward<T: Scalar>(
    dy: &Matrix<T>,
    cache: &LnCache<T>,
    scale: &[T],
    dscale: &mut [T],
    dshift: &mut [T],
) -> Matrix<T> {
    let (s, d) = dy.shape();
    let dn = T::lit(d as f64);
    let mut dx = Matrix::zeros(s, d);
    let mut dxhat = vec![T::zero(); d];
    for i in 0..s {
        let xh = cache.xhat.row(i);
        let g = dy.row(i);
        for c in 0..d {
            dscale[c] += g[c] * xh[c];
            dshift[c] += g[c];
            dxhat[c] = g[c] * scale[c];
        }
        let mean_dxhat = dxhat.iter().copied().sum::<T>() / dn;
        let mean_dxhat_xhat = dxhat.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / dn;
        let is = cache.inv_std[i];
        let out = dx.row_mut(i);
        for c in 0..d {
            out[c] = is * (dxhat[c] - mean_dxhat - xh[c] * mean_dxhat_xhat);
        }
    }
    dx
}

fn linear<T: Scalar>(x: &Matrix<T>, w: &Matrix<T>, b: &[T]) -> Matrix<T> {
    let mut out = Matrix::zeros(x.rows(), w.rows());
    for i in 0..out.rows() {
        out.row_mut(i).copy_from_slice(b);
    }
    gemm_into(x, w, Transpose::No, Transpose::Yes, &mut out);
    out
}

/// Accumulates parameter gradients of `y = x W^T + b` and returns `dx`.
fn linear_backward<T: Scalar>(
    dy: &Matrix<T>,
    x: &Matrix<T>,
    w: &Matrix<T>,
    dw: &mut Matrix<T>,
    db: &mut [T],
) -> Matrix<T> {
    gemm_into(dy, x, Transpose::Yes, Transpose::No, dw);
    for i in 0..dy.rows() {
        for (a, &g) in db.iter_mut().zip(dy.row(i)) {
            *a += g;
        }
    }
    let mut dx = Matrix::zeros(dy.rows(), w.cols());
    gemm_into(dy, w, Transpose::No, Transpose::No, &mut dx);
    dx
}

fn activate<T: Scalar>(act: Activation, y: T) -> T {
    match act {
        Activation::Relu => y.max(T::zero()),
        Activation::Gelu => {
            let yf = y.as_f64();
            T::lit(0.5 * yf * (1.0 + crate::numkernel::erf(yf * std::f64::consts::FRAC_1_SQRT_2)))
        }
    }
}

fn activate_grad<T: Scalar>(act: Activation, y: T) -> T {
    match act {
        Activation::Relu => {
            if y > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        Activation::Gelu => {
            let yf = y.as_f64();
            T::lit(crate::numkernel::normal_cdf(yf) + yf * crate::numkernel::normal_pdf(yf))
        }
    }
}

fn dropout_mask<T: Scalar>(rows: usize, cols: usize, rate: f64, rng: &mut Rng) -> Matrix<T> {
    let keep = T::lit(1.0 / (1.0 - rate));
    Matrix::from_fn(rows, cols, |_, _| if rng.bernoulli(rate) { T::zero() } else { keep })
}

fn block_forward<T: Scalar>(
    p: &BlockParams<T>,
    x: &Matrix<T>,
    cfg: &super::ModelConfig,
    causal: bool,
    mut dropout: Option<&mut Rng>,
) -> (Matrix<T>, BlockTrace<T>) {
    let (s, d) = x.shape();
    let nh = cfg.n_heads;
    let dk = cfg.head_dim();
    let inv_sqrt_dk = T::lit(1.0 / (dk as f64).sqrt());
    let rate = cfg.dropout_rate;

    let (a, ln1) = layer_norm(x, &p.ln1_scale, &p.ln1_shift);
    let q = linear(&a, &p.wq, &p.bq);
    let k = linear(&a, &p.wk, &p.bk);
    let v = linear(&a, &p.wv, &p.bv);

    let mut probs = Vec::with_capacity(nh);
    let mut attn_drop = dropout.as_ref().filter(|_| rate > 0.0).map(|_| Vec::with_capacity(nh));
    let mut head_out = Matrix::zeros(s, d);
    for h in 0..nh {
        let cols = h * dk..(h + 1) * dk;
        let mut pm = Matrix::zeros(s, s);
        for i in 0..s {
            let qi = &q.row(i)[cols.clone()];
            let last = if causal { i + 1 } else { s };
            let mut max = T::neg_infinity();
            for j in 0..last {
                let sc = crate::numkernel::dot(qi, &k.row(j)[cols.clone()]) * inv_sqrt_dk;
                pm[(i, j)] = sc;
                max = max.max(sc);
            }
            let mut z = T::zero();
            for j in 0..last {
                let e = (pm[(i, j)] - max).exp();
                pm[(i, j)] = e;
                z += e;
            }
            for j in 0..last {
                pm[(i, j)] /= z;
            }
        }
        let mask = match (&mut attn_drop, dropout.as_deref_mut()) {
            (Some(masks), Some(rng)) => {
                masks.push(dropout_mask::<T>(s, s, rate, rng));
                masks.last()
            }
            _ => None,
        };
        for i in 0..s {
            let last = if causal { i + 1 } else { s };
            for j in 0..last {
                let mut w = pm[(i, j)];
                if let Some(m) = mask {
                    w *= m[(i, j)];
                }
                if w == T::zero() {
                    continue;
                }
                let vj = &v.row(j)[cols.clone()];
                let out = &mut head_out.row_mut(i)[cols.clone()];
                for (o, &vv) in out.iter_mut().zip(vj) {
                    *o += w * vv;
                }
            }
        }
        probs.push(pm);
    }
    let attn_out = linear(&head_out, &p.wo, &p.bo);
    let mut x1 = x.clone();
    x1.add_assign(&attn_out).expect("same shape");

    let (c, ln2) = layer_norm(&x1, &p.ln2_scale, &p.ln2_shift);
    let y = linear(&c, &p.w1, &p.b1);
    let z = y.map(|v| activate(cfg.activation, v));
    let mut f = linear(&z, &p.w2, &p.b2);
    let ffn_drop = match dropout {
        Some(rng) if rate > 0.0 => {
            let m = dropout_mask::<T>(s, d, rate, rng);
            for (a, &b) in f.as_mut_slice().iter_mut().zip(m.as_slice()) {
                *a *= b;
            }
            Some(m)
        }
        _ => None,
    };
    let mut x2 = x1;
    x2.add_assign(&f).expect("same shape");

    let trace = BlockTrace {
        attn_input: a,
        q,
        k,
        v,
        attn_probs: probs,
        head_out,
        attn_out,
        ffn_input: c,
        ffn_preact: y,
        ffn_act: z,
        ffn_out: f,
        ln1,
        ln2,
        attn_drop,
        ffn_drop,
    };
    (x2, trace)
}

impl<T: Scalar> ModelParams<T> {
    /// Forward pass over one sequence of model inputs, keeping every
    /// intermediate. `dropout` enables user-side dropout masks drawn from the
    /// given stream.
    pub fn trace(&self, inputs: &[usize], dropout: Option<&mut Rng>) -> Result<SequenceTrace<T>> {
        let cfg = &self.config;
        if inputs.is_empty() || inputs.len() > cfg.max_positions {
            return Err(Error::InvalidArgument(format!(
                "sequence length {} outside 1..={}",
                inputs.len(),
                cfg.max_positions
            )));
        }
        if let Some(&bad) = inputs.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::InvalidArgument(format!(
                "token id {bad} >= vocab_size {}",
                cfg.vocab_size
            )));
        }
        Ok(self.trace_unchecked(inputs, dropout))
    }

    fn trace_unchecked(&self, inputs: &[usize], mut dropout: Option<&mut Rng>) -> SequenceTrace<T> {
        let cfg = &self.config;
        let s = inputs.len();
        let d = cfg.d_model;
        let causal = cfg.task == Task::Causal;
        let mut x = Matrix::zeros(s, d);
        for (i, &t) in inputs.iter().enumerate() {
            let te = self.token_embedding.row(t);
            let pe = self.positional_embedding.row(i);
            for (o, (&a, &b)) in x.row_mut(i).iter_mut().zip(te.iter().zip(pe)) {
                *o = a + b;
            }
        }
        let embedded = x.clone();
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for bp in &self.blocks {
            let (nx, tr) = block_forward(bp, &x, cfg, causal, dropout.as_deref_mut());
            x = nx;
            blocks.push(tr);
        }
        let (hf, lnf) = layer_norm(&x, &self.lnf_scale, &self.lnf_shift);
        let zero_bias;
        let bias = match &self.decoder_bias {
            Some(b) => b.as_slice(),
            None => {
                zero_bias = vec![T::zero(); cfg.vocab_size];
                &zero_bias
            }
        };
        let logits = linear(&hf, self.decoder_matrix(), bias);
        SequenceTrace {
            inputs: inputs.to_vec(),
            embedded,
            blocks,
            final_hidden: hf,
            logits,
            lnf,
        }
    }
}

/// Loss-bearing (position, target) pairs and model inputs of one sequence.
fn targets(cfg: &super::ModelConfig, batch: &Batch, idx: usize) -> (Vec<usize>, Vec<(usize, usize)>) {
    let seq = batch.sequences[idx].ids();
    match cfg.task {
        Task::Causal => {
            let t = (0..seq.len().saturating_sub(1)).map(|i| (i, seq[i + 1])).collect();
            (seq.to_vec(), t)
        }
        Task::Masked => {
            let mut inputs = seq.to_vec();
            let mut positions = batch.masks.as_ref().expect("checked")[idx].clone();
            positions.sort_unstable();
            positions.dedup();
            let t = positions
                .iter()
                .map(|&p| {
                    inputs[p] = cfg.mask_token;
                    (p, seq[p])
                })
                .collect();
            (inputs, t)
        }
    }
}

fn loss_bearing_count(cfg: &super::ModelConfig, batch: &Batch) -> usize {
    (0..batch.len()).map(|i| targets(cfg, batch, i).1.len()).sum()
}

fn log_softmax_row<T: Scalar>(row: &[T]) -> (T, T) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let z = row.iter().map(|&v| (v - max).exp()).sum::<T>();
    (max, z.ln())
}

/// Mean cross-entropy over all loss-bearing tokens of the batch.
pub fn forward_loss<T: Scalar>(params: &ModelParams<T>, batch: &Batch) -> Result<T> {
    loss_impl(params, batch, None)
}

/// [`forward_loss`] under dropout masks drawn from `dropout`, in the same
/// order [`gradient`] draws them.
pub fn dropout_loss<T: Scalar>(params: &ModelParams<T>, batch: &Batch, dropout: &mut Rng) -> Result<T> {
    loss_impl(params, batch, Some(dropout))
}

fn loss_impl<T: Scalar>(params: &ModelParams<T>, batch: &Batch, mut dropout: Option<&mut Rng>) -> Result<T> {
    let cfg = &params.config;
    check_tokens(cfg, batch)?;
    let count = loss_bearing_count(cfg, batch);
    if count == 0 {
        return Err(Error::Degenerate("batch has no loss-bearing tokens".into()));
    }
    let mut total = T::zero();
    for i in 0..batch.len() {
        let (inputs, tg) = targets(cfg, batch, i);
        let tr = params.trace_unchecked(&inputs, dropout.as_deref_mut());
        for &(pos, target) in &tg {
            let row = tr.logits.row(pos);
            let (max, lse) = log_softmax_row(row);
            total += max + lse - row[target];
        }
    }
    Ok(total / T::lit(count as f64))
}

/// Exact gradient of [`forward_loss`] with respect to every parameter. With a
/// dropout stream, the gradient of the dropout-realised loss.
pub fn gradient<T: Scalar>(
    params: &ModelParams<T>,
    batch: &Batch,
    mut dropout: Option<&mut Rng>,
) -> Result<GradientUpdate<T>> {
    let cfg = &params.config;
    check_tokens(cfg, batch)?;
    let count = loss_bearing_count(cfg, batch);
    if count == 0 {
        return Err(Error::Degenerate("batch has no loss-bearing tokens".into()));
    }
    let inv_count = T::lit(1.0 / count as f64);
    let mut grads = ModelParams::zeros(cfg)?;
    for i in 0..batch.len() {
        let (inputs, tg) = targets(cfg, batch, i);
        let tr = params.trace_unchecked(&inputs, dropout.as_deref_mut());
        let mut dlogits = Matrix::zeros(tr.logits.rows(), tr.logits.cols());
        for &(pos, target) in &tg {
            let row = tr.logits.row(pos);
            let (max, lse) = log_softmax_row(row);
            let out = dlogits.row_mut(pos);
            for (o, &l) in out.iter_mut().zip(row) {
                *o = (l - max - lse).exp() * inv_count;
            }
            out[target] -= inv_count;
        }
        backward(params, &tr, &dlogits, &mut grads);
    }
    Ok(GradientUpdate {
        grads,
        token_count: count,
    })
}

fn backward<T: Scalar>(params: &ModelParams<T>, tr: &SequenceTrace<T>, dlogits: &Matrix<T>, g: &mut ModelParams<T>) {
    let cfg = &params.config;
    let s = tr.inputs.len();
    let d = cfg.d_model;
    let nh = cfg.n_heads;
    let dk = cfg.head_dim();
    let inv_sqrt_dk = T::lit(1.0 / (dk as f64).sqrt());
    let causal = cfg.task == Task::Causal;

    // decoder
    if let Some(db) = &mut g.decoder_bias {
        for i in 0..s {
            for (a, &v) in db.iter_mut().zip(dlogits.row(i)) {
                *a += v;
            }
        }
    }
    let dec = params.decoder_matrix();
    match &mut g.decoder_weight {
        Some(dw) => gemm_into(dlogits, &tr.final_hidden, Transpose::Yes, Transpose::No, dw),
        None => gemm_into(
            dlogits,
            &tr.final_hidden,
            Transpose::Yes,
            Transpose::No,
            &mut g.token_embedding,
        ),
    }
    let mut dh = Matrix::zeros(s, d);
    gemm_into(dlogits, dec, Transpose::No, Transpose::No, &mut dh);
    let mut dx = layer_norm_backward(&dh, &tr.lnf, &params.lnf_scale, &mut g.lnf_scale, &mut g.lnf_shift);

    for (l, (bp, bt)) in params.blocks.iter().zip(&tr.blocks).enumerate().rev() {
        let gb = &mut g.blocks[l];
        // FFN sub-layer: x2 = x1 + drop(W2 act(W1 LN2(x1)))
        let mut df = dx.clone();
        if let Some(m) = &bt.ffn_drop {
            for (a, &b) in df.as_mut_slice().iter_mut().zip(m.as_slice()) {
                *a *= b;
            }
        }
        let mut dz = linear_backward(&df, &bt.ffn_act, &bp.w2, &mut gb.w2, &mut gb.b2);
        for (a, &y) in dz.as_mut_slice().iter_mut().zip(bt.ffn_preact.as_slice()) {
            *a *= activate_grad(cfg.activation, y);
        }
        let dc = linear_backward(&dz, &bt.ffn_input, &bp.w1, &mut gb.w1, &mut gb.b1);
        let dx1 = layer_norm_backward(&dc, &bt.ln2, &bp.ln2_scale, &mut gb.ln2_scale, &mut gb.ln2_shift);
        dx.add_assign(&dx1).expect("same shape");

        // attention sub-layer: x1 = x + Wo heads(LN1(x))
        let dho = linear_backward(&dx, &bt.head_out, &bp.wo, &mut gb.wo, &mut gb.bo);
        let mut dq = Matrix::zeros(s, d);
        let mut dkm = Matrix::zeros(s, d);
        let mut dv = Matrix::zeros(s, d);
        let mut dp = vec![T::zero(); s];
        for h in 0..nh {
            let cols = h * dk..(h + 1) * dk;
            let pm = &bt.attn_probs[h];
            let mask = bt.attn_drop.as_ref().map(|m| &m[h]);
            for i in 0..s {
                let last = if causal { i + 1 } else { s };
                let doi = &dho.row(i)[cols.clone()];
                // dP[i][j] = dO_i . V_j (times dropout multiplier)
                for j in 0..last {
                    let mut v = crate::numkernel::dot(doi, &bt.v.row(j)[cols.clone()]);
                    let mut w = pm[(i, j)];
                    if let Some(m) = mask {
                        v *= m[(i, j)];
                        w *= m[(i, j)];
                    }
                    dp[j] = v;
                    if w != T::zero() {
                        let dvj = &mut dv.row_mut(j)[cols.clone()];
                        for (a, &b) in dvj.iter_mut().zip(doi) {
                            *a += w * b;
                        }
                    }
                }
                let mut inner = T::zero();
                for j in 0..last {
                    inner += pm[(i, j)] * dp[j];
                }
                for j in 0..last {
                    let ds = pm[(i, j)] * (dp[j] - inner) * inv_sqrt_dk;
                    if ds == T::zero() {
                        continue;
                    }
                    let kj: Vec<T> = bt.k.row(j)[cols.clone()].to_vec();
                    let qi: Vec<T> = bt.q.row(i)[cols.clone()].to_vec();
                    for (a, &b) in dq.row_mut(i)[cols.clone()].iter_mut().zip(&kj) {
                        *a += ds * b;
                    }
                    for (a, &b) in dkm.row_mut(j)[cols.clone()].iter_mut().zip(&qi) {
                        *a += ds * b;
                    }
                }
            }
        }
        let mut da = linear_backward(&dq, &bt.attn_input, &bp.wq, &mut gb.wq, &mut gb.bq);
        da.add_assign(&linear_backward(&dkm, &bt.attn_input, &bp.wk, &mut gb.wk, &mut gb.bk))
            .expect("same shape");
        da.add_assign(&linear_backward(&dv, &bt.attn_input, &bp.wv, &mut gb.wv, &mut gb.bv))
            .expect("same shape");
        let dxa = layer_norm_backward(&da, &bt.ln1, &bp.ln1_scale, &mut gb.ln1_scale, &mut gb.ln1_shift);
        dx.add_assign(&dxa).expect("same shape");
    }

    for (i, &t) in tr.inputs.iter().enumerate() {
        let row = dx.row(i);
        for (a, &b) in g.token_embedding.row_mut(t).iter_mut().zip(row) {
            *a += b;
        }
        for (a, &b) in g.positional_embedding.row_mut(i).iter_mut().zip(row) {
            *a += b;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, TokenSequence};

    fn tiny(task: Task) -> ModelConfig {
        ModelConfig {
            vocab_size: 12,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            ffn_width: 6,
            max_positions: 8,
            task,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn zeroed_decoder_gives_log_vocab_loss() {
        let cfg = tiny(Task::Causal);
        let mut p = ModelParams::<f64>::init(&cfg, &mut Rng::new(1)).unwrap();
        p.decoder_weight.as_mut().unwrap().fill(0.0);
        p.decoder_bias.as_mut().unwrap().iter_mut().for_each(|b| *b = 0.0);
        let batch = Batch::causal(vec![TokenSequence(vec![1, 5, 3, 7])]);
        let loss = forward_loss(&p, &batch).unwrap();
        assert!((loss - (12f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        for task in [Task::Causal, Task::Masked] {
            let p = ModelParams::<f64>::init(&tiny(task), &mut Rng::new(2)).unwrap();
            let tr = p.trace(&[3, 1, 4, 1, 5], None).unwrap();
            for b in &tr.blocks {
                for pm in &b.attn_probs {
                    for i in 0..pm.rows() {
                        let s: f64 = pm.row(i).iter().sum();
                        assert!((s - 1.0).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn out_of_vocab_rejected() {
        let p = ModelParams::<f64>::init(&tiny(Task::Causal), &mut Rng::new(2)).unwrap();
        let batch = Batch::causal(vec![TokenSequence(vec![1, 12])]);
        assert!(forward_loss(&p, &batch).is_err());
        assert!(gradient(&p, &batch, None).is_err());
    }

    #[test]
    fn masked_without_masks_rejected() {
        let p = ModelParams::<f64>::init(&tiny(Task::Masked), &mut Rng::new(2)).unwrap();
        let seqs = vec![TokenSequence(vec![4, 5, 6])];
        let no_positions = Batch::masked(seqs.clone(), vec![vec![]]);
        assert!(matches!(gradient(&p, &no_positions, None), Err(Error::Degenerate(_))));
        assert!(gradient(&p, &Batch::causal(seqs), None).is_err());
    }

    #[test]
    fn batch_order_does_not_change_loss() {
        let p = ModelParams::<f64>::init(&tiny(Task::Causal), &mut Rng::new(3)).unwrap();
        let a = TokenSequence(vec![1, 2, 3, 4]);
        let b = TokenSequence(vec![9, 8, 7, 6]);
        let l1 = forward_loss(&p, &Batch::causal(vec![a.clone(), b.clone()])).unwrap();
        let l2 = forward_loss(&p, &Batch::causal(vec![b, a])).unwrap();
        assert!((l1 - l2).abs() < 1e-14);
    }

    #[test]
    fn duplicated_batch_gives_same_gradient() {
        let p = ModelParams::<f64>::init(&tiny(Task::Causal), &mut Rng::new(3)).unwrap();
        let a = TokenSequence(vec![1, 2, 3, 4]);
        let b = TokenSequence(vec![9, 8, 7, 6]);
        let g1 = gradient(&p, &Batch::causal(vec![a.clone(), b.clone()]), None).unwrap();
        let g2 = gradient(&p, &Batch::causal(vec![a.clone(), b.clone(), a, b]), None).unwrap();
        for (x, y) in g1.grads.to_flat().iter().zip(g2.grads.to_flat()) {
            assert!((x - y).abs() < 1e-14);
        }
        assert_eq!(g2.token_count, 2 * g1.token_count);
    }

    #[test]
    fn dead_feedforward_leaves_w1_without_gradient() {
        let cfg = tiny(Task::Causal);
        let mut p = ModelParams::<f64>::init(&cfg, &mut Rng::new(6)).unwrap();
        for b in &mut p.blocks {
            b.wo.fill(0.0);
            b.w2.fill(0.0);
        }
        let g = gradient(&p, &Batch::causal(vec![TokenSequence(vec![1, 2, 3, 4, 5])]), None).unwrap();
        for b in &g.grads.blocks {
            assert!(b.w1.as_slice().iter().all(|&x| x == 0.0));
            assert!(b.b1.iter().all(|&x| x == 0.0));
        }
    }
}
