//! A small float64 transformer classifier used to check functional
//! equivalence, measure interpolation curves, and train toy endpoints.
//!
//! Each sample is an `S × input_dim` token matrix. Tokens are embedded, run
//! through `n_blocks` blocks of
//!
//! ```text
//! u   = W_0·MHA(x) + b_0 + 𝓘_i·x         z1 = LN1(u)   (if enabled)
//! f   = W_2·ReLU(W_1·z1 + b_1) + b_2
//! v   = f + 𝓘_out·z1                      x' = LN2(v)   (if enabled)
//! ```
//!
//! mean-pooled over the sequence and read out by a linear head. The skip
//! permutations `𝓘` are identities unless supplied.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::attention::softmax_rows;
use crate::error::{Error, Result};
use crate::graph::{apply_assignment, residual_perms, CouplingGraph, PermutationAssignment, ResidualPerms};
use crate::linalg::{permute_cols, Matrix};
use crate::weights::{names, ArchSpec, Tensor, WeightSet};

const LN_EPS: f64 = 1e-5;

/// `N` sequences of `S` tokens with one class label each.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalBatch {
    n: usize,
    seq_len: usize,
    input_dim: usize,
    inputs: Vec<f64>,
    targets: Vec<usize>,
}

impl EvalBatch {
    pub fn new(
        n: usize,
        seq_len: usize,
        input_dim: usize,
        inputs: Vec<f64>,
        targets: Vec<usize>,
    ) -> Result<Self> {
        if n == 0 || seq_len == 0 || input_dim == 0 {
            return Err(Error::InvalidArgument("empty evaluation batch".into()));
        }
        if inputs.len() != n * seq_len * input_dim {
            return Err(Error::shape(
                "inputs",
                format!("expected {} values", n * seq_len * input_dim),
            ));
        }
        if targets.len() != n {
            return Err(Error::shape("targets", format!("expected {n} labels")));
        }
        if let Some(index) = inputs.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                name: "inputs".into(),
                index,
            });
        }
        Ok(EvalBatch {
            n,
            seq_len,
            input_dim,
            inputs,
            targets,
        })
    }

    /// Standard-normal inputs with all-zero labels.
    pub fn random_inputs(n: usize, seq_len: usize, input_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = (0..n * seq_len * input_dim)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        EvalBatch {
            n,
            seq_len,
            input_dim,
            inputs,
            targets: vec![0; n],
        }
    }

    /// Gaussian inputs labelled by a random linear teacher on the
    /// sequence-mean token, so the task is linearly separable.
    pub fn synthetic(n: usize, seq_len: usize, input_dim: usize, classes: usize, seed: u64) -> Self {
        let mut batch = Self::random_inputs(n, seq_len, input_dim, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7eac_4e7);
        let teacher: Vec<f64> = (0..classes * input_dim)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        for i in 0..n {
            let x = batch.sample(i);
            let mean: Vec<f64> = (0..input_dim)
                .map(|d| (0..seq_len).map(|t| x[(t, d)]).sum::<f64>() / seq_len as f64)
                .collect();
            let scores = (0..classes).map(|c| {
                teacher[c * input_dim..(c + 1) * input_dim]
                    .iter()
                    .zip(&mean)
                    .map(|(w, m)| w * m)
                    .sum::<f64>()
            });
            batch.targets[i] = scores
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(&b.1))
                .map_or(0, |(c, _)| c);
        }
        batch
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    pub fn sample(&self, i: usize) -> Matrix {
        let len = self.seq_len * self.input_dim;
        Matrix::from_vec(
            self.seq_len,
            self.input_dim,
            self.inputs[i * len..(i + 1) * len].to_vec(),
        )
        .expect("sample slice has the declared shape")
    }
}

#[derive(Clone, Debug)]
struct LayerNorm {
    gain: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Clone, Debug)]
struct Block {
    wq: Matrix,
    wk: Matrix,
    wv: Matrix,
    wo: Matrix,
    bq: Vec<f64>,
    bk: Vec<f64>,
    bv: Vec<f64>,
    bo: Vec<f64>,
    ln1: Option<LayerNorm>,
    w1: Matrix,
    b1: Vec<f64>,
    w2: Matrix,
    b2: Vec<f64>,
    ln2: Option<LayerNorm>,
}

/// Dense view of a weight set; also used as the gradient accumulator.
#[derive(Clone, Debug)]
struct Params {
    arch: ArchSpec,
    embed: Matrix,
    blocks: Vec<Block>,
    head_w: Matrix,
    head_b: Vec<f64>,
}

impl Params {
    fn from_weights(ws: &WeightSet) -> Result<Self> {
        let arch = *ws.arch();
        let vec = |name: String| ws.vector(&name).map(<[f64]>::to_vec);
        let ln = |i: usize, which: u8| -> Result<Option<LayerNorm>> {
            if !arch.has_layernorm {
                return Ok(None);
            }
            Ok(Some(LayerNorm {
                gain: vec(names::ln_gain(i, which))?,
                bias: vec(names::ln_bias(i, which))?,
            }))
        };
        let blocks = (0..arch.n_blocks)
            .map(|i| {
                Ok(Block {
                    wq: ws.matrix(&names::attn_weight(i, "q"))?,
                    wk: ws.matrix(&names::attn_weight(i, "k"))?,
                    wv: ws.matrix(&names::attn_weight(i, "v"))?,
                    wo: ws.matrix(&names::attn_weight(i, "out"))?,
                    bq: vec(names::attn_bias(i, "q"))?,
                    bk: vec(names::attn_bias(i, "k"))?,
                    bv: vec(names::attn_bias(i, "v"))?,
                    bo: vec(names::attn_bias(i, "out"))?,
                    ln1: ln(i, 1)?,
                    w1: ws.matrix(&names::fc_weight(i, 1))?,
                    b1: vec(names::fc_bias(i, 1))?,
                    w2: ws.matrix(&names::fc_weight(i, 2))?,
                    b2: vec(names::fc_bias(i, 2))?,
                    ln2: ln(i, 2)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Params {
            arch,
            embed: ws.matrix(names::EMBED_WEIGHT)?,
            blocks,
            head_w: ws.matrix(names::HEAD_WEIGHT)?,
            head_b: vec(names::HEAD_BIAS.to_string())?,
        })
    }

    fn zeros_like(&self) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        let zv = |v: &[f64]| vec![0.0; v.len()];
        let zln = |ln: &Option<LayerNorm>| {
            ln.as_ref().map(|l| LayerNorm {
                gain: zv(&l.gain),
                bias: zv(&l.bias),
            })
        };
        Params {
            arch: self.arch,
            embed: z(&self.embed),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    wq: z(&b.wq),
                    wk: z(&b.wk),
                    wv: z(&b.wv),
                    wo: z(&b.wo),
                    bq: zv(&b.bq),
                    bk: zv(&b.bk),
                    bv: zv(&b.bv),
                    bo: zv(&b.bo),
                    ln1: zln(&b.ln1),
                    w1: z(&b.w1),
                    b1: zv(&b.b1),
                    w2: z(&b.w2),
                    b2: zv(&b.b2),
                    ln2: zln(&b.ln2),
                })
                .collect(),
            head_w: z(&self.head_w),
            head_b: zv(&self.head_b),
        }
    }

    fn into_weights(self) -> Result<WeightSet> {
        let mut ws = WeightSet::zeros(self.arch)?;
        let vt = |v: Vec<f64>| Tensor::new(vec![v.len()], v);
        ws.set(names::EMBED_WEIGHT, Tensor::from_matrix(self.embed))?;
        for (i, b) in self.blocks.into_iter().enumerate() {
            for (proj, w, bias) in [
                ("q", b.wq, b.bq),
                ("k", b.wk, b.bk),
                ("v", b.wv, b.bv),
                ("out", b.wo, b.bo),
            ] {
                ws.set(&names::attn_weight(i, proj), Tensor::from_matrix(w))?;
                ws.set(&names::attn_bias(i, proj), vt(bias)?)?;
            }
            for (which, ln) in [(1u8, b.ln1), (2u8, b.ln2)] {
                if let Some(ln) = ln {
                    ws.set(&names::ln_gain(i, which), vt(ln.gain)?)?;
                    ws.set(&names::ln_bias(i, which), vt(ln.bias)?)?;
                }
            }
            ws.set(&names::fc_weight(i, 1), Tensor::from_matrix(b.w1))?;
            ws.set(&names::fc_bias(i, 1), vt(b.b1)?)?;
            ws.set(&names::fc_weight(i, 2), Tensor::from_matrix(b.w2))?;
            ws.set(&names::fc_bias(i, 2), vt(b.b2)?)?;
        }
        ws.set(names::HEAD_WEIGHT, Tensor::from_matrix(self.head_w))?;
        ws.set(names::HEAD_BIAS, vt(self.head_b)?)?;
        Ok(ws)
    }
}

struct LnCache {
    xhat: Matrix,
    inv_std: Vec<f64>,
}

struct BlockCache {
    x: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    scores: Vec<Matrix>,
    attn: Matrix,
    ln1: Option<LnCache>,
    z1: Matrix,
    hpre: Matrix,
    hact: Matrix,
    ln2: Option<LnCache>,
}

struct SampleCache {
    tokens: Matrix,
    blocks: Vec<BlockCache>,
    pooled: Vec<f64>,
    logits: Vec<f64>,
}

fn add_bias(m: &mut Matrix, b: &[f64]) {
    for i in 0..m.rows() {
        for (x, bv) in m.row_mut(i).iter_mut().zip(b) {
            *x += bv;
        }
    }
}

fn col_sums_into(acc: &mut [f64], m: &Matrix) {
    for i in 0..m.rows() {
        for (a, x) in acc.iter_mut().zip(m.row(i)) {
            *a += x;
        }
    }
}

fn layer_norm(u: &Matrix, ln: &LayerNorm) -> (Matrix, LnCache) {
    let (s, d) = u.shape();
    let mut xhat = Matrix::zeros(s, d);
    let mut out = Matrix::zeros(s, d);
    let mut inv_std = Vec::with_capacity(s);
    for t in 0..s {
        let row = u.row(t);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(is);
        for j in 0..d {
            let xh = (row[j] - mean) * is;
            xhat[(t, j)] = xh;
            out[(t, j)] = xh * ln.gain[j] + ln.bias[j];
        }
    }
    (out, LnCache { xhat, inv_std })
}

fn layer_norm_backward(dy: &Matrix, cache: &LnCache, ln: &LayerNorm, grad: &mut LayerNorm) -> Matrix {
    let (s, d) = dy.shape();
    let mut dx = Matrix::zeros(s, d);
    for t in 0..s {
        let dyr = dy.row(t);
        let xh = cache.xhat.row(t);
        let mut dxhat = vec![0.0; d];
        for j in 0..d {
            grad.gain[j] += dyr[j] * xh[j];
            grad.bias[j] += dyr[j];
            dxhat[j] = dyr[j] * ln.gain[j];
        }
        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        for j in 0..d {
            dx[(t, j)] = cache.inv_std[t] * (dxhat[j] - mean_d - xh[j] * mean_dx);
        }
    }
    dx
}

fn forward_sample(
    params: &Params,
    tokens: Matrix,
    residual: Option<&[ResidualPerms]>,
) -> Result<SampleCache> {
    let heads = params.arch.n_heads;
    let dk = params.arch.head_dim();
    let scale = 1.0 / (dk as f64).sqrt();
    let s = tokens.rows();
    let mut x = tokens.matmul_t(&params.embed)?;
    let mut caches = Vec::with_capacity(params.blocks.len());

    for (bi, b) in params.blocks.iter().enumerate() {
        let mut q = x.matmul_t(&b.wq)?;
        add_bias(&mut q, &b.bq);
        let mut k = x.matmul_t(&b.wk)?;
        add_bias(&mut k, &b.bk);
        let mut v = x.matmul_t(&b.wv)?;
        add_bias(&mut v, &b.bv);

        let mut attn = Matrix::zeros(s, params.arch.embed_dim);
        let mut scores = Vec::with_capacity(heads);
        for h in 0..heads {
            let (lo, hi) = (h * dk, (h + 1) * dk);
            let mut a = q.col_block(lo, hi).matmul_t(&k.col_block(lo, hi))?.scale(scale);
            softmax_rows(&mut a);
            let o = a.matmul(&v.col_block(lo, hi))?;
            for t in 0..s {
                attn.row_mut(t)[lo..hi].copy_from_slice(o.row(t));
            }
            scores.push(a);
        }

        let mut u = attn.matmul_t(&b.wo)?;
        add_bias(&mut u, &b.bo);
        match residual {
            Some(r) => u.add_assign(&permute_cols(&x, &r[bi].first)?),
            None => u.add_assign(&x),
        }
        let (z1, ln1) = match &b.ln1 {
            Some(ln) => {
                let (y, c) = layer_norm(&u, ln);
                (y, Some(c))
            }
            None => (u, None),
        };

        let mut hpre = z1.matmul_t(&b.w1)?;
        add_bias(&mut hpre, &b.b1);
        let hact = Matrix::from_fn(hpre.rows(), hpre.cols(), |i, j| hpre[(i, j)].max(0.0));
        let mut out = hact.matmul_t(&b.w2)?;
        add_bias(&mut out, &b.b2);
        match residual {
            Some(r) => out.add_assign(&permute_cols(&z1, &r[bi].second)?),
            None => out.add_assign(&z1),
        }
        let (next, ln2) = match &b.ln2 {
            Some(ln) => {
                let (y, c) = layer_norm(&out, ln);
                (y, Some(c))
            }
            None => (out, None),
        };
        if !next.is_finite() {
            return Err(Error::NonFiniteActivation { block: bi });
        }
        caches.push(BlockCache {
            x: std::mem::replace(&mut x, next),
            q,
            k,
            v,
            scores,
            attn,
            ln1,
            z1,
            hpre,
            hact,
            ln2,
        });
    }

    let dm = params.arch.embed_dim;
    let pooled: Vec<f64> = (0..dm)
        .map(|j| (0..s).map(|t| x[(t, j)]).sum::<f64>() / s as f64)
        .collect();
    let logits: Vec<f64> = (0..params.arch.output_dim)
        .map(|c| {
            params.head_w.row(c).iter().zip(&pooled).map(|(w, p)| w * p).sum::<f64>()
                + params.head_b[c]
        })
        .collect();
    Ok(SampleCache {
        tokens,
        blocks: caches,
        pooled,
        logits,
    })
}

fn backward_sample(params: &Params, cache: &SampleCache, dlogits: &[f64], grad: &mut Params) -> Result<()> {
    let heads = params.arch.n_heads;
    let dk = params.arch.head_dim();
    let scale = 1.0 / (dk as f64).sqrt();
    let dm = params.arch.embed_dim;
    let s = cache.tokens.rows();

    let mut dpooled = vec![0.0; dm];
    for (c, &g) in dlogits.iter().enumerate() {
        grad.head_b[c] += g;
        for j in 0..dm {
            grad.head_w[(c, j)] += g * cache.pooled[j];
            dpooled[j] += g * params.head_w[(c, j)];
        }
    }
    let mut dx = Matrix::from_fn(s, dm, |_, j| dpooled[j] / s as f64);

    for (bi, bc) in cache.blocks.iter().enumerate().rev() {
        let b = &params.blocks[bi];
        let gb = &mut grad.blocks[bi];
        let dv = match (&b.ln2, &bc.ln2, gb.ln2.as_mut()) {
            (Some(ln), Some(c), Some(g)) => layer_norm_backward(&dx, c, ln, g),
            _ => dx,
        };
        gb.w2.add_assign(&dv.t_matmul(&bc.hact)?);
        col_sums_into(&mut gb.b2, &dv);
        let dhact = dv.matmul(&b.w2)?;
        let dhpre = Matrix::from_fn(dhact.rows(), dhact.cols(), |i, j| {
            if bc.hpre[(i, j)] > 0.0 {
                dhact[(i, j)]
            } else {
                0.0
            }
        });
        gb.w1.add_assign(&dhpre.t_matmul(&bc.z1)?);
        col_sums_into(&mut gb.b1, &dhpre);
        let mut dz1 = dv;
        dz1.add_assign(&dhpre.matmul(&b.w1)?);
        let du = match (&b.ln1, &bc.ln1, gb.ln1.as_mut()) {
            (Some(ln), Some(c), Some(g)) => layer_norm_backward(&dz1, c, ln, g),
            _ => dz1,
        };

        gb.wo.add_assign(&du.t_matmul(&bc.attn)?);
        col_sums_into(&mut gb.bo, &du);
        let dattn = du.matmul(&b.wo)?;
        let mut dq = Matrix::zeros(s, dm);
        let mut dk_m = Matrix::zeros(s, dm);
        let mut dvv = Matrix::zeros(s, dm);
        for h in 0..heads {
            let (lo, hi) = (h * dk, (h + 1) * dk);
            let a = &bc.scores[h];
            let (qh, kh, vh) = (bc.q.col_block(lo, hi), bc.k.col_block(lo, hi), bc.v.col_block(lo, hi));
            let doh = dattn.col_block(lo, hi);
            let da = doh.matmul_t(&vh)?;
            let dvh = a.t_matmul(&doh)?;
            let mut ds = Matrix::zeros(s, s);
            for t in 0..s {
                let row_dot: f64 = a.row(t).iter().zip(da.row(t)).map(|(x, y)| x * y).sum();
                for u in 0..s {
                    ds[(t, u)] = a[(t, u)] * (da[(t, u)] - row_dot) * scale;
                }
            }
            let dqh = ds.matmul(&kh)?;
            let dkh = ds.t_matmul(&qh)?;
            for t in 0..s {
                dq.row_mut(t)[lo..hi].copy_from_slice(dqh.row(t));
                dk_m.row_mut(t)[lo..hi].copy_from_slice(dkh.row(t));
                dvv.row_mut(t)[lo..hi].copy_from_slice(dvh.row(t));
            }
        }
        let mut dx_prev = du;
        for (dproj, w, gw, gbias) in [
            (&dq, &b.wq, &mut gb.wq, &mut gb.bq),
            (&dk_m, &b.wk, &mut gb.wk, &mut gb.bk),
            (&dvv, &b.wv, &mut gb.wv, &mut gb.bv),
        ] {
            gw.add_assign(&dproj.t_matmul(&bc.x)?);
            col_sums_into(gbias, dproj);
            dx_prev.add_assign(&dproj.matmul(w)?);
        }
        dx = dx_prev;
    }
    grad.embed.add_assign(&dx.t_matmul(&cache.tokens)?);
    Ok(())
}

fn check_batch(arch: &ArchSpec, batch: &EvalBatch, labels: bool) -> Result<()> {
    if batch.input_dim() != arch.input_dim {
        return Err(Error::DimensionMismatch(format!(
            "batch input_dim {} but model expects {}",
            batch.input_dim(),
            arch.input_dim
        )));
    }
    if labels {
        if let Some(&l) = batch.targets().iter().find(|&&l| l >= arch.output_dim) {
            return Err(Error::InvalidArgument(format!(
                "label {l} out of range for {} classes",
                arch.output_dim
            )));
        }
    }
    Ok(())
}

/// Logits, one row per sequence in `batch`.
pub fn forward(
    ws: &WeightSet,
    batch: &EvalBatch,
    residual: Option<&[ResidualPerms]>,
) -> Result<Matrix> {
    let params = Params::from_weights(ws)?;
    check_batch(&params.arch, batch, false)?;
    if let Some(r) = residual {
        if r.len() != params.arch.n_blocks {
            return Err(Error::LengthMismatch {
                expected: params.arch.n_blocks,
                actual: r.len(),
            });
        }
    }
    let mut out = Matrix::zeros(batch.len(), params.arch.output_dim);
    for i in 0..batch.len() {
        let cache = forward_sample(&params, batch.sample(i), residual)?;
        out.row_mut(i).copy_from_slice(&cache.logits);
    }
    Ok(out)
}

/// Per-sample, per-block, per-head softmax score matrices.
pub fn attention_scores(
    ws: &WeightSet,
    batch: &EvalBatch,
    residual: Option<&[ResidualPerms]>,
) -> Result<Vec<Vec<Vec<Matrix>>>> {
    let params = Params::from_weights(ws)?;
    check_batch(&params.arch, batch, false)?;
    (0..batch.len())
        .map(|i| {
            let cache = forward_sample(&params, batch.sample(i), residual)?;
            Ok(cache.blocks.into_iter().map(|b| b.scores).collect())
        })
        .collect()
}

fn cross_entropy_row(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() + max - logits[label];
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    grad[label] -= 1.0;
    (loss, grad)
}

/// Mean cross-entropy over the batch.
pub fn loss(ws: &WeightSet, batch: &EvalBatch) -> Result<f64> {
    let logits = forward(ws, batch, None)?;
    check_batch(ws.arch(), batch, true)?;
    let total: f64 = (0..batch.len())
        .map(|i| cross_entropy_row(logits.row(i), batch.targets()[i]).0)
        .sum();
    Ok(total / batch.len() as f64)
}

/// Mean cross-entropy and its gradient with respect to every parameter.
pub fn loss_and_gradient(ws: &WeightSet, batch: &EvalBatch) -> Result<(f64, WeightSet)> {
    let params = Params::from_weights(ws)?;
    check_batch(&params.arch, batch, true)?;
    let mut grad = params.zeros_like();
    let n = batch.len() as f64;
    let mut total = 0.0;
    for i in 0..batch.len() {
        let cache = forward_sample(&params, batch.sample(i), None)?;
        let (l, mut g) = cross_entropy_row(&cache.logits, batch.targets()[i]);
        total += l;
        g.iter_mut().for_each(|v| *v /= n);
        backward_sample(&params, &cache, &g, &mut grad)?;
    }
    Ok((total / n, grad.into_weights()?))
}

/// Gaussian weights with standard deviation `1/√fan_in`, zero biases and unit
/// LayerNorm gains.
pub fn init_random(arch: &ArchSpec, seed: u64) -> Result<WeightSet> {
    let mut ws = WeightSet::zeros(*arch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, shape) in arch.tensor_shapes() {
        let t = ws.tensor_mut(&name)?;
        if shape.len() == 2 {
            let std = 1.0 / (shape[1] as f64).sqrt();
            for v in t.data.iter_mut() {
                *v = std * rng.sample::<f64, _>(StandardNormal);
            }
        } else if name.ends_with(".gain") {
            t.data.fill(1.0);
        }
    }
    Ok(ws)
}

/// Full-batch gradient descent on mean cross-entropy.
pub fn train_toy(ws: &WeightSet, batch: &EvalBatch, steps: usize, lr: f64) -> Result<WeightSet> {
    let mut current = ws.clone();
    for step in 0..steps {
        let (l, grad) = loss_and_gradient(&current, batch)?;
        if !l.is_finite() {
            return Err(Error::Diverged { step });
        }
        current = current.zip_with(&grad, |w, g| w - lr * g)?;
    }
    Ok(current)
}

/// Losses along the straight line between two weight sets.
#[derive(Clone, Debug, PartialEq)]
pub struct LmcCurve {
    pub alphas: Vec<f64>,
    pub losses: Vec<f64>,
}

impl LmcCurve {
    pub fn midpoint_loss(&self) -> f64 {
        let n = self.losses.len();
        if n % 2 == 1 {
            self.losses[n / 2]
        } else {
            0.5 * (self.losses[n / 2 - 1] + self.losses[n / 2])
        }
    }

    pub fn endpoint_mean(&self) -> f64 {
        0.5 * (self.losses[0] + self.losses[self.losses.len() - 1])
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("alpha,loss\n");
        for (a, l) in self.alphas.iter().zip(&self.losses) {
            out.push_str(&format!("{a},{l}\n"));
        }
        out
    }
}

/// Loss of `(1 − α)·left + α·right` on an evenly spaced grid over `[0, 1]`.
pub fn lmc_curve(left: &WeightSet, right: &WeightSet, batch: &EvalBatch, n_points: usize) -> Result<LmcCurve> {
    if n_points < 2 {
        return Err(Error::InvalidArgument(format!(
            "an interpolation curve needs at least 2 points, got {n_points}"
        )));
    }
    left.ensure_same_arch(right)?;
    let mut alphas = Vec::with_capacity(n_points);
    let mut losses = Vec::with_capacity(n_points);
    for i in 0..n_points {
        let alpha = i as f64 / (n_points - 1) as f64;
        let l = if i == 0 {
            loss(left, batch)?
        } else if i == n_points - 1 {
            loss(right, batch)?
        } else {
            loss(&left.interpolate(right, alpha)?, batch)?
        };
        alphas.push(alpha);
        losses.push(l);
    }
    Ok(LmcCurve { alphas, losses })
}

#[derive(Clone, Copy, Debug)]
pub struct EquivalenceOptions {
    pub n_samples: usize,
    pub seq_len: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for EquivalenceOptions {
    fn default() -> Self {
        EquivalenceOptions {
            n_samples: 16,
            seq_len: 8,
            tol: 1e-8,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EquivalenceReport {
    pub max_dev: f64,
    pub pass: bool,
}

/// Compares outputs of `ws` and its permuted copy on random inputs, using the
/// skip handling of the graph's residual mode.
pub fn verify_equivalence(
    ws: &WeightSet,
    graph: &CouplingGraph,
    a: &PermutationAssignment,
    opts: &EquivalenceOptions,
) -> Result<EquivalenceReport> {
    let batch = EvalBatch::random_inputs(opts.n_samples, opts.seq_len, ws.arch().input_dim, opts.seed);
    let permuted = apply_assignment(ws, graph, a)?;
    let skips = residual_perms(graph, a)?;
    let before = forward(ws, &batch, None)?;
    let after = forward(&permuted, &batch, skips.as_deref())?;
    let max_dev = before.max_abs_diff(&after);
    Ok(EquivalenceReport {
        max_dev,
        pass: max_dev <= opts.tol,
    })
}
