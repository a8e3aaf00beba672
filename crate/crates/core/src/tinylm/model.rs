//! Forward pass and hand-written backward pass of the decoder.

use super::config::ExpertConfig;
use super::params::{lit, LayerOffsets, ModelParams, ParamLayout, Scalar};
use super::ModelError;
use crate::corpus::{Batch, TokenId};

/// `out[m,n] = a[m,k] · b[k,n]`
fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for (a_row, o_row) in a.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
        for (&av, b_row) in a_row.iter().zip(b.chunks_exact(n)) {
            if av == T::zero() {
                continue;
            }
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `out[k,n] += a[m,k]ᵀ · g[m,n]`
fn matmul_tn_acc<T: Scalar>(a: &[T], g: &[T], out: &mut [T], k: usize, n: usize) {
    for (a_row, g_row) in a.chunks_exact(k).zip(g.chunks_exact(n)) {
        for (&av, o_row) in a_row.iter().zip(out.chunks_exact_mut(n)) {
            if av == T::zero() {
                continue;
            }
            for (o, &gv) in o_row.iter_mut().zip(g_row) {
                *o += av * gv;
            }
        }
    }
}

/// `out[m,k] = g[m,n] · w[k,n]ᵀ`
fn matmul_nt<T: Scalar>(g: &[T], w: &[T], k: usize, n: usize) -> Vec<T> {
    let m = g.len() / n;
    let mut out = Vec::with_capacity(m * k);
    for g_row in g.chunks_exact(n) {
        for w_row in w.chunks_exact(n) {
            out.push(dot(g_row, w_row));
        }
    }
    out
}

/// Dot product with independent partial sums so the loop vectorizes.
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail = ca.remainder().iter().zip(cb.remainder()).fold(T::zero(), |s, (&x, &y)| s + x * y);
    for (xa, xb) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += xa[i] * xb[i];
        }
    }
    acc.iter().fold(tail, |s, &x| s + x)
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Returns normalized rows and the per-row inverse RMS.
fn rmsnorm<T: Scalar>(x: &[T], gain: &[T], eps: T) -> (Vec<T>, Vec<T>) {
    let h = gain.len();
    let hn: T = lit(h as f64);
    let mut out = Vec::with_capacity(x.len());
    let mut inv = Vec::with_capacity(x.len() / h);
    for row in x.chunks_exact(h) {
        let ms = row.iter().map(|&v| v * v).sum::<T>() / hn;
        let s = (ms + eps).sqrt().recip();
        inv.push(s);
        out.extend(row.iter().zip(gain).map(|(&v, &g)| v * s * g));
    }
    (out, inv)
}

/// Accumulates the gain gradient and returns the input gradient.
fn rmsnorm_backward<T: Scalar>(
    x: &[T],
    inv: &[T],
    gain: &[T],
    dy: &[T],
    dgain: &mut [T],
) -> Vec<T> {
    let h = gain.len();
    let hn: T = lit(h as f64);
    let mut dx = Vec::with_capacity(x.len());
    for ((row, dy_row), &s) in x.chunks_exact(h).zip(dy.chunks_exact(h)).zip(inv) {
        let mut dot = T::zero();
        for j in 0..h {
            dgain[j] += dy_row[j] * row[j] * s;
            dot += dy_row[j] * gain[j] * row[j];
        }
        let coef = s * s * s * dot / hn;
        dx.extend((0..h).map(|j| s * dy_row[j] * gain[j] - coef * row[j]));
    }
    dx
}

fn sigmoid<T: Scalar>(z: T) -> T {
    (T::one() + (-z).exp()).recip()
}

/// Rotary tables indexed `[position][pair]`.
struct Rope<T> {
    cos: Vec<T>,
    sin: Vec<T>,
    pairs: usize,
}

impl<T: Scalar> Rope<T> {
    fn new(config: &ExpertConfig, positions: usize) -> Self {
        let d = config.head_dim();
        let pairs = d / 2;
        let mut cos = Vec::with_capacity(positions * pairs);
        let mut sin = Vec::with_capacity(positions * pairs);
        for t in 0..positions {
            for j in 0..pairs {
                let freq = config.rope_theta.powf(-2.0 * j as f64 / d as f64);
                let angle = t as f64 * freq;
                cos.push(lit(angle.cos()));
                sin.push(lit(angle.sin()));
            }
        }
        Self { cos, sin, pairs }
    }

    /// Rotates every head of every row in place; `inverse` applies the transpose.
    fn apply(&self, x: &mut [T], hidden: usize, seq_len: usize, inverse: bool) {
        let d = 2 * self.pairs;
        for (r, row) in x.chunks_exact_mut(hidden).enumerate() {
            let t = r % seq_len;
            let (c, s) = (&self.cos[t * self.pairs..], &self.sin[t * self.pairs..]);
            for head in row.chunks_exact_mut(d) {
                for j in 0..self.pairs {
                    let (a, b) = (head[2 * j], head[2 * j + 1]);
                    let (cj, sj) = (c[j], if inverse { -s[j] } else { s[j] });
                    head[2 * j] = a * cj - b * sj;
                    head[2 * j + 1] = a * sj + b * cj;
                }
            }
        }
    }
}

struct LayerCache<T> {
    x_in: Vec<T>,
    inv1: Vec<T>,
    a: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// `[batch, head, t, u]`, zero above the diagonal.
    probs: Vec<T>,
    o: Vec<T>,
    x_mid: Vec<T>,
    inv2: Vec<T>,
    b: Vec<T>,
    gate: Vec<T>,
    up: Vec<T>,
    act: Vec<T>,
}

struct ForwardCache<T> {
    layers: Vec<LayerCache<T>>,
    x_final: Vec<T>,
    inv_final: Vec<T>,
    y: Vec<T>,
    rope: Rope<T>,
}

/// Per-position logits, laid out `[batch, positions, vocab]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits<T = f32> {
    pub batch: usize,
    pub positions: usize,
    pub vocab: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Logits<T> {
    pub fn row(&self, b: usize, t: usize) -> &[T] {
        let start = (b * self.positions + t) * self.vocab;
        &self.data[start..start + self.vocab]
    }
}

fn check_tokens(config: &ExpertConfig, tokens: &[TokenId], seq_len: usize) -> Result<(), ModelError> {
    if seq_len == 0 {
        return Err(ModelError::EmptySequence);
    }
    if seq_len > config.seq_len {
        return Err(ModelError::SequenceTooLong {
            len: seq_len,
            max: config.seq_len,
        });
    }
    if let Some(&tok) = tokens.iter().find(|&&t| t as usize >= config.vocab_size) {
        return Err(ModelError::TokenOutOfRange {
            token: tok,
            vocab: config.vocab_size,
        });
    }
    Ok(())
}

fn forward_cached<T: Scalar>(
    config: &ExpertConfig,
    layout: &ParamLayout,
    params: &ModelParams<T>,
    tokens: &[TokenId],
    seq_len: usize,
) -> (Vec<T>, ForwardCache<T>) {
    let (h, im, nh) = (config.hidden_size, config.intermediate_size, config.num_heads);
    let d = config.head_dim();
    let rows = tokens.len();
    let batch = rows / seq_len;
    let w = &params.data;
    let eps: T = lit(config.norm_eps);
    let scale: T = lit(1.0 / (d as f64).sqrt());
    let rope = Rope::new(config, seq_len);

    let embed = &w[layout.embed..layout.embed + config.vocab_size * h];
    let mut x = Vec::with_capacity(rows * h);
    for &tok in tokens {
        let t = tok as usize;
        x.extend_from_slice(&embed[t * h..(t + 1) * h]);
    }

    let mut layers = Vec::with_capacity(config.num_layers);
    for lo in &layout.layers {
        let LayerOffsets {
            attn_norm,
            wq,
            wk,
            wv,
            wo,
            ffn_norm,
            gate,
            up,
            down,
        } = *lo;
        let x_in = x;
        let (a, inv1) = rmsnorm(&x_in, &w[attn_norm..attn_norm + h], eps);
        let mut q = matmul(&a, &w[wq..wq + h * h], rows, h, h);
        let mut k = matmul(&a, &w[wk..wk + h * h], rows, h, h);
        let v = matmul(&a, &w[wv..wv + h * h], rows, h, h);
        rope.apply(&mut q, h, seq_len, false);
        rope.apply(&mut k, h, seq_len, false);

        let mut probs = vec![T::zero(); batch * nh * seq_len * seq_len];
        let mut o = vec![T::zero(); rows * h];
        for bi in 0..batch {
            for head in 0..nh {
                let p_base = (bi * nh + head) * seq_len * seq_len;
                let col = head * d;
                for t in 0..seq_len {
                    let qr = &q[(bi * seq_len + t) * h + col..][..d];
                    let prow = &mut probs[p_base + t * seq_len..][..seq_len];
                    let mut max = T::neg_infinity();
                    for u in 0..=t {
                        let kr = &k[(bi * seq_len + u) * h + col..][..d];
                        let s = dot(qr, kr) * scale;
                        prow[u] = s;
                        max = max.max(s);
                    }
                    let mut z = T::zero();
                    for p in &mut prow[..=t] {
                        *p = (*p - max).exp();
                        z += *p;
                    }
                    let orow = &mut o[(bi * seq_len + t) * h + col..][..d];
                    for u in 0..=t {
                        prow[u] = prow[u] / z;
                        let vr = &v[(bi * seq_len + u) * h + col..][..d];
                        for (oo, &vv) in orow.iter_mut().zip(vr) {
                            *oo += prow[u] * vv;
                        }
                    }
                }
            }
        }
        let attn = matmul(&o, &w[wo..wo + h * h], rows, h, h);
        let mut x_mid = x_in.clone();
        add_into(&mut x_mid, &attn);

        let (b, inv2) = rmsnorm(&x_mid, &w[ffn_norm..ffn_norm + h], eps);
        let g = matmul(&b, &w[gate..gate + h * im], rows, h, im);
        let u = matmul(&b, &w[up..up + h * im], rows, h, im);
        let act: Vec<T> = g.iter().zip(&u).map(|(&z, &uu)| z * sigmoid(z) * uu).collect();
        let f = matmul(&act, &w[down..down + im * h], rows, im, h);
        x = x_mid.clone();
        add_into(&mut x, &f);

        layers.push(LayerCache {
            x_in,
            inv1,
            a,
            q,
            k,
            v,
            probs,
            o,
            x_mid,
            inv2,
            b,
            gate: g,
            up: u,
            act,
        });
    }

    let (y, inv_final) = rmsnorm(&x, &w[layout.final_norm..layout.final_norm + h], eps);
    let logits = matmul_nt(&y, embed, config.vocab_size, h);
    (
        logits,
        ForwardCache {
            layers,
            x_final: x,
            inv_final,
            y,
            rope,
        },
    )
}

/// Runs equal-length sequences through the model; position `t` only sees
/// tokens at positions `<= t`.
pub fn forward<T: Scalar>(
    config: &ExpertConfig,
    params: &ModelParams<T>,
    sequences: &[Vec<TokenId>],
) -> Result<Logits<T>, ModelError> {
    let seq_len = sequences.first().map_or(0, Vec::len);
    if sequences.iter().any(|s| s.len() != seq_len) {
        return Err(ModelError::RaggedBatch);
    }
    let flat: Vec<TokenId> = sequences.concat();
    check_tokens(config, &flat, seq_len)?;
    let layout = ParamLayout::new(config);
    check_params(&layout, params)?;
    let (data, _) = forward_cached(config, &layout, params, &flat, seq_len);
    Ok(Logits {
        batch: sequences.len(),
        positions: seq_len,
        vocab: config.vocab_size,
        data,
    })
}

fn check_params<T>(layout: &ParamLayout, params: &ModelParams<T>) -> Result<(), ModelError> {
    if params.data.len() != layout.total {
        return Err(ModelError::ParamCount {
            expected: layout.total,
            actual: params.data.len(),
        });
    }
    Ok(())
}

/// Numerically stable log-softmax, evaluated in `f64`.
pub fn log_softmax<T: Scalar>(row: &[T]) -> Vec<f64> {
    let xs: Vec<f64> = row.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + xs.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    xs.into_iter().map(|v| v - lse).collect()
}

/// Mean next-token cross-entropy over every position of the batch and its
/// exact gradient.
pub fn loss_and_grad<T: Scalar>(
    config: &ExpertConfig,
    params: &ModelParams<T>,
    batch: &Batch,
) -> Result<(f64, ModelParams<T>), ModelError> {
    let seq_len = batch.seq_len;
    check_tokens(config, &batch.inputs, seq_len)?;
    check_tokens(config, &batch.targets, seq_len)?;
    let layout = ParamLayout::new(config);
    check_params(&layout, params)?;
    let (h, im, nh, vocab) = (
        config.hidden_size,
        config.intermediate_size,
        config.num_heads,
        config.vocab_size,
    );
    let d = config.head_dim();
    let rows = batch.inputs.len();
    let nb = rows / seq_len;
    let w = &params.data;
    let (logits, cache) = forward_cached(config, &layout, params, &batch.inputs, seq_len);

    let inv_rows: T = lit(1.0 / rows as f64);
    let mut loss = 0.0f64;
    let mut dlogits = vec![T::zero(); rows * vocab];
    for ((row, drow), &target) in logits
        .chunks_exact(vocab)
        .zip(dlogits.chunks_exact_mut(vocab))
        .zip(&batch.targets)
    {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for (dv, &lv) in drow.iter_mut().zip(row) {
            *dv = (lv - max).exp();
            z += *dv;
        }
        let target = target as usize;
        let logp = row[target] - max - z.ln();
        loss -= logp.to_f64().unwrap_or(f64::NAN);
        for dv in drow.iter_mut() {
            *dv = *dv / z * inv_rows;
        }
        drow[target] -= inv_rows;
    }
    loss /= rows as f64;
    if !loss.is_finite() {
        return Err(ModelError::NonFiniteLoss { step: None });
    }

    let mut grad = ModelParams::<T>::zeros(config);
    let g = &mut grad.data;
    let e_range = layout.embed..layout.embed + vocab * h;
    let embed = &w[e_range.clone()];

    matmul_tn_acc(&dlogits, &cache.y, &mut g[e_range.clone()], vocab, h);
    let dy = matmul(&dlogits, embed, rows, vocab, h);
    let fnorm = layout.final_norm..layout.final_norm + h;
    let mut dx = {
        let (gain, dgain) = (&w[fnorm.clone()], &mut g[fnorm]);
        rmsnorm_backward(&cache.x_final, &cache.inv_final, gain, &dy, dgain)
    };

    let scale: T = lit(1.0 / (d as f64).sqrt());
    for (lo, lc) in layout.layers.iter().zip(&cache.layers).rev() {
        // Feed-forward block.
        matmul_tn_acc(&lc.act, &dx, &mut g[lo.down..lo.down + im * h], im, h);
        let dact = matmul_nt(&dx, &w[lo.down..lo.down + im * h], im, h);
        let mut dgate = Vec::with_capacity(dact.len());
        let mut dup = Vec::with_capacity(dact.len());
        for ((&da, &z), &u) in dact.iter().zip(&lc.gate).zip(&lc.up) {
            let s = sigmoid(z);
            dgate.push(da * u * s * (T::one() + z * (T::one() - s)));
            dup.push(da * z * s);
        }
        matmul_tn_acc(&lc.b, &dgate, &mut g[lo.gate..lo.gate + h * im], h, im);
        matmul_tn_acc(&lc.b, &dup, &mut g[lo.up..lo.up + h * im], h, im);
        let mut db = matmul_nt(&dgate, &w[lo.gate..lo.gate + h * im], h, im);
        add_into(&mut db, &matmul_nt(&dup, &w[lo.up..lo.up + h * im], h, im));
        let dmid = {
            let r = lo.ffn_norm..lo.ffn_norm + h;
            rmsnorm_backward(&lc.x_mid, &lc.inv2, &w[r.clone()], &db, &mut g[r])
        };
        add_into(&mut dx, &dmid);

        // Attention block.
        matmul_tn_acc(&lc.o, &dx, &mut g[lo.wo..lo.wo + h * h], h, h);
        let d_o = matmul_nt(&dx, &w[lo.wo..lo.wo + h * h], h, h);
        let mut dq = vec![T::zero(); rows * h];
        let mut dk = vec![T::zero(); rows * h];
        let mut dv = vec![T::zero(); rows * h];
        let mut dp = vec![T::zero(); seq_len];
        for bi in 0..nb {
            for head in 0..nh {
                let p_base = (bi * nh + head) * seq_len * seq_len;
                let col = head * d;
                for t in 0..seq_len {
                    let prow = &lc.probs[p_base + t * seq_len..][..seq_len];
                    let r_t = (bi * seq_len + t) * h + col;
                    let do_t = &d_o[r_t..r_t + d];
                    let mut expected = T::zero();
                    for u in 0..=t {
                        let r_u = (bi * seq_len + u) * h + col;
                        let vr = &lc.v[r_u..r_u + d];
                        dp[u] = dot(do_t, vr);
                        expected += prow[u] * dp[u];
                        for (dvv, &dd) in dv[r_u..r_u + d].iter_mut().zip(do_t) {
                            *dvv += prow[u] * dd;
                        }
                    }
                    for u in 0..=t {
                        let ds = prow[u] * (dp[u] - expected) * scale;
                        if ds == T::zero() {
                            continue;
                        }
                        let r_u = (bi * seq_len + u) * h + col;
                        for j in 0..d {
                            dq[r_t + j] += ds * lc.k[r_u + j];
                            dk[r_u + j] += ds * lc.q[r_t + j];
                        }
                    }
                }
            }
        }
        cache.rope.apply(&mut dq, h, seq_len, true);
        cache.rope.apply(&mut dk, h, seq_len, true);
        matmul_tn_acc(&lc.a, &dq, &mut g[lo.wq..lo.wq + h * h], h, h);
        matmul_tn_acc(&lc.a, &dk, &mut g[lo.wk..lo.wk + h * h], h, h);
        matmul_tn_acc(&lc.a, &dv, &mut g[lo.wv..lo.wv + h * h], h, h);
        let mut da = matmul_nt(&dq, &w[lo.wq..lo.wq + h * h], h, h);
        add_into(&mut da, &matmul_nt(&dk, &w[lo.wk..lo.wk + h * h], h, h));
        add_into(&mut da, &matmul_nt(&dv, &w[lo.wv..lo.wv + h * h], h, h));
        let din = {
            let r = lo.attn_norm..lo.attn_norm + h;
            rmsnorm_backward(&lc.x_in, &lc.inv1, &w[r.clone()], &da, &mut g[r])
        };
        add_into(&mut dx, &din);
    }

    for (&tok, drow) in batch.inputs.iter().zip(dx.chunks_exact(h)) {
        let t = tok as usize;
        add_into(&mut g[layout.embed + t * h..layout.embed + (t + 1) * h], drow);
    }
    Ok((loss, grad))
}
