use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{LayerSlots, ModelParameters, Slot};
use super::{MaskVector, ModelError, Real};
use crate::scene_lang::{MASK, N_SPECIAL};

const LN_EPS: f64 = 1e-12;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Sequences flattened into one row-per-token matrix. Attention never
/// crosses a sequence boundary, so no padding is needed.
pub(crate) struct FlatBatch {
    pub ids: Vec<u32>,
    pub pos: Vec<usize>,
    /// `(first row, length)` per sequence.
    pub seqs: Vec<(usize, usize)>,
    /// `(row, original token)` per masked position, in input order.
    pub masked: Vec<(usize, u32)>,
}

impl FlatBatch {
    pub fn new<F: Real>(params: &ModelParameters<F>, examples: &[(&[u32], &MaskVector)]) -> Result<Self, ModelError> {
        let cfg = params.config();
        let total: usize = examples.iter().map(|(t, _)| t.len()).sum();
        let mut batch = FlatBatch {
            ids: Vec::with_capacity(total),
            pos: Vec::with_capacity(total),
            seqs: Vec::with_capacity(examples.len()),
            masked: Vec::new(),
        };
        for (tokens, mask) in examples {
            if tokens.len() != mask.len() {
                return Err(ModelError::MaskLength { tokens: tokens.len(), mask: mask.len() });
            }
            if tokens.len() > cfg.max_seq_len {
                return Err(ModelError::Length { len: tokens.len(), max: cfg.max_seq_len });
            }
            if tokens.is_empty() {
                return Err(ModelError::Usage("empty token sequence".into()));
            }
            let start = batch.ids.len();
            for (i, &t) in tokens.iter().enumerate() {
                if (t as usize) < N_SPECIAL || t as usize >= cfg.vocab_size {
                    return Err(ModelError::Token { token: t, vocab: cfg.vocab_size });
                }
                if mask.is_masked(i) {
                    batch.ids.push(MASK);
                    batch.masked.push((start + i, t));
                } else {
                    batch.ids.push(t);
                }
                batch.pos.push(i);
            }
            batch.seqs.push((start, tokens.len()));
        }
        Ok(batch)
    }

    pub fn rows(&self) -> usize {
        self.ids.len()
    }
}

/// Activations kept for the backward pass of one block.
pub(crate) struct LayerCache<F> {
    x: Array2<F>,
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    /// Attention weights, `n*n` per (sequence, head), sequence-major.
    probs: Vec<F>,
    ctx: Array2<F>,
    attn_drop: Option<Array2<F>>,
    xhat1: Array2<F>,
    rstd1: Vec<F>,
    h1: Array2<F>,
    u: Array2<F>,
    g: Array2<F>,
    ffn_drop: Option<Array2<F>>,
    xhat2: Array2<F>,
    rstd2: Vec<F>,
}

pub(crate) struct EncoderCache<F> {
    emb_drop: Option<Array2<F>>,
    layers: Vec<LayerCache<F>>,
}

/// Seeded inverted-dropout masks; `None` disables dropout.
pub(crate) struct Dropout<'a> {
    pub prob: f64,
    pub rng: &'a mut ChaCha8Rng,
}

impl Dropout<'_> {
    fn mask<F: Real>(&mut self, rows: usize, cols: usize) -> Array2<F> {
        let keep = F::of(1.0 / (1.0 - self.prob));
        Array2::from_shape_fn((rows, cols), |_| if self.rng.random::<f64>() < self.prob { F::zero() } else { keep })
    }
}

fn add_bias<F: Real>(m: &mut Array2<F>, b: ArrayView1<'_, F>) {
    for mut row in m.rows_mut() {
        row += &b;
    }
}

fn linear<F: Real>(x: &Array2<F>, w: ArrayView2<'_, F>, b: ArrayView1<'_, F>) -> Array2<F> {
    let mut y = x.dot(&w);
    add_bias(&mut y, b);
    y
}

/// Row-wise layer norm; returns `(output, normalized input, 1/std)`.
fn layer_norm<F: Real>(
    x: &Array2<F>,
    scale: ArrayView1<'_, F>,
    shift: ArrayView1<'_, F>,
) -> (Array2<F>, Array2<F>, Vec<F>) {
    let (n, d) = x.dim();
    let inv_d = F::of(1.0 / d as f64);
    let eps = F::of(LN_EPS);
    let mut xhat = Array2::zeros((n, d));
    let mut out = Array2::zeros((n, d));
    let mut rstds = Vec::with_capacity(n);
    for r in 0..n {
        let row = x.row(r);
        let mean = row.sum() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
        let rstd = F::one() / (var + eps).sqrt();
        rstds.push(rstd);
        for c in 0..d {
            let h = (row[c] - mean) * rstd;
            xhat[[r, c]] = h;
            out[[r, c]] = h * scale[c] + shift[c];
        }
    }
    (out, xhat, rstds)
}

/// Backward of [`layer_norm`]; returns `(d_input, d_scale, d_shift)`.
fn layer_norm_backward<F: Real>(
    dy: &Array2<F>,
    xhat: &Array2<F>,
    rstd: &[F],
    scale: ArrayView1<'_, F>,
) -> (Array2<F>, Vec<F>, Vec<F>) {
    let (n, d) = dy.dim();
    let inv_d = F::of(1.0 / d as f64);
    let mut dx = Array2::zeros((n, d));
    let mut dscale = vec![F::zero(); d];
    let mut dshift = vec![F::zero(); d];
    let mut dxhat = vec![F::zero(); d];
    for r in 0..n {
        let mut mean_dxhat = F::zero();
        let mut mean_dxhat_xhat = F::zero();
        for c in 0..d {
            let g = dy[[r, c]];
            let h = xhat[[r, c]];
            dscale[c] += g * h;
            dshift[c] += g;
            let dh = g * scale[c];
            dxhat[c] = dh;
            mean_dxhat += dh;
            mean_dxhat_xhat += dh * h;
        }
        mean_dxhat *= inv_d;
        mean_dxhat_xhat *= inv_d;
        for c in 0..d {
            dx[[r, c]] = rstd[r] * (dxhat[c] - mean_dxhat - xhat[[r, c]] * mean_dxhat_xhat);
        }
    }
    (dx, dscale, dshift)
}

fn gelu<F: Real>(u: F) -> F {
    let c = F::of(GELU_C);
    let a = F::of(GELU_A);
    let half = F::of(0.5);
    half * u * (F::one() + (c * (u + a * u * u * u)).tanh())
}

fn gelu_grad<F: Real>(u: F) -> F {
    let c = F::of(GELU_C);
    let a = F::of(GELU_A);
    let half = F::of(0.5);
    let t = (c * (u + a * u * u * u)).tanh();
    half * (F::one() + t) + half * u * (F::one() - t * t) * c * (F::one() + F::of(3.0) * a * u * u)
}

fn softmax_in_place<F: Real>(xs: &mut [F]) {
    let max = xs.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

fn col_sums<F: Real>(m: &Array2<F>) -> Vec<F> {
    m.sum_axis(Axis(0)).to_vec()
}

struct Attention<'a> {
    seqs: &'a [(usize, usize)],
    n_heads: usize,
    head_dim: usize,
}

impl Attention<'_> {
    fn scale<F: Real>(&self) -> F {
        F::one() / F::of(self.head_dim as f64).sqrt()
    }

    fn forward<F: Real>(&self, q: &Array2<F>, k: &Array2<F>, v: &Array2<F>) -> (Array2<F>, Vec<F>) {
        let (rows, d) = q.dim();
        let (qs, ks, vs) = (q.as_slice().unwrap(), k.as_slice().unwrap(), v.as_slice().unwrap());
        let mut ctx = Array2::<F>::zeros((rows, d));
        let cs = ctx.as_slice_mut().unwrap();
        let cap: usize = self.seqs.iter().map(|&(_, n)| n * n).sum::<usize>() * self.n_heads;
        let mut probs = Vec::with_capacity(cap);
        let scale: F = self.scale();
        let mut scores = Vec::new();
        for &(start, n) in self.seqs {
            for h in 0..self.n_heads {
                let off = h * self.head_dim;
                for i in 0..n {
                    let qi = &qs[(start + i) * d + off..][..self.head_dim];
                    scores.clear();
                    for j in 0..n {
                        let kj = &ks[(start + j) * d + off..][..self.head_dim];
                        let s = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<F>();
                        scores.push(s * scale);
                    }
                    softmax_in_place(&mut scores);
                    let ci = &mut cs[(start + i) * d + off..][..self.head_dim];
                    for (j, &p) in scores.iter().enumerate() {
                        let vj = &vs[(start + j) * d + off..][..self.head_dim];
                        for (c, &vv) in ci.iter_mut().zip(vj) {
                            *c += p * vv;
                        }
                    }
                    probs.extend_from_slice(&scores);
                }
            }
        }
        (ctx, probs)
    }

    /// Returns `(dq, dk, dv)` given the gradient of the context matrix.
    fn backward<F: Real>(
        &self,
        dctx: &Array2<F>,
        q: &Array2<F>,
        k: &Array2<F>,
        v: &Array2<F>,
        probs: &[F],
    ) -> (Array2<F>, Array2<F>, Array2<F>) {
        let (rows, d) = q.dim();
        let hd = self.head_dim;
        let scale: F = self.scale();
        let (qs, ks, vs) = (q.as_slice().unwrap(), k.as_slice().unwrap(), v.as_slice().unwrap());
        let dcs = dctx.as_slice().unwrap();
        let mut dq = Array2::<F>::zeros((rows, d));
        let mut dk = Array2::<F>::zeros((rows, d));
        let mut dv = Array2::<F>::zeros((rows, d));
        let (dqs, dks, dvs) = (dq.as_slice_mut().unwrap(), dk.as_slice_mut().unwrap(), dv.as_slice_mut().unwrap());
        let mut p_off = 0;
        let mut dp = Vec::new();
        for &(start, n) in self.seqs {
            for h in 0..self.n_heads {
                let off = h * hd;
                for i in 0..n {
                    let p = &probs[p_off..p_off + n];
                    p_off += n;
                    let dci = &dcs[(start + i) * d + off..][..hd];
                    dp.clear();
                    for j in 0..n {
                        let vj = &vs[(start + j) * d + off..][..hd];
                        dp.push(dci.iter().zip(vj).map(|(&a, &b)| a * b).sum::<F>());
                        let dvj = &mut dvs[(start + j) * d + off..][..hd];
                        for (g, &c) in dvj.iter_mut().zip(dci) {
                            *g += p[j] * c;
                        }
                    }
                    let dot = p.iter().zip(&dp).map(|(&a, &b)| a * b).sum::<F>();
                    let qi = &qs[(start + i) * d + off..][..hd];
                    for j in 0..n {
                        let ds = p[j] * (dp[j] - dot) * scale;
                        if ds == F::zero() {
                            continue;
                        }
                        let kj = &ks[(start + j) * d + off..][..hd];
                        let dqi = &mut dqs[(start + i) * d + off..][..hd];
                        for (g, &kk) in dqi.iter_mut().zip(kj) {
                            *g += ds * kk;
                        }
                        let dkj = &mut dks[(start + j) * d + off..][..hd];
                        for (g, &qq) in dkj.iter_mut().zip(qi) {
                            *g += ds * qq;
                        }
                    }
                }
            }
        }
        (dq, dk, dv)
    }
}

fn layer_forward<F: Real>(
    p: &ModelParameters<F>,
    l: &LayerSlots,
    x: Array2<F>,
    seqs: &[(usize, usize)],
    dropout: &mut Option<Dropout<'_>>,
) -> (Array2<F>, LayerCache<F>) {
    let cfg = p.config();
    let attn = Attention { seqs, n_heads: cfg.n_heads, head_dim: cfg.head_dim() };
    let q = linear(&x, p.mat(l.q_w), p.vector(l.q_b));
    let k = linear(&x, p.mat(l.k_w), p.vector(l.k_b));
    let v = linear(&x, p.mat(l.v_w), p.vector(l.v_b));
    let (ctx, probs) = attn.forward(&q, &k, &v);
    let mut a = linear(&ctx, p.mat(l.o_w), p.vector(l.o_b));
    let attn_drop = dropout.as_mut().map(|d| d.mask(a.nrows(), a.ncols()));
    if let Some(m) = &attn_drop {
        a *= m;
    }
    a += &x;
    let (h1, xhat1, rstd1) = layer_norm(&a, p.vector(l.ln1_scale), p.vector(l.ln1_shift));

    let u = linear(&h1, p.mat(l.ffn_w1), p.vector(l.ffn_b1));
    let g = u.mapv(gelu);
    let mut f = linear(&g, p.mat(l.ffn_w2), p.vector(l.ffn_b2));
    let ffn_drop = dropout.as_mut().map(|d| d.mask(f.nrows(), f.ncols()));
    if let Some(m) = &ffn_drop {
        f *= m;
    }
    f += &h1;
    let (out, xhat2, rstd2) = layer_norm(&f, p.vector(l.ln2_scale), p.vector(l.ln2_shift));
    let cache = LayerCache { x, q, k, v, probs, ctx, attn_drop, xhat1, rstd1, h1, u, g, ffn_drop, xhat2, rstd2 };
    (out, cache)
}

/// Backward through one block; accumulates parameter gradients into `grads`
/// and returns the gradient with respect to the block input.
fn layer_backward<F: Real>(
    p: &ModelParameters<F>,
    l: &LayerSlots,
    c: &LayerCache<F>,
    seqs: &[(usize, usize)],
    dout: Array2<F>,
    grads: &mut ModelParameters<F>,
) -> Array2<F> {
    let cfg = p.config();
    let (dr2, ds2, db2) = layer_norm_backward(&dout, &c.xhat2, &c.rstd2, p.vector(l.ln2_scale));
    grads.add_to(l.ln2_scale, &ds2);
    grads.add_to(l.ln2_shift, &db2);

    let mut dh1 = dr2.clone();
    let mut df = dr2;
    if let Some(m) = &c.ffn_drop {
        df *= m;
    }
    grads.add_to(l.ffn_w2, c.g.t().dot(&df).as_slice().unwrap());
    grads.add_to(l.ffn_b2, &col_sums(&df));
    let mut du = df.dot(&p.mat(l.ffn_w2).t());
    du.zip_mut_with(&c.u, |g, &u| *g *= gelu_grad(u));
    grads.add_to(l.ffn_w1, c.h1.t().dot(&du).as_slice().unwrap());
    grads.add_to(l.ffn_b1, &col_sums(&du));
    dh1 += &du.dot(&p.mat(l.ffn_w1).t());

    let (dr1, ds1, db1) = layer_norm_backward(&dh1, &c.xhat1, &c.rstd1, p.vector(l.ln1_scale));
    grads.add_to(l.ln1_scale, &ds1);
    grads.add_to(l.ln1_shift, &db1);

    let mut dx = dr1.clone();
    let mut da = dr1;
    if let Some(m) = &c.attn_drop {
        da *= m;
    }
    grads.add_to(l.o_w, c.ctx.t().dot(&da).as_slice().unwrap());
    grads.add_to(l.o_b, &col_sums(&da));
    let dctx = da.dot(&p.mat(l.o_w).t());

    let attn = Attention { seqs, n_heads: cfg.n_heads, head_dim: cfg.head_dim() };
    let (dq, dk, dv) = attn.backward(&dctx, &c.q, &c.k, &c.v, &c.probs);
    for (d, w, b) in [(&dq, l.q_w, l.q_b), (&dk, l.k_w, l.k_b), (&dv, l.v_w, l.v_b)] {
        grads.add_to(w, c.x.t().dot(d).as_slice().unwrap());
        grads.add_to(b, &col_sums(d));
        dx += &d.dot(&p.mat(w).t());
    }
    dx
}

/// Runs the encoder; returns final hidden states and, when `keep` is set,
/// everything the backward pass needs.
pub(crate) fn encode<F: Real>(
    p: &ModelParameters<F>,
    batch: &FlatBatch,
    mut dropout: Option<Dropout<'_>>,
) -> (Array2<F>, EncoderCache<F>) {
    let d = p.config().hidden_dim;
    let tok = p.mat(p.layout.tok_emb);
    let pos = p.mat(p.layout.pos_emb);
    let mut x = Array2::<F>::zeros((batch.rows(), d));
    for (r, mut row) in x.rows_mut().into_iter().enumerate() {
        row.assign(&tok.row(batch.ids[r] as usize));
        row += &pos.row(batch.pos[r]);
    }
    let emb_drop = dropout.as_mut().map(|dr| dr.mask(x.nrows(), d));
    if let Some(m) = &emb_drop {
        x *= m;
    }
    let mut layers = Vec::with_capacity(p.layout.layers.len());
    for l in &p.layout.layers {
        let (out, cache) = layer_forward(p, l, x, &batch.seqs, &mut dropout);
        layers.push(cache);
        x = out;
    }
    (x, EncoderCache { emb_drop, layers })
}

/// Output-head probabilities for selected rows of the final hidden states.
/// PAD and MASK columns are excluded from the softmax and left at zero.
pub(crate) fn head_probs<F: Real>(p: &ModelParameters<F>, hidden_rows: &Array2<F>) -> Array2<F> {
    let mut logits = linear(hidden_rows, p.mat(p.layout.head_w), p.vector(p.layout.head_b));
    for mut row in logits.rows_mut() {
        let row = row.as_slice_mut().unwrap();
        row[..N_SPECIAL].fill(F::zero());
        softmax_in_place(&mut row[N_SPECIAL..]);
    }
    logits
}

fn gather_rows<F: Real>(x: &Array2<F>, rows: impl Iterator<Item = usize>) -> Array2<F> {
    let rows: Vec<usize> = rows.collect();
    x.select(Axis(0), &rows)
}

/// Mean masked-token cross-entropy and its gradient for one flat batch.
pub(crate) fn loss_and_grads<F: Real>(
    p: &ModelParameters<F>,
    batch: &FlatBatch,
    dropout: Option<Dropout<'_>>,
) -> (F, ModelParameters<F>) {
    let mut grads = ModelParameters::from_flat(p.config(), vec![F::zero(); p.len()]).expect("same config");
    let (hidden, cache) = encode(p, batch, dropout);
    let hm = gather_rows(&hidden, batch.masked.iter().map(|&(r, _)| r));
    let mut dlogits = head_probs(p, &hm);
    let m = batch.masked.len();
    let inv_m = F::of(1.0 / m as f64);
    let mut loss = F::zero();
    for (i, &(_, target)) in batch.masked.iter().enumerate() {
        let pt = dlogits[[i, target as usize]];
        loss -= pt.ln();
        dlogits[[i, target as usize]] -= F::one();
    }
    loss *= inv_m;
    dlogits *= inv_m;

    let layout = p.layout.clone();
    grads.add_to(layout.head_w, hm.t().dot(&dlogits).as_slice().unwrap());
    grads.add_to(layout.head_b, &col_sums(&dlogits));
    let dhm = dlogits.dot(&p.mat(layout.head_w).t());
    let mut dx = Array2::<F>::zeros(hidden.dim());
    for (i, &(r, _)) in batch.masked.iter().enumerate() {
        let mut row = dx.row_mut(r);
        row += &dhm.row(i);
    }
    for (l, c) in layout.layers.iter().zip(&cache.layers).rev() {
        dx = layer_backward(p, l, c, &batch.seqs, dx, &mut grads);
    }
    if let Some(m) = &cache.emb_drop {
        dx *= m;
    }
    let d = p.config().hidden_dim;
    scatter_rows(&mut grads, layout.tok_emb, d, batch.ids.iter().map(|&t| t as usize), &dx);
    scatter_rows(&mut grads, layout.pos_emb, d, batch.pos.iter().copied(), &dx);
    (loss, grads)
}

fn scatter_rows<F: Real>(
    grads: &mut ModelParameters<F>,
    slot: Slot,
    d: usize,
    targets: impl Iterator<Item = usize>,
    dx: &Array2<F>,
) {
    let buf = &mut grads.data[slot.range()];
    for (r, t) in targets.enumerate() {
        for (g, &v) in buf[t * d..(t + 1) * d].iter_mut().zip(dx.row(r)) {
            *g += v;
        }
    }
}

/// Probability distributions over the vocabulary at every position of one
/// sequence. Masked positions see MASK in place of their token; rows are
/// zero at PAD and MASK and sum to one over object tokens.
pub fn forward<F: Real>(
    params: &ModelParameters<F>,
    tokens: &[u32],
    mask: &MaskVector,
) -> Result<Array2<F>, ModelError> {
    let batch = FlatBatch::new(params, &[(tokens, mask)])?;
    let (hidden, _) = encode(params, &batch, None);
    Ok(head_probs(params, &hidden))
}

/// Distributions at the masked positions of each example, stacked in input
/// order (one row per masked position).
pub fn predict_masked<F: Real>(
    params: &ModelParameters<F>,
    examples: &[(&[u32], &MaskVector)],
) -> Result<Array2<F>, ModelError> {
    let batch = FlatBatch::new(params, examples)?;
    let (hidden, _) = encode(params, &batch, None);
    let hm = gather_rows(&hidden, batch.masked.iter().map(|&(r, _)| r));
    Ok(head_probs(params, &hm))
}

/// Whether `token` is among the `k` most probable entries of `dist`, ranking
/// by probability and breaking ties toward the lower token id.
pub fn top_k_contains<F: Real>(dist: ArrayView1<'_, F>, token: u32, k: usize) -> bool {
    let t = token as usize;
    let pt = dist[t];
    // Tokens ranked ahead of `t`: strictly more probable, or equally
    // probable with a smaller id.
    let ahead = dist.iter().enumerate().skip(N_SPECIAL).filter(|&(j, &pj)| pj > pt || (pj == pt && j < t)).count();
    ahead < k
}

/// Confidence of `token` at masked position `i`: its predicted probability
/// if it ranks within the top `k`, otherwise zero.
pub fn confidence<F: Real>(
    params: &ModelParameters<F>,
    tokens: &[u32],
    mask: &MaskVector,
    token: u32,
    i: usize,
    k: usize,
) -> Result<F, ModelError> {
    if i >= mask.len() || !mask.is_masked(i) {
        return Err(ModelError::Usage(format!("position {i} is not masked")));
    }
    if k == 0 {
        return Err(ModelError::Usage("k must be at least 1".into()));
    }
    let vocab = params.config().vocab_size;
    if (token as usize) < N_SPECIAL || token as usize >= vocab {
        return Err(ModelError::Token { token, vocab });
    }
    let probs = forward(params, tokens, mask)?;
    let row = probs.row(i);
    Ok(if top_k_contains(row, token, k) { row[token as usize] } else { F::zero() })
}
