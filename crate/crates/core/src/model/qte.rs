//! Queried transformer encoder: self-attention blocks and query attention,
//! each with a forward pass that records what its backward pass needs.

use rand::Rng;

use crate::model::params::{LayerWeights, QteWeights};
use crate::scalar::Scalar;
use crate::tensor::{
    dot, dropout, dropout_backward, layer_norm_backward, layer_norm_forward, matmul, matmul_acc,
    matmul_at_acc, matmul_bt, matmul_bt_acc, softmax_backward, softmax_in_place, softmax_rows,
    softmax_rows_backward, LayerNormCache, Matrix, Mode, LAYER_NORM_EPS,
};

/// Structural settings shared by every block of an encoder.
#[derive(Clone, Copy, Debug)]
pub struct BlockSettings {
    pub heads: usize,
    pub dropout: f64,
    pub layer_norm: bool,
}

/// Everything one self-attention block records on its forward pass.
#[derive(Clone, Debug)]
pub struct BlockCache<T> {
    input: Matrix<T>,
    q: Matrix<T>,
    k: Matrix<T>,
    v: Matrix<T>,
    /// Row-stochastic attention matrix of each head.
    pub attention: Vec<Matrix<T>>,
    heads_out: Matrix<T>,
    attn_mask: Option<Matrix<T>>,
    ln1: Option<LayerNormCache<T>>,
    ffn_in: Matrix<T>,
    pre_act: Matrix<T>,
    act: Matrix<T>,
    ffn_mask: Option<Matrix<T>>,
    ln2: Option<LayerNormCache<T>>,
}

impl<T: Scalar> BlockCache<T> {
    /// Attention matrix averaged over heads.
    pub fn mean_attention(&self) -> Matrix<T> {
        let mut out = Matrix::zeros(self.attention[0].rows(), self.attention[0].cols());
        for a in &self.attention {
            out.add_assign(a);
        }
        out.scale(T::one() / T::from_usize(self.attention.len()).unwrap());
        out
    }
}

/// Multi-head self-attention followed by the position-wise feed-forward
/// network, with residual connections.
///
/// Without layer norm the block computes `H = Z + FNN(Z)` with
/// `Z = X + dropout(X̄)`. With layer norm:
/// `A' = LN₁(X + dropout(X̄))`, `H = LN₂(A' + dropout(FNN(A')))`.
pub fn self_attention_forward<T: Scalar, R: Rng + ?Sized>(
    x: &Matrix<T>,
    w: &LayerWeights<T>,
    settings: BlockSettings,
    mode: Mode,
    rng: &mut R,
) -> (Matrix<T>, BlockCache<T>) {
    let (k_rows, d) = x.shape();
    let heads = settings.heads;
    let dh = d / heads;
    let inv_scale = T::one() / T::from_usize(dh).unwrap().sqrt();

    let q = matmul(x, &w.wq);
    let k = matmul(x, &w.wk);
    let v = matmul(x, &w.wv);
    let mut heads_out = Matrix::zeros(k_rows, d);
    let mut attention = Vec::with_capacity(heads);
    for head in 0..heads {
        let qh = q.column_block(head * dh, dh);
        let kh = k.column_block(head * dh, dh);
        let vh = v.column_block(head * dh, dh);
        let mut scores = matmul_bt(&qh, &kh);
        scores.scale(inv_scale);
        let a = softmax_rows(&scores);
        heads_out.set_column_block(head * dh, &matmul(&a, &vh));
        attention.push(a);
    }
    let xbar = matmul(&heads_out, &w.wo);
    let (xbar, attn_mask) = dropout(&xbar, settings.dropout, mode, rng);
    let residual = x.add(&xbar);

    let (ffn_in, ln1) = if settings.layer_norm {
        let (y, c) = layer_norm_forward(&residual, w.ln1_gain.as_slice(), w.ln1_bias.as_slice(), LAYER_NORM_EPS);
        (y, Some(c))
    } else {
        (residual, None)
    };

    let mut pre_act = matmul(&ffn_in, &w.w1);
    pre_act.add_row_broadcast(w.b1.as_slice());
    let act = pre_act.map(|v| v.max(T::zero()));
    let mut ffn = matmul(&act, &w.w2);
    ffn.add_row_broadcast(w.b2.as_slice());
    let (ffn, ffn_mask) = dropout(&ffn, settings.dropout, mode, rng);
    let out = ffn_in.add(&ffn);

    let (out, ln2) = if settings.layer_norm {
        let (y, c) = layer_norm_forward(&out, w.ln2_gain.as_slice(), w.ln2_bias.as_slice(), LAYER_NORM_EPS);
        (y, Some(c))
    } else {
        (out, None)
    };

    let cache = BlockCache {
        input: x.clone(),
        q,
        k,
        v,
        attention,
        heads_out,
        attn_mask,
        ln1,
        ffn_in,
        pre_act,
        act,
        ffn_mask,
        ln2,
    };
    (out, cache)
}

fn add_to<T: Scalar>(target: &mut Matrix<T>, values: &[T]) {
    for (t, &v) in target.as_mut_slice().iter_mut().zip(values) {
        *t += v;
    }
}

/// Backward pass of [`self_attention_forward`]. Accumulates parameter
/// gradients into `grads` and returns the gradient w.r.t. the block input.
pub fn self_attention_backward<T: Scalar>(
    cache: &BlockCache<T>,
    w: &LayerWeights<T>,
    settings: BlockSettings,
    grad_out: &Matrix<T>,
    grads: &mut LayerWeights<T>,
) -> Matrix<T> {
    let (k_rows, d) = cache.input.shape();
    let heads = settings.heads;
    let dh = d / heads;
    let inv_scale = T::one() / T::from_usize(dh).unwrap().sqrt();

    let g_sum = match &cache.ln2 {
        Some(c) => {
            let (g, gg, gb) = layer_norm_backward(c, w.ln2_gain.as_slice(), grad_out);
            add_to(&mut grads.ln2_gain, &gg);
            add_to(&mut grads.ln2_bias, &gb);
            g
        }
        None => grad_out.clone(),
    };

    let mut g_ffn_in = g_sum.clone();
    let g_ffn = dropout_backward(cache.ffn_mask.as_ref(), g_sum);
    add_to(&mut grads.b2, &g_ffn.column_sums());
    matmul_at_acc(&cache.act, &g_ffn, &mut grads.w2);
    let mut g_pre = matmul_bt(&g_ffn, &w.w2);
    for (g, &p) in g_pre.as_mut_slice().iter_mut().zip(cache.pre_act.as_slice()) {
        if p <= T::zero() {
            *g = T::zero();
        }
    }
    add_to(&mut grads.b1, &g_pre.column_sums());
    matmul_at_acc(&cache.ffn_in, &g_pre, &mut grads.w1);
    matmul_bt_acc(&g_pre, &w.w1, &mut g_ffn_in);

    let g_residual = match &cache.ln1 {
        Some(c) => {
            let (g, gg, gb) = layer_norm_backward(c, w.ln1_gain.as_slice(), &g_ffn_in);
            add_to(&mut grads.ln1_gain, &gg);
            add_to(&mut grads.ln1_bias, &gb);
            g
        }
        None => g_ffn_in,
    };

    let mut g_x = g_residual.clone();
    let g_xbar = dropout_backward(cache.attn_mask.as_ref(), g_residual);
    matmul_at_acc(&cache.heads_out, &g_xbar, &mut grads.wo);
    let g_heads = matmul_bt(&g_xbar, &w.wo);

    let mut g_q = Matrix::zeros(k_rows, d);
    let mut g_k = Matrix::zeros(k_rows, d);
    let mut g_v = Matrix::zeros(k_rows, d);
    for head in 0..heads {
        let a = &cache.attention[head];
        let qh = cache.q.column_block(head * dh, dh);
        let kh = cache.k.column_block(head * dh, dh);
        let vh = cache.v.column_block(head * dh, dh);
        let g_oh = g_heads.column_block(head * dh, dh);

        let g_a = matmul_bt(&g_oh, &vh);
        let mut g_vh = Matrix::zeros(k_rows, dh);
        matmul_at_acc(a, &g_oh, &mut g_vh);
        let mut g_scores = softmax_rows_backward(a, &g_a);
        g_scores.scale(inv_scale);
        let g_qh = matmul(&g_scores, &kh);
        let mut g_kh = Matrix::zeros(k_rows, dh);
        matmul_at_acc(&g_scores, &qh, &mut g_kh);

        g_q.set_column_block(head * dh, &g_qh);
        g_k.set_column_block(head * dh, &g_kh);
        g_v.set_column_block(head * dh, &g_vh);
    }
    matmul_at_acc(&cache.input, &g_q, &mut grads.wq);
    matmul_at_acc(&cache.input, &g_k, &mut grads.wk);
    matmul_at_acc(&cache.input, &g_v, &mut grads.wv);
    matmul_bt_acc(&g_q, &w.wq, &mut g_x);
    matmul_bt_acc(&g_k, &w.wk, &mut g_x);
    matmul_bt_acc(&g_v, &w.wv, &mut g_x);
    g_x
}

/// Saved state of a query-attention pass.
#[derive(Clone, Debug)]
pub struct QueryCache<T> {
    tanh: Matrix<T>,
    /// Normalized weights over the input rows.
    pub alpha: Vec<T>,
}

/// `β_i = qᵀ tanh(W h_i + b)`, `α = softmax(β)`, output `Σ α_i h_i`.
pub fn query_attention<T: Scalar>(h: &Matrix<T>, q: &[T], wh: &Matrix<T>, bh: &[T]) -> Vec<T> {
    query_attention_forward(h, q, wh, bh).0
}

pub fn query_attention_forward<T: Scalar>(
    h: &Matrix<T>,
    q: &[T],
    wh: &Matrix<T>,
    bh: &[T],
) -> (Vec<T>, QueryCache<T>) {
    assert_eq!(wh.cols(), h.cols(), "query projection input width");
    assert_eq!(wh.rows(), q.len(), "query dimensionality");
    assert_eq!(bh.len(), q.len(), "query bias length");
    let mut u = matmul_bt(h, wh);
    u.add_row_broadcast(bh);
    let tanh = u.map(|x| x.tanh());
    let mut alpha: Vec<T> = tanh.iter_rows().map(|t| dot(t, q)).collect();
    softmax_in_place(&mut alpha);
    let mut out = vec![T::zero(); h.cols()];
    for (row, &a) in h.iter_rows().zip(&alpha) {
        for (o, &x) in out.iter_mut().zip(row) {
            *o += a * x;
        }
    }
    (out, QueryCache { tanh, alpha })
}

/// Gradients of query attention: `(dH, dq)`; projection gradients are
/// accumulated into `g_wh` and `g_bh`.
pub fn query_attention_backward<T: Scalar>(
    cache: &QueryCache<T>,
    h: &Matrix<T>,
    q: &[T],
    wh: &Matrix<T>,
    grad_out: &[T],
    g_wh: &mut Matrix<T>,
    g_bh: &mut Matrix<T>,
) -> (Matrix<T>, Vec<T>) {
    let (k_rows, d) = h.shape();
    let dq = q.len();
    let mut g_h = Matrix::zeros(k_rows, d);
    let mut g_alpha = Vec::with_capacity(k_rows);
    for i in 0..k_rows {
        g_alpha.push(dot(h.row(i), grad_out));
        let a = cache.alpha[i];
        for (g, &go) in g_h.row_mut(i).iter_mut().zip(grad_out) {
            *g = a * go;
        }
    }
    let g_beta = softmax_backward(&cache.alpha, &g_alpha);
    let mut g_q = vec![T::zero(); dq];
    let mut g_u = Matrix::zeros(k_rows, dq);
    for i in 0..k_rows {
        let t = cache.tanh.row(i);
        let gb = g_beta[i];
        for j in 0..dq {
            g_q[j] += gb * t[j];
            g_u[(i, j)] = gb * q[j] * (T::one() - t[j] * t[j]);
        }
    }
    matmul_at_acc(&g_u, h, g_wh);
    add_to(g_bh, &g_u.column_sums());
    matmul_acc(&g_u, wh, &mut g_h);
    (g_h, g_q)
}

/// Output of running every block of an encoder plus its query attention.
#[derive(Clone, Debug)]
pub struct QteCache<T> {
    pub blocks: Vec<BlockCache<T>>,
    pub hidden: Matrix<T>,
    pub query: QueryCache<T>,
}

pub fn qte_forward<T: Scalar, R: Rng + ?Sized>(
    x: &Matrix<T>,
    query: &[T],
    weights: &QteWeights<T>,
    settings: BlockSettings,
    mode: Mode,
    rng: &mut R,
) -> (Vec<T>, QteCache<T>) {
    let mut hidden = x.clone();
    let mut blocks = Vec::with_capacity(weights.layers.len());
    for layer in &weights.layers {
        let (next, cache) = self_attention_forward(&hidden, layer, settings, mode, rng);
        blocks.push(cache);
        hidden = next;
    }
    let (out, qcache) = query_attention_forward(&hidden, query, &weights.wh, weights.bh.as_slice());
    (
        out,
        QteCache {
            blocks,
            hidden,
            query: qcache,
        },
    )
}

/// Returns `(dX, dquery)`.
pub fn qte_backward<T: Scalar>(
    cache: &QteCache<T>,
    query: &[T],
    weights: &QteWeights<T>,
    settings: BlockSettings,
    grad_out: &[T],
    grads: &mut QteWeights<T>,
) -> (Matrix<T>, Vec<T>) {
    let (mut g, g_query) = query_attention_backward(
        &cache.query,
        &cache.hidden,
        query,
        &weights.wh,
        grad_out,
        &mut grads.wh,
        &mut grads.bh,
    );
    for (l, block) in cache.blocks.iter().enumerate().rev() {
        g = self_attention_backward(block, &weights.layers[l], settings, &g, &mut grads.layers[l]);
    }
    (g, g_query)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::ModelConfig;
    use crate::model::params::ModelParams;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn settings(layer_norm: bool) -> BlockSettings {
        BlockSettings {
            heads: 2,
            dropout: 0.0,
            layer_norm,
        }
    }

    fn random_layer(d: usize, scale: f64, seed: u64) -> LayerWeights<f64> {
        let config = ModelConfig {
            d,
            layers: 1,
            num_devices: 2,
            num_controls: 2,
            init_scale: scale,
            ..ModelConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ModelParams::<f64>::init(&config, &mut rng).unwrap();
        let mut layer = p.action.layers.remove(0);
        layer.b1 = Matrix::random_uniform(1, 4 * d, scale, &mut rng);
        layer.ln1_gain = Matrix::random_uniform(1, d, 1.0, &mut rng);
        layer.ln2_bias = Matrix::random_uniform(1, d, 1.0, &mut rng);
        layer
    }

    #[test]
    fn single_row_attention_is_one() {
        let w = random_layer(4, 0.5, 1);
        let x = Matrix::from_rows(&[vec![0.1, 0.2, -0.3, 0.4]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, cache) = self_attention_forward(&x, &w, settings(true), Mode::Eval, &mut rng);
        for a in &cache.attention {
            assert_eq!(a.as_slice(), &[1.0]);
        }
    }

    #[test]
    fn zero_weights_without_layer_norm_is_identity() {
        let mut w = random_layer(4, 0.5, 2);
        for m in [&mut w.wq, &mut w.wk, &mut w.wv, &mut w.wo, &mut w.w1, &mut w.b1, &mut w.w2, &mut w.b2] {
            m.fill(0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Matrix::random_uniform(3, 4, 1.0, &mut rng);
        let (h, _) = self_attention_forward(&x, &w, settings(false), Mode::Eval, &mut rng);
        assert_eq!(h, x);
    }

    #[test]
    fn query_attention_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = Matrix::<f64>::random_uniform(5, 3, 1.0, &mut rng);
        let wh = Matrix::random_uniform(4, 3, 1.0, &mut rng);
        let out = query_attention(&h, &[0.0; 4], &wh, &[0.3; 4]);
        for (o, m) in out.iter().zip(h.row_mean()) {
            assert!((o - m).abs() < 1e-15);
        }

        let single = Matrix::from_rows(&[vec![0.5, -1.0, 2.0]]).unwrap();
        assert_eq!(query_attention(&single, &[1.0, 2.0, 3.0, 4.0], &wh, &[0.0; 4]), single.row(0));

        let eye = Matrix::<f64>::identity(2);
        let out = query_attention(&eye, &[1.0, 0.0], &eye, &[0.0, 0.0]);
        let a0 = 1f64.tanh().exp() / (1f64.tanh().exp() + 1.0);
        assert!((out[0] - a0).abs() < 1e-15);
        assert!((out[1] - (1.0 - a0)).abs() < 1e-15);
        assert!((out[0] - 0.681).abs() < 1e-3);
    }

    fn check_block_gradient(layer_norm: bool) {
        let d = 4;
        let w = random_layer(d, 0.7, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Matrix::<f64>::random_uniform(3, d, 1.0, &mut rng);
        let probe = Matrix::<f64>::random_uniform(3, d, 1.0, &mut rng);
        let s = settings(layer_norm);
        let f = |x: &Matrix<f64>, w: &LayerWeights<f64>| {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let (h, _) = self_attention_forward(x, w, s, Mode::Eval, &mut rng);
            dot(h.as_slice(), probe.as_slice())
        };
        let (_, cache) = self_attention_forward(&x, &w, s, Mode::Eval, &mut rng);
        let mut grads = w.clone();
        grads.tensors_mut_for_test().into_iter().for_each(|m| m.fill(0.0));
        let gx = self_attention_backward(&cache, &w, s, &probe, &mut grads);

        let eps = 1e-6;
        for i in 0..x.len() {
            let mut p = x.clone();
            p.as_mut_slice()[i] += eps;
            let mut m = x.clone();
            m.as_mut_slice()[i] -= eps;
            let num = (f(&p, &w) - f(&m, &w)) / (2.0 * eps);
            assert!((num - gx.as_slice()[i]).abs() < 1e-6, "dx[{i}]: {num} vs {}", gx.as_slice()[i]);
        }
        let names = ["wq", "wk", "wv", "wo", "w1", "b1", "w2", "b2", "ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias"];
        for (t, name) in names.iter().enumerate() {
            let n = grads.tensors_mut_for_test()[t].len();
            for i in 0..n {
                let mut wp = w.clone();
                wp.tensors_mut_for_test()[t].as_mut_slice()[i] += eps;
                let mut wm = w.clone();
                wm.tensors_mut_for_test()[t].as_mut_slice()[i] -= eps;
                let num = (f(&x, &wp) - f(&x, &wm)) / (2.0 * eps);
                let ana = grads.tensors_mut_for_test()[t].as_slice()[i];
                if !layer_norm && name.starts_with("ln") {
                    assert_eq!(ana, 0.0);
                    continue;
                }
                assert!((num - ana).abs() < 1e-6, "{name}[{i}]: {num} vs {ana}");
            }
        }
    }

    #[test]
    fn block_backward_matches_finite_differences() {
        check_block_gradient(true);
        check_block_gradient(false);
    }

    #[test]
    fn query_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = Matrix::<f64>::random_uniform(4, 3, 1.0, &mut rng);
        let q: Vec<f64> = (0..5).map(|i| 0.3 * i as f64 - 0.5).collect();
        let wh = Matrix::random_uniform(5, 3, 1.0, &mut rng);
        let bh = Matrix::random_uniform(1, 5, 1.0, &mut rng);
        let probe = [0.7, -0.2, 1.1];
        let f = |h: &Matrix<f64>, q: &[f64], wh: &Matrix<f64>, bh: &Matrix<f64>| {
            dot(&query_attention(h, q, wh, bh.as_slice()), &probe)
        };
        let (_, cache) = query_attention_forward(&h, &q, &wh, bh.as_slice());
        let mut g_wh = Matrix::zeros(5, 3);
        let mut g_bh = Matrix::zeros(1, 5);
        let (g_h, g_q) = query_attention_backward(&cache, &h, &q, &wh, &probe, &mut g_wh, &mut g_bh);
        let eps = 1e-6;
        let fd = |perturb: &dyn Fn(f64) -> f64| (perturb(eps) - perturb(-eps)) / (2.0 * eps);
        for i in 0..h.len() {
            let num = fd(&|e| {
                let mut hp = h.clone();
                hp.as_mut_slice()[i] += e;
                f(&hp, &q, &wh, &bh)
            });
            assert!((num - g_h.as_slice()[i]).abs() < 1e-7);
        }
        for i in 0..q.len() {
            let num = fd(&|e| {
                let mut qp = q.clone();
                qp[i] += e;
                f(&h, &qp, &wh, &bh)
            });
            assert!((num - g_q[i]).abs() < 1e-7);
        }
        for i in 0..wh.len() {
            let num = fd(&|e| {
                let mut wp = wh.clone();
                wp.as_mut_slice()[i] += e;
                f(&h, &q, &wp, &bh)
            });
            assert!((num - g_wh.as_slice()[i]).abs() < 1e-7);
        }
        for i in 0..bh.len() {
            let num = fd(&|e| {
                let mut bp = bh.clone();
                bp.as_mut_slice()[i] += e;
                f(&h, &q, &wh, &bp)
            });
            assert!((num - g_bh.as_slice()[i]).abs() < 1e-7);
        }
    }

    impl LayerWeights<f64> {
        fn tensors_mut_for_test(&mut self) -> Vec<&mut Matrix<f64>> {
            vec![
                &mut self.wq,
                &mut self.wk,
                &mut self.wv,
                &mut self.wo,
                &mut self.w1,
                &mut self.b1,
                &mut self.w2,
                &mut self.b2,
                &mut self.ln1_gain,
                &mut self.ln1_bias,
                &mut self.ln2_gain,
                &mut self.ln2_bias,
            ]
        }
    }
}
