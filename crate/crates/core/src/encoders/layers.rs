//! Forward and backward passes for the transformer pieces: multi-head
//! attention, the GELU feed-forward, and a stack of blocks with mean pooling
//! and an output projection.
//!
//! Every forward pass returns a cache holding the intermediates its backward
//! pass needs. Backward passes accumulate into a gradient structure with the
//! same layout as the weights.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};

use crate::embedding::TokenSequence;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    /// `h×h`
    pub wq: Array2<f64>,
    /// `c×h`, where `c` is the width of the key/value source.
    pub wk: Array2<f64>,
    /// `c×h`
    pub wv: Array2<f64>,
    /// `h×h`
    pub wo: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    /// `h×4h`
    pub w1: Array2<f64>,
    /// `4h×h`
    pub w2: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub self_attn: Attention,
    pub cross_attn: Option<Attention>,
    pub ffn: FeedForward,
}

/// Token-level encoder: blocks followed by mean pooling, an `h×m`
/// projection and L2 normalization. With cross-attention blocks it is the
/// multi-modal encoder; without, the text-only encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Tower {
    pub blocks: Vec<Block>,
    pub proj: Array2<f64>,
}

pub(crate) struct AttentionCache {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    concat: Array2<f64>,
}

pub(crate) struct BlockCache {
    input: Array2<f64>,
    self_attn: AttentionCache,
    after_self: Array2<f64>,
    cross_attn: Option<AttentionCache>,
    after_cross: Array2<f64>,
    ffn_pre: Array2<f64>,
    ffn_act: Array2<f64>,
}

pub(crate) struct TowerCache {
    blocks: Vec<BlockCache>,
    /// Final token states, `n×h`.
    pub states: Array2<f64>,
    pooled: Array1<f64>,
    projected_norm: f64,
    /// Normalized pooled output, length `m`.
    pub output: Array1<f64>,
}

fn softmax_rows(mut scores: Array2<f64>) -> Array2<f64> {
    for mut row in scores.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|x| x / sum);
    }
    scores
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl Attention {
    pub fn zeros(hidden: usize, source: usize) -> Self {
        Attention {
            wq: Array2::zeros((hidden, hidden)),
            wk: Array2::zeros((source, hidden)),
            wv: Array2::zeros((source, hidden)),
            wo: Array2::zeros((hidden, hidden)),
        }
    }

    fn forward(&self, x: ArrayView2<f64>, src: ArrayView2<f64>, heads: usize) -> (Array2<f64>, AttentionCache) {
        let q = x.dot(&self.wq);
        let k = src.dot(&self.wk);
        let v = src.dot(&self.wv);
        let hidden = q.ncols();
        let hd = hidden / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut concat = Array2::zeros((x.nrows(), hidden));
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = s![.., h * hd..(h + 1) * hd];
            let scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            let p = softmax_rows(scores);
            concat.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
            probs.push(p);
        }
        let out = concat.dot(&self.wo);
        (out, AttentionCache { q, k, v, probs, concat })
    }

    /// Returns the gradient with respect to the query input `x` and, when
    /// `src_grad` is requested, the key/value source.
    fn backward(
        &self,
        d_out: &Array2<f64>,
        cache: &AttentionCache,
        x: ArrayView2<f64>,
        src: ArrayView2<f64>,
        heads: usize,
        grads: &mut Attention,
        src_grad: bool,
    ) -> (Array2<f64>, Option<Array2<f64>>) {
        grads.wo += &cache.concat.t().dot(d_out);
        let d_concat = d_out.dot(&self.wo.t());
        let hidden = cache.q.ncols();
        let hd = hidden / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut dq = Array2::zeros(cache.q.raw_dim());
        let mut dk = Array2::zeros(cache.k.raw_dim());
        let mut dv = Array2::zeros(cache.v.raw_dim());
        for (h, p) in cache.probs.iter().enumerate() {
            let cols = s![.., h * hd..(h + 1) * hd];
            let d_head = d_concat.slice(cols);
            let d_probs = d_head.dot(&cache.v.slice(cols).t());
            dv.slice_mut(cols).assign(&p.t().dot(&d_head));
            let row_dot = (&d_probs * p).sum_axis(Axis(1)).insert_axis(Axis(1));
            let d_scores = (&d_probs - &row_dot) * p * scale;
            dq.slice_mut(cols).assign(&d_scores.dot(&cache.k.slice(cols)));
            dk.slice_mut(cols).assign(&d_scores.t().dot(&cache.q.slice(cols)));
        }
        grads.wq += &x.t().dot(&dq);
        grads.wk += &src.t().dot(&dk);
        grads.wv += &src.t().dot(&dv);
        let dx = dq.dot(&self.wq.t());
        let d_src = src_grad.then(|| dk.dot(&self.wk.t()) + dv.dot(&self.wv.t()));
        (dx, d_src)
    }

    fn tensors(&self) -> [&Array2<f64>; 4] {
        [&self.wq, &self.wk, &self.wv, &self.wo]
    }

    fn tensors_mut(&mut self) -> [&mut Array2<f64>; 4] {
        [&mut self.wq, &mut self.wk, &mut self.wv, &mut self.wo]
    }
}

impl FeedForward {
    pub fn zeros(hidden: usize) -> Self {
        FeedForward {
            w1: Array2::zeros((hidden, 4 * hidden)),
            w2: Array2::zeros((4 * hidden, hidden)),
        }
    }
}

impl Block {
    fn forward(
        &self,
        x: Array2<f64>,
        context: Option<ArrayView2<f64>>,
        heads: usize,
    ) -> (Array2<f64>, BlockCache) {
        let (sa, self_cache) = self.self_attn.forward(x.view(), x.view(), heads);
        let after_self = &x + &sa;
        let (after_cross, cross_cache) = match (&self.cross_attn, context) {
            (Some(ca), Some(ctx)) => {
                let (out, cache) = ca.forward(after_self.view(), ctx, heads);
                (&after_self + &out, Some(cache))
            }
            _ => (after_self.clone(), None),
        };
        let ffn_pre = after_cross.dot(&self.ffn.w1);
        let ffn_act = ffn_pre.mapv(gelu);
        let out = &after_cross + &ffn_act.dot(&self.ffn.w2);
        let cache = BlockCache {
            input: x,
            self_attn: self_cache,
            after_self,
            cross_attn: cross_cache,
            after_cross,
            ffn_pre,
            ffn_act,
        };
        (out, cache)
    }

    fn backward(
        &self,
        d_out: Array2<f64>,
        cache: &BlockCache,
        context: Option<ArrayView2<f64>>,
        heads: usize,
        grads: &mut Block,
    ) -> Array2<f64> {
        // feed-forward
        grads.ffn.w2 += &cache.ffn_act.t().dot(&d_out);
        let mut d_pre = d_out.dot(&self.ffn.w2.t());
        Zip::from(&mut d_pre)
            .and(&cache.ffn_pre)
            .for_each(|d, &p| *d *= gelu_grad(p));
        grads.ffn.w1 += &cache.after_cross.t().dot(&d_pre);
        let d_cross = d_out + d_pre.dot(&self.ffn.w1.t());

        // cross-attention; the context carries no gradient
        let d_self = match (&self.cross_attn, &cache.cross_attn, context) {
            (Some(ca), Some(cc), Some(ctx)) => {
                let g = grads.cross_attn.as_mut().expect("gradient layout matches weights");
                let (dx, _) = ca.backward(&d_cross, cc, cache.after_self.view(), ctx, heads, g, false);
                d_cross + dx
            }
            _ => d_cross,
        };

        let x = cache.input.view();
        let (dq_path, d_src) =
            self.self_attn
                .backward(&d_self, &cache.self_attn, x, x, heads, &mut grads.self_attn, true);
        d_self + dq_path + d_src.expect("requested")
    }
}

impl Tower {
    pub(crate) fn forward(
        &self,
        token_table: &Array2<f64>,
        tokens: &TokenSequence,
        context: Option<ArrayView2<f64>>,
        heads: usize,
    ) -> Result<TowerCache> {
        let vocab = token_table.nrows();
        if tokens.is_empty() {
            return Err(Error::EmptyText);
        }
        if let Some(&bad) = tokens.ids().iter().find(|&&t| t as usize >= vocab) {
            return Err(Error::InvalidToken { token: bad, vocab });
        }
        if let Some(ctx) = context {
            if let Some(expected) = self.context_dim() {
                if ctx.ncols() != expected {
                    return Err(Error::ShapeError(format!(
                        "context rows have dimension {}, cross-attention expects {expected}",
                        ctx.ncols()
                    )));
                }
            }
            if ctx.nrows() == 0 {
                return Err(Error::ShapeError("empty context".into()));
            }
        }
        let mut x = Array2::zeros((tokens.len(), token_table.ncols()));
        for (i, &t) in tokens.ids().iter().enumerate() {
            x.row_mut(i).assign(&token_table.row(t as usize));
        }
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, cache) = block.forward(x, context, heads);
            caches.push(cache);
            x = next;
        }
        let pooled = x.mean_axis(Axis(0)).expect("non-empty tokens");
        let projected = pooled.dot(&self.proj);
        let projected_norm = projected.dot(&projected).sqrt();
        if !(projected_norm > 0.0 && projected_norm.is_finite()) {
            return Err(Error::DegenerateVector);
        }
        let output = projected / projected_norm;
        Ok(TowerCache {
            blocks: caches,
            states: x,
            pooled,
            projected_norm,
            output,
        })
    }

    /// Accumulates parameter gradients for an upstream gradient on the
    /// normalized output.
    pub(crate) fn backward(
        &self,
        cache: &TowerCache,
        d_output: &Array1<f64>,
        context: Option<ArrayView2<f64>>,
        heads: usize,
        grads: &mut Tower,
    ) {
        let radial = cache.output.dot(d_output);
        let d_projected = (d_output - &(&cache.output * radial)) / cache.projected_norm;
        grads.proj += &outer(&cache.pooled, &d_projected);
        let d_pooled = self.proj.dot(&d_projected);
        let n = cache.states.nrows();
        let mut d_x = Array2::zeros(cache.states.raw_dim());
        for mut row in d_x.rows_mut() {
            row.assign(&(&d_pooled / n as f64));
        }
        for ((block, bc), g) in self
            .blocks
            .iter()
            .zip(&cache.blocks)
            .zip(grads.blocks.iter_mut())
            .rev()
        {
            d_x = block.backward(d_x, bc, context, heads, g);
        }
    }

    pub fn context_dim(&self) -> Option<usize> {
        self.blocks
            .first()
            .and_then(|b| b.cross_attn.as_ref())
            .map(|ca| ca.wk.nrows())
    }

    pub fn zeros_like(&self) -> Tower {
        let mut t = self.clone();
        for w in t.tensors_mut() {
            w.fill(0.0);
        }
        t
    }

    /// Weight matrices in declared order: per block self-attention
    /// (q, k, v, o), cross-attention (q, k, v, o) when present, feed-forward
    /// (w1, w2); then the output projection.
    pub fn tensors(&self) -> Vec<&Array2<f64>> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.extend(b.self_attn.tensors());
            if let Some(ca) = &b.cross_attn {
                out.extend(ca.tensors());
            }
            out.push(&b.ffn.w1);
            out.push(&b.ffn.w2);
        }
        out.push(&self.proj);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.extend(b.self_attn.tensors_mut());
            if let Some(ca) = &mut b.cross_attn {
                out.extend(ca.tensors_mut());
            }
            out.push(&mut b.ffn.w1);
            out.push(&mut b.ffn.w2);
        }
        out.push(&mut self.proj);
        out
    }

    pub fn add_assign(&mut self, other: &Tower) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            *a += b;
        }
    }
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let col = a.view().insert_axis(Axis(1));
    let row = b.view().insert_axis(Axis(0));
    col.dot(&row)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_derivative_matches_central_difference() {
        for &x in &[-3.0, -1.0, -0.1, 0.0, 0.3, 1.7, 4.0] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x = {x}");
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let p = softmax_rows(ndarray::array![[1.0, 2.0, 3.0], [1000.0, 1000.0, -1000.0]]);
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        assert!((p[[1, 0]] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn single_source_row_attention_is_linear_in_source() {
        // one key/value row: attention weights are all 1
        let a = Attention {
            wq: Array2::eye(2),
            wk: Array2::eye(2),
            wv: ndarray::array![[2.0, 0.0], [0.0, 3.0]],
            wo: Array2::eye(2),
        };
        let x = ndarray::array![[0.3, -1.0], [5.0, 2.0]];
        let src = ndarray::array![[1.0, 1.0]];
        let (out, _) = a.forward(x.view(), src.view(), 2);
        assert_eq!(out, ndarray::array![[2.0, 3.0], [2.0, 3.0]]);
    }
}
