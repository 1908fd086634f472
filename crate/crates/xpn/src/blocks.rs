//! Standard sub-layers around the expansion layers: multi-head
//! cross-attention, feed-forward, and the pre-LN residual encoder/decoder
//! layer wiring.

use rand::Rng;

use crate::error::{Error, Result};
use crate::expansion::{BackwardNormScope, DynExpState, DynamicExpansion, StaticExpansion};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{self, Tape, Tensor, Var};

/// One learned affine layer norm instance (γ initialized to 1, β to 0).
#[derive(Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    eps: f64,
}

impl Norm {
    pub fn new(store: &mut ParamStore, prefix: &str, d_m: usize, eps: f64) -> Result<Self> {
        let gamma = store.register(&format!("{prefix}.gamma"), Tensor::full(1, d_m, 1.0))?;
        let beta = store.register(&format!("{prefix}.beta"), Tensor::zeros(1, d_m))?;
        Ok(Norm { gamma, beta, eps })
    }

    pub fn forward(&self, store: &ParamStore, tape: &mut Tape, x: Var) -> Result<Var> {
        let gamma = tape.param(store, self.gamma);
        let beta = tape.param(store, self.beta);
        tape.layer_norm(x, gamma, beta, self.eps)
    }

    pub fn apply_row(&self, store: &ParamStore, row: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; row.len()];
        tensor::layer_norm_row(
            row,
            store.get(self.gamma).data(),
            store.get(self.beta).data(),
            self.eps,
            &mut out,
        );
        out
    }

    pub fn param_count(d_m: usize) -> usize {
        2 * d_m
    }
}

// ── Cross-attention ─────────────────────────────────────────────────────────

/// Multi-head attention from decoder rows onto encoder output; no causal
/// mask since the keys are visual positions, not future tokens.
#[derive(Debug)]
pub struct CrossAttention {
    heads: usize,
    d_m: usize,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
}

impl CrossAttention {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d_m: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || d_m % heads != 0 {
            return Err(Error::Config(format!(
                "head count {heads} must divide model width {d_m}"
            )));
        }
        let scale = 1.0 / (d_m as f64).sqrt();
        let w_q = store.register(&format!("{prefix}.w_q"), Tensor::uniform(d_m, d_m, scale, rng))?;
        let w_k = store.register(&format!("{prefix}.w_k"), Tensor::uniform(d_m, d_m, scale, rng))?;
        let w_v = store.register(&format!("{prefix}.w_v"), Tensor::uniform(d_m, d_m, scale, rng))?;
        let w_o = store.register(&format!("{prefix}.w_o"), Tensor::uniform(d_m, d_m, scale, rng))?;
        Ok(CrossAttention { heads, d_m, w_q, w_k, w_v, w_o })
    }

    pub fn forward(&self, store: &ParamStore, tape: &mut Tape, y: Var, x_enc: Var) -> Result<Var> {
        let (_, dy) = tape.shape(y);
        let (_, dx) = tape.shape(x_enc);
        if dy != self.d_m || dx != self.d_m {
            return Err(Error::Shape(format!(
                "cross attention expects width {}, got query {:?} and keys {:?}",
                self.d_m,
                tape.shape(y),
                tape.shape(x_enc)
            )));
        }
        let w_q = tape.param(store, self.w_q);
        let w_k = tape.param(store, self.w_k);
        let w_v = tape.param(store, self.w_v);
        let w_o = tape.param(store, self.w_o);
        let q = tape.matmul(y, w_q)?;
        let k = tape.matmul(x_enc, w_k)?;
        let v = tape.matmul(x_enc, w_v)?;
        let dh = self.d_m / self.heads;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let mut head_outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let kt = tape.transpose(kh);
            let scores_raw = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores_raw, inv_sqrt);
            let attn = tape.softmax_rows(scores);
            head_outs.push(tape.matmul(attn, vh)?);
        }
        let cat = tape.concat_cols(&head_outs)?;
        tape.matmul(cat, w_o)
    }

    /// Encoder-side projections, computed once per sequence and reused for
    /// every decoding step.
    pub fn project_encoder(&self, store: &ParamStore, enc_rows: &[Vec<f64>]) -> EncKv {
        let d = self.d_m;
        let mut k = Vec::with_capacity(enc_rows.len());
        let mut v = Vec::with_capacity(enc_rows.len());
        for row in enc_rows {
            let mut kr = vec![0.0; d];
            let mut vr = vec![0.0; d];
            tensor::vec_mat(row, store.get(self.w_k).data(), d, &mut kr);
            tensor::vec_mat(row, store.get(self.w_v).data(), d, &mut vr);
            k.push(kr);
            v.push(vr);
        }
        EncKv { k, v }
    }

    /// Attention for a single query row against cached projections.
    pub fn attend_row(&self, store: &ParamStore, kv: &EncKv, y_row: &[f64]) -> Vec<f64> {
        let d = self.d_m;
        let dh = d / self.heads;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let mut q = vec![0.0; d];
        tensor::vec_mat(y_row, store.get(self.w_q).data(), d, &mut q);
        let mut cat = vec![0.0; d];
        for h in 0..self.heads {
            let lo = h * dh;
            let mut scores: Vec<f64> = kv
                .k
                .iter()
                .map(|krow| tensor::dot(&q[lo..lo + dh], &krow[lo..lo + dh]) * inv_sqrt)
                .collect();
            tensor::softmax_row(&mut scores);
            for (n, &p) in scores.iter().enumerate() {
                let vrow = &kv.v[n][lo..lo + dh];
                for z in 0..dh {
                    cat[lo + z] += p * vrow[z];
                }
            }
        }
        let mut out = vec![0.0; d];
        tensor::vec_mat(&cat, store.get(self.w_o).data(), d, &mut out);
        out
    }

    pub fn param_count(d_m: usize) -> usize {
        4 * d_m * d_m
    }
}

/// Cached encoder key/value projections for one decoder layer.
#[derive(Debug, Clone)]
pub struct EncKv {
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

// ── Feed-forward ────────────────────────────────────────────────────────────

/// Two-layer position-wise network with ReLU: W₂·relu(W₁·x + b₁) + b₂.
#[derive(Debug)]
pub struct FeedForward {
    d_m: usize,
    d_ff: usize,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d_m: usize,
        d_ff: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let scale = 1.0 / (d_m as f64).sqrt();
        let w1 = store.register(&format!("{prefix}.w1"), Tensor::uniform(d_m, d_ff, scale, rng))?;
        let b1 = store.register(&format!("{prefix}.b1"), Tensor::zeros(1, d_ff))?;
        let w2 = store.register(&format!("{prefix}.w2"), Tensor::uniform(d_ff, d_m, scale, rng))?;
        let b2 = store.register(&format!("{prefix}.b2"), Tensor::zeros(1, d_m))?;
        Ok(FeedForward { d_m, d_ff, w1, b1, w2, b2 })
    }

    pub fn forward(&self, store: &ParamStore, tape: &mut Tape, x: Var) -> Result<Var> {
        let w1 = tape.param(store, self.w1);
        let b1 = tape.param(store, self.b1);
        let w2 = tape.param(store, self.w2);
        let b2 = tape.param(store, self.b2);
        let h_raw = tape.matmul(x, w1)?;
        let h_biased = tape.add(h_raw, b1)?;
        let h = tape.relu(h_biased);
        let out_raw = tape.matmul(h, w2)?;
        tape.add(out_raw, b2)
    }

    pub fn apply_row(&self, store: &ParamStore, row: &[f64]) -> Vec<f64> {
        let mut h = vec![0.0; self.d_ff];
        tensor::vec_mat(row, store.get(self.w1).data(), self.d_ff, &mut h);
        let b1 = store.get(self.b1).data();
        for (j, v) in h.iter_mut().enumerate() {
            *v = tensor::relu(*v + b1[j]);
        }
        let mut out = vec![0.0; self.d_m];
        tensor::vec_mat(&h, store.get(self.w2).data(), self.d_m, &mut out);
        let b2 = store.get(self.b2).data();
        for (j, v) in out.iter_mut().enumerate() {
            *v += b2[j];
        }
        out
    }

    pub fn param_count(d_m: usize, d_ff: usize) -> usize {
        d_m * d_ff + d_ff + d_ff * d_m + d_m
    }
}

// ── Encoder / decoder layers ────────────────────────────────────────────────

/// Pre-LN residual encoder layer: B = X + StaticExp(Norm(X)),
/// X' = B + FF(Norm(B)).
#[derive(Debug)]
pub struct EncoderLayer {
    pub norm_se: Norm,
    pub expansion: StaticExpansion,
    pub norm_ff: Norm,
    pub ff: FeedForward,
}

impl EncoderLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d_m: usize,
        d_ff: usize,
        groups: &[usize],
        eps: f64,
        ln_eps: f64,
        scope: BackwardNormScope,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(EncoderLayer {
            norm_se: Norm::new(store, &format!("{prefix}.norm_se"), d_m, ln_eps)?,
            expansion: StaticExpansion::new(store, &format!("{prefix}.se"), d_m, groups, eps, scope, rng)?,
            norm_ff: Norm::new(store, &format!("{prefix}.norm_ff"), d_m, ln_eps)?,
            ff: FeedForward::new(store, &format!("{prefix}.ff"), d_m, d_ff, rng)?,
        })
    }

    pub fn forward(&self, store: &ParamStore, tape: &mut Tape, x: Var) -> Result<Var> {
        let normed = self.norm_se.forward(store, tape, x)?;
        let expanded = self.expansion.forward(store, tape, normed)?;
        let b = tape.add(x, expanded)?;
        let normed_b = self.norm_ff.forward(store, tape, b)?;
        let ffed = self.ff.forward(store, tape, normed_b)?;
        tape.add(b, ffed)
    }

    pub fn param_count(d_m: usize, d_ff: usize, groups: &[usize]) -> usize {
        2 * Norm::param_count(d_m)
            + StaticExpansion::param_count(groups, d_m)
            + FeedForward::param_count(d_m, d_ff)
    }
}

/// Pre-LN residual decoder layer: dynamic expansion, then cross-attention
/// onto the encoder output, then feed-forward. Causality comes entirely
/// from the expansion masks.
#[derive(Debug)]
pub struct DecoderLayer {
    pub norm_de: Norm,
    pub expansion: DynamicExpansion,
    pub norm_ca: Norm,
    pub attention: CrossAttention,
    pub norm_ff: Norm,
    pub ff: FeedForward,
}

impl DecoderLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d_m: usize,
        d_ff: usize,
        n_e: usize,
        heads: usize,
        eps: f64,
        ln_eps: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(DecoderLayer {
            norm_de: Norm::new(store, &format!("{prefix}.norm_de"), d_m, ln_eps)?,
            expansion: DynamicExpansion::new(store, &format!("{prefix}.de"), d_m, n_e, eps, rng)?,
            norm_ca: Norm::new(store, &format!("{prefix}.norm_ca"), d_m, ln_eps)?,
            attention: CrossAttention::new(store, &format!("{prefix}.ca"), d_m, heads, rng)?,
            norm_ff: Norm::new(store, &format!("{prefix}.norm_ff"), d_m, ln_eps)?,
            ff: FeedForward::new(store, &format!("{prefix}.ff"), d_m, d_ff, rng)?,
        })
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        y: Var,
        x_enc: Var,
        causal: bool,
    ) -> Result<Var> {
        let normed = self.norm_de.forward(store, tape, y)?;
        let expanded = self.expansion.forward(store, tape, normed, causal)?;
        let b = tape.add(y, expanded)?;
        let normed_b = self.norm_ca.forward(store, tape, b)?;
        let attended = self.attention.forward(store, tape, normed_b, x_enc)?;
        let w = tape.add(b, attended)?;
        let normed_w = self.norm_ff.forward(store, tape, w)?;
        let ffed = self.ff.forward(store, tape, normed_w)?;
        tape.add(w, ffed)
    }

    /// Incremental per-layer state for step decoding.
    pub fn begin(&self, store: &ParamStore, enc_rows: &[Vec<f64>]) -> DecoderLayerState {
        DecoderLayerState {
            dyn_state: self.expansion.begin(),
            enc_kv: self.attention.project_encoder(store, enc_rows),
        }
    }

    /// Processes one new input row; returns this layer's output row.
    pub fn step_row(&self, store: &ParamStore, state: &mut DecoderLayerState, y_row: &[f64]) -> Vec<f64> {
        let normed = self.norm_de.apply_row(store, y_row);
        let expanded = self.expansion.step_row(store, &mut state.dyn_state, &normed);
        let b: Vec<f64> = y_row.iter().zip(&expanded).map(|(a, e)| a + e).collect();
        let normed_b = self.norm_ca.apply_row(store, &b);
        let attended = self.attention.attend_row(store, &state.enc_kv, &normed_b);
        let w: Vec<f64> = b.iter().zip(&attended).map(|(a, e)| a + e).collect();
        let normed_w = self.norm_ff.apply_row(store, &w);
        let ffed = self.ff.apply_row(store, &normed_w);
        w.iter().zip(&ffed).map(|(a, e)| a + e).collect()
    }

    pub fn param_count(d_m: usize, d_ff: usize, n_e: usize) -> usize {
        3 * Norm::param_count(d_m)
            + DynamicExpansion::param_count(n_e, d_m)
            + CrossAttention::param_count(d_m)
            + FeedForward::param_count(d_m, d_ff)
    }
}

/// Per-sequence decoding state of one decoder layer.
#[derive(Debug, Clone)]
pub struct DecoderLayerState {
    dyn_state: DynExpState,
    enc_kv: EncKv,
}
