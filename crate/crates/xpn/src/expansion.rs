//! Static, block static and dynamic expansion layers.
//!
//! An expansion layer projects its length-L input onto an expanded axis of
//! T rows (forward), refines it there, and maps back to L rows (backward).
//! Two signed ReLU paths of the length transformation matrix are row
//! normalized with an additive-ε operator and blended by a sigmoid gate.
//!
//! The static variant learns its expansion queries/biases outright and a
//! block static layer runs a whole group of target lengths at once,
//! averaging the backward results by the inverse group count. The dynamic
//! variant mixes a projection of the input into the queries/biases and
//! supports causal masking so decoding stays auto-regressive.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{self, Tape, Tensor, Var};

/// How the backward normalization treats a multi-length group: per group
/// block (the default, which makes a single-length group reduce exactly to
/// plain static expansion) or jointly over the concatenated expanded axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum BackwardNormScope {
    #[default]
    PerGroup,
    Joint,
}

/// Row-wise sum normalization with an additive stabilizer:
/// out[i][j] = m[i][j] / (Σ_z m[i][z] + eps). Rows of an entrywise
/// nonnegative input end up nonnegative with sum s/(s+eps) < 1, and
/// all-zero rows stay all-zero.
pub fn psi_row_normalize(tape: &mut Tape, m: Var, eps: f64) -> Result<Var> {
    if eps <= 0.0 {
        return Err(Error::Config(format!("psi eps must be > 0, got {eps}")));
    }
    let sums = tape.sum_rows(m);
    let denom = tape.add_scalar(sums, eps);
    tape.div_rows(m, denom)
}

/// Forward causal mask, (L·N_E)×L: the rows of block i may only see key
/// columns j ≤ i.
pub fn causal_forward_mask(l: usize, n_e: usize) -> Tensor {
    let mut t = Tensor::zeros(l * n_e, l);
    for i in 0..l {
        for k in 0..n_e {
            for j in 0..=i {
                t.set(i * n_e + k, j, 1.0);
            }
        }
    }
    t
}

/// Backward causal mask, L×(L·N_E): output row t may only read columns of
/// blocks i ≤ t.
pub fn causal_backward_mask(l: usize, n_e: usize) -> Tensor {
    let mut t = Tensor::zeros(l, l * n_e);
    for row in 0..l {
        for i in 0..=row {
            for k in 0..n_e {
                t.set(row, i * n_e + k, 1.0);
            }
        }
    }
    t
}

/// Shared expansion pipeline over already-built queries and biases.
///
/// Path i ∈ {1, 2} applies ReLU((−1)^i · M): path 1 takes the negative
/// branch and pairs with V₁, path 2 the positive branch with V₂. Masks,
/// when present, zero entries after ReLU and before Ψ.
#[allow(clippy::too_many_arguments)]
fn expand_core(
    tape: &mut Tape,
    q_e: Var,
    b_e: Var,
    k: Var,
    v: [Var; 2],
    s: Var,
    groups: &[usize],
    eps: f64,
    fwd_mask: Option<&Tensor>,
    bwd_mask: Option<&Tensor>,
    scope: BackwardNormScope,
) -> Result<Var> {
    let d_m = tape.shape(k).1;
    let kt = tape.transpose(k);
    let m_raw = tape.matmul(q_e, kt)?;
    let m = tape.scale(m_raw, 1.0 / (d_m as f64).sqrt());
    let fwd_mask = fwd_mask.map(|t| tape.constant(t));
    let bwd_mask = bwd_mask.map(|t| tape.constant(t));

    let mut f = [None, None];
    for (i, fi) in f.iter_mut().enumerate() {
        let sign = if i == 0 { -1.0 } else { 1.0 };
        let signed = if i == 0 { tape.scale(m, sign) } else { m };
        let mut a = tape.relu(signed);
        if let Some(mask) = fwd_mask {
            a = tape.mul(a, mask)?;
        }
        let r = psi_row_normalize(tape, a, eps)?;
        let rv = tape.matmul(r, v[i])?;
        *fi = Some(tape.add(rv, b_e)?);
    }

    let mt = tape.transpose(m);
    let inv_group_count = 1.0 / groups.len() as f64;
    let mut b = [None, None];
    for (i, bi) in b.iter_mut().enumerate() {
        let sign_negate = i == 0;
        let fi = f[i].expect("both paths built");
        let combined = match scope {
            BackwardNormScope::Joint => {
                let signed = if sign_negate { tape.scale(mt, -1.0) } else { mt };
                let mut a = tape.relu(signed);
                if let Some(mask) = bwd_mask {
                    a = tape.mul(a, mask)?;
                }
                let r = psi_row_normalize(tape, a, eps)?;
                tape.matmul(r, fi)?
            }
            BackwardNormScope::PerGroup => {
                let mut acc: Option<Var> = None;
                let mut offset = 0;
                for &g in groups {
                    let mg = tape.slice_cols(mt, offset, g)?;
                    let signed = if sign_negate { tape.scale(mg, -1.0) } else { mg };
                    let mut a = tape.relu(signed);
                    if let Some(mask) = bwd_mask {
                        let mask_g = tape.slice_cols(mask, offset, g)?;
                        a = tape.mul(a, mask_g)?;
                    }
                    let r = psi_row_normalize(tape, a, eps)?;
                    let fg = tape.slice_rows(fi, offset, g)?;
                    let bg = tape.matmul(r, fg)?;
                    acc = Some(match acc {
                        None => bg,
                        Some(prev) => tape.add(prev, bg)?,
                    });
                    offset += g;
                }
                acc.expect("at least one group")
            }
        };
        *bi = Some(tape.scale(combined, inv_group_count));
    }

    let gate = tape.sigmoid(s);
    let neg_gate = tape.scale(gate, -1.0);
    let one_minus = tape.add_scalar(neg_gate, 1.0);
    let p1 = tape.mul(gate, b[0].expect("path 1"))?;
    let p2 = tape.mul(one_minus, b[1].expect("path 2"))?;
    tape.add(p1, p2)
}

// ── Static / block static expansion ─────────────────────────────────────────

/// Learned expansion queries and biases over a group of target lengths,
/// plus the four input projections. A single-element group is plain
/// static expansion.
#[derive(Debug)]
pub struct StaticExpansion {
    groups: Vec<usize>,
    d_m: usize,
    eps: f64,
    scope: BackwardNormScope,
    pub e_q: ParamId,
    pub e_b: ParamId,
    pub w_k: ParamId,
    pub w_v1: ParamId,
    pub w_v2: ParamId,
    pub w_s: ParamId,
}

fn validate_expansion_config(d_m: usize, eps: f64) -> Result<()> {
    if d_m == 0 {
        return Err(Error::Config("model width must be >= 1".into()));
    }
    if eps <= 0.0 {
        return Err(Error::Config(format!("expansion eps must be > 0, got {eps}")));
    }
    Ok(())
}

impl StaticExpansion {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d_m: usize,
        groups: &[usize],
        eps: f64,
        scope: BackwardNormScope,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        validate_expansion_config(d_m, eps)?;
        if groups.is_empty() || groups.iter().any(|&g| g == 0) {
            return Err(Error::Config(format!("every group length must be >= 1, got {groups:?}")));
        }
        let total: usize = groups.iter().sum();
        let scale = 1.0 / (d_m as f64).sqrt();
        let e_q = store.register(&format!("{prefix}.e_q"), Tensor::uniform(total, d_m, scale, rng))?;
        let e_b = store.register(&format!("{prefix}.e_b"), Tensor::uniform(total, d_m, scale, rng))?;
        let w_k = store.register(&format!("{prefix}.w_k"), Tensor::uniform(d_m, d_m, scale, rng))?;
        let w_v1 = store.register(&format!("{prefix}.w_v1"), Tensor::uniform(d_m, d_m, scale, rng))?;
        let w_v2 = store.register(&format!("{prefix}.w_v2"), Tensor::uniform(d_m, d_m, scale, rng))?;
        let w_s = store.register(&format!("{prefix}.w_s"), Tensor::uniform(d_m, d_m, scale, rng))?;
        Ok(StaticExpansion { groups: groups.to_vec(), d_m, eps, scope, e_q, e_b, w_k, w_v1, w_v2, w_s })
    }

    pub fn groups(&self) -> &[usize] {
        &self.groups
    }

    /// Output shape equals input shape for any group configuration.
    pub fn forward(&self, store: &ParamStore, tape: &mut Tape, x: Var) -> Result<Var> {
        let (_, d) = tape.shape(x);
        if d != self.d_m {
            return Err(Error::Shape(format!(
                "static expansion expects width {}, input is {:?}",
                self.d_m,
                tape.shape(x)
            )));
        }
        let q_e = tape.param(store, self.e_q);
        let b_e = tape.param(store, self.e_b);
        let w_k = tape.param(store, self.w_k);
        let w_v1 = tape.param(store, self.w_v1);
        let w_v2 = tape.param(store, self.w_v2);
        let w_s = tape.param(store, self.w_s);
        let k = tape.matmul(x, w_k)?;
        let v1 = tape.matmul(x, w_v1)?;
        let v2 = tape.matmul(x, w_v2)?;
        let s = tape.matmul(x, w_s)?;
        expand_core(tape, q_e, b_e, k, [v1, v2], s, &self.groups, self.eps, None, None, self.scope)
    }

    /// Number of learned scalars in this layer.
    pub fn param_count(groups: &[usize], d_m: usize) -> usize {
        let total: usize = groups.iter().sum();
        2 * total * d_m + 4 * d_m * d_m
    }
}

// ── Dynamic expansion ───────────────────────────────────────────────────────

/// Expansion layer whose queries and biases mix a projection of the input
/// with learned per-slot parameters; the expanded axis has L·N_E rows and
/// is treated as a single group.
#[derive(Debug)]
pub struct DynamicExpansion {
    n_e: usize,
    d_m: usize,
    eps: f64,
    pub e_q: ParamId,
    pub e_b: ParamId,
    pub w_c: ParamId,
    pub w_k: ParamId,
    pub w_v1: ParamId,
    pub w_v2: ParamId,
    pub w_s: ParamId,
}

impl DynamicExpansion {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d_m: usize,
        n_e: usize,
        eps: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        validate_expansion_config(d_m, eps)?;
        if n_e == 0 {
            return Err(Error::Config("expansion factor must be >= 1".into()));
        }
        let scale = 1.0 / (d_m as f64).sqrt();
        let e_q = store.register(&format!("{prefix}.e_q"), Tensor::uniform(n_e, d_m, scale, rng))?;
        let e_b = store.register(&format!("{prefix}.e_b"), Tensor::uniform(n_e, d_m, scale, rng))?;
        let w_c = store.register(&format!("{prefix}.w_c"), Tensor::uniform(d_m, d_m, scale, rng))?;
        let w_k = store.register(&format!("{prefix}.w_k"), Tensor::uniform(d_m, d_m, scale, rng))?;
        let w_v1 = store.register(&format!("{prefix}.w_v1"), Tensor::uniform(d_m, d_m, scale, rng))?;
        let w_v2 = store.register(&format!("{prefix}.w_v2"), Tensor::uniform(d_m, d_m, scale, rng))?;
        let w_s = store.register(&format!("{prefix}.w_s"), Tensor::uniform(d_m, d_m, scale, rng))?;
        Ok(DynamicExpansion { n_e, d_m, eps, e_q, e_b, w_c, w_k, w_v1, w_v2, w_s })
    }

    pub fn expansion_factor(&self) -> usize {
        self.n_e
    }

    /// Builds the (L·N_E)×d_m query and bias matrices: row i·N_E + k is
    /// C[i] + E_Q[k] (resp. E_B[k]) with C = X·W_C. Implemented by row
    /// repetition and tiling without materializing the block matrices; the
    /// reference module holds the materialized form for the equivalence
    /// test.
    pub fn build_queries(&self, store: &ParamStore, tape: &mut Tape, x: Var) -> Result<(Var, Var)> {
        let (l, _) = tape.shape(x);
        let w_c = tape.param(store, self.w_c);
        let e_q = tape.param(store, self.e_q);
        let e_b = tape.param(store, self.e_b);
        let c = tape.matmul(x, w_c)?;
        let c_rep = tape.repeat_rows_each(c, self.n_e);
        let q_tile = tape.tile_rows(e_q, l);
        let b_tile = tape.tile_rows(e_b, l);
        let q = tape.add(c_rep, q_tile)?;
        let b = tape.add(c_rep, b_tile)?;
        Ok((q, b))
    }

    /// Full-sequence forward. With `causal` set, entries looking at future
    /// positions are zeroed after ReLU (before Ψ) in both the forward and
    /// backward transformations, so output row t depends only on input
    /// rows 0..=t.
    pub fn forward(&self, store: &ParamStore, tape: &mut Tape, x: Var, causal: bool) -> Result<Var> {
        let (l, d) = tape.shape(x);
        if d != self.d_m {
            return Err(Error::Shape(format!(
                "dynamic expansion expects width {}, input is {:?}",
                self.d_m,
                tape.shape(x)
            )));
        }
        let (q_e, b_e) = self.build_queries(store, tape, x)?;
        let w_k = tape.param(store, self.w_k);
        let w_v1 = tape.param(store, self.w_v1);
        let w_v2 = tape.param(store, self.w_v2);
        let w_s = tape.param(store, self.w_s);
        let k = tape.matmul(x, w_k)?;
        let v1 = tape.matmul(x, w_v1)?;
        let v2 = tape.matmul(x, w_v2)?;
        let s = tape.matmul(x, w_s)?;
        let (fm, bm);
        let (fwd_mask, bwd_mask) = if causal {
            fm = causal_forward_mask(l, self.n_e);
            bm = causal_backward_mask(l, self.n_e);
            (Some(&fm), Some(&bm))
        } else {
            (None, None)
        };
        expand_core(
            tape,
            q_e,
            b_e,
            k,
            [v1, v2],
            s,
            &[l * self.n_e],
            self.eps,
            fwd_mask,
            bwd_mask,
            BackwardNormScope::PerGroup,
        )
    }

    pub fn param_count(n_e: usize, d_m: usize) -> usize {
        2 * n_e * d_m + 5 * d_m * d_m
    }

    // ── Incremental (causal) evaluation ─────────────────────────────────

    /// Starts an empty per-sequence state for [`Self::step_row`].
    pub fn begin(&self) -> DynExpState {
        DynExpState::default()
    }

    /// Causal single-row evaluation without a tape. Feeding normalized
    /// input rows one at a time produces, bit for bit, the same rows as
    /// the causal full-sequence [`Self::forward`]: per-block Ψ sums only
    /// ever see visible positions, so earlier rows never change.
    pub fn step_row(&self, store: &ParamStore, state: &mut DynExpState, x_row: &[f64]) -> Vec<f64> {
        let d = self.d_m;
        let n_e = self.n_e;
        let inv_sqrt = 1.0 / (d as f64).sqrt();
        let mut k_t = vec![0.0; d];
        let mut v1_t = vec![0.0; d];
        let mut v2_t = vec![0.0; d];
        let mut s_t = vec![0.0; d];
        let mut c_t = vec![0.0; d];
        tensor::vec_mat(x_row, store.get(self.w_k).data(), d, &mut k_t);
        tensor::vec_mat(x_row, store.get(self.w_v1).data(), d, &mut v1_t);
        tensor::vec_mat(x_row, store.get(self.w_v2).data(), d, &mut v2_t);
        tensor::vec_mat(x_row, store.get(self.w_s).data(), d, &mut s_t);
        tensor::vec_mat(x_row, store.get(self.w_c).data(), d, &mut c_t);
        state.k_rows.push(k_t);
        state.v1_rows.push(v1_t);
        state.v2_rows.push(v2_t);
        let t = state.k_rows.len() - 1;

        // Forward for the new block t: keys 0..=t are visible.
        let e_q = store.get(self.e_q);
        let e_b = store.get(self.e_b);
        for slot in 0..n_e {
            let q: Vec<f64> = (0..d).map(|z| c_t[z] + e_q.get(slot, z)).collect();
            let b: Vec<f64> = (0..d).map(|z| c_t[z] + e_b.get(slot, z)).collect();
            let m_row: Vec<f64> =
                (0..=t).map(|j| tensor::dot(&q, &state.k_rows[j]) * inv_sqrt).collect();
            let f1 = expand_row(&m_row, -1.0, &state.v1_rows, &b, self.eps);
            let f2 = expand_row(&m_row, 1.0, &state.v2_rows, &b, self.eps);
            state.q_rows.push(q);
            state.f1_rows.push(f1);
            state.f2_rows.push(f2);
        }

        // Backward for output row t over all visible blocks.
        let visible = (t + 1) * n_e;
        let m_bwd: Vec<f64> = (0..visible)
            .map(|c| tensor::dot(&state.q_rows[c], &state.k_rows[t]) * inv_sqrt)
            .collect();
        let b1 = expand_row(&m_bwd, -1.0, &state.f1_rows, &vec![0.0; d], self.eps);
        let b2 = expand_row(&m_bwd, 1.0, &state.f2_rows, &vec![0.0; d], self.eps);

        (0..d)
            .map(|z| {
                let gate = tensor::sigmoid(s_t[z]);
                gate * b1[z] + (gate * -1.0 + 1.0) * b2[z]
            })
            .collect()
    }
}

/// ReLU(sign·m), Ψ with eps, weighted sum of `rows`, plus `bias`.
fn expand_row(m: &[f64], sign: f64, rows: &[Vec<f64>], bias: &[f64], eps: f64) -> Vec<f64> {
    let a: Vec<f64> = m.iter().map(|&v| tensor::relu(sign * v)).collect();
    let denom = a.iter().sum::<f64>() + eps;
    let mut out = vec![0.0; bias.len()];
    for (j, &av) in a.iter().enumerate() {
        let r = av / denom;
        for (z, o) in out.iter_mut().enumerate() {
            *o += r * rows[j][z];
        }
    }
    for (z, o) in out.iter_mut().enumerate() {
        *o += bias[z];
    }
    out
}

/// Grown per-sequence buffers for incremental dynamic expansion.
#[derive(Debug, Clone, Default)]
pub struct DynExpState {
    k_rows: Vec<Vec<f64>>,
    v1_rows: Vec<Vec<f64>>,
    v2_rows: Vec<Vec<f64>>,
    q_rows: Vec<Vec<f64>>,
    f1_rows: Vec<Vec<f64>>,
    f2_rows: Vec<Vec<f64>>,
}
