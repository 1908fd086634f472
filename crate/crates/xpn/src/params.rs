//! Named parameter storage shared by layers, the optimizer, checkpointing
//! and the finite-difference gradient checker.
//!
//! Layers hold [`ParamId`] handles; the tensors themselves live here so a
//! single registry drives optimizer state, freezing and serialization.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Debug)]
struct Entry {
    name: String,
    tensor: Tensor,
    trainable: bool,
}

#[derive(Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn register(&mut self, name: &str, mut tensor: Tensor) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        tensor.set_requires_grad(true);
        let idx = self.entries.len();
        self.by_name.insert(name.to_string(), idx);
        self.entries.push(Entry { name: name.to_string(), tensor, trainable: true });
        Ok(ParamId(idx))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.tensor))
    }

    /// Total number of scalar parameters across all entries.
    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    /// Marks every parameter whose name starts with `prefix`; returns how
    /// many entries matched.
    pub fn set_trainable_by_prefix(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut n = 0;
        for e in &mut self.entries {
            if e.name.starts_with(prefix) {
                e.trainable = trainable;
                n += 1;
            }
        }
        n
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.tensor.zero_grad();
        }
    }

    /// Raw f64 bits of every parameter, in registration order. Used by the
    /// frozen-stage tests to assert bitwise stability.
    pub fn bits_snapshot(&self) -> Vec<Vec<u64>> {
        self.entries
            .iter()
            .map(|e| e.tensor.data().iter().map(|v| v.to_bits()).collect())
            .collect()
    }
}

impl Tape {
    /// Registers a parameter as a leaf on this tape and remembers the
    /// binding so [`Tape::accumulate_param_grads`] can route the gradient
    /// back. Frozen parameters become constant leaves.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let e = store.get(id);
        let (r, c) = (e.rows(), e.cols());
        let v = self.leaf_raw(r, c, e.data().to_vec(), store.is_trainable(id));
        self.record_bind(id.0, v);
        v
    }

    /// Adds every bound leaf's gradient into the owning tensor's grad slot.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for &(idx, var) in self.binds() {
            if let Some(g) = self.grad(var) {
                let g = g.to_vec();
                store.entries[idx].tensor.accumulate_grad(&g);
            }
        }
    }
}

// ── Gradient checking ───────────────────────────────────────────────────────

#[derive(Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
}

/// Per-parameter comparison of tape gradients against central finite
/// differences.
#[derive(Debug)]
pub struct GradCheckReport {
    pub entries: Vec<ParamCheck>,
    pub h: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel_err <= self.tol)
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1.0)
}

/// Checks d loss / d p for every trainable scalar in `store` against the
/// central difference (f(p+h) − f(p−h)) / 2h.
///
/// `build` must deterministically construct the forward graph and return
/// the scalar loss node; it is re-invoked for every perturbed evaluation.
pub fn grad_check<F>(store: &mut ParamStore, mut build: F, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<(Tape, Var)>,
{
    if h <= 0.0 {
        return Err(Error::Config(format!("grad_check h must be > 0, got {h}")));
    }
    // Analytic pass.
    store.zero_grads();
    let (mut tape, loss) = build(store)?;
    let base = tape.item(loss)?;
    if !base.is_finite() {
        return Err(Error::Config(format!("loss is not finite: {base}")));
    }
    tape.backward(loss)?;
    tape.accumulate_param_grads(store);
    let analytic: Vec<Vec<f64>> = store
        .entries
        .iter()
        .map(|e| e.tensor.grad().map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; e.tensor.numel()]))
        .collect();

    // Numeric pass, element by element.
    let mut entries = Vec::new();
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        if !store.is_trainable(id) {
            continue;
        }
        let numel = store.get(id).numel();
        let mut worst = 0.0_f64;
        for e in 0..numel {
            let orig = store.get(id).data()[e];
            store.get_mut(id).data_mut()[e] = orig + h;
            let (tp, lp) = build(store)?;
            let fp = tp.item(lp)?;
            store.get_mut(id).data_mut()[e] = orig - h;
            let (tm, lm) = build(store)?;
            let fm = tm.item(lm)?;
            store.get_mut(id).data_mut()[e] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::Config(format!("loss is not finite under perturbation: {fp}, {fm}")));
            }
            let numeric = (fp - fm) / (2.0 * h);
            worst = worst.max(rel_err(analytic[id.0][e], numeric));
        }
        entries.push(ParamCheck { name: store.name(id).to_string(), max_rel_err: worst });
    }
    Ok(GradCheckReport { entries, h, tol })
}
