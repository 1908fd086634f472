//! Independent scalar-loop reference implementations.
//!
//! These deliberately avoid the tape, the layer structs and every shared
//! kernel: plain nested loops over `Vec<Vec<f64>>`. They exist only as the
//! second route for equivalence checks — the unit tests, the acceptance
//! suite and the `selftest` command compare the real implementations
//! against these. Nothing here should ever be called from a production
//! path.

pub type Mat = Vec<Vec<f64>>;

pub fn zeros(r: usize, c: usize) -> Mat {
    vec![vec![0.0; c]; r]
}

pub fn mat_mul(a: &Mat, b: &Mat) -> Mat {
    let (m, k) = (a.len(), a[0].len());
    let n = b[0].len();
    assert_eq!(k, b.len());
    let mut out = zeros(m, n);
    for i in 0..m {
        for z in 0..k {
            for j in 0..n {
                out[i][j] += a[i][z] * b[z][j];
            }
        }
    }
    out
}

pub fn transpose(a: &Mat) -> Mat {
    let (m, n) = (a.len(), a[0].len());
    let mut out = zeros(n, m);
    for i in 0..m {
        for j in 0..n {
            out[j][i] = a[i][j];
        }
    }
    out
}

fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Row normalization: out[i][j] = m[i][j] / (Σ_z m[i][z] + eps).
pub fn psi(m: &Mat, eps: f64) -> Mat {
    let mut out = zeros(m.len(), m[0].len());
    for (i, row) in m.iter().enumerate() {
        let denom: f64 = row.iter().sum::<f64>() + eps;
        for (j, v) in row.iter().enumerate() {
            out[i][j] = v / denom;
        }
    }
    out
}

/// Expansion core over explicit queries and biases, one loop per formula:
/// the length transformation matrix, the two ReLU paths with row
/// normalization, the backward transposition per group scaled by the
/// inverse group count, and the sigmoid selection blend.
///
/// `fwd_mask` (T×L) and `bwd_mask` (L×T), when given, zero entries after
/// ReLU and before normalization. `joint_backward_norm` normalizes the
/// backward rows over the whole expanded axis instead of per group.
#[allow(clippy::too_many_arguments)]
pub fn naive_expand(
    q_e: &Mat,
    b_e: &Mat,
    x: &Mat,
    w_k: &Mat,
    w_v1: &Mat,
    w_v2: &Mat,
    w_s: &Mat,
    groups: &[usize],
    eps: f64,
    fwd_mask: Option<&Mat>,
    bwd_mask: Option<&Mat>,
    joint_backward_norm: bool,
) -> Mat {
    let l = x.len();
    let d = x[0].len();
    let total: usize = groups.iter().sum();
    assert_eq!(q_e.len(), total);

    let k = mat_mul(x, w_k);
    let v = [mat_mul(x, w_v1), mat_mul(x, w_v2)];
    let s = mat_mul(x, w_s);

    // M[t][l] = q_e[t] · k[l] / sqrt(d)
    let inv_sqrt = 1.0 / (d as f64).sqrt();
    let mut m = zeros(total, l);
    for t in 0..total {
        for j in 0..l {
            let mut acc = 0.0;
            for z in 0..d {
                acc += q_e[t][z] * k[j][z];
            }
            m[t][j] = acc * inv_sqrt;
        }
    }

    // Forward: path i applies ReLU((-1)^i · M), so path 1 is the negative
    // branch and path 2 the positive one.
    let mut f = Vec::new();
    for (i, vi) in v.iter().enumerate() {
        let sign = if i == 0 { -1.0 } else { 1.0 };
        let mut a = zeros(total, l);
        for t in 0..total {
            for j in 0..l {
                a[t][j] = relu(sign * m[t][j]);
                if let Some(mask) = fwd_mask {
                    a[t][j] *= mask[t][j];
                }
            }
        }
        let r = psi(&a, eps);
        let mut fi = zeros(total, d);
        for t in 0..total {
            for z in 0..d {
                let mut acc = 0.0;
                for j in 0..l {
                    acc += r[t][j] * vi[j][z];
                }
                fi[t][z] = acc + b_e[t][z];
            }
        }
        f.push(fi);
    }

    // Backward over M transposed, per group, averaged by 1/N_G.
    let n_g = groups.len() as f64;
    let mut b = vec![zeros(l, d), zeros(l, d)];
    for (i, fi) in f.iter().enumerate() {
        let sign = if i == 0 { -1.0 } else { 1.0 };
        if joint_backward_norm {
            let mut a = zeros(l, total);
            for t in 0..l {
                for c in 0..total {
                    a[t][c] = relu(sign * m[c][t]);
                    if let Some(mask) = bwd_mask {
                        a[t][c] *= mask[t][c];
                    }
                }
            }
            let r = psi(&a, eps);
            for t in 0..l {
                for z in 0..d {
                    let mut acc = 0.0;
                    for c in 0..total {
                        acc += r[t][c] * fi[c][z];
                    }
                    b[i][t][z] = acc / n_g;
                }
            }
        } else {
            let mut offset = 0;
            for &g in groups {
                let mut a = zeros(l, g);
                for t in 0..l {
                    for c in 0..g {
                        a[t][c] = relu(sign * m[offset + c][t]);
                        if let Some(mask) = bwd_mask {
                            a[t][c] *= mask[t][offset + c];
                        }
                    }
                }
                let r = psi(&a, eps);
                for t in 0..l {
                    for z in 0..d {
                        let mut acc = 0.0;
                        for c in 0..g {
                            acc += r[t][c] * fi[offset + c][z];
                        }
                        b[i][t][z] += acc;
                    }
                }
                offset += g;
            }
            for row in b[i].iter_mut() {
                for v in row.iter_mut() {
                    *v /= n_g;
                }
            }
        }
    }

    // Selection: sigmoid gate blends the two paths.
    let mut out = zeros(l, d);
    for t in 0..l {
        for z in 0..d {
            let gate = sigmoid(s[t][z]);
            out[t][z] = gate * b[0][t][z] + (1.0 - gate) * b[1][t][z];
        }
    }
    out
}

/// Dynamic expansion queries by literally materializing the block
/// structure: H_E is L×(L·N_E) with an all-ones 1×N_E block on the
/// diagonal, I_E is the column-wise concatenation of L identity matrices
/// of size N_E. Returns ((Cᵀ·H_E)ᵀ + (E_Qᵀ·I_E)ᵀ, same with E_B).
pub fn naive_dynamic_queries(c: &Mat, e_q: &Mat, e_b: &Mat) -> (Mat, Mat) {
    let l = c.len();
    let n_e = e_q.len();
    let total = l * n_e;

    let mut h_e = zeros(l, total);
    for i in 0..l {
        for k in 0..n_e {
            h_e[i][i * n_e + k] = 1.0;
        }
    }
    let mut i_e = zeros(n_e, total);
    for rep in 0..l {
        for k in 0..n_e {
            i_e[k][rep * n_e + k] = 1.0;
        }
    }

    let from_c = transpose(&mat_mul(&transpose(c), &h_e));
    let from_q = transpose(&mat_mul(&transpose(e_q), &i_e));
    let from_b = transpose(&mat_mul(&transpose(e_b), &i_e));

    let mut q = zeros(total, c[0].len());
    let mut b = zeros(total, c[0].len());
    for t in 0..total {
        for z in 0..c[0].len() {
            q[t][z] = from_c[t][z] + from_q[t][z];
            b[t][z] = from_c[t][z] + from_b[t][z];
        }
    }
    (q, b)
}

// ── Metric references ───────────────────────────────────────────────────────

use std::collections::BTreeMap;

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<Vec<String>, usize> {
    let mut counts = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    counts
}

/// Brute-force CIDEr-D: clipped term frequencies weighted by
/// log(corpus/df), cosine per n-gram order, Gaussian length penalty,
/// averaged over references and over n = 1..4, times 10. A corpus of one
/// image is treated as size two so the idf weights stay positive.
pub fn naive_cider_d(
    candidate: &[String],
    references: &[Vec<String>],
    corpus: &[Vec<Vec<String>>],
    sigma: f64,
) -> f64 {
    if candidate.is_empty() || references.is_empty() {
        return 0.0;
    }
    let corpus_size = (corpus.len() as f64).max(2.0);
    let mut total = 0.0;
    for n in 1..=4 {
        // Document frequency for this order, recounted from scratch.
        let mut df: BTreeMap<Vec<String>, usize> = BTreeMap::new();
        for image_refs in corpus {
            let mut seen: BTreeMap<Vec<String>, bool> = BTreeMap::new();
            for r in image_refs {
                for g in ngram_counts(r, n).keys() {
                    seen.insert(g.clone(), true);
                }
            }
            for g in seen.keys() {
                *df.entry(g.clone()).or_insert(0) += 1;
            }
        }
        let idf = |g: &Vec<String>| -> f64 {
            let d = df.get(g).copied().unwrap_or(0).max(1) as f64;
            (corpus_size / d).ln()
        };

        let cand = ngram_counts(candidate, n);
        let cand_norm: f64 = cand
            .iter()
            .map(|(g, &c)| {
                let w = c as f64 * idf(g);
                w * w
            })
            .sum::<f64>()
            .sqrt();

        let mut per_ref = 0.0;
        for r in references {
            let rc = ngram_counts(r, n);
            let ref_norm: f64 = rc
                .iter()
                .map(|(g, &c)| {
                    let w = c as f64 * idf(g);
                    w * w
                })
                .sum::<f64>()
                .sqrt();
            let mut sim = 0.0;
            if cand_norm > 0.0 && ref_norm > 0.0 {
                for (g, &cc) in &cand {
                    if let Some(&refc) = rc.get(g) {
                        let w = idf(g);
                        let wc = cc as f64 * w;
                        let wr = refc as f64 * w;
                        sim += wc.min(wr) * wr;
                    }
                }
                sim /= cand_norm * ref_norm;
            }
            let delta = candidate.len() as f64 - r.len() as f64;
            per_ref += sim * (-delta * delta / (2.0 * sigma * sigma)).exp();
        }
        total += per_ref / references.len() as f64;
    }
    10.0 * total / 4.0
}

/// Brute-force sentence BLEU-n with clipping and brevity penalty; any
/// zero modified precision zeroes the score.
pub fn naive_bleu(candidate: &[String], references: &[Vec<String>], n: usize) -> f64 {
    if candidate.is_empty() || n == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for order in 1..=n {
        let cand = ngram_counts(candidate, order);
        let total: usize = cand.values().sum();
        if total == 0 {
            return 0.0;
        }
        let mut clipped = 0;
        for (g, &c) in &cand {
            let max_ref = references
                .iter()
                .map(|r| ngram_counts(r, order).get(g).copied().unwrap_or(0))
                .max()
                .unwrap_or(0);
            clipped += c.min(max_ref);
        }
        if clipped == 0 {
            return 0.0;
        }
        log_sum += (clipped as f64 / total as f64).ln();
    }
    let c_len = candidate.len() as f64;
    // Closest reference length, ties to the shorter one.
    let r_len = references
        .iter()
        .map(|r| r.len())
        .min_by_key(|&rl| (((rl as i64) - candidate.len() as i64).abs(), rl))
        .unwrap_or(0) as f64;
    let bp = if c_len > r_len { 1.0 } else { (1.0 - r_len / c_len).exp() };
    bp * (log_sum / n as f64).exp()
}
