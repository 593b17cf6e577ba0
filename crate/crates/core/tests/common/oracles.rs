//! Independent reference implementations used as test oracles. Each one is
//! a direct transcription of the definition, with no shared code path into
//! the crate under test.
#![allow(dead_code)]

use num_traits::Float;

/// Literal wkv recurrence with unshifted `(α, β)`:
/// `wkv_t = (e^{u+k_t} v_t + α_{t-1}) / (e^{u+k_t} + β_{t-1})`,
/// `α_t = e^{-w} α_{t-1} + e^{k_t} v_t`, `β_t = e^{-w} β_{t-1} + e^{k_t}`.
pub fn naive_wkv<F: Float>(k: &[Vec<F>], v: &[Vec<F>], w: &[F], u: &[F]) -> Vec<Vec<F>> {
    let d = w.len();
    let mut alpha = vec![F::zero(); d];
    let mut beta = vec![F::zero(); d];
    let mut out = Vec::with_capacity(k.len());
    for (kt, vt) in k.iter().zip(v) {
        let mut o = vec![F::zero(); d];
        for c in 0..d {
            let bonus = (u[c] + kt[c]).exp();
            o[c] = (bonus * vt[c] + alpha[c]) / (bonus + beta[c]);
            let decay = (-w[c]).exp();
            let ek = kt[c].exp();
            alpha[c] = decay * alpha[c] + ek * vt[c];
            beta[c] = decay * beta[c] + ek;
        }
        out.push(o);
    }
    out
}

/// Per-head outer-product fold:
/// `out = r·(diag(e^u)·kᵀv + S)`, `S ← diag(e^{-w})·S + kᵀv`.
pub fn naive_matrix_fold(
    r: &[Vec<f64>],
    k: &[Vec<f64>],
    v: &[Vec<f64>],
    w: &[f64],
    u: &[f64],
    heads: usize,
) -> Vec<Vec<f64>> {
    let d = w.len();
    let n = d / heads;
    let mut s = vec![vec![vec![0.0; n]; n]; heads];
    let mut outs = Vec::new();
    for t in 0..k.len() {
        let mut out = vec![0.0; d];
        for h in 0..heads {
            let o = h * n;
            for j in 0..n {
                let mut acc = 0.0;
                for i in 0..n {
                    let kv = k[t][o + i] * v[t][o + j];
                    acc += r[t][o + i] * (u[o + i].exp() * kv + s[h][i][j]);
                }
                out[o + j] = acc;
            }
            for i in 0..n {
                for j in 0..n {
                    s[h][i][j] = (-w[o + i]).exp() * s[h][i][j] + k[t][o + i] * v[t][o + j];
                }
            }
        }
        outs.push(out);
    }
    outs
}

/// A token as the merge oracle sees it.
#[derive(Debug, Clone, PartialEq)]
pub struct Tok {
    pub e: Vec<f64>,
    pub size: u32,
    pub origin: u32,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let ua: Vec<f64> = a.iter().map(|x| x / na).collect();
    let ub: Vec<f64> = b.iter().map(|x| x / nb).collect();
    ua.iter().zip(&ub).map(|(x, y)| x * y).sum()
}

fn subsets(n: usize, r: usize) -> Vec<Vec<usize>> {
    (0u32..1 << n)
        .filter(|m| m.count_ones() as usize == r)
        .map(|m| (0..n).filter(|i| m & (1 << i) != 0).collect())
        .collect()
}

/// One merge layer by exhaustive enumeration: every A token (even
/// positions) takes its best B partner (odd positions, first maximum);
/// among all `r`-subsets of A the chosen one has the lexicographically
/// greatest list of `(score, −origin)` keys sorted descending. Merged tokens
/// are size-weighted means (B first, then A in index order), sizes add,
/// origins take the minimum; the result is sorted by `(size, origin)`.
pub fn merge_layer_oracle(patches: &[Tok], r: usize) -> Vec<Tok> {
    let a: Vec<&Tok> = patches.iter().step_by(2).collect();
    let b: Vec<&Tok> = patches.iter().skip(1).step_by(2).collect();
    let best: Vec<(usize, f64)> = a
        .iter()
        .map(|x| {
            let mut bj = 0;
            let mut bs = f64::NEG_INFINITY;
            for (j, y) in b.iter().enumerate() {
                let s = cosine(&x.e, &y.e);
                if s > bs {
                    bs = s;
                    bj = j;
                }
            }
            (bj, bs)
        })
        .collect();
    let key = |set: &[usize]| {
        let mut ks: Vec<(f64, i64)> = set.iter().map(|&i| (best[i].1, -(a[i].origin as i64))).collect();
        ks.sort_by(|x, y| y.partial_cmp(x).unwrap());
        ks
    };
    let chosen = subsets(a.len(), r)
        .into_iter()
        .max_by(|x, y| key(x).partial_cmp(&key(y)).unwrap())
        .unwrap_or_default();
    let mut out: Vec<Tok> = Vec::new();
    for (i, t) in a.iter().enumerate() {
        if !chosen.contains(&i) {
            out.push((*t).clone());
        }
    }
    for (j, t) in b.iter().enumerate() {
        let mut members = vec![*t];
        let mut absorbed: Vec<usize> = chosen.iter().copied().filter(|&i| best[i].0 == j).collect();
        absorbed.sort();
        members.extend(absorbed.iter().map(|&i| a[i]));
        let size: u32 = members.iter().map(|m| m.size).sum();
        let mut e = vec![0.0; t.e.len()];
        for m in &members {
            let wm = m.size as f64 / size as f64;
            for (acc, x) in e.iter_mut().zip(&m.e) {
                *acc += wm * x;
            }
        }
        out.push(Tok {
            e,
            size,
            origin: members.iter().map(|m| m.origin).min().unwrap(),
        });
    }
    out.sort_by_key(|t| (t.size, t.origin));
    out
}

/// Softmax attention of query row `t` over rows `0..=t`, written out.
pub fn full_causal_attention(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = q[0].len();
    let scale = 1.0 / (d as f64).sqrt();
    (0..q.len())
        .map(|t| {
            let s: Vec<f64> = (0..=t)
                .map(|j| q[t].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() * scale)
                .collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            (0..d).map(|c| (0..=t).map(|j| e[j] / z * v[j][c]).sum()).collect()
        })
        .collect()
}
