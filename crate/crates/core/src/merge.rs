//! Sorted visual token merge.
//!
//! Per layer the patch tokens of one frame (CLS excluded) are split into
//! alternating sets A and B, every A token finds its most similar B token,
//! the `r` A tokens with the strongest best edge are folded into their B
//! partners as size-weighted means, and the survivors are re-sorted by how
//! many original patches they represent.

use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{dot, norm};
use crate::{Error, Mat, Real, Result};

/// An embedding standing for `size` original patches, the earliest of which
/// is `origin`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergedToken<F> {
    pub embedding: Vec<F>,
    pub size: u32,
    pub origin: u32,
}

impl<F: Real> MergedToken<F> {
    pub fn new(embedding: Vec<F>, origin: u32) -> Self {
        Self {
            embedding,
            size: 1,
            origin,
        }
    }
}

/// CLS token plus the (possibly merged) patch tokens of one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameTokenSet<F> {
    pub cls: MergedToken<F>,
    pub patches: Vec<MergedToken<F>>,
    pub n_original: usize,
}

impl<F: Real> FrameTokenSet<F> {
    /// Fresh set: every patch has size 1 and its raster index as origin.
    pub fn from_rows(cls: Vec<F>, patches: &Mat<F>) -> Self {
        Self {
            cls: MergedToken::new(cls, 0),
            patches: patches
                .iter_rows()
                .enumerate()
                .map(|(i, r)| MergedToken::new(r.to_vec(), i as u32))
                .collect(),
            n_original: patches.rows(),
        }
    }

    /// CLS followed by the patches.
    pub fn token_count(&self) -> usize {
        self.patches.len() + 1
    }

    pub fn size_sum(&self) -> usize {
        self.patches.iter().map(|t| t.size as usize).sum()
    }

    /// All tokens as rows, CLS first.
    pub fn to_mat(&self) -> Mat<F> {
        let mut m = Mat::zeros(0, 0);
        m.push_row(&self.cls.embedding).expect("cls row");
        for t in &self.patches {
            m.push_row(&t.embedding).expect("uniform token width");
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SortOrder {
    #[serde(alias = "asc")]
    Ascending,
    #[serde(alias = "desc")]
    Descending,
    /// Seeded shuffle.
    Random(u64),
}

impl SortOrder {
    /// Order to use for one frame and layer; random orders get a distinct
    /// derived seed so layers do not repeat the same permutation.
    pub fn for_layer(self, frame: usize, layer: usize) -> Self {
        match self {
            SortOrder::Random(seed) => {
                let mix = (frame as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
                    ^ (layer as u64).wrapping_mul(0xD1B5_4A32_D192_ED03);
                SortOrder::Random(seed ^ mix)
            }
            other => other,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SortOrder::Ascending => "ascending",
            SortOrder::Descending => "descending",
            SortOrder::Random(_) => "random",
        }
    }
}

/// Selected merges for one layer, in A/B index space.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeDecision {
    /// `(a, b)`: A token `a` folds into B token `b`. Each `a` appears once.
    pub pairs: Vec<(usize, usize)>,
    /// A tokens that pass through.
    pub unmerged_a: Vec<usize>,
    /// B tokens, all of which survive (possibly absorbing A tokens).
    pub unmerged_b: Vec<usize>,
}

/// Splits a list into even positions (A) and odd positions (B).
pub fn partition_alternating<T: Clone>(tokens: &[T]) -> (Vec<T>, Vec<T>) {
    let a = tokens.iter().step_by(2).cloned().collect();
    let b = tokens.iter().skip(1).step_by(2).cloned().collect();
    (a, b)
}

/// Cosine similarity between every A and every B embedding. A zero-norm
/// embedding scores 0 against everything.
pub fn similarity_scores<F: Real>(a: &[MergedToken<F>], b: &[MergedToken<F>]) -> Mat<F> {
    let unit = |t: &MergedToken<F>| -> Vec<F> {
        let n = norm(&t.embedding);
        if n == F::zero() {
            vec![F::zero(); t.embedding.len()]
        } else {
            t.embedding.iter().map(|&x| x / n).collect()
        }
    };
    let an: Vec<Vec<F>> = a.iter().map(unit).collect();
    let bn: Vec<Vec<F>> = b.iter().map(unit).collect();
    let mut s = Mat::zeros(a.len(), b.len());
    for (i, x) in an.iter().enumerate() {
        for (j, y) in bn.iter().enumerate() {
            s.set(i, j, dot(x, y));
        }
    }
    s
}

/// Picks the `r` A tokens whose best B partner scores highest.
///
/// Each A token's partner is its highest-scoring B token (lowest B index on
/// ties). A tokens are ranked by that best score, descending, with ties going
/// to the lower origin. Several A tokens may share one B partner.
pub fn bipartite_soft_match<F: Real>(a: &[MergedToken<F>], scores: &Mat<F>, r: usize) -> Result<MergeDecision> {
    let n_b = scores.cols();
    if r > n_b || r > a.len() {
        return Err(Error::MergeTooLarge {
            requested: r,
            available: n_b.min(a.len()),
        });
    }
    if scores.rows() != a.len() {
        return Err(Error::Dimension {
            context: "score rows",
            expected: a.len(),
            actual: scores.rows(),
        });
    }
    let best: Vec<(usize, F)> = (0..a.len())
        .map(|i| {
            let row = scores.row(i);
            let mut j_best = 0;
            for j in 1..n_b {
                if row[j] > row[j_best] {
                    j_best = j;
                }
            }
            (j_best, row.get(j_best).copied().unwrap_or(F::neg_infinity()))
        })
        .collect();
    let mut rank: Vec<usize> = (0..a.len()).collect();
    rank.sort_by(|&x, &y| {
        best[y]
            .1
            .partial_cmp(&best[x].1)
            .unwrap_or(Ordering::Equal)
            .then(a[x].origin.cmp(&a[y].origin))
    });
    let mut chosen = vec![false; a.len()];
    let mut pairs: Vec<(usize, usize)> = rank[..r].iter().map(|&i| (i, best[i].0)).collect();
    pairs.iter().for_each(|&(i, _)| chosen[i] = true);
    pairs.sort_unstable();
    Ok(MergeDecision {
        pairs,
        unmerged_a: (0..a.len()).filter(|&i| !chosen[i]).collect(),
        unmerged_b: (0..n_b).collect(),
    })
}

/// A surviving token described by the input patches it combines.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct PlannedToken {
    /// Indices into the layer's input patch list; the first member's
    /// contribution is summed first.
    pub members: Vec<usize>,
    pub size: u32,
    pub origin: u32,
}

impl PlannedToken {
    /// Size-weighted mean coefficients of the members.
    pub fn weights<F: Real>(&self, sizes: impl Fn(usize) -> u32) -> Vec<F> {
        let total = F::of(self.size as f64);
        self.members.iter().map(|&m| F::of(sizes(m) as f64) / total).collect()
    }
}

/// Survivors before sorting: unmerged A tokens, then every B token with the A
/// tokens it absorbed (members listed B first, then A in index order).
fn plan_survivors<F: Real>(decision: &MergeDecision, patches: &[MergedToken<F>]) -> Vec<PlannedToken> {
    let a_idx = |i: usize| 2 * i;
    let b_idx = |j: usize| 2 * j + 1;
    let mut out: Vec<PlannedToken> = decision
        .unmerged_a
        .iter()
        .map(|&i| PlannedToken {
            members: vec![a_idx(i)],
            size: patches[a_idx(i)].size,
            origin: patches[a_idx(i)].origin,
        })
        .collect();
    let first_b = out.len();
    for &j in &decision.unmerged_b {
        let t = &patches[b_idx(j)];
        out.push(PlannedToken {
            members: vec![b_idx(j)],
            size: t.size,
            origin: t.origin,
        });
    }
    for &(i, j) in &decision.pairs {
        let src = &patches[a_idx(i)];
        let dst = &mut out[first_b + j];
        dst.members.push(a_idx(i));
        dst.size += src.size;
        dst.origin = dst.origin.min(src.origin);
    }
    out
}

fn apply_plan<F: Real>(plan: &[PlannedToken], patches: &[MergedToken<F>]) -> Vec<MergedToken<F>> {
    plan.iter()
        .map(|p| {
            let w: Vec<F> = p.weights(|m| patches[m].size);
            let dim = patches[p.members[0]].embedding.len();
            let mut e = vec![F::zero(); dim];
            for (&m, &wm) in p.members.iter().zip(&w) {
                for (acc, &x) in e.iter_mut().zip(&patches[m].embedding) {
                    *acc = *acc + wm * x;
                }
            }
            MergedToken {
                embedding: e,
                size: p.size,
                origin: p.origin,
            }
        })
        .collect()
}

/// Collapses each B token with the A tokens mapped onto it into their
/// size-weighted mean; unmerged A tokens pass through. `a` and `b` are the
/// two halves from [`partition_alternating`].
pub fn merge_tokens<F: Real>(
    decision: &MergeDecision,
    a: &[MergedToken<F>],
    b: &[MergedToken<F>],
) -> Vec<MergedToken<F>> {
    let mut interleaved = Vec::with_capacity(a.len() + b.len());
    for i in 0..a.len() {
        interleaved.push(a[i].clone());
        if let Some(t) = b.get(i) {
            interleaved.push(t.clone());
        }
    }
    apply_plan(&plan_survivors(decision, &interleaved), &interleaved)
}

fn sort_permutation(keys: &[(u32, u32)], order: SortOrder) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..keys.len()).collect();
    match order {
        SortOrder::Ascending => idx.sort_by_key(|&i| keys[i]),
        SortOrder::Descending => idx.sort_by(|&x, &y| keys[y].0.cmp(&keys[x].0).then(keys[x].1.cmp(&keys[y].1))),
        SortOrder::Random(seed) => idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed)),
    }
    idx
}

/// Orders tokens by size: ascending or descending with ties on origin
/// ascending, or a seeded shuffle.
pub fn sort_by_size<F: Real>(tokens: &[MergedToken<F>], order: SortOrder) -> Vec<MergedToken<F>> {
    let keys: Vec<(u32, u32)> = tokens.iter().map(|t| (t.size, t.origin)).collect();
    sort_permutation(&keys, order)
        .into_iter()
        .map(|i| tokens[i].clone())
        .collect()
}

/// What one merge layer did, for inspection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerTrace {
    pub layer: usize,
    pub r: usize,
    /// `(a, b)` pairs in A/B index space.
    pub pairs: Vec<(usize, usize)>,
    /// Sizes of the surviving patch tokens, in output order.
    pub sizes: Vec<u32>,
    /// Origins of the surviving patch tokens, in output order.
    pub order: Vec<u32>,
}

/// Full layer plan in terms of the input patch list: surviving tokens in
/// their final order.
pub(crate) fn plan_layer<F: Real>(
    patches: &[MergedToken<F>],
    r: usize,
    order: SortOrder,
) -> Result<(Vec<PlannedToken>, MergeDecision)> {
    let limit = patches.len() / 2;
    if r > limit {
        return Err(Error::MergeTooLarge {
            requested: r,
            available: limit,
        });
    }
    let (a, b) = partition_alternating(patches);
    let scores = similarity_scores(&a, &b);
    let decision = bipartite_soft_match(&a, &scores, r)?;
    let survivors = plan_survivors(&decision, patches);
    let keys: Vec<(u32, u32)> = survivors.iter().map(|t| (t.size, t.origin)).collect();
    let mut slots: Vec<Option<PlannedToken>> = survivors.into_iter().map(Some).collect();
    let sorted = sort_permutation(&keys, order)
        .into_iter()
        .map(|i| slots[i].take().expect("permutation"))
        .collect();
    Ok((sorted, decision))
}

/// One sorted token merge layer: merge `r` patch tokens away, re-sort by
/// size, keep CLS in front untouched.
pub fn stome_layer<F: Real>(frame: &FrameTokenSet<F>, r: usize, order: SortOrder) -> Result<FrameTokenSet<F>> {
    stome_layer_traced(frame, r, order, 0).map(|(f, _)| f)
}

pub fn stome_layer_traced<F: Real>(
    frame: &FrameTokenSet<F>,
    r: usize,
    order: SortOrder,
    layer: usize,
) -> Result<(FrameTokenSet<F>, LayerTrace)> {
    let (plan, decision) = plan_layer(&frame.patches, r, order)?;
    let patches = apply_plan(&plan, &frame.patches);
    let trace = LayerTrace {
        layer,
        r,
        pairs: decision.pairs,
        sizes: patches.iter().map(|t| t.size).collect(),
        order: patches.iter().map(|t| t.origin).collect(),
    };
    Ok((
        FrameTokenSet {
            cls: frame.cls.clone(),
            patches,
            n_original: frame.n_original,
        },
        trace,
    ))
}

/// Per-layer removal counts realising a keep ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeSchedule {
    pub removals: Vec<usize>,
    pub keep_ratio: f64,
    pub n_patches: usize,
}

impl MergeSchedule {
    /// Patches left after every layer.
    pub fn kept(&self) -> usize {
        self.n_patches - self.removals.iter().sum::<usize>()
    }

    /// Patch count entering each layer, plus the final count.
    pub fn counts(&self) -> Vec<usize> {
        let mut n = self.n_patches;
        let mut out = vec![n];
        for &r in &self.removals {
            n -= r;
            out.push(n);
        }
        out
    }

    /// Tokens per frame including CLS.
    pub fn tokens_per_frame(&self) -> usize {
        self.kept() + 1
    }
}

fn even_split(total: usize, layers: usize) -> Vec<usize> {
    let base = total / layers;
    let rem = total % layers;
    (0..layers).map(|l| base + usize::from(l < rem)).collect()
}

/// First layer whose removal exceeds half its input, if any.
fn first_violation(n: usize, removals: &[usize]) -> Option<(usize, usize, usize)> {
    let mut n_l = n;
    for (l, &r) in removals.iter().enumerate() {
        if r > n_l / 2 {
            return Some((l, r, n_l / 2));
        }
        n_l -= r;
    }
    None
}

/// Removes `n_patches − round(keep_ratio · n_patches)` patches, split evenly
/// across layers with the remainder going to the earliest ones.
pub fn plan_schedule(n_patches: usize, n_merge_layers: usize, keep_ratio: f64) -> Result<MergeSchedule> {
    if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
        return Err(Error::Invalid(alloc::format!("keep ratio {keep_ratio} outside (0, 1]")));
    }
    if n_merge_layers == 0 {
        return Err(Error::Invalid("at least one merge layer is required".into()));
    }
    let keep = libm::round(keep_ratio * n_patches as f64) as usize;
    let total = n_patches - keep.min(n_patches);
    let removals = even_split(total, n_merge_layers);
    if let Some((layer, needed, limit)) = first_violation(n_patches, &removals) {
        let feasible = (keep + 1..=n_patches)
            .find(|&k| first_violation(n_patches, &even_split(n_patches - k, n_merge_layers)).is_none())
            .unwrap_or(n_patches);
        return Err(Error::InfeasibleSchedule {
            ratio: keep_ratio,
            patches: n_patches,
            layers: n_merge_layers,
            layer,
            needed,
            limit,
            suggested: feasible as f64 / n_patches as f64,
        });
    }
    Ok(MergeSchedule {
        removals,
        keep_ratio,
        n_patches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok(e: &[f64], size: u32, origin: u32) -> MergedToken<f64> {
        MergedToken {
            embedding: e.to_vec(),
            size,
            origin,
        }
    }

    #[test]
    fn alternating_split() {
        assert_eq!(partition_alternating(&[0, 1, 2, 3]), (vec![0, 2], vec![1, 3]));
        assert_eq!(partition_alternating(&[7]), (vec![7], vec![]));
    }

    #[test]
    fn cosine_scores() {
        let a = [tok(&[1., 0.], 1, 0), tok(&[0., 1.], 1, 2)];
        let b = [tok(&[1., 0.], 1, 1), tok(&[-1., 0.], 1, 3)];
        let s = similarity_scores(&a, &b);
        assert_eq!(s.as_slice(), &[1., -1., 0., 0.]);
        let z = similarity_scores(&[tok(&[0., 0.], 1, 0)], &b);
        assert_eq!(z.as_slice(), &[0., 0.]);
    }

    #[test]
    fn soft_match_selects_strongest_edge() {
        let a = [tok(&[1., 0.], 1, 0), tok(&[0., 1.], 1, 2)];
        let b = [tok(&[1., 0.], 1, 1), tok(&[-1., 0.], 1, 3)];
        let d = bipartite_soft_match(&a, &similarity_scores(&a, &b), 1).unwrap();
        assert_eq!(d.pairs, vec![(0, 0)]);
        assert_eq!(d.unmerged_a, vec![1]);
        let none = bipartite_soft_match(&a, &similarity_scores(&a, &b), 0).unwrap();
        assert!(none.pairs.is_empty());
        assert!(bipartite_soft_match(&a, &similarity_scores(&a, &b), 3).is_err());
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let t = [1.0, 1.0];
        let a = [tok(&t, 1, 0), tok(&t, 1, 2)];
        let b = [tok(&t, 1, 1), tok(&t, 1, 3)];
        let d = bipartite_soft_match(&a, &similarity_scores(&a, &b), 2).unwrap();
        assert_eq!(d.pairs, vec![(0, 0), (1, 0)]);
    }

    #[test]
    fn weighted_mean_merge() {
        let a = [tok(&[2., 0.], 1, 0)];
        let b = [tok(&[0., 2.], 3, 1)];
        let d = MergeDecision {
            pairs: vec![(0, 0)],
            unmerged_a: vec![],
            unmerged_b: vec![0],
        };
        let m = merge_tokens(&d, &a, &b);
        assert_eq!(m, vec![tok(&[0.5, 1.5], 4, 0)]);
    }

    #[test]
    fn three_way_merge_onto_one_target() {
        // A = [e1, e2] (sizes 1, 1), B = [e3] (size 2); both A fold into B0.
        let a = [tok(&[4., 0.], 1, 0), tok(&[0., 8.], 1, 2)];
        let b = [tok(&[2., 2.], 2, 1)];
        let d = MergeDecision {
            pairs: vec![(0, 0), (1, 0)],
            unmerged_a: vec![],
            unmerged_b: vec![0],
        };
        let m = merge_tokens(&d, &a, &b);
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].size, 4);
        assert_eq!(m[0].embedding, vec![(4. + 0. + 4.) / 4., (0. + 8. + 4.) / 4.]);
    }

    #[test]
    fn size_sort_orders() {
        let ts: Vec<_> = [(1, 0), (4, 5), (2, 9), (1, 12)]
            .iter()
            .map(|&(s, o)| tok(&[0.], s, o))
            .collect();
        let asc: Vec<u32> = sort_by_size(&ts, SortOrder::Ascending).iter().map(|t| t.origin).collect();
        assert_eq!(asc, vec![0, 12, 9, 5]);
        let desc: Vec<u32> = sort_by_size(&ts, SortOrder::Descending).iter().map(|t| t.origin).collect();
        assert_eq!(desc, vec![5, 9, 0, 12]);
        let r1 = sort_by_size(&ts, SortOrder::Random(3));
        assert_eq!(r1, sort_by_size(&ts, SortOrder::Random(3)));
    }

    #[test]
    fn schedule_examples() {
        let s = plan_schedule(576, 23, 0.1).unwrap();
        assert_eq!(s.removals.iter().sum::<usize>(), 518);
        assert_eq!(s.removals.iter().filter(|&&r| r == 23).count(), 12);
        assert_eq!(s.removals.iter().filter(|&&r| r == 22).count(), 11);
        assert_eq!(s.tokens_per_frame(), 59);
        assert!(plan_schedule(576, 23, 1.0).unwrap().removals.iter().all(|&r| r == 0));
        assert_eq!(plan_schedule(16, 4, 0.25).unwrap().removals, vec![3, 3, 3, 3]);
    }

    #[test]
    fn infeasible_schedule_suggests_ratio() {
        // 16 patches, 2 layers, keep 2: [7, 7] but layer 2 sees 9 patches.
        match plan_schedule(16, 2, 0.1) {
            Err(Error::InfeasibleSchedule { layer, suggested, .. }) => {
                assert_eq!(layer, 1);
                let s = plan_schedule(16, 2, suggested).unwrap();
                assert!(s.kept() >= 2);
            }
            other => panic!("expected infeasible, got {other:?}"),
        }
        assert!(plan_schedule(16, 2, 0.0).is_err());
        assert!(plan_schedule(16, 0, 0.5).is_err());
    }

    #[test]
    fn layer_keeps_cls_and_mass() {
        let rows: Vec<[f64; 2]> = (0..6).map(|i| [i as f64, 1.0 + (i % 2) as f64]).collect();
        let frame = FrameTokenSet::from_rows(vec![9.0, 9.0], &Mat::from_rows(&rows).unwrap());
        let out = stome_layer(&frame, 2, SortOrder::Ascending).unwrap();
        assert_eq!(out.patches.len(), 4);
        assert_eq!(out.cls, frame.cls);
        assert_eq!(out.size_sum(), 6);
        assert!(stome_layer(&frame, 4, SortOrder::Ascending).is_err());
    }
}
