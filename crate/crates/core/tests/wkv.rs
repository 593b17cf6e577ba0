mod common {
    pub mod oracles;
}

use common::oracles::{naive_matrix_fold, naive_wkv};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stome_core::rwkv::{
    data_dependent_shift, wkv_chunked, wkv_matrix_sequence, wkv_sequence, DecayParams, DynamicMix, MatrixState,
    ShiftMixParams, ShiftTargets, TimeMixInputs, WkvState,
};
use stome_core::Mat;

fn rows(rng: &mut ChaCha8Rng, t: usize, d: usize, lo: f64, hi: f64) -> Vec<Vec<f64>> {
    (0..t).map(|_| (0..d).map(|_| rng.gen_range(lo..hi)).collect()).collect()
}

fn inputs<F: stome_core::Real>(k: &[Vec<F>], v: &[Vec<F>]) -> Vec<TimeMixInputs<F>> {
    k.iter().zip(v).map(|(k, v)| TimeMixInputs::kv(k.clone(), v.clone())).collect()
}

/// Error relative to the same weighted mean taken over `|v|`. Output is a
/// convex combination of values, so with mixed signs the plain relative
/// error measures cancellation in the reference, not error in the kernel.
fn max_rel(got: &[Vec<f64>], want: &[Vec<f64>], scale: &[Vec<f64>]) -> f64 {
    got.iter()
        .flatten()
        .zip(want.iter().flatten())
        .zip(scale.iter().flatten())
        .map(|((x, y), s)| (x - y).abs() / s.max(1e-300))
        .fold(0.0, f64::max)
}

#[test]
fn stable_form_matches_literal_recurrence() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..500 {
        let (t, d) = (rng.gen_range(1..=64), rng.gen_range(1..=8));
        let k = rows(&mut rng, t, d, -5.0, 5.0);
        let v = rows(&mut rng, t, d, -5.0, 5.0);
        let w: Vec<f64> = (0..d).map(|_| rng.gen_range(0.0..5.0)).collect();
        let u: Vec<f64> = (0..d).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let p = DecayParams::new(w.clone(), u.clone()).unwrap();
        let (out, _) = wkv_sequence(&inputs(&k, &v), &p, &WkvState::new(d)).unwrap();
        let abs_v: Vec<Vec<f64>> = v.iter().map(|r| r.iter().map(|x| x.abs()).collect()).collect();
        let err = max_rel(&out, &naive_wkv(&k, &v, &w, &u), &naive_wkv(&k, &abs_v, &w, &u));
        assert!(err <= 1e-12, "relative error {err}");
    }
}

#[test]
fn chunked_matches_sequential() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let (t, d) = (rng.gen_range(1..=128), rng.gen_range(1..=8));
        let chunk = rng.gen_range(1..=t + 3);
        let k = rows(&mut rng, t, d, -8.0, 8.0);
        let v = rows(&mut rng, t, d, -3.0, 3.0);
        let w: Vec<f64> = (0..d).map(|_| rng.gen_range(0.0..4.0)).collect();
        let u: Vec<f64> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let p = DecayParams::new(w, u).unwrap();
        let seq = inputs(&k, &v);
        let (a, sa) = wkv_sequence(&seq, &p, &WkvState::new(d)).unwrap();
        let (b, sb) = wkv_chunked(&seq, &p, &WkvState::new(d), chunk).unwrap();
        for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
            assert!((x - y).abs() <= 1e-10 * y.abs().max(1.0), "chunk {chunk}: {x} vs {y}");
        }
        // both end states describe the same (α, β)
        let ((aa, ab), (ba, bb)) = (sa.naive(), sb.naive());
        for (x, y) in aa.iter().chain(&ab).zip(ba.iter().chain(&bb)) {
            assert!((x - y).abs() <= 1e-10 * y.abs().max(1e-300));
        }
    }
}

#[test]
fn large_keys_stay_finite_where_the_literal_form_overflows() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (t, d) = (256, 4);
    let k = rows(&mut rng, t, d, 0.0, 200.0);
    let v = rows(&mut rng, t, d, -1.0, 1.0);
    let w = vec![0.5; d];
    let u = vec![0.3; d];
    let (out, _) = wkv_sequence(&inputs(&k, &v), &DecayParams::new(w.clone(), u.clone()).unwrap(), &WkvState::new(d)).unwrap();
    assert!(out.iter().flatten().all(|x| x.is_finite() && x.abs() <= 1.0 + 1e-12));

    let k32: Vec<Vec<f32>> = k.iter().map(|r| r.iter().map(|&x| x as f32).collect()).collect();
    let v32: Vec<Vec<f32>> = v.iter().map(|r| r.iter().map(|&x| x as f32).collect()).collect();
    let (w32, u32_): (Vec<f32>, Vec<f32>) = (vec![0.5; d], vec![0.3; d]);
    let p32 = DecayParams::new(w32.clone(), u32_.clone()).unwrap();
    let (out32, _) = wkv_sequence(&inputs(&k32, &v32), &p32, &WkvState::new(d)).unwrap();
    assert!(out32.iter().flatten().all(|x| x.is_finite()));
    let naive = naive_wkv(&k32, &v32, &w32, &u32_);
    assert!(naive.iter().flatten().any(|x| !x.is_finite()));
}

#[test]
fn state_size_is_constant() {
    let d = 6;
    let p = DecayParams::new(vec![0.2; d], vec![0.1; d]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let sizes: Vec<usize> = [1, 10, 10_000]
        .iter()
        .map(|&t| {
            let seq = inputs(&rows(&mut rng, t, d, -2.0, 2.0), &rows(&mut rng, t, d, -2.0, 2.0));
            wkv_sequence(&seq, &p, &WkvState::new(d)).unwrap().1.to_le_bytes().len()
        })
        .collect();
    assert_eq!(sizes, [sizes[0]; 3]);
}

/// wkv_T after one unit-value token followed by zero-value tokens is exactly
/// the weight the first token keeps.
fn old_token_weight(w: f64, t: usize) -> f64 {
    let k = vec![vec![0.0]; t];
    let mut v = vec![vec![0.0]; t];
    v[0][0] = 1.0;
    let (out, _) = wkv_sequence(&inputs(&k, &v), &DecayParams::new(vec![w], vec![0.0]).unwrap(), &WkvState::new(1)).unwrap();
    out[t - 1][0]
}

#[test]
fn larger_decay_forgets_faster() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let w1 = rng.gen_range(0.0..3.0);
        let w2 = w1 + rng.gen_range(0.01..2.0);
        let t = rng.gen_range(3..20);
        assert!(old_token_weight(w2, t) < old_token_weight(w1, t), "w {w1} vs {w2} at T={t}");
    }
}

#[test]
fn matrix_state_matches_outer_product_fold() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for (heads, d, t) in [(1, 4, 8), (2, 8, 12), (4, 8, 5)] {
        let r = rows(&mut rng, t, d, -1.0, 1.0);
        let k = rows(&mut rng, t, d, -1.0, 1.0);
        let v = rows(&mut rng, t, d, -1.0, 1.0);
        let w: Vec<f64> = (0..d).map(|_| rng.gen_range(0.0..2.0)).collect();
        let u: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let seq: Vec<_> = (0..t).map(|i| TimeMixInputs::new(r[i].clone(), k[i].clone(), v[i].clone())).collect();
        let p = DecayParams::new(w.clone(), u.clone()).unwrap();
        let (out, state) = wkv_matrix_sequence(&seq, &p, &MatrixState::new(d, heads).unwrap()).unwrap();
        let want = naive_matrix_fold(&r, &k, &v, &w, &u, heads);
        for (x, y) in out.iter().flatten().zip(want.iter().flatten()) {
            assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
        }
        assert_eq!(state.scalar_count(), heads * (d / heads).pow(2));
    }
}

fn dynamic_params(d: usize, seed: u64) -> ShiftMixParams<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ShiftMixParams::uniform(d, 0.5);
    p.dynamic = Some(DynamicMix {
        targets: ShiftTargets::ALL,
        weight: core::array::from_fn(|_| Mat::random(d, d, 2.0, &mut rng)),
        bias: core::array::from_fn(|_| Mat::random(1, d, 2.0, &mut rng)),
    });
    p
}

proptest! {
    #[test]
    fn shifted_inputs_lie_between_tokens(
        x in prop::collection::vec(-50.0f64..50.0, 5),
        prev in prop::collection::vec(-50.0f64..50.0, 5),
        mu in 0.0f64..=1.0,
        seed in 0u64..1000,
    ) {
        for p in [ShiftMixParams::uniform(5, mu), dynamic_params(5, seed)] {
            let s = data_dependent_shift(&x, &prev, &p).unwrap();
            for out in [&s.r, &s.k, &s.v] {
                for i in 0..5 {
                    let (lo, hi) = (x[i].min(prev[i]), x[i].max(prev[i]));
                    prop_assert!(out[i] >= lo - 1e-12 && out[i] <= hi + 1e-12);
                }
            }
        }
    }
}
