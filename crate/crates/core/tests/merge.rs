mod common {
    pub mod oracles;
}

use common::oracles::{merge_layer_oracle, Tok};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stome_core::merge::{plan_schedule, sort_by_size, stome_layer, FrameTokenSet, MergedToken, SortOrder};
use stome_core::vision::EncoderConfig;
use stome_core::Error;

/// Embeddings drawn partly from a small pool so exact ties (duplicates,
/// zero vectors) show up often.
fn random_frame(rng: &mut ChaCha8Rng, n: usize, d: usize) -> FrameTokenSet<f64> {
    let pool: Vec<Vec<f64>> = (0..3).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let mut origins: Vec<u32> = (0..n as u32 * 3).collect();
    origins.shuffle(rng);
    let patches = (0..n)
        .map(|i| {
            let embedding = match rng.gen_range(0..6) {
                0 => vec![0.0; d],
                1 | 2 => pool[rng.gen_range(0..pool.len())].clone(),
                _ => (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            };
            MergedToken {
                embedding,
                size: rng.gen_range(1..=4),
                origin: origins[i],
            }
        })
        .collect();
    FrameTokenSet {
        cls: MergedToken::new((0..d).map(|_| rng.gen_range(-1.0..1.0)).collect(), 0),
        patches,
        n_original: n,
    }
}

fn to_tok(t: &MergedToken<f64>) -> Tok {
    Tok {
        e: t.embedding.clone(),
        size: t.size,
        origin: t.origin,
    }
}

#[test]
fn layer_matches_exhaustive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut checked = 0;
    for case in 0..500 {
        let n = rng.gen_range(2..=6);
        let d = rng.gen_range(1..=4);
        let frame = random_frame(&mut rng, n, d);
        let input: Vec<Tok> = frame.patches.iter().map(to_tok).collect();
        for r in 0..=n / 2 {
            let got = stome_layer(&frame, r, SortOrder::Ascending).unwrap();
            let want = merge_layer_oracle(&input, r);
            assert_eq!(got.cls, frame.cls, "case {case}: CLS changed");
            assert_eq!(got.patches.len(), n - r);
            for (g, w) in got.patches.iter().zip(&want) {
                assert_eq!((g.size, g.origin), (w.size, w.origin), "case {case} r={r}");
                for (x, y) in g.embedding.iter().zip(&w.e) {
                    assert!((x - y).abs() <= 1e-12, "case {case} r={r}: {x} vs {y}");
                }
            }
            checked += 1;
        }
    }
    assert!(checked >= 500);
}

#[test]
fn removing_too_many_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let frame = random_frame(&mut rng, 5, 3);
    assert!(matches!(
        stome_layer(&frame, 3, SortOrder::Ascending),
        Err(Error::MergeTooLarge { requested: 3, available: 2 })
    ));
}

#[test]
fn merging_conserves_mass_and_size() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..200 {
        let n = rng.gen_range(2..=40);
        let d = rng.gen_range(1..=6);
        let mut frame = random_frame(&mut rng, n, d);
        let mass = |f: &FrameTokenSet<f64>| -> Vec<f64> {
            (0..d)
                .map(|c| f.patches.iter().map(|t| t.size as f64 * t.embedding[c]).sum())
                .collect()
        };
        let (m0, s0) = (mass(&frame), frame.size_sum());
        let min_origin = frame.patches.iter().map(|t| t.origin).min().unwrap();
        while frame.patches.len() >= 2 {
            let r = rng.gen_range(1..=frame.patches.len() / 2);
            let order = [SortOrder::Ascending, SortOrder::Descending, SortOrder::Random(rng.gen())][rng.gen_range(0..3)];
            frame = stome_layer(&frame, r, order).unwrap();
            assert_eq!(frame.size_sum(), s0);
            for (a, b) in mass(&frame).iter().zip(&m0) {
                assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()));
            }
        }
        assert_eq!(frame.patches[0].origin, min_origin);
    }
}

fn tokens(keys: &[(u32, u32)]) -> Vec<MergedToken<f64>> {
    keys.iter()
        .map(|&(size, origin)| MergedToken {
            embedding: vec![size as f64, origin as f64],
            size,
            origin,
        })
        .collect()
}

fn keys(t: &[MergedToken<f64>]) -> Vec<(u32, u32)> {
    t.iter().map(|t| (t.size, t.origin)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn sort_orders(
        raw in prop::collection::vec((1u32..6, 0u32..1000), 0..40),
        seed in any::<u64>(),
    ) {
        // origins are unique within a frame
        let mut seen = std::collections::HashSet::new();
        let input: Vec<(u32, u32)> = raw.into_iter().filter(|k| seen.insert(k.1)).collect();
        let toks = tokens(&input);
        let mut sorted_input = input.clone();
        sorted_input.sort();

        let asc = keys(&sort_by_size(&toks, SortOrder::Ascending));
        prop_assert!(asc.windows(2).all(|w| w[0] <= w[1]));

        let desc = keys(&sort_by_size(&toks, SortOrder::Descending));
        prop_assert!(desc.windows(2).all(|w| w[0].0 > w[1].0 || (w[0].0 == w[1].0 && w[0].1 < w[1].1)));

        let rand1 = keys(&sort_by_size(&toks, SortOrder::Random(seed)));
        let rand2 = keys(&sort_by_size(&toks, SortOrder::Random(seed)));
        prop_assert_eq!(&rand1, &rand2);

        for out in [asc, desc, rand1] {
            let mut s = out.clone();
            s.sort();
            prop_assert_eq!(&s, &sorted_input);
        }
    }
}

#[test]
fn schedules_for_the_presets() {
    let cases = [
        (EncoderConfig::preset_384_16(), 576, 59),
        (EncoderConfig::toy(), 64, 17),
        (EncoderConfig::needle(), 16, 3),
    ];
    for (cfg, patches, tpf) in cases {
        assert_eq!(cfg.n_patches(), patches);
        let s = cfg.schedule(true).unwrap();
        assert_eq!(s.tokens_per_frame(), tpf);
        assert_eq!(s.counts().last().copied(), Some(tpf - 1));
        assert_eq!(cfg.schedule(false).unwrap().tokens_per_frame(), patches + 1);
    }
}

#[test]
fn schedule_spreads_removals_evenly() {
    let s = plan_schedule(576, 23, 0.1).unwrap();
    assert_eq!(s.removals.iter().sum::<usize>(), 518);
    assert_eq!(s.removals.iter().max().unwrap() - s.removals.iter().min().unwrap(), 1);
    assert!(s.removals.windows(2).all(|w| w[0] >= w[1]));

    let s = plan_schedule(64, 5, 0.25).unwrap();
    assert_eq!(s.removals, vec![10, 10, 10, 9, 9]);
    assert_eq!(s.counts(), vec![64, 54, 44, 34, 25, 16]);

    assert_eq!(plan_schedule(10, 3, 1.0).unwrap().removals, vec![0, 0, 0]);
}

#[test]
fn infeasible_schedules_name_a_ratio_that_works() {
    // one layer can remove at most half
    match plan_schedule(64, 1, 0.1) {
        Err(Error::InfeasibleSchedule { suggested, .. }) => {
            assert!((suggested - 0.5).abs() < 1e-12);
            plan_schedule(64, 1, suggested).unwrap();
        }
        other => panic!("expected infeasible schedule, got {other:?}"),
    }
    for bad in [0.0, -0.5, 1.5, f64::NAN] {
        assert!(plan_schedule(64, 4, bad).is_err());
    }
}
