//! Routing diagnostics against independent oracles.

use omni_moe::analytics::{
    align_labels, best_matching, chi_square, contingency, cramers_v, cramers_v_by_layer,
    dump_routes, permutation_experiment, read_frame_tokens, read_routes, routing_entropy,
    write_frame_tokens, write_probs, write_routes, ContingencyTable, FrameToken, RoutingRecord,
};
use omni_moe::data::{generate, Batch, SynthSpec, Utterance};
use omni_moe::encoder::{FeedForward, ForwardOptions, Model, ModelConfig, Variant};
use omni_moe::moe::Perturbation;
use omni_moe::rng;
use omni_moe::tensor::Tape;
use omni_moe::train::evaluate;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const V_TOL: f64 = 1e-9;

fn table(counts: Vec<Vec<u64>>) -> ContingencyTable {
    ContingencyTable::new(counts, (0, 1)).unwrap()
}

fn random_table(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<Vec<u64>> {
    let sparse = rng.random_bool(0.3);
    (0..rows)
        .map(|_| {
            (0..cols)
                .map(|_| {
                    if sparse && rng.random_bool(0.4) {
                        0
                    } else {
                        rng.random_range(0..40)
                    }
                })
                .collect()
        })
        .collect()
}

/// Pearson chi-square over observed cells, written from the textbook
/// definition: expected = row_total * col_total / n, cells with a zero
/// margin dropped.
fn oracle_v(counts: &[Vec<u64>]) -> f64 {
    let n: f64 = counts.iter().flatten().map(|&c| c as f64).sum();
    let rows: Vec<f64> = counts
        .iter()
        .map(|r| r.iter().map(|&c| c as f64).sum())
        .collect();
    let cols: Vec<f64> = (0..counts[0].len())
        .map(|j| counts.iter().map(|r| r[j] as f64).sum())
        .collect();
    let mut chi2 = 0.0;
    for (i, r) in rows.iter().enumerate() {
        for (j, c) in cols.iter().enumerate() {
            if *r > 0.0 && *c > 0.0 {
                let e = r * c / n;
                chi2 += (counts[i][j] as f64 - e).powi(2) / e;
            }
        }
    }
    let nonzero = |v: &[f64]| v.iter().filter(|&&x| x > 0.0).count();
    let k = nonzero(&rows).min(nonzero(&cols));
    if k < 2 {
        0.0
    } else {
        (chi2 / (n * (k - 1) as f64)).sqrt()
    }
}

#[test]
fn cramers_v_matches_oracle_on_100_random_tables() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut checked = 0;
    while checked < 100 {
        let (r, c) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let counts = random_table(&mut rng, r, c);
        if counts.iter().flatten().all(|&x| x == 0) {
            continue;
        }
        let got = cramers_v(&table(counts.clone())).unwrap();
        let want = oracle_v(&counts);
        assert!((got - want).abs() < V_TOL, "{counts:?}: {got} vs {want}");
        assert!((0.0..=1.0).contains(&got));
        checked += 1;
    }
}

#[test]
fn cramers_v_examples() {
    let v = cramers_v(&table(vec![vec![10, 2], vec![3, 15]])).unwrap();
    let chi2 = 30.0 * (10.0 * 15.0 - 2.0 * 3.0f64).powi(2) / (12.0 * 18.0 * 13.0 * 17.0);
    assert!((v - (chi2 / 30.0).sqrt()).abs() < 1e-12);
    assert!((v - 0.6591).abs() < 1e-4);
    assert!((cramers_v(&table(vec![vec![7, 0], vec![0, 5]])).unwrap() - 1.0).abs() < 1e-12);
    // Outer product of margins (2, 3) x (4, 1).
    assert_eq!(
        cramers_v(&table(vec![vec![8, 2], vec![12, 3]])).unwrap(),
        0.0
    );
    assert_eq!(
        cramers_v(&table(vec![vec![0, 4], vec![0, 9]])).unwrap(),
        0.0
    );
    assert!(cramers_v(&table(vec![vec![0, 0], vec![0, 0]])).is_err());
}

fn exhaustive_best_trace(counts: &[Vec<u64>]) -> u64 {
    fn go(counts: &[Vec<u64>], row: usize, used: &mut Vec<bool>) -> u64 {
        if row == counts.len() {
            return 0;
        }
        let mut best = 0;
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                best = best.max(counts[row][j] + go(counts, row + 1, used));
                used[j] = false;
            }
        }
        best
    }
    go(counts, 0, &mut vec![false; counts.len()])
}

#[test]
fn alignment_matches_exhaustive_search_on_100_tables() {
    let mut rng = ChaCha8Rng::seed_from_u64(47);
    for _ in 0..100 {
        let n = rng.random_range(1..=4);
        let counts = random_table(&mut rng, n, n);
        let t = table(counts.clone());
        let pi = best_matching(&t).unwrap();
        let mut seen = pi.clone();
        seen.sort();
        assert_eq!(seen, (0..n).collect::<Vec<_>>());
        let trace: u64 = pi.iter().enumerate().map(|(a, &b)| counts[a][b]).sum();
        assert_eq!(trace, exhaustive_best_trace(&counts), "{counts:?}");
        let perms = align_labels(&[t]).unwrap();
        let aligned: u64 = (0..n)
            .flat_map(|a| (0..n).map(move |b| (a, b)))
            .filter(|&(a, b)| perms[0][a] == perms[1][b])
            .map(|(a, b)| counts[a][b])
            .sum();
        assert_eq!(aligned, trace);
    }
}

#[test]
fn alignment_examples() {
    let perms = align_labels(&[table(vec![vec![5, 0], vec![0, 5]])]).unwrap();
    assert_eq!(perms[1], vec![0, 1]);
    let perms = align_labels(&[table(vec![vec![0, 5], vec![5, 0]])]).unwrap();
    assert_eq!(perms[1], vec![1, 0]);
    assert!(best_matching(&table(vec![vec![1, 2, 3], vec![4, 5, 6]])).is_err());
}

fn record(utt: &str, layer: usize, frame: usize, expert: usize) -> RoutingRecord {
    RoutingRecord {
        utterance_id: utt.into(),
        layer,
        frame,
        expert,
        gate: 1.0,
        probs: Vec::new(),
    }
}

#[test]
fn contingency_examples() {
    let a = [0, 0, 1, 1, 0, 1];
    let b = [1, 1, 0, 0, 1, 1];
    let mut records: Vec<RoutingRecord> = a
        .iter()
        .enumerate()
        .map(|(t, &e)| record("u", 0, t, e))
        .collect();
    records.extend(b.iter().enumerate().map(|(t, &e)| record("u", 1, t, e)));
    let t = contingency(&records, 0, 2).unwrap();
    assert_eq!(t.counts, vec![vec![0, 3], vec![2, 1]]);
    assert_eq!(t.total, 6);

    let constant: Vec<RoutingRecord> = (0..6)
        .map(|t| record("u", 0, t, t % 3))
        .chain((0..6).map(|t| record("u", 1, t, 0)))
        .collect();
    let t = contingency(&constant, 0, 3).unwrap();
    assert!(t.counts.iter().all(|r| r[1] == 0 && r[2] == 0));
    assert!(contingency(&records, 1, 2).is_err());
}

#[test]
fn entropy_extremes() {
    let mut records = Vec::new();
    let mut tokens = Vec::new();
    // Symbol 1 always goes to expert 2; symbol 2 spreads uniformly over 4;
    // symbol 3 splits evenly between experts 0 and 1.
    for t in 0..8 {
        tokens.push(FrameToken {
            utterance_id: "u".into(),
            frame: t,
            symbol: 1,
        });
        records.push(record("u", 0, t, 2));
        tokens.push(FrameToken {
            utterance_id: "v".into(),
            frame: t,
            symbol: 2,
        });
        records.push(record("v", 0, t, t % 4));
        tokens.push(FrameToken {
            utterance_id: "w".into(),
            frame: t,
            symbol: 3,
        });
        records.push(record("w", 0, t, t % 2));
    }
    let e = routing_entropy(&records, &tokens, 10, 1, 4, false).unwrap();
    let h = |s: usize| e.rows.iter().find(|r| r.symbol == s).unwrap().entropy[0].unwrap();
    assert_eq!(h(1), 0.0);
    assert_eq!(h(2), 2.0);
    assert_eq!(h(3), 1.0);
}

fn small_spec(seed: u64) -> SynthSpec {
    SynthSpec {
        alphabet_size: 6,
        min_tokens: 2,
        max_tokens: 4,
        min_frames_per_token: 8,
        max_frames_per_token: 12,
        feat_dim: 8,
        frame_stack: 2,
        seed,
        ..SynthSpec::default()
    }
}

fn small_model(variant: Variant, seed: u64) -> Model<f32> {
    let config = ModelConfig {
        variant,
        layers: 3,
        embed_dim: 8,
        ffn_dim: 12,
        heads: 2,
        experts: if variant.is_moe() { 3 } else { 1 },
        vocab_size: 7,
        frame_stack: 2,
        feat_dim: 8,
    };
    Model::build(config, seed).unwrap()
}

fn corpus() -> (Vec<Utterance>, omni_moe::data::Tokenizer) {
    let spec = small_spec(3);
    (generate(&spec, 12).unwrap(), spec.tokenizer().unwrap())
}

#[test]
fn dump_has_one_record_per_frame_and_layer_and_matches_forward() {
    let (utts, tok) = corpus();
    let model = small_model(Variant::Omni, 4);
    let dump = dump_routes(&model, &utts, &tok, 1_000_000).unwrap();
    let stacked: usize = utts.iter().map(|u| u.frames.div_ceil(2)).sum();
    assert_eq!(dump.records.len(), stacked * 3);
    assert_eq!(dump.frame_tokens.len(), stacked);

    let refs: Vec<&Utterance> = utts.iter().collect();
    let batch = Batch::new(&refs, &tok).unwrap();
    let mut tape = Tape::new();
    let out = model
        .forward(&mut tape, &batch, ForwardOptions::default())
        .unwrap();
    for r in &dump.records {
        let b = batch
            .ids
            .iter()
            .position(|id| *id == r.utterance_id)
            .unwrap();
        let row = out.segments[b].0 + r.frame;
        let d = &out.dispatches[r.layer];
        assert_eq!(r.expert, d.assignment[row]);
        assert_eq!(r.gate, d.gate[row]);
        assert!((r.probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
    let small_batches = dump_routes(&model, &utts, &tok, 60).unwrap();
    assert_eq!(small_batches.records.len(), dump.records.len());
}

#[test]
fn zero_router_sends_everything_to_expert_zero() {
    let (utts, tok) = corpus();
    let mut model = small_model(Variant::Switch, 5);
    for id in model.router_ids() {
        model
            .params
            .value_mut(id)
            .data_mut()
            .iter_mut()
            .for_each(|w| *w = 0.0);
    }
    let dump = dump_routes(&model, &utts, &tok, 1000).unwrap();
    assert!(dump.records.iter().all(|r| r.expert == 0));
    let v = cramers_v_by_layer(&dump.records, dump.layers, dump.experts).unwrap();
    assert_eq!(v, vec![0.0, 0.0]);
}

#[test]
fn dense_model_has_no_routes() {
    let (utts, tok) = corpus();
    assert!(dump_routes(&small_model(Variant::Dense, 6), &utts, &tok, 1000).is_err());
    assert!(permutation_experiment(
        &small_model(Variant::Dense, 6),
        &utts,
        &tok,
        1000,
        &[0.0],
        1,
        0,
        false
    )
    .is_err());
}

#[test]
fn statistics_from_a_written_dump_equal_in_process_statistics() {
    let (utts, tok) = corpus();
    let model = small_model(Variant::Switch, 7);
    let dump = dump_routes(&model, &utts, &tok, 200).unwrap();
    let (mut routes, mut probs, mut tokens) = (Vec::new(), Vec::new(), Vec::new());
    write_routes(&mut routes, &dump.records).unwrap();
    write_probs(&mut probs, &dump.records).unwrap();
    write_frame_tokens(&mut tokens, &dump.frame_tokens).unwrap();
    let records = read_routes(routes.as_slice(), Some(probs.as_slice())).unwrap();
    let frame_tokens = read_frame_tokens(tokens.as_slice()).unwrap();
    assert_eq!(records, dump.records);
    assert_eq!(
        cramers_v_by_layer(&records, 3, 3).unwrap(),
        cramers_v_by_layer(&dump.records, 3, 3).unwrap()
    );
    for use_probs in [false, true] {
        assert_eq!(
            routing_entropy(&records, &frame_tokens, 7, 3, 3, use_probs).unwrap(),
            routing_entropy(&dump.records, &dump.frame_tokens, 7, 3, 3, use_probs).unwrap()
        );
    }
}

#[test]
fn zero_probability_perturbation_is_a_pass_through() {
    let (utts, tok) = corpus();
    let model = small_model(Variant::Omni, 8);
    let refs: Vec<&Utterance> = utts.iter().collect();
    let batch = Batch::new(&refs, &tok).unwrap();
    let run = |p: Option<f64>| {
        let mut perturb = p.map(|p| Perturbation {
            p,
            exclude_original: false,
            rng: rng::substream(0, "permute", 0),
        });
        let mut tape = Tape::new();
        let opts = ForwardOptions {
            perturb: perturb.as_mut(),
            detach_gate: false,
        };
        let out = model.forward(&mut tape, &batch, opts).unwrap();
        let logits = tape.value(out.logits).clone();
        let d: Vec<_> = out
            .dispatches
            .iter()
            .map(|d| (d.assignment.clone(), d.gate.clone(), d.probs.clone()))
            .collect();
        (logits, d)
    };
    assert_eq!(run(None), run(Some(0.0)));

    let report =
        permutation_experiment(&model, &utts, &tok, 200, &[0.0, 0.5], 2, 9, false).unwrap();
    let base = report.baseline_wer;
    assert_eq!(report.rows[0].trial_wer, vec![base, base]);
    assert_eq!(report.rows[0].mean_change, 0.0);
}

#[test]
fn symmetric_experts_make_full_permutation_harmless() {
    let (utts, tok) = corpus();
    let mut model = small_model(Variant::Switch, 10);
    for id in model.router_ids() {
        model
            .params
            .value_mut(id)
            .data_mut()
            .iter_mut()
            .for_each(|w| *w = 0.0);
    }
    let layers: Vec<_> = model
        .blocks
        .iter()
        .filter_map(|b| match &b.ffn {
            FeedForward::Moe(m) => Some(m.experts.clone()),
            FeedForward::Dense(_) => None,
        })
        .collect();
    for experts in layers {
        let e0 = experts[0];
        for e in &experts[1..] {
            for (src, dst) in [(e0.w1, e.w1), (e0.b1, e.b1), (e0.w2, e.w2), (e0.b2, e.b2)] {
                let v = model.params.value(src).clone();
                *model.params.value_mut(dst) = v;
            }
        }
    }
    let base = evaluate(&model, &utts, &tok, 200, None).unwrap();
    let mut perturb = Perturbation {
        p: 1.0,
        exclude_original: true,
        rng: rng::substream(1, "permute", 0),
    };
    let shuffled = evaluate(&model, &utts, &tok, 200, Some(&mut perturb)).unwrap();
    assert_eq!(base, shuffled);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn two_by_two_chi_square_matches_shortcut(a in 0u64..50, b in 0u64..50, c in 0u64..50, d in 0u64..50) {
        let (af, bf, cf, df) = (a as f64, b as f64, c as f64, d as f64);
        let denom = (af + bf) * (cf + df) * (af + cf) * (bf + df);
        prop_assume!(denom > 0.0);
        let n = af + bf + cf + df;
        let shortcut = n * (af * df - bf * cf).powi(2) / denom;
        let got = chi_square(&table(vec![vec![a, b], vec![c, d]]));
        prop_assert!((got - shortcut).abs() <= 1e-9 * shortcut.max(1.0));
    }

    #[test]
    fn cramers_v_ignores_labels_and_scale(
        seed in 0u64..10_000,
        k in 1u64..5,
        rp in Just(vec![0usize, 1, 2, 3]).prop_shuffle(),
        cp in Just(vec![0usize, 1, 2, 3]).prop_shuffle(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let counts = random_table(&mut rng, 4, 4);
        prop_assume!(counts.iter().flatten().any(|&x| x > 0));
        let v = cramers_v(&table(counts.clone())).unwrap();
        let permuted: Vec<Vec<u64>> = (0..4).map(|i| (0..4).map(|j| counts[rp[i]][cp[j]]).collect()).collect();
        let scaled: Vec<Vec<u64>> = counts.iter().map(|r| r.iter().map(|x| x * k).collect()).collect();
        prop_assert!((cramers_v(&table(permuted)).unwrap() - v).abs() < 1e-12);
        prop_assert!((cramers_v(&table(scaled)).unwrap() - v).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&v));
    }

    #[test]
    fn aligned_labels_are_permutations(seed in 0u64..10_000, n in 1usize..6, layers in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tables: Vec<ContingencyTable> = (0..layers).map(|_| table(random_table(&mut rng, n, n))).collect();
        for p in align_labels(&tables).unwrap() {
            let mut s = p.clone();
            s.sort();
            prop_assert_eq!(s, (0..n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn entropy_is_bounded(assign in prop::collection::vec(0usize..4, 1..40)) {
        let tokens: Vec<FrameToken> = (0..assign.len()).map(|t| FrameToken { utterance_id: "u".into(), frame: t, symbol: 1 }).collect();
        let records: Vec<RoutingRecord> = assign.iter().enumerate().map(|(t, &e)| record("u", 0, t, e)).collect();
        let h = routing_entropy(&records, &tokens, 5, 1, 4, false).unwrap().rows[0].entropy[0].unwrap();
        prop_assert!((0.0..=2.0 + 1e-12).contains(&h));
    }
}
