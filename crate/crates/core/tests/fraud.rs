mod common;

use std::collections::{BTreeMap, BTreeSet};

use ccsd_core::synthetic::{bank_transactions, BankConfig};
use ccsd_core::*;
use common::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn window(customer: &str, end: i64, x: Vec<f64>, y: f64, flags: (bool, bool), key: (u32, u32)) -> WindowRecord {
    WindowRecord {
        customer: customer.into(),
        end_index: end as usize,
        end_step: end,
        x,
        y,
        f_cat: flags.0,
        f_mer: flags.1,
        pair_key: key,
    }
}

fn library(windows: Vec<WindowRecord>, sigma_x: f64, sigma_y: f64) -> NormalLibrary {
    let mut rarity = BTreeMap::new();
    for w in &windows {
        *rarity.entry(w.pair_key).or_insert(0) += 1;
    }
    NormalLibrary {
        sq_norms: windows.iter().map(|w| w.x.iter().map(|v| v * v).sum()).collect(),
        customers: windows.iter().map(|w| w.customer.clone()).collect::<BTreeSet<_>>(),
        windows,
        sigma_x: Bandwidth::new(sigma_x).unwrap(),
        sigma_y: Bandwidth::new(sigma_y).unwrap(),
        rarity,
    }
}

fn toy_library() -> NormalLibrary {
    library(
        vec![
            window("n1", 10, vec![0.0, 0.5], 0.3, (false, false), (0, 0)),
            window("n1", 20, vec![1.0, -0.5], 1.1, (true, false), (0, 1)),
            window("n2", 12, vec![0.2, 0.1], 0.2, (false, true), (1, 1)),
            window("n2", 30, vec![-1.0, 0.0], 0.9, (false, false), (0, 0)),
            window("n3", 15, vec![0.4, 0.4], 2.0, (true, true), (2, 0)),
        ],
        0.9,
        0.6,
    )
}

fn gate(p: &FraudParams) -> impl Fn(&(bool, bool), &(bool, bool)) -> f64 + '_ {
    move |a, b| {
        if p.ablation == Ablation::NoFlag {
            return 1.0;
        }
        let mut g = 1.0;
        if a.0 != b.0 {
            g *= p.rho_y_cat;
        }
        if a.1 != b.1 {
            g *= p.rho_y_mer;
        }
        g
    }
}

/// Global weights as a product of multipliers, truncated and renormalized.
fn global_oracle(x: &WindowRecord, lib: &NormalLibrary, p: &FraudParams) -> Vec<(usize, f64)> {
    let mut w: Vec<(usize, f64)> = lib
        .windows
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let mut v = kv(&x.x, &l.x, lib.sigma_x.value());
            if x.pair_key.0 != l.pair_key.0 {
                v *= p.rho_cat;
            }
            if x.pair_key.1 != l.pair_key.1 {
                v *= p.rho_mer;
            }
            if p.ablation != Ablation::NoRarity {
                v *= (lib.rarity[&l.pair_key] as f64 + p.prior_alpha).powf(-p.prior_beta);
            }
            (i, v)
        })
        .collect();
    w.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    w.truncate(p.top_j);
    let s: f64 = w.iter().map(|e| e.1).sum();
    w.into_iter().map(|(i, v)| (i, v / s)).collect()
}

fn local_oracle(x: &WindowRecord, hist: &[WindowRecord], sigma_x: f64, p: &FraudParams) -> Vec<(usize, f64)> {
    let mut past: Vec<usize> = (0..hist.len()).filter(|&i| hist[i].end_step < x.end_step).collect();
    past.sort_by_key(|&i| std::cmp::Reverse((hist[i].end_step, hist[i].end_index)));
    past.truncate(p.local_history);
    let w: Vec<(usize, f64)> = past
        .into_iter()
        .map(|i| {
            let h = &hist[i];
            let mut v = kv(&x.x, &h.x, sigma_x);
            if x.pair_key.0 != h.pair_key.0 {
                v *= p.rho_cat;
            }
            if x.pair_key.1 != h.pair_key.1 {
                v *= p.rho_mer;
            }
            if p.ablation != Ablation::NoDecay {
                v *= 2f64.powf(-((x.end_step - h.end_step) as f64) / p.half_life);
            }
            if p.ablation != Ablation::NoFlag {
                if h.f_cat == x.f_cat {
                    v *= p.eta_cat;
                }
                if h.f_mer == x.f_mer {
                    v *= p.eta_mer;
                }
            }
            (i, v)
        })
        .collect();
    let s: f64 = w.iter().map(|e| e.1).sum();
    w.into_iter().map(|(i, v)| (i, v / s)).collect()
}

fn score_oracle(x: &WindowRecord, hist: &[WindowRecord], lib: &NormalLibrary, p: &FraudParams) -> Option<f64> {
    let b = local_oracle(x, hist, lib.sigma_x.value(), p);
    if b.is_empty() {
        return None;
    }
    let a = global_oracle(x, lib, p);
    let atoms = |m: &[(usize, f64)], src: &[WindowRecord]| {
        m.iter()
            .map(|&(i, w)| (w, src[i].y, (src[i].f_cat, src[i].f_mer)))
            .collect::<Vec<_>>()
    };
    let (pa, qa) = (atoms(&b, hist), atoms(&a, &lib.windows));
    let s = lib.sigma_y.value();
    let g = gate(p);
    let pp = gated_double_sum(&pa, &pa, s, &g);
    let qq = gated_double_sum(&qa, &qa, s, &g);
    let pq = gated_double_sum(&pa, &qa, s, &g);
    Some(ccsd_from_terms(pp, qq, pq, p.epsilon))
}

fn as_map(m: &MixtureWeights) -> BTreeMap<usize, f64> {
    m.indices.iter().copied().zip(m.weights.iter().copied()).collect()
}

#[test]
fn global_mixture_matches_multiplier_chain() {
    let lib = toy_library();
    let x = window("q", 50, vec![0.1, 0.3], 0.0, (false, true), (0, 1));
    for ablation in Ablation::ALL {
        for j in [1, 3, 5, 10] {
            let p = FraudParams {
                top_j: j,
                ..FraudParams::default().with_ablation(ablation)
            };
            let got = global_mixture(&x, &lib, &p).unwrap();
            let want = global_oracle(&x, &lib, &p);
            assert_eq!(got.indices, want.iter().map(|e| e.0).collect::<Vec<_>>());
            for (g, w) in got.weights.iter().zip(&want) {
                assert!((g - w.1).abs() < 1e-12);
            }
            assert!((got.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn local_mixture_matches_oracle() {
    let hist = vec![
        window("a", 3, vec![0.0, 1.0], 0.4, (false, false), (0, 0)),
        window("a", 9, vec![0.5, 0.5], 0.1, (true, false), (0, 1)),
        window("a", 20, vec![1.0, 0.0], 0.7, (false, true), (1, 1)),
        window("a", 40, vec![0.0, 0.0], 0.2, (true, true), (0, 0)),
        window("a", 55, vec![2.0, 2.0], 0.9, (false, false), (0, 0)),
    ];
    let x = hist[3].clone();
    for ablation in Ablation::ALL {
        for l in [1, 2, 10] {
            let p = FraudParams {
                local_history: l,
                ..FraudParams::default().with_ablation(ablation)
            };
            let got = as_map(&local_mixture(&x, &hist, Bandwidth::new(0.8).unwrap(), &p).unwrap());
            let want: BTreeMap<usize, f64> = local_oracle(&x, &hist, 0.8, &p).into_iter().collect();
            assert_eq!(got.keys().collect::<Vec<_>>(), want.keys().collect::<Vec<_>>());
            for (k, v) in &want {
                assert!((got[k] - v).abs() < 1e-12);
            }
            assert!(got.keys().all(|&i| hist[i].end_step < x.end_step));
        }
    }
}

#[test]
fn gated_window_score_matches_double_sum() {
    let lib = library(
        vec![
            window("n", 1, vec![0.0], 0.2, (false, false), (0, 0)),
            window("n", 2, vec![0.0], 1.4, (true, false), (0, 1)),
            window("n", 3, vec![0.0], 0.6, (false, true), (1, 0)),
        ],
        1.0,
        0.7,
    );
    let hist = vec![
        window("a", 1, vec![0.0], 0.1, (true, true), (0, 0)),
        window("a", 2, vec![0.0], 2.2, (false, false), (0, 0)),
        window("a", 3, vec![0.0], 0.5, (true, false), (0, 0)),
    ];
    let p_mix = MixtureWeights {
        indices: vec![0, 1, 2],
        weights: vec![0.2, 0.5, 0.3],
        fallback: false,
    };
    let q_mix = MixtureWeights {
        indices: vec![2, 0, 1],
        weights: vec![0.6, 0.3, 0.1],
        fallback: false,
    };
    for ablation in [Ablation::Full, Ablation::NoFlag] {
        let p = FraudParams {
            epsilon: 0.0,
            ..FraudParams::default().with_ablation(ablation)
        };
        let atoms = |m: &MixtureWeights, src: &[WindowRecord]| {
            m.indices
                .iter()
                .zip(&m.weights)
                .map(|(&i, &w)| (w, src[i].y, (src[i].f_cat, src[i].f_mer)))
                .collect::<Vec<_>>()
        };
        let (pa, qa) = (atoms(&p_mix, &hist), atoms(&q_mix, &lib.windows));
        let g = gate(&p);
        let want = ccsd_from_terms(
            gated_double_sum(&pa, &pa, 0.7, &g),
            gated_double_sum(&qa, &qa, 0.7, &g),
            gated_double_sum(&pa, &qa, 0.7, &g),
            0.0,
        );
        let got = score_window(&p_mix, &hist, &q_mix, &lib, &p).unwrap();
        assert!((got - want).abs() < 1e-12);
    }
}

fn toy_records() -> Vec<TransactionRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut out = Vec::new();
    for (c, spiky) in [("acct-a", false), ("acct-b", true)] {
        let mut step = 0;
        for t in 0..40 {
            let big = spiky && t % 9 == 8;
            out.push(TransactionRecord {
                step,
                customer: c.into(),
                merchant: if big { "m-x".into() } else { format!("m{}", rng.gen_range(0..2)) },
                category: if big { "travel".into() } else { "food".into() },
                amount: if big { 400.0 } else { rng.gen_range(20.0..40.0) },
                fraud: big,
            });
            step += rng.gen_range(1..3);
        }
    }
    out
}

#[test]
fn account_scores_equal_per_window_oracle_maxima() {
    let params = FraudParams {
        k: 6,
        min_length: 10,
        top_j: 4,
        local_history: 7,
        ..FraudParams::default()
    };
    let pre = preprocess(&toy_records(), &params).unwrap();
    let lib = build_library(&pre.accounts[..1], &params).unwrap();
    for acc in &pre.accounts {
        for ablation in Ablation::ALL {
            let p = params.with_ablation(ablation);
            let got = score_account(&acc.signals, &lib, &p, 1).unwrap();
            let windows = make_windows(&acc.signals, &p, 1);
            let oracle: Vec<f64> = windows.iter().filter_map(|x| score_oracle(x, &windows, &lib, &p)).collect();
            assert_eq!(got.windows.len(), oracle.len());
            for (w, o) in got.windows.iter().zip(&oracle) {
                assert!((w.score - o).abs() < 1e-10, "{} vs {o}", w.score);
            }
            let max = oracle.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert!((got.score.unwrap() - max).abs() < 1e-10);
            assert!(got.windows.iter().all(|w| w.score >= -1e-12));
        }
    }
}

#[test]
fn ablations_coincide_when_their_component_is_inert() {
    let lib = toy_library();
    let flat = |f: (bool, bool)| {
        vec![
            window("a", 10, vec![0.1, 0.2], 0.5, f, (0, 0)),
            window("a", 10, vec![0.3, -0.1], 0.9, f, (0, 1)),
            window("a", 10, vec![-0.2, 0.4], 0.1, f, (1, 1)),
        ]
    };
    let hist = flat((true, false));
    let x = window("a", 10, vec![0.0, 0.0], 0.0, (true, false), (0, 0));
    // All history shares one time distance, so decay is a constant factor.
    let x_later = WindowRecord { end_step: 11, ..x.clone() };
    let full = FraudParams::default();
    let p1 = local_mixture(&x_later, &hist, lib.sigma_x, &full).unwrap();
    let p2 = local_mixture(&x_later, &hist, lib.sigma_x, &full.with_ablation(Ablation::NoDecay)).unwrap();
    for (a, b) in p1.weights.iter().zip(&p2.weights) {
        assert!((a - b).abs() < 1e-15);
    }

    let lib_flat = library(
        lib.windows
            .iter()
            .map(|w| WindowRecord { f_cat: false, f_mer: false, ..w.clone() })
            .collect(),
        0.9,
        0.6,
    );
    let hist = flat((false, false));
    let xq = WindowRecord { end_step: 11, f_cat: false, f_mer: false, ..x };
    let score = |p: &FraudParams| {
        let a = local_mixture(&xq, &hist, lib_flat.sigma_x, p).unwrap();
        let b = global_mixture(&xq, &lib_flat, p).unwrap();
        score_window(&a, &hist, &b, &lib_flat, p).unwrap()
    };
    assert!((score(&full) - score(&full.with_ablation(Ablation::NoFlag))).abs() < 1e-12);
}

#[test]
fn max_aggregation_is_monotone() {
    let params = FraudParams {
        k: 6,
        min_length: 10,
        top_j: 4,
        local_history: 7,
        ..FraudParams::default()
    };
    let pre = preprocess(&toy_records(), &params).unwrap();
    let lib = build_library(&pre.accounts[..1], &params).unwrap();
    let acc = &pre.accounts[1].signals;
    let short = AccountSignals {
        steps: acc.steps[..30].to_vec(),
        z: acc.z[..30].to_vec(),
        dz: acc.dz[..29].to_vec(),
        cat_codes: acc.cat_codes[..30].to_vec(),
        mer_codes: acc.mer_codes[..30].to_vec(),
        f_cat: acc.f_cat[..30].to_vec(),
        f_mer: acc.f_mer[..30].to_vec(),
        ..acc.clone()
    };
    let a = score_account(&short, &lib, &params, 1).unwrap().score.unwrap();
    let b = score_account(acc, &lib, &params, 1).unwrap().score.unwrap();
    assert!(b >= a);
}

#[test]
fn scores_ignore_labels() {
    let params = FraudParams::default();
    let pre = preprocess(&bank_transactions(&BankConfig::default(), 2), &params).unwrap();
    let plan = split_accounts(&pre.accounts, 0).unwrap();
    let lib_accounts: Vec<AccountSeries> = pre
        .accounts
        .iter()
        .filter(|a| plan.lib_normal.contains(&a.signals.customer))
        .cloned()
        .collect();
    let lib = build_library(&lib_accounts, &params).unwrap();
    let eval: Vec<AccountSeries> = pre
        .accounts
        .iter()
        .filter(|a| !plan.lib_normal.contains(&a.signals.customer))
        .cloned()
        .collect();
    let before: Vec<Option<f64>> = eval
        .iter()
        .map(|a| score_account(&a.signals, &lib, &params, params.query_stride(a.fraud)).unwrap().score)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut labels: Vec<bool> = eval.iter().map(|a| a.fraud).collect();
    labels.shuffle(&mut rng);
    let after: Vec<Option<f64>> = eval
        .iter()
        .zip(&labels)
        .map(|(a, &l)| score_account(&a.signals, &lib, &params, params.query_stride(l)).unwrap().score)
        .collect();
    assert_eq!(
        before.iter().map(|s| s.map(f64::to_bits)).collect::<Vec<_>>(),
        after.iter().map(|s| s.map(f64::to_bits)).collect::<Vec<_>>()
    );
}

#[test]
fn pipeline_audit_and_detection_on_synthetic_corpus() {
    let recs = bank_transactions(&BankConfig::default(), 2);
    let report = run_pipeline(&recs, &FraudParams::default(), 0, &Ablation::ALL).unwrap();
    assert!(report.audit.splits_disjoint);
    assert!(report.audit.library_provenance);
    assert!(report.audit.library_before_scoring);
    assert!(report.audit.strict_past_local_support);
    assert_eq!(report.split_sizes, [14, 3, 3, 4, 6]);
    assert_eq!(report.variants.len(), 4);
    let full = &report.variants[0];
    assert_eq!(full.variant, Ablation::Full);
    assert!(full.test.auc > 0.9);
    for v in &report.variants {
        assert_eq!(v.val.threshold, report.threshold);
        assert_eq!(v.test.threshold, report.threshold);
    }
    let again = run_pipeline(&recs, &FraudParams::default(), 0, &Ablation::ALL).unwrap();
    assert_eq!(report, again);
}

#[test]
fn label_asymmetric_stride_is_opt_in() {
    let p = FraudParams::default();
    assert_eq!(p.query_stride(false), p.query_stride(true));
    let q = FraudParams {
        label_asymmetric_stride: true,
        ..p
    };
    assert_eq!(q.query_stride(false), 15);
    assert_eq!(q.query_stride(true), 1);
}
