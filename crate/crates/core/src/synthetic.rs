//! Seeded synthetic data: labeled waveforms for clustering and BankSim-like
//! transaction logs for the fraud pipeline.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::cluster::LabeledSeries;
use crate::fraud::TransactionRecord;

/// Three periods of a sine (label 0) or square (label 1) wave with phase
/// jitter and additive Gaussian noise.
pub fn waveform_series(per_class: usize, len: usize, noise: f64, seed: u64) -> Vec<LabeledSeries> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gauss = Normal::new(0.0, noise.max(0.0)).expect("finite noise");
    let mut out = Vec::with_capacity(2 * per_class);
    for label in 0..2i64 {
        for i in 0..per_class {
            let phase = rng.gen_range(-0.15..0.15);
            let period = len as f64 / 3.0;
            let values = (0..len)
                .map(|t| {
                    let s = (std::f64::consts::TAU * t as f64 / period + phase).sin();
                    let v = if label == 0 { s } else { s.signum() };
                    v + gauss.sample(&mut rng)
                })
                .collect();
            out.push(LabeledSeries {
                id: format!("{}-{i}", if label == 0 { "sine" } else { "square" }),
                values,
                label: Some(label),
            });
        }
    }
    out
}

/// Shape of a synthetic transaction log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BankConfig {
    pub normal_accounts: usize,
    pub fraud_accounts: usize,
    pub transactions: usize,
    pub categories: usize,
    pub merchants: usize,
    /// Position from which a fraud account may carry fraudulent payments.
    pub fraud_start: usize,
    /// Chance that a transaction past `fraud_start` is fraudulent.
    pub spike_rate: f64,
}

impl Default for BankConfig {
    fn default() -> Self {
        BankConfig {
            normal_accounts: 20,
            fraud_accounts: 10,
            transactions: 155,
            categories: 6,
            merchants: 12,
            fraud_start: 40,
            spike_rate: 0.1,
        }
    }
}

/// Accounts shop at two habitual category/merchant pairs with Gaussian
/// amounts and occasional switches. Past `fraud_start`, fraud accounts
/// interleave large payments at a category and merchant that normal
/// accounts never use; only those transactions carry the fraud flag.
pub fn bank_transactions(cfg: &BankConfig, seed: u64) -> Vec<TransactionRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let total = cfg.normal_accounts + cfg.fraud_accounts;
    let cats = cfg.categories.max(1);
    let mers = cfg.merchants.max(1);
    for a in 0..total {
        let fraud = a >= cfg.normal_accounts;
        let customer = format!("C{a:06}");
        let base = rng.gen_range(20.0..60.0f64);
        let amount = Normal::new(base, base * rng.gen_range(0.1..0.2)).expect("valid normal");
        let habits = [
            (rng.gen_range(0..cats), rng.gen_range(0..mers)),
            (rng.gen_range(0..cats), rng.gen_range(0..mers)),
        ];
        let spike = Normal::new(6.0 * base, base).expect("valid normal");
        let mut step = rng.gen_range(0..5i64);
        for t in 0..cfg.transactions {
            let record = if fraud && t >= cfg.fraud_start && rng.gen_bool(cfg.spike_rate) {
                TransactionRecord {
                    step,
                    customer: customer.clone(),
                    merchant: "M_rare".into(),
                    category: "cat_travel".into(),
                    amount: spike.sample(&mut rng),
                    fraud: true,
                }
            } else {
                let (c, m) = if rng.gen_bool(0.03) {
                    (rng.gen_range(0..cats), rng.gen_range(0..mers))
                } else {
                    habits[usize::from(rng.gen_bool(0.1))]
                };
                TransactionRecord {
                    step,
                    customer: customer.clone(),
                    merchant: format!("M{m:04}"),
                    category: format!("cat_{c}"),
                    amount: amount.sample(&mut rng).abs(),
                    fraud: false,
                }
            };
            out.push(record);
            step += rng.gen_range(1..4);
        }
    }
    out
}
