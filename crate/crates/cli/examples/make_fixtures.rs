//! Regenerates the bundled test fixtures under `tests/fixtures`.
//!
//! cargo run -p ccsd-cli --example make_fixtures

use std::fmt::Write as _;
use std::path::Path;

use ccsd_core::synthetic::{bank_transactions, waveform_series, BankConfig};
use ccsd_core::LabeledSeries;

fn ucr_text(series: &[LabeledSeries], sep: &str) -> String {
    let mut out = String::new();
    for s in series {
        out.push_str(&s.label.unwrap_or(0).to_string());
        for v in &s.values {
            write!(out, "{sep}{v}").unwrap();
        }
        out.push('\n');
    }
    out
}

fn main() -> std::io::Result<()> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    std::fs::create_dir_all(&dir)?;

    std::fs::write(dir.join("waves_TRAIN.tsv"), ucr_text(&waveform_series(6, 64, 0.1, 1), "\t"))?;
    std::fs::write(dir.join("waves_TEST.csv"), ucr_text(&waveform_series(6, 64, 0.1, 2), ","))?;

    // Same column layout and quoting as the public BankSim release.
    let mut bank = String::from("step,customer,age,gender,zipcodeOri,merchant,zipMerchant,category,amount,fraud\n");
    for r in bank_transactions(&BankConfig::default(), 2) {
        writeln!(
            bank,
            "{},'{}','3','F','28007','{}','28007','{}',{},{}",
            r.step,
            r.customer,
            r.merchant,
            r.category,
            r.amount,
            u8::from(r.fraud)
        )
        .unwrap();
    }
    std::fs::write(dir.join("bank_30.csv"), bank)?;
    println!("fixtures written to {}", dir.display());
    Ok(())
}
