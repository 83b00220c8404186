//! Readers for UCR-style series files and BankSim-style transaction logs.

use std::path::Path;

use ccsd_core::{LabeledSeries, TransactionRecord};
use log::info;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Delimiter {
    Tab,
    Comma,
    Whitespace,
}

fn sniff(line: &str) -> Delimiter {
    if line.contains('\t') {
        Delimiter::Tab
    } else if line.contains(',') {
        Delimiter::Comma
    } else {
        Delimiter::Whitespace
    }
}

fn cells(line: &str, delim: Delimiter) -> Vec<&str> {
    match delim {
        Delimiter::Tab => line.split('\t').map(str::trim).collect(),
        Delimiter::Comma => line.split(',').map(str::trim).collect(),
        Delimiter::Whitespace => line.split_whitespace().collect(),
    }
}

fn parse_label(cell: &str) -> Option<i64> {
    if let Ok(v) = cell.parse::<i64>() {
        return Some(v);
    }
    // Older archive files write labels as floats such as 1.0000000e+00.
    let v = cell.parse::<f64>().ok()?;
    (v.is_finite() && v.fract() == 0.0 && v.abs() < 9.0e15).then_some(v as i64)
}

/// Parses one UCR-style file: first cell an integer label, the rest values.
/// Tab, comma and whitespace delimiters are detected from the first row.
/// With `allow_ragged` rows may differ in length.
pub fn parse_ucr(text: &str, path: &Path, allow_ragged: bool) -> CliResult<Vec<LabeledSeries>> {
    let err = |line: usize, message: String| CliError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut delim = None;
    let mut width = None;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let d = *delim.get_or_insert_with(|| sniff(line));
        let row = cells(line, d);
        if row.len() < 3 {
            return Err(err(line_no, format!("expected a label and at least 2 values, got {} cells", row.len())));
        }
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() && !allow_ragged => {
                return Err(err(line_no, format!("ragged row: {} cells, expected {w}", row.len())));
            }
            _ => {}
        }
        let label = parse_label(row[0]).ok_or_else(|| err(line_no, format!("label {:?} is not an integer", row[0])))?;
        let values = row[1..]
            .iter()
            .enumerate()
            .map(|(c, cell)| match cell.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(err(line_no, format!("column {}: {cell:?} is not a finite number", c + 2))),
            })
            .collect::<CliResult<Vec<f64>>>()?;
        out.push(LabeledSeries::new(format!("{stem}:{}", out.len()), values, Some(label)));
    }
    if out.is_empty() {
        return Err(err(0, "file contains no series".into()));
    }
    Ok(out)
}

fn read(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

/// Loads a train/test pair of UCR-style files.
pub fn load_ucr(train: &Path, test: &Path, allow_ragged: bool) -> CliResult<(Vec<LabeledSeries>, Vec<LabeledSeries>)> {
    let tr = parse_ucr(&read(train)?, train, allow_ragged)?;
    let te = parse_ucr(&read(test)?, test, allow_ragged)?;
    if !allow_ragged && tr[0].len() != te[0].len() {
        return Err(CliError::Parse {
            path: test.to_path_buf(),
            line: 1,
            message: format!("series length {} differs from train length {}", te[0].len(), tr[0].len()),
        });
    }
    info!(
        "loaded {} train series and {} test series of length {}",
        tr.len(),
        te.len(),
        tr[0].len()
    );
    Ok((tr, te))
}

const REQUIRED: [&str; 6] = ["step", "customer", "merchant", "category", "amount", "fraud"];

fn unquote(s: &str) -> &str {
    let s = s.trim();
    for q in ['\'', '"'] {
        if s.len() >= 2 && s.starts_with(q) && s.ends_with(q) {
            return &s[1..s.len() - 1];
        }
    }
    s
}

fn parse_flag(s: &str) -> Option<bool> {
    match s {
        "0" | "false" | "False" | "FALSE" => Some(false),
        "1" | "true" | "True" | "TRUE" => Some(true),
        _ => None,
    }
}

/// Parses BankSim-style CSV text. Header names match case-insensitively,
/// surrounding quotes are stripped and extra columns are ignored.
pub fn parse_banksim(text: &str, path: &Path) -> CliResult<Vec<TransactionRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| CliError::Schema {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let names: Vec<String> = headers.iter().map(|h| unquote(h).to_ascii_lowercase()).collect();
    let mut col = [0usize; 6];
    for (slot, want) in col.iter_mut().zip(REQUIRED) {
        *slot = names.iter().position(|n| n == want).ok_or_else(|| CliError::Schema {
            path: path.to_path_buf(),
            message: format!("missing required column {want:?}"),
        })?;
    }
    let [c_step, c_cust, c_mer, c_cat, c_amt, c_fraud] = col;
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| CliError::Parse {
            path: path.to_path_buf(),
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        let err = |message: String| CliError::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let get = |c: usize| unquote(row.get(c).unwrap_or(""));
        let step = get(c_step)
            .parse::<i64>()
            .map_err(|_| err(format!("step {:?} is not an integer", get(c_step))))?;
        let amount = match get(c_amt).parse::<f64>() {
            Ok(v) if v.is_finite() => v,
            _ => return Err(err(format!("amount {:?} is not a finite number", get(c_amt)))),
        };
        let fraud = parse_flag(get(c_fraud)).ok_or_else(|| err(format!("fraud {:?} is not 0 or 1", get(c_fraud))))?;
        out.push(TransactionRecord {
            step,
            customer: get(c_cust).to_string(),
            merchant: get(c_mer).to_string(),
            category: get(c_cat).to_string(),
            amount,
            fraud,
        });
    }
    info!("loaded {} transactions from {}", out.len(), path.display());
    Ok(out)
}

pub fn load_banksim(path: &Path) -> CliResult<Vec<TransactionRecord>> {
    parse_banksim(&read(path)?, path)
}
