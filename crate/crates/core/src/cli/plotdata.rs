//! Plot-ready tables derived from the artifacts of a finished run.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use super::train::{BITMAP_CSV, HISTORY_JSONL, SENSITIVITY_CSV};
use crate::error::{Error, Result};
use crate::nnkernel::EpochMetrics;

pub const SENS_DIST_CSV: &str = "sensitivity_distribution.csv";
pub const BITWIDTH_CSV: &str = "bitwidth_by_epoch.csv";
pub const ACC_MACBITS_CSV: &str = "accuracy_vs_macbits.csv";

/// Bin edges on `r − median(r)` for the distribution table.
pub const R_BIN_EDGES: [f64; 5] = [-4.0, -2.0, 0.0, 2.0, 4.0];

pub const SENS_DIST_HEADER: &str =
    "epoch,category,layer,entries,pct_zero,pct_lt_m4,pct_m4_m2,pct_m2_0,pct_0_2,pct_2_4,pct_ge_4";
pub const BITWIDTH_HEADER: &str = "epoch,avg_bw_w,avg_bw_a,lambda_w,lambda_a,frac0_w,frac2_w,frac4_w,frac6_w,frac8_w,frac0_a,frac2_a,frac4_a,frac6_a,frac8_a";
pub const ACC_MACBITS_HEADER: &str = "epoch,cumulative_macbits,val_acc,train_loss";

fn rows(path: &Path, header_fields: usize) -> Result<Vec<Vec<String>>> {
    let f = File::open(path).map_err(|e| Error::Data(format!("missing run artifact {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if i == 0 {
            continue;
        }
        let fields: Vec<String> = line.split(',').map(str::to_string).collect();
        if fields.len() != header_fields {
            return Err(Error::Data(format!(
                "{}:{}: expected {header_fields} fields, found {}",
                path.display(),
                i + 1,
                fields.len()
            )));
        }
        out.push(fields);
    }
    Ok(out)
}

fn num<T: std::str::FromStr>(path: &Path, field: &str) -> Result<T> {
    field
        .parse()
        .map_err(|_| Error::Data(format!("{}: cannot parse `{field}`", path.display())))
}

fn history(dir: &Path) -> Result<Vec<EpochMetrics>> {
    let path = dir.join(HISTORY_JSONL);
    let f = File::open(&path).map_err(|e| Error::Data(format!("missing run artifact {}: {e}", path.display())))?;
    BufReader::new(f)
        .lines()
        .map(|l| {
            let l = l.map_err(|e| Error::io(&path, e))?;
            serde_json::from_str(&l).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
        })
        .collect()
}

fn bin_of(d: f64) -> usize {
    R_BIN_EDGES.iter().take_while(|&&e| d >= e).count()
}

/// Percentages per `(epoch, category, layer)`; each row sums to 100.
pub fn sensitivity_distribution(sens_csv: &Path) -> Result<Vec<String>> {
    let mut groups: BTreeMap<(usize, String), BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    for f in rows(sens_csv, 7)? {
        let epoch: usize = num(sens_csv, &f[0])?;
        let layer: usize = num(sens_csv, &f[2])?;
        let r: f64 = if f[6] == "-inf" {
            f64::NEG_INFINITY
        } else {
            num(sens_csv, &f[6])?
        };
        groups
            .entry((epoch, f[1].clone()))
            .or_default()
            .entry(layer)
            .or_default()
            .push(r);
    }
    let mut out = Vec::new();
    for ((epoch, cat), layers) in groups {
        let mut finite: Vec<f64> = layers.values().flatten().copied().filter(|r| r.is_finite()).collect();
        let med = if finite.is_empty() {
            0.0
        } else {
            super::validate::median(&mut finite)
        };
        for (layer, rs) in layers {
            let mut counts = [0usize; R_BIN_EDGES.len() + 2];
            for &r in &rs {
                if r.is_finite() {
                    counts[1 + bin_of(r - med)] += 1;
                } else {
                    counts[0] += 1;
                }
            }
            let pct: Vec<String> = counts
                .iter()
                .map(|&c| format!("{:.4}", 100.0 * c as f64 / rs.len() as f64))
                .collect();
            out.push(format!("{epoch},{cat},{layer},{},{}", rs.len(), pct.join(",")));
        }
    }
    Ok(out)
}

#[derive(Default)]
struct MapStats {
    sum: f64,
    count: usize,
    hist: [usize; 5],
    lambda: String,
}

/// One row per trained epoch, from the map that epoch ran with.
pub fn bitwidth_by_epoch(bitmap_csv: &Path, metrics: &[EpochMetrics]) -> Result<Vec<String>> {
    let mut stats: BTreeMap<(usize, String), MapStats> = BTreeMap::new();
    if bitmap_csv.exists() {
        for f in rows(bitmap_csv, 7)? {
            let epoch: usize = num(bitmap_csv, &f[0])?;
            let b: u8 = num(bitmap_csv, &f[5])?;
            let s = stats.entry((epoch, f[1].clone())).or_default();
            s.sum += b as f64;
            s.count += 1;
            if b % 2 == 0 && b <= 8 {
                s.hist[b as usize / 2] += 1;
            }
            s.lambda = f[6].clone();
        }
    }
    let mut out = Vec::new();
    let fracs = |s: Option<&MapStats>| -> String {
        match s {
            Some(s) if s.count > 0 => s
                .hist
                .iter()
                .map(|&h| format!("{:.6}", h as f64 / s.count as f64))
                .collect::<Vec<_>>()
                .join(","),
            _ => ",,,,".to_string(),
        }
    };
    let opt = |v: Option<f64>| v.map_or_else(String::new, |v| v.to_string());
    for m in metrics {
        let w = stats.get(&(m.epoch - 1, "weight".to_string()));
        let a = stats.get(&(m.epoch - 1, "activation".to_string()));
        out.push(format!(
            "{},{},{},{},{},{},{}",
            m.epoch,
            m.avg_bw_w,
            m.avg_bw_a,
            opt(m.lambda_w),
            opt(m.lambda_a),
            fracs(w),
            fracs(a)
        ));
    }
    Ok(out)
}

pub fn accuracy_vs_macbits(metrics: &[EpochMetrics]) -> Vec<String> {
    let mut total = 0.0;
    metrics
        .iter()
        .map(|m| {
            total += m.macbits;
            format!(
                "{},{},{},{}",
                m.epoch,
                total,
                m.val_acc.map_or_else(String::new, |v| v.to_string()),
                m.train_loss
            )
        })
        .collect()
}

fn write_table(path: &Path, header: &str, lines: &[String]) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    writeln!(w, "{header}").map_err(io)?;
    for l in lines {
        writeln!(w, "{l}").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Writes the three tables into `dir` and returns their paths.
pub fn cmd_plotdata(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::Data(format!("run directory {} does not exist", dir.display())));
    }
    let metrics = history(dir)?;
    if metrics.is_empty() {
        return Err(Error::Data(format!("{} records no epochs", dir.display())));
    }
    let dist = sensitivity_distribution(&dir.join(SENSITIVITY_CSV))?;
    let bw = bitwidth_by_epoch(&dir.join(BITMAP_CSV), &metrics)?;
    let acc = accuracy_vs_macbits(&metrics);
    let out = vec![dir.join(SENS_DIST_CSV), dir.join(BITWIDTH_CSV), dir.join(ACC_MACBITS_CSV)];
    write_table(&out[0], SENS_DIST_HEADER, &dist)?;
    write_table(&out[1], BITWIDTH_HEADER, &bw)?;
    write_table(&out[2], ACC_MACBITS_HEADER, &acc)?;
    Ok(out)
}
