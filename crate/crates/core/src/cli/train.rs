use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;

use super::config::RunConfig;
use super::data::load_dataset;
use crate::bwmap::BITMAP_CSV_HEADER;
use crate::costmodel::{self, CostParams, RunSummary};
use crate::error::{Error, Result};
use crate::nnkernel::{self, EpochMetrics, Model, QuantMode, TrainState};
use crate::sens::{EpochSensitivitySet, SENSITIVITY_CSV_HEADER};

pub const METRICS_CSV_HEADER: &str = "epoch,train_loss,val_acc,avg_bw_w,avg_bw_a,lambda_w,lambda_a,macbits";
pub const METRICS_CSV: &str = "metrics.csv";
pub const SENSITIVITY_CSV: &str = "sensitivity.csv";
pub const BITMAP_CSV: &str = "bitmap.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const CHECKPOINT: &str = "checkpoint.bin";
/// Full per-epoch metrics, one JSON object per line.
pub const HISTORY_JSONL: &str = "history.jsonl";

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub metrics: Vec<EpochMetrics>,
    pub summary: RunSummary,
    pub run_dir: PathBuf,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

pub fn metrics_row(m: &EpochMetrics) -> String {
    format!(
        "{},{},{},{},{},{},{},{}",
        m.epoch,
        m.train_loss,
        opt(m.val_acc),
        m.avg_bw_w,
        m.avg_bw_a,
        opt(m.lambda_w),
        opt(m.lambda_a),
        m.macbits
    )
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

/// Keeps the header and rows whose leading epoch field is ≤ `epoch`.
fn truncate_csv(path: &Path, header: &str, epoch: usize) -> Result<()> {
    let mut kept = vec![header.to_string()];
    if path.exists() {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        for line in BufReader::new(f).lines().skip(1) {
            let line = line.map_err(|e| Error::io(path, e))?;
            let e: usize = line
                .split(',')
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Data(format!("{}: malformed row `{line}`", path.display())))?;
            if e <= epoch {
                kept.push(line);
            }
        }
    }
    let mut w = create(path)?;
    for l in kept {
        writeln!(w, "{l}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn append(path: &Path) -> Result<BufWriter<File>> {
    let f = fs::OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    Ok(BufWriter::new(f))
}

fn read_history(path: &Path, epoch: usize) -> Result<Vec<EpochMetrics>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let m: EpochMetrics =
            serde_json::from_str(&line).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        if m.epoch <= epoch {
            out.push(m);
        }
    }
    if out.len() != epoch {
        return Err(Error::Data(format!(
            "{} holds {} epochs, checkpoint is at epoch {epoch}",
            path.display(),
            out.len()
        )));
    }
    Ok(out)
}

fn write_metrics(path: &Path, history: &[EpochMetrics]) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "{METRICS_CSV_HEADER}").map_err(io)?;
    for m in history {
        writeln!(w, "{}", metrics_row(m)).map_err(io)?;
    }
    w.flush().map_err(io)
}

fn write_maps(path: &Path, state: &TrainState) -> Result<()> {
    let mut w = append(path)?;
    state.weight_map.write_csv_rows(&mut w, state.weight_coeff.lambda)?;
    state.activation_map.write_csv_rows(&mut w, state.activation_coeff.lambda)?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_sens(path: &Path, sets: &[EpochSensitivitySet]) -> Result<()> {
    let mut w = append(path)?;
    for s in sets {
        s.write_csv_rows(&mut w)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Runs (or resumes) training and writes every artifact into the run
/// directory. With `resume` the state is read from the run's checkpoint.
pub fn cmd_train(cfg: &RunConfig, resume: bool) -> Result<TrainOutcome> {
    let tc = cfg.train_config()?;
    tc.validate()?;
    let dir = PathBuf::from(&cfg.output_dir);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let (train, val) = load_dataset(&cfg.dataset, cfg.seed)?;
    info!("training on {} samples, validating on {}", train.len(), val.len());

    let ckpt = dir.join(CHECKPOINT);
    let metrics_path = dir.join(METRICS_CSV);
    let sens_path = dir.join(SENSITIVITY_CSV);
    let map_path = dir.join(BITMAP_CSV);
    let hist_path = dir.join(HISTORY_JSONL);

    let (mut state, mut history) = if resume {
        let state = nnkernel::load_checkpoint(&ckpt)?;
        if state.seed != cfg.seed || state.batch_size != tc.batch_size {
            return Err(Error::config("checkpoint seed or batch size differs from the config"));
        }
        let history = read_history(&hist_path, state.epoch)?;
        truncate_csv(&sens_path, SENSITIVITY_CSV_HEADER, state.epoch)?;
        truncate_csv(&map_path, BITMAP_CSV_HEADER, state.epoch)?;
        (state, history)
    } else {
        let model = Model::from_spec(&cfg.model, &train.dims, train.classes, cfg.seed)?;
        let state = TrainState::new(model, &tc, cfg.seed)?;
        truncate_csv(&sens_path, SENSITIVITY_CSV_HEADER, 0)?;
        truncate_csv(&map_path, BITMAP_CSV_HEADER, 0)?;
        if tc.mode == QuantMode::Dynamic {
            write_maps(&map_path, &state)?;
        }
        (state, Vec::new())
    };
    let mut hist_rewrite = create(&hist_path)?;
    for m in &history {
        writeln!(hist_rewrite, "{}", serde_json::to_string(m).map_err(|e| Error::internal(e.to_string()))?)
            .map_err(|e| Error::io(&hist_path, e))?;
    }
    drop(hist_rewrite);

    while state.epoch < cfg.epochs {
        let (m, sets) = nnkernel::train_epoch(&mut state, &tc, &train, Some(&val))?;
        write_sens(&sens_path, &sets)?;
        if tc.mode == QuantMode::Dynamic {
            write_maps(&map_path, &state)?;
        }
        let mut h = append(&hist_path)?;
        writeln!(h, "{}", serde_json::to_string(&m).map_err(|e| Error::internal(e.to_string()))?)
            .map_err(|e| Error::io(&hist_path, e))?;
        h.flush().map_err(|e| Error::io(&hist_path, e))?;
        history.push(m);
        write_metrics(&metrics_path, &history)?;
        nnkernel::save_checkpoint(&state, &ckpt)?;
    }

    write_metrics(&metrics_path, &history)?;

    let summary = costmodel::summarize(&history, &CostParams::default())?;
    let sp = dir.join(SUMMARY_JSON);
    let mut w = create(&sp)?;
    costmodel::write_summary(&mut w, &summary)?;
    w.flush().map_err(|e| Error::io(&sp, e))?;
    Ok(TrainOutcome {
        metrics: history,
        summary,
        run_dir: dir,
    })
}
