//! `preds.csv`: one prediction per clip and method.
//!
//! Category predictions use the header `clip_id,method,prediction`; score
//! vectors use `clip_id,method,score_0,...`. An unscored prediction is a row
//! whose value fields are all empty.

use std::fs;
use std::path::Path;

use patchtrace_core::{Prediction, PredictionRecord};

use crate::error::{Error, Result};

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: e.to_string(),
    }
}

/// Serializes records to CSV text. Every record must share one shape:
/// all categories or all `num_scores`-long score vectors (unscored rows fit either).
pub fn format_predictions(records: &[PredictionRecord]) -> Result<String> {
    let width = records.iter().find_map(|r| match &r.predicted {
        Prediction::Scores(s) => Some(s.len()),
        _ => None,
    });
    if let Some(w) = width {
        if records
            .iter()
            .any(|r| matches!(&r.predicted, Prediction::Category(_)) || matches!(&r.predicted, Prediction::Scores(s) if s.len() != w))
        {
            return Err(Error::InconsistentShape(
                "predictions mix categories and score vectors of different shapes".into(),
            ));
        }
    }

    let mut wtr = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    let mut header = vec!["clip_id".to_string(), "method".to_string()];
    match width {
        Some(w) => header.extend((0..w).map(|i| format!("score_{i}"))),
        None => header.push("prediction".into()),
    }
    let io = |e: csv::Error| Error::Parse {
        path: "<memory>".into(),
        line: 0,
        message: e.to_string(),
    };
    wtr.write_record(&header).map_err(io)?;
    let value_cols = header.len() - 2;
    for r in records {
        let mut row = vec![r.clip_id.clone(), r.method.clone()];
        match &r.predicted {
            Prediction::Category(c) => row.push(c.to_string()),
            Prediction::Scores(s) => row.extend(s.iter().map(|v| v.to_string())),
            Prediction::Unscored => row.extend(std::iter::repeat_n(String::new(), value_cols)),
        }
        wtr.write_record(&row).map_err(io)?;
    }
    let bytes = wtr.into_inner().map_err(|e| Error::InconsistentShape(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let text = format_predictions(records)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_slice());
    let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    if header.len() < 3 || &header[0] != "clip_id" || &header[1] != "method" {
        return Err(parse_err(1, "header must start with clip_id,method".into()));
    }
    let scores = if header.len() == 3 && &header[2] == "prediction" {
        false
    } else if header.iter().skip(2).enumerate().all(|(i, h)| h == format!("score_{i}")) {
        true
    } else {
        return Err(parse_err(1, "expected a prediction column or score_0..score_{C-1}".into()));
    };

    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let values: Vec<&str> = rec.iter().skip(2).collect();
        let predicted = if values.iter().all(|v| v.is_empty()) {
            Prediction::Unscored
        } else if scores {
            let s = values
                .iter()
                .map(|v| v.parse::<f64>().map_err(|e| parse_err(line, format!("score {v:?}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            Prediction::Scores(s)
        } else {
            let c = values[0]
                .parse::<usize>()
                .map_err(|e| parse_err(line, format!("prediction {:?}: {e}", values[0])))?;
            Prediction::Category(c)
        };
        out.push(PredictionRecord::new(&rec[0], &rec[1], predicted));
    }
    Ok(out)
}
