//! Tidy CSVs (one observation per row) extracted from a `results.json`.

use std::path::{Path, PathBuf};

use serde_json::Value;

use crate::error::{LabError, Result};

pub const KINDS: &[&str] = &["t-scan", "tail", "clt", "bad-fraction", "velocity"];

fn num(v: &Value) -> String {
    match v {
        Value::Number(n) => n.to_string(),
        Value::String(s) => s.clone(),
        Value::Null => String::new(),
        other => other.to_string(),
    }
}

fn expect<'a>(doc: &'a Value, pointer: &str, kind: &str) -> Result<&'a Value> {
    doc.pointer(pointer)
        .filter(|v| !v.is_null())
        .ok_or_else(|| LabError::config("results", format!("no `{pointer}` in results; not a `{kind}` result")))
}

/// Header and rows for `kind`.
pub fn plot_rows(doc: &Value, kind: &str) -> Result<(Vec<&'static str>, Vec<Vec<String>>)> {
    let arr = |p: &str| -> Result<&Vec<Value>> {
        expect(doc, p, kind)?
            .as_array()
            .ok_or_else(|| LabError::config("results", format!("`{p}` is not an array")))
    };
    match kind {
        "t-scan" => Ok((
            vec!["m", "p_fail", "ci_lo", "ci_hi"],
            arr("/results/report/cells")?
                .iter()
                .map(|c| vec![num(&c["m"]), num(&c["p_fail"]), num(&c["ci"][0]), num(&c["ci"][1])])
                .collect(),
        )),
        "tail" => Ok((
            vec!["u", "survival", "band_lo", "band_hi"],
            arr("/results/tail/survival")?
                .iter()
                .map(|s| vec![num(&s["u"]), num(&s["survival"]), num(&s["band"][0]), num(&s["band"][1])])
                .collect(),
        )),
        "clt" => Ok((
            vec!["n", "projection", "statistic", "p"],
            arr("/results/report/rows")?
                .iter()
                .map(|r| {
                    vec![
                        num(&r["n"]),
                        num(&r["projection"]),
                        num(&r["anderson_darling"]["statistic"]),
                        num(&r["anderson_darling"]["p_value"]),
                    ]
                })
                .collect(),
        )),
        "bad-fraction" => Ok((
            vec!["m0", "p_bad", "ci_lo", "ci_hi"],
            arr("/results/scan/rows")?
                .iter()
                .map(|r| vec![num(&r["m0"]), num(&r["p_bad"]), num(&r["ci"][0]), num(&r["ci"][1])])
                .collect(),
        )),
        "velocity" => {
            let rows = arr("/results/velocity/per_l")
                .or_else(|_| arr("/results/regeneration_velocity/estimate/per_l"))?;
            let mut out = Vec::new();
            for r in rows {
                let v = r["v"].as_array().cloned().unwrap_or_default();
                let se = r["se"].as_array().cloned().unwrap_or_default();
                for (i, (a, b)) in v.iter().zip(&se).enumerate() {
                    out.push(vec![num(&r["ladder"]), (i + 1).to_string(), num(a), num(b)]);
                }
            }
            Ok((vec!["ladder", "component", "v", "se"], out))
        }
        other => Err(LabError::UnknownKind(other.into())),
    }
}

/// Writes `plot_<kind>.csv` next to the results file (or to `out`).
pub fn emit_plot_data(results: &Path, kind: &str, out: Option<&Path>) -> Result<PathBuf> {
    if !KINDS.contains(&kind) {
        return Err(LabError::UnknownKind(kind.into()));
    }
    let text = std::fs::read_to_string(results).map_err(|e| LabError::Io {
        path: results.to_path_buf(),
        source: e,
    })?;
    let doc: Value = serde_json::from_str(&text)?;
    let (header, rows) = plot_rows(&doc, kind)?;
    let target = match out {
        Some(p) => p.to_path_buf(),
        None => results
            .parent()
            .unwrap_or(Path::new("."))
            .join(format!("plot_{}.csv", kind.replace('-', "_"))),
    };
    let io = |e: csv::Error| LabError::Core(rwre_core::Error::from(e));
    let mut wr = csv::Writer::from_path(&target).map_err(io)?;
    wr.write_record(&header).map_err(io)?;
    for r in rows {
        wr.write_record(&r).map_err(io)?;
    }
    wr.flush().map_err(|e| LabError::Io {
        path: target.clone(),
        source: e,
    })?;
    Ok(target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn t_scan_rows() {
        let doc = json!({"results": {"report": {"cells": [
            {"m": 6.0, "p_fail": 0.1, "ci": [0.05, 0.15]},
            {"m": 10.0, "p_fail": 0.01, "ci": [0.0, 0.02]}
        ]}}});
        let (h, rows) = plot_rows(&doc, "t-scan").unwrap();
        assert_eq!(h, vec!["m", "p_fail", "ci_lo", "ci_hi"]);
        assert_eq!(rows[1], vec!["10.0", "0.01", "0.0", "0.02"]);
    }

    #[test]
    fn unknown_and_mismatched_kinds() {
        let doc = json!({"results": {}});
        assert!(matches!(plot_rows(&doc, "nope"), Err(LabError::UnknownKind(_))));
        assert!(plot_rows(&doc, "tail").is_err());
    }
}
