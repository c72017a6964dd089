//! Cross-run summariser: merges report files of one experiment family into
//! a comparison table (markdown plus CSV) with a monotonicity flag for
//! stability sweeps.

use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::stats::{spearman_p_negative, spearman_rho};

#[derive(Debug)]
pub struct Summary {
    pub markdown: String,
    pub csv: String,
}

fn field<'a>(v: &'a Value, path: &[&str]) -> Option<&'a Value> {
    let mut cur = v;
    for p in path {
        cur = cur.get(p)?;
    }
    Some(cur)
}

fn num(v: &Value, path: &[&str]) -> f64 {
    field(v, path).and_then(Value::as_f64).unwrap_or(f64::NAN)
}

/// Build the comparison table from report JSON files that share one
/// pipeline kind. Mixed families are refused, listing the config hashes.
pub fn emit_summary(report_paths: &[&Path]) -> Result<Summary> {
    if report_paths.is_empty() {
        return Err(Error::config("summarize requires at least one report file"));
    }
    let mut reports = Vec::new();
    for p in report_paths {
        let text = std::fs::read_to_string(p)?;
        let v: Value = serde_json::from_str(&text)?;
        reports.push((p.display().to_string(), v));
    }
    let kinds: Vec<String> = reports
        .iter()
        .map(|(_, v)| {
            v.get("kind")
                .and_then(Value::as_str)
                .unwrap_or("?")
                .to_string()
        })
        .collect();
    let first = &kinds[0];
    if kinds.iter().any(|k| k != first) {
        let listing: Vec<String> = reports
            .iter()
            .zip(&kinds)
            .map(|((_, v), k)| {
                format!(
                    "{k}:{}",
                    v.get("config_hash").and_then(Value::as_str).unwrap_or("?")
                )
            })
            .collect();
        return Err(Error::config(format!(
            "mixed experiment families: {}",
            listing.join(", ")
        )));
    }

    let (columns, rows): (Vec<&str>, Vec<Vec<String>>) = match first.as_str() {
        "stability" => {
            let cols = vec![
                "config_hash",
                "n",
                "eps_stab_sq",
                "gap_dsm_sqrt",
                "pass",
            ];
            let rows = reports
                .iter()
                .map(|(_, v)| {
                    vec![
                        v["config_hash"].as_str().unwrap_or("?").to_string(),
                        num(v, &["n"]).to_string(),
                        num(v, &["report", "eps_stab_sq"]).to_string(),
                        num(v, &["report", "gap_dsm_sqrt"]).to_string(),
                        field(v, &["verdict", "pass"])
                            .and_then(Value::as_bool)
                            .unwrap_or(false)
                            .to_string(),
                    ]
                })
                .collect();
            (cols, rows)
        }
        "sample" => {
            let cols = vec![
                "config_hash",
                "kappa",
                "early_stop",
                "frac_within",
                "mean_nn_distance",
                "sliced_w1_holdout",
            ];
            let rows = reports
                .iter()
                .map(|(_, v)| {
                    vec![
                        v["config_hash"].as_str().unwrap_or("?").to_string(),
                        num(v, &["base", "kappa"]).to_string(),
                        num(v, &["base", "early_stop"]).to_string(),
                        num(v, &["base", "frac_within"]).to_string(),
                        num(v, &["base", "mean_nn_distance"]).to_string(),
                        num(v, &["base", "sliced_w1_holdout"]).to_string(),
                    ]
                })
                .collect();
            (cols, rows)
        }
        "coupling" => {
            let cols = vec!["config_hash", "fitted_rate", "floor", "floor_se"];
            let rows = reports
                .iter()
                .map(|(_, v)| {
                    vec![
                        v["config_hash"].as_str().unwrap_or("?").to_string(),
                        num(v, &["fitted_rate"]).to_string(),
                        num(v, &["floor"]).to_string(),
                        num(v, &["floor_se"]).to_string(),
                    ]
                })
                .collect();
            (cols, rows)
        }
        _ => {
            let cols = vec!["config_hash", "kind"];
            let rows = reports
                .iter()
                .zip(&kinds)
                .map(|((_, v), k)| {
                    vec![
                        v["config_hash"].as_str().unwrap_or("?").to_string(),
                        k.clone(),
                    ]
                })
                .collect();
            (cols, rows)
        }
    };

    let mut csv = columns.join(",");
    csv.push('\n');
    for r in &rows {
        csv.push_str(&r.join(","));
        csv.push('\n');
    }

    let mut markdown = format!("# {first} summary\n\n");
    markdown.push_str(&format!("| {} |\n", columns.join(" | ")));
    markdown.push_str(&format!(
        "|{}\n",
        columns.iter().map(|_| "---|").collect::<String>()
    ));
    for r in &rows {
        markdown.push_str(&format!("| {} |\n", r.join(" | ")));
    }

    // Stability sweeps over N get a monotonicity flag.
    if first == "stability" && reports.len() >= 3 {
        let ns: Vec<f64> = reports.iter().map(|(_, v)| num(v, &["n"])).collect();
        let eps: Vec<f64> = reports
            .iter()
            .map(|(_, v)| num(v, &["report", "eps_stab_sq"]))
            .collect();
        if ns.iter().all(|x| x.is_finite()) && eps.iter().all(|x| x.is_finite()) {
            let rho = spearman_rho(&ns, &eps);
            let p = spearman_p_negative(rho, ns.len());
            markdown.push_str(&format!(
                "\nmonotone_non_increasing_in_n: rho = {rho:.3}, one-sided p = {p:.3}, flag = {}\n",
                rho < 0.0
            ));
        }
    }

    Ok(Summary { markdown, csv })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_report(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        let mut f = std::fs::File::create(&p).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        p
    }

    #[test]
    fn single_report_summary_and_empty_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_report(
            dir.path(),
            "a.json",
            r#"{"kind":"coupling","config_hash":"abc","fitted_rate":0.95,"floor":0.0,"floor_se":0.001}"#,
        );
        let s = emit_summary(&[&p]).unwrap();
        assert!(s.csv.lines().count() == 2);
        assert!(s.markdown.contains("abc"));
        assert!(matches!(emit_summary(&[]), Err(Error::Configuration(_))));
    }

    #[test]
    fn stability_sweep_gets_monotonicity_flag() {
        let dir = tempfile::tempdir().unwrap();
        let mk = |n: usize, eps: f64| {
            format!(
                r#"{{"kind":"stability","config_hash":"h{n}","n":{n},"report":{{"eps_stab_sq":{eps},"gap_dsm_sqrt":0.0}},"verdict":{{"pass":true}}}}"#
            )
        };
        let p1 = write_report(dir.path(), "a.json", &mk(16, 0.9));
        let p2 = write_report(dir.path(), "b.json", &mk(64, 0.5));
        let p3 = write_report(dir.path(), "c.json", &mk(256, 0.2));
        let s = emit_summary(&[&p1, &p2, &p3]).unwrap();
        assert!(s.markdown.contains("monotone_non_increasing_in_n"));
        assert!(s.markdown.contains("flag = true"));
    }

    #[test]
    fn mixed_families_are_refused_with_hashes() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = write_report(
            dir.path(),
            "a.json",
            r#"{"kind":"coupling","config_hash":"aaa"}"#,
        );
        let p2 = write_report(
            dir.path(),
            "b.json",
            r#"{"kind":"sample","config_hash":"bbb"}"#,
        );
        let err = emit_summary(&[&p1, &p2]);
        match err {
            Err(Error::Configuration(msg)) => {
                assert!(msg.contains("aaa") && msg.contains("bbb"));
            }
            other => panic!("expected configuration error, got {:?}", other.err().map(|e| e.to_string())),
        }
    }
}
