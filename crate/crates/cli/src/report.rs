//! Consolidated tables and a gnuplot script over the runs found in an
//! output directory.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context};
use serde_json::Value;

use crate::run::{Run, RunManifest};

pub fn load_manifests(out: &Path) -> anyhow::Result<Vec<RunManifest>> {
    let mut names: Vec<String> = fs::read_dir(out)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".manifest.json") && n != "report.manifest.json")
        .collect();
    names.sort();
    names
        .iter()
        .map(|n| {
            let text = fs::read_to_string(out.join(n))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {n}"))
        })
        .collect()
}

fn flatten(prefix: &str, v: &Value, rows: &mut Vec<(String, String)>) {
    match v {
        Value::Object(m) => {
            for (k, x) in m {
                flatten(&format!("{prefix}.{k}"), x, rows);
            }
        }
        Value::Array(a) if a.iter().all(|x| !x.is_object() && !x.is_array()) => {
            let joined: Vec<String> = a.iter().map(|x| x.to_string()).collect();
            rows.push((prefix.to_string(), format!("\"{}\"", joined.join(" "))));
        }
        Value::Array(a) => {
            for (i, x) in a.iter().enumerate() {
                flatten(&format!("{prefix}.{i}"), x, rows);
            }
        }
        other => rows.push((prefix.to_string(), other.to_string())),
    }
}

/// Reads a CSV with a header and returns the named columns.
fn columns(text: &str, names: &[&str]) -> anyhow::Result<Vec<Vec<String>>> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
    let idx: Vec<usize> = names
        .iter()
        .map(|n| header.iter().position(|h| h == n).with_context(|| format!("column {n} missing")))
        .collect::<anyhow::Result<_>>()?;
    Ok(lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            idx.iter().map(|&i| f.get(i).unwrap_or(&"").to_string()).collect()
        })
        .collect())
}

fn plot_script(out: &Path, dim: usize) -> String {
    let has = |n: &str| out.join(n).exists();
    let mut s = String::from(
        "# gnuplot recipes; run from the output directory\nset datafile separator ','\nset key autotitle columnhead\nset terminal pngcairo size 900,600\n",
    );
    let mut field = |file: &str, png: &str, title: &str| {
        if dim == 1 {
            let _ = writeln!(s, "\nset output '{png}'\nset title '{title}'\nplot '{file}' using 'x1':'value' with lines");
        } else {
            let _ = writeln!(
                s,
                "\nset output '{png}'\nset title '{title}'\nset view map\nsplot '{file}' using 'x1':'x2':'value' with points pointtype 5 palette"
            );
        }
    };
    if has("critical-u.csv") {
        field("critical-u.csv", "critical-u.png", "critical solution");
    }
    let mut rows: Vec<String> = fs::read_dir(out)
        .map(|d| {
            d.filter_map(|e| e.ok())
                .map(|e| e.file_name().to_string_lossy().into_owned())
                .filter(|n| n.starts_with("barrier-row-") && n.ends_with(".csv"))
                .collect()
        })
        .unwrap_or_default();
    rows.sort();
    for r in &rows {
        field(r, &r.replace(".csv", ".png"), "barrier h(z, .)");
    }
    if has("aubry-mask.csv") {
        let _ = writeln!(
            s,
            "\nset output 'aubry-diagonal.png'\nset title 'barrier diagonal'\nset logscale y\nplot 'aubry-mask.csv' using 'node':'h_diag' with lines\nunset logscale y"
        );
    }
    if has("critical-history.csv") {
        let _ = writeln!(
            s,
            "\nset output 'critical-history.png'\nset title 'critical iteration'\nset logscale y\nplot 'critical-history.csv' using 'iteration':'sup_change' with lines\nunset logscale y"
        );
    }
    if has("report-vanishing.csv") {
        let _ = writeln!(
            s,
            "\nset output 'vanishing.png'\nset title 'consecutive sup differences'\nset logscale xy\nplot 'report-vanishing.csv' using 'lambda':'sup_difference' with linespoints\nunset logscale xy"
        );
    }
    if has("report-homogenize.csv") {
        let _ = writeln!(
            s,
            "\nset output 'homogenize.png'\nset title 'homogenization gap'\nset logscale xy\nplot 'report-homogenize.csv' using 'eps':'gap' with points\nunset logscale xy"
        );
    }
    if has("beta.csv") && dim == 1 {
        let _ = writeln!(s, "\nset output 'beta.png'\nset title 'effective Lagrangian'\nplot 'beta.csv' using 'h1':'value' with linespoints");
    }
    s
}

pub fn report(run: &mut Run, manifests: &[RunManifest]) -> anyhow::Result<()> {
    let out = run.out.clone();
    if manifests.is_empty() {
        bail!("no completed runs in {}", out.display());
    }
    let missing: Vec<String> = manifests
        .iter()
        .flat_map(|m| m.outputs.iter())
        .filter(|o| {
            let p = Path::new(o);
            !(if p.is_absolute() { p.exists() } else { out.join(p).exists() })
        })
        .cloned()
        .collect();
    if !missing.is_empty() {
        bail!("missing outputs: {}", missing.join(", "));
    }

    let mut table = String::from("command,key,value\n");
    for m in manifests {
        let mut rows = Vec::new();
        flatten("", &Value::Object(m.headline.clone()), &mut rows);
        for (k, v) in rows {
            let _ = writeln!(table, "{},{},{v}", m.command, k.trim_start_matches('.'));
        }
    }
    run.write("report-headlines.csv", &table)?;

    if out.join("vanishing.csv").exists() {
        let text = fs::read_to_string(out.join("vanishing.csv"))?;
        let mut s = String::from("lambda,sup_difference\n");
        for r in columns(&text, &["lambda", "sup_difference"])? {
            let _ = writeln!(s, "{},{}", r[0], r[1]);
        }
        run.write("report-vanishing.csv", &s)?;
    }
    if out.join("homogenize.csv").exists() {
        let text = fs::read_to_string(out.join("homogenize.csv"))?;
        let mut s = String::from("eps,gap\n");
        for r in columns(&text, &["eps", "gap"])? {
            let _ = writeln!(s, "{},{}", r[0], r[1]);
        }
        run.write("report-homogenize.csv", &s)?;
    }
    let dim = run.config.lagrangian.space.dim;
    let script = plot_script(&out, dim);
    run.write("plots.gp", &script)?;
    run.headline("runs", manifests.iter().map(|m| m.command.clone()).collect::<Vec<_>>());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn columns_are_picked_by_header_name() {
        let text = "lambda,sup_difference,candidate_distance\n0.4,0.1,0.3\n0.2,0.05,0.2\n";
        let rows = columns(text, &["candidate_distance", "lambda"]).unwrap();
        assert_eq!(rows, vec![vec!["0.3", "0.4"], vec!["0.2", "0.2"]]);
        assert!(columns(text, &["gap"]).is_err());
    }

    #[test]
    fn nested_headlines_flatten_to_dotted_keys() {
        let v: Value = serde_json::from_str(r#"{"a": {"b": 1}, "c": [1, 2], "d": [{"e": true}]}"#).unwrap();
        let mut rows = Vec::new();
        flatten("", &v, &mut rows);
        let keys: Vec<&str> = rows.iter().map(|(k, _)| k.as_str()).collect();
        assert_eq!(keys, vec![".a.b", ".c", ".d.0.e"]);
        assert_eq!(rows[1].1, "\"1 2\"");
    }
}
