//! Report artifacts: trial CSV, JSON summaries, an SVG scatter and the run
//! manifest. Floats are printed with 17 significant digits so reruns are
//! byte-identical.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::certify::{ReportMeta, StabilityReport, Summary, TrialRow};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::grid::Grid2D;

pub const TRIALS_CSV: &str = "trials.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const META_JSON: &str = "meta.json";
pub const CONFIG_JSON: &str = "config.json";
pub const SCATTER_SVG: &str = "scatter.svg";
pub const MANIFEST_JSON: &str = "manifest.json";

pub const TRIAL_COLUMNS: [&str; 18] = [
    "trial",
    "status",
    "t_c",
    "j_at_optimum",
    "r1_minus_r2",
    "atom_pairing",
    "atom_identity_residual",
    "boundary_misfit",
    "realized_bound",
    "certificate_value",
    "empirical_ratio",
    "reciprocity_rel",
    "transfer_residual",
    "control_rel_terminal",
    "eta1",
    "eta2",
    "margin",
    "chain_ok",
];

/// 17 significant digits; `nan`, `inf`, `-inf` for non-finite values.
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.16e}")
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn trials_csv(rows: &[TrialRow]) -> String {
    let mut out = TRIAL_COLUMNS.join(",");
    out.push('\n');
    for r in rows {
        let nums = [
            r.t_c,
            r.j_at_optimum,
            r.r1_minus_r2,
            r.atom_pairing,
            r.atom_identity_residual,
            r.boundary_misfit,
            r.realized_bound,
            r.certificate_value,
            r.empirical_ratio,
            r.reciprocity_rel,
            r.transfer_residual,
            r.control_rel_terminal,
            r.eta1,
            r.eta2,
            r.margin,
        ];
        let _ = write!(out, "{},{}", r.trial, csv_field(&r.status));
        for v in nums {
            out.push(',');
            out.push_str(&fmt_f64(v));
        }
        let _ = writeln!(out, ",{}", r.chain_ok);
    }
    out
}

/// Pretty JSON with floats in the fixed format; non-finite floats become null.
pub fn render_json(v: &Value) -> String {
    let mut out = String::new();
    render(v, 0, &mut out);
    out.push('\n');
    out
}

fn render(v: &Value, depth: usize, out: &mut String) {
    let pad = |d: usize| "  ".repeat(d);
    match v {
        Value::Number(n) => match (n.as_u64(), n.as_i64(), n.as_f64()) {
            (Some(u), _, _) => out.push_str(&u.to_string()),
            (None, Some(i), _) => out.push_str(&i.to_string()),
            (_, _, Some(f)) if f.is_finite() => out.push_str(&format!("{f:.16e}")),
            _ => out.push_str("null"),
        },
        Value::Array(a) if a.is_empty() => out.push_str("[]"),
        Value::Array(a) => {
            out.push_str("[\n");
            for (i, x) in a.iter().enumerate() {
                out.push_str(&pad(depth + 1));
                render(x, depth + 1, out);
                out.push_str(if i + 1 < a.len() { ",\n" } else { "\n" });
            }
            out.push_str(&pad(depth));
            out.push(']');
        }
        Value::Object(m) if m.is_empty() => out.push_str("{}"),
        Value::Object(m) => {
            out.push_str("{\n");
            for (i, (k, x)) in m.iter().enumerate() {
                out.push_str(&pad(depth + 1));
                out.push_str(&Value::String(k.clone()).to_string());
                out.push_str(": ");
                render(x, depth + 1, out);
                out.push_str(if i + 1 < m.len() { ",\n" } else { "\n" });
            }
            out.push_str(&pad(depth));
            out.push('}');
        }
        other => out.push_str(&other.to_string()),
    }
}

/// Serialize through serde, then render in the fixed float format.
pub fn to_fixed_json<T: Serialize>(v: &T) -> Result<String> {
    let value = serde_json::to_value(v).map_err(|e| Error::Io(e.to_string()))?;
    Ok(render_json(&value))
}

/// The summary with its fixed keys. Wall-clock time is deliberately absent so
/// the file is reproducible; it goes to the run log instead.
pub fn summary_json(s: &Summary) -> String {
    render_json(&json!({
        "max_ratio": finite_or_null(s.max_ratio),
        "min_margin": finite_or_null(s.min_margin),
        "failures": s.failures,
    }))
}

pub fn meta_json(meta: &ReportMeta) -> Result<String> {
    to_fixed_json(meta)
}

fn finite_or_null(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        Value::Null
    }
}

/// Scatter of T_c against the boundary misfit with the certificate line and
/// the empirical max-ratio line through the origin.
pub fn scatter_svg(report: &StabilityReport, config_hash: &str) -> String {
    let (w, h, pad) = (640.0, 480.0, 60.0);
    let pts: Vec<(f64, f64)> = report
        .rows
        .iter()
        .filter(|r| r.boundary_misfit.is_finite() && r.t_c.is_finite())
        .map(|r| (r.boundary_misfit, r.t_c))
        .collect();
    let xmax = pts.iter().map(|p| p.0).fold(0.0, f64::max).max(1e-300) * 1.1;
    let ymax = pts.iter().map(|p| p.1).fold(0.0, f64::max).max(1e-300) * 1.1;
    let sx = |x: f64| pad + (w - 2.0 * pad) * x / xmax;
    let sy = |y: f64| h - pad - (h - 2.0 * pad) * y / ymax;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, "<!-- config sha256 {config_hash} -->");
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{pad} {pad} L{pad} {} L{} {}" stroke="black" fill="none"/>"#,
        h - pad,
        w - pad,
        h - pad
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-size="14">boundary misfit (max {})</text>"#, w / 2.0, h - 20.0, fmt_f64(xmax));
    let _ = writeln!(
        s,
        r#"<text x="20" y="{}" text-anchor="middle" font-size="14" transform="rotate(-90 20 {})">T_c (max {})</text>"#,
        h / 2.0,
        h / 2.0,
        fmt_f64(ymax)
    );
    let mut line = |slope: f64, color: &str, label: &str, dy: f64| {
        if !(slope.is_finite() && slope > 0.0) {
            return;
        }
        // clip y = slope·x to the plot box
        let x_end = xmax.min(ymax / slope);
        let _ = writeln!(
            s,
            r#"<line x1="{:.3}" y1="{:.3}" x2="{:.3}" y2="{:.3}" stroke="{color}" stroke-width="1.5"/>"#,
            sx(0.0),
            sy(0.0),
            sx(x_end),
            sy(slope * x_end)
        );
        let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="12" fill="{color}">{label} {}</text>"#, pad + 10.0, pad + dy, fmt_f64(slope));
    };
    let cert = report.rows.iter().map(|r| r.certificate_value).find(|v| v.is_finite()).unwrap_or(f64::NAN);
    line(cert, "crimson", "certificate", 0.0);
    line(report.summary.max_ratio, "steelblue", "max ratio", 16.0);
    for (x, y) in &pts {
        let _ = writeln!(s, r#"<circle cx="{:.3}" cy="{:.3}" r="3" fill="black"/>"#, sx(*x), sy(*y));
    }
    s.push_str("</svg>\n");
    s
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Write every artifact of a stability run into `dir` and return their paths,
/// manifest last.
pub fn write_stability(dir: &Path, cfg: &ExperimentConfig, report: &StabilityReport) -> Result<Vec<PathBuf>> {
    let hash = cfg.hash();
    let mut meta = serde_json::to_value(&report.meta).map_err(|e| Error::Io(e.to_string()))?;
    meta["config_sha256"] = json!(hash);
    let files = vec![
        (CONFIG_JSON, render_json(&serde_json::from_str::<Value>(&cfg.canonical_json()).expect("valid json"))),
        (TRIALS_CSV, trials_csv(&report.rows)),
        (SUMMARY_JSON, summary_json(&report.summary)),
        (META_JSON, render_json(&meta)),
        (SCATTER_SVG, scatter_svg(report, &hash)),
    ];
    write_with_manifest(dir, cfg, "stability", files)
}

/// Write named text artifacts plus a manifest tying them to the config hash.
pub fn write_with_manifest(
    dir: &Path,
    cfg: &ExperimentConfig,
    command: &str,
    files: Vec<(&str, String)>,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    let mut listing = Vec::new();
    for (name, body) in &files {
        let p = dir.join(name);
        std::fs::write(&p, body)?;
        listing.push(json!({ "file": name, "sha256": sha256_hex(body.as_bytes()) }));
        paths.push(p);
    }
    let manifest = json!({
        "command": command,
        "config_sha256": cfg.hash(),
        "seed": cfg.seed,
        "mode": cfg.mode.name(),
        "versions": { "otstab": env!("CARGO_PKG_VERSION") },
        "artifacts": listing,
    });
    let p = dir.join(MANIFEST_JSON);
    std::fs::write(&p, render_json(&manifest))?;
    paths.push(p);
    Ok(paths)
}

/// Boundary trace as (node index, arc-length, value) rows.
pub fn boundary_trace_csv(g: &Grid2D, values: &[f64]) -> Result<String> {
    if values.len() != g.boundary.len() {
        return Err(Error::ShapeMismatch { expected: g.boundary.len(), got: values.len() });
    }
    let mut out = String::from("node,arc,value\n");
    for (b, v) in g.boundary.iter().zip(values) {
        let _ = writeln!(out, "{},{},{}", b.index, fmt_f64(b.arc), fmt_f64(*v));
    }
    Ok(out)
}

/// Space-time boundary data as (time, arc-length, value) rows; `frames[k]`
/// holds the boundary values at `times[k]`.
pub fn space_time_csv(g: &Grid2D, times: &[f64], frames: &[Vec<f64>]) -> Result<String> {
    if times.len() != frames.len() {
        return Err(Error::ShapeMismatch { expected: times.len(), got: frames.len() });
    }
    let mut out = String::from("time,arc,value\n");
    for (t, f) in times.iter().zip(frames) {
        if f.len() != g.boundary.len() {
            return Err(Error::ShapeMismatch { expected: g.boundary.len(), got: f.len() });
        }
        for (b, v) in g.boundary.iter().zip(f) {
            let _ = writeln!(out, "{},{},{}", fmt_f64(*t), fmt_f64(b.arc), fmt_f64(*v));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_float_format() {
        assert_eq!(fmt_f64(0.1), "1.0000000000000001e-1");
        assert_eq!(fmt_f64(-2.5), "-2.5000000000000000e0");
        assert_eq!(fmt_f64(f64::NAN), "nan");
        assert_eq!(fmt_f64(f64::NEG_INFINITY), "-inf");
        for v in [0.1, 1.0 / 3.0, 6.02e23, -1e-300] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
        }
    }

    #[test]
    fn json_rendering() {
        let v = json!({"a": 1, "b": [0.5, -3], "c": {"d": null}, "e": "x\"y"});
        let s = render_json(&v);
        assert_eq!(s, "{\n  \"a\": 1,\n  \"b\": [\n    5.0000000000000000e-1,\n    -3\n  ],\n  \"c\": {\n    \"d\": null\n  },\n  \"e\": \"x\\\"y\"\n}\n");
        let back: Value = serde_json::from_str(&s).unwrap();
        assert_eq!(back["b"][0], json!(0.5));
        let sum = summary_json(&Summary { max_ratio: 2.0, min_margin: f64::INFINITY, failures: 0 });
        let back: Value = serde_json::from_str(&sum).unwrap();
        assert_eq!(back["min_margin"], Value::Null);
        assert_eq!(back.as_object().unwrap().len(), 3);
    }

    #[test]
    fn csv_quotes_status() {
        assert_eq!(csv_field("ok"), "ok");
        assert_eq!(csv_field("error: a, b"), "\"error: a, b\"");
    }
}
