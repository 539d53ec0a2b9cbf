//! CSV, SVG and manifest writers.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use super::config::ExperimentConfig;
use super::metrics::{AggregateCurve, EpisodeMetrics};
use super::train::GradNormRecord;
use crate::error::{Error, Result};
use crate::numcore::ParamStore;

/// Formats a value rounded to 10 significant digits, in the shortest
/// decimal that parses back to that rounded value.
pub fn fmt_num(v: f64) -> String {
    if !v.is_finite() {
        return v.to_string();
    }
    let rounded: f64 = format!("{v:.9e}").parse().expect("valid float text");
    rounded.to_string()
}

/// One row of the per-episode CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRow {
    pub run_id: String,
    pub metrics: EpisodeMetrics,
    pub grad_norm_rl: Option<f64>,
    pub grad_norm_prcl: Option<f64>,
}

const EPISODE_HEADER: [&str; 6] = [
    "run_id",
    "seed",
    "episode",
    "cumulative_reward",
    "ctr",
    "episode_length",
];

fn opt(v: Option<f64>) -> String {
    v.map(fmt_num).unwrap_or_default()
}

/// Writes per-episode rows; `with_grads` adds the two gradient-norm columns.
pub fn emit_csv(rows: &[EpisodeRow], with_grads: bool, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<&str> = EPISODE_HEADER.to_vec();
    if with_grads {
        header.extend(["grad_norm_rl", "grad_norm_prcl"]);
    }
    w.write_record(&header)?;
    for r in rows {
        let m = &r.metrics;
        let mut rec = vec![
            r.run_id.clone(),
            m.seed.to_string(),
            m.episode.to_string(),
            fmt_num(m.cumulative_reward),
            fmt_num(m.ctr),
            m.episode_length.to_string(),
        ];
        if with_grads {
            rec.push(opt(r.grad_norm_rl));
            rec.push(opt(r.grad_norm_prcl));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a file written by [`emit_csv`].
pub fn read_csv(path: impl AsRef<Path>) -> Result<Vec<EpisodeRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let with_grads = r.headers()?.len() == 8;
    let parse_f = |s: &str| -> Result<f64> {
        s.parse()
            .map_err(|_| Error::InvalidArgument(format!("bad number `{s}`")))
    };
    let parse_u = |s: &str| -> Result<u64> {
        s.parse()
            .map_err(|_| Error::InvalidArgument(format!("bad integer `{s}`")))
    };
    let parse_opt = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            parse_f(s).map(Some)
        }
    };
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        rows.push(EpisodeRow {
            run_id: rec[0].to_string(),
            metrics: EpisodeMetrics {
                seed: parse_u(&rec[1])?,
                episode: parse_u(&rec[2])? as usize,
                cumulative_reward: parse_f(&rec[3])?,
                ctr: parse_f(&rec[4])?,
                episode_length: parse_u(&rec[5])? as usize,
            },
            grad_norm_rl: if with_grads {
                parse_opt(&rec[6])?
            } else {
                None
            },
            grad_norm_prcl: if with_grads {
                parse_opt(&rec[7])?
            } else {
                None
            },
        });
    }
    Ok(rows)
}

/// Writes `label, episode, mean, half_width` rows for each curve.
pub fn emit_aggregate_csv(curves: &[AggregateCurve], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["label", "episode", "mean", "ci_half_width"])?;
    for c in curves {
        for (e, (m, h)) in c.mean.iter().zip(&c.half_width).enumerate() {
            w.write_record([c.label.clone(), e.to_string(), fmt_num(*m), fmt_num(*h)])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes gradient norms in long form: one row per (step, source).
pub fn emit_grad_csv(
    runs: &[(String, u64, &[GradNormRecord])],
    path: impl AsRef<Path>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["run_id", "seed", "update_step", "source", "grad_norm"])?;
    for (run_id, seed, records) in runs {
        for g in records.iter() {
            w.write_record([
                run_id.clone(),
                seed.to_string(),
                g.update_step.to_string(),
                g.source.tag().to_string(),
                fmt_num(g.grad_norm),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
];

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Line chart of curve means with shaded confidence bands.
pub fn render_svg(title: &str, y_label: &str, curves: &[AggregateCurve]) -> Result<String> {
    if curves.is_empty() {
        return Err(Error::InvalidArgument("no curves to plot".into()));
    }
    let (w, h) = (760.0, 460.0);
    let (left, right, top, bottom) = (70.0, 180.0, 40.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let n = curves.iter().map(|c| c.mean.len()).max().unwrap_or(0);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for c in curves {
        for (m, hw) in c.mean.iter().zip(&c.half_width) {
            lo = lo.min(m - hw);
            hi = hi.max(m + hw);
        }
    }
    if !lo.is_finite() || !hi.is_finite() {
        lo = 0.0;
        hi = 1.0;
    }
    if hi - lo < 1e-12 {
        lo -= 0.5;
        hi += 0.5;
    }
    let x_of = |i: usize| {
        left + if n > 1 {
            pw * i as f64 / (n - 1) as f64
        } else {
            pw / 2.0
        }
    };
    let y_of = |v: f64| top + ph * (hi - v) / (hi - lo);

    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
    writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
        left + pw / 2.0,
        xml_escape(title)
    )
    .unwrap();
    // Axes and ticks.
    writeln!(
        s,
        r#"<path d="M{left} {top} V{} H{}" stroke="black" fill="none"/>"#,
        top + ph,
        left + pw
    )
    .unwrap();
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let y = y_of(v);
        writeln!(
            s,
            r#"<line x1="{}" y1="{y:.2}" x2="{left}" y2="{y:.2}" stroke="black"/><text x="{}" y="{:.2}" text-anchor="end">{}</text>"#,
            left - 5.0,
            left - 8.0,
            y + 4.0,
            fmt_tick(v)
        )
        .unwrap();
        if n > 0 {
            let i = ((n - 1) as f64 * k as f64 / 4.0).round() as usize;
            let x = x_of(i);
            writeln!(
                s,
                r#"<line x1="{x:.2}" y1="{}" x2="{x:.2}" y2="{}" stroke="black"/><text x="{x:.2}" y="{}" text-anchor="middle">{i}</text>"#,
                top + ph,
                top + ph + 5.0,
                top + ph + 18.0
            )
            .unwrap();
        }
    }
    writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">episode</text>"#,
        left + pw / 2.0,
        h - 10.0
    )
    .unwrap();
    writeln!(
        s,
        r#"<text x="16" y="{0}" text-anchor="middle" transform="rotate(-90 16 {0})">{1}</text>"#,
        top + ph / 2.0,
        xml_escape(y_label)
    )
    .unwrap();

    for (ci, c) in curves.iter().enumerate() {
        let color = PALETTE[ci % PALETTE.len()];
        let upper = c
            .mean
            .iter()
            .zip(&c.half_width)
            .enumerate()
            .map(|(i, (m, hw))| (x_of(i), y_of(m + hw)));
        let lower: Vec<_> = c
            .mean
            .iter()
            .zip(&c.half_width)
            .enumerate()
            .map(|(i, (m, hw))| (x_of(i), y_of(m - hw)))
            .collect();
        let band: Vec<String> = upper
            .chain(lower.into_iter().rev())
            .map(|(x, y)| format!("{x:.2},{y:.2}"))
            .collect();
        let line: Vec<String> = c
            .mean
            .iter()
            .enumerate()
            .map(|(i, m)| format!("{:.2},{:.2}", x_of(i), y_of(*m)))
            .collect();
        writeln!(s, r#"<polygon class="band" points="{}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#, band.join(" ")).unwrap();
        writeln!(s, r#"<polyline class="mean" points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, line.join(" ")).unwrap();
        let ly = top + 10.0 + 20.0 * ci as f64;
        let lx = left + pw + 15.0;
        writeln!(
            s,
            r#"<g class="legend"><rect x="{lx}" y="{}" width="14" height="4" fill="{color}"/><text x="{}" y="{}">{}</text></g>"#,
            ly - 2.0,
            lx + 20.0,
            ly + 4.0,
            xml_escape(&c.label)
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn fmt_tick(v: f64) -> String {
    let t = format!("{v:.3}");
    if t == "-0.000" {
        "0.000".into()
    } else {
        t
    }
}

pub fn emit_svg(
    title: &str,
    y_label: &str,
    curves: &[AggregateCurve],
    path: impl AsRef<Path>,
) -> Result<()> {
    let svg = render_svg(title, y_label, curves)?;
    std::fs::write(path, svg)?;
    Ok(())
}

/// Plain-text record of what produced a run's outputs.
pub fn manifest_text(config: &ExperimentConfig, seeds: &[u64], run_ids: &[String]) -> String {
    let mut s = String::new();
    writeln!(s, "# crir run manifest").unwrap();
    writeln!(s, "crate_version = {}", env!("CARGO_PKG_VERSION")).unwrap();
    if let Some(rev) = option_env!("CRIR_GIT_REV") {
        writeln!(s, "git_rev = {rev}").unwrap();
    }
    let seeds: Vec<String> = seeds.iter().map(u64::to_string).collect();
    writeln!(s, "seeds = {}", seeds.join(",")).unwrap();
    writeln!(s, "runs = {}", run_ids.join(",")).unwrap();
    writeln!(s, "\n# config").unwrap();
    s.push_str(&config.to_text());
    s
}

pub fn write_manifest(
    config: &ExperimentConfig,
    seeds: &[u64],
    run_ids: &[String],
    path: impl AsRef<Path>,
) -> Result<()> {
    std::fs::write(path, manifest_text(config, seeds, run_ids))?;
    Ok(())
}

/// Writes every parameter tensor: name, shape and little-endian values.
pub fn save_checkpoint(store: &ParamStore, path: impl AsRef<Path>) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(b"CRIRPAR1")?;
    w.write_all(&(store.len() as u64).to_le_bytes())?;
    for id in store.ids() {
        let name = store.name(id).as_bytes();
        let t = store.get(id);
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(t.rows() as u64).to_le_bytes())?;
        w.write_all(&(t.cols() as u64).to_le_bytes())?;
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}
