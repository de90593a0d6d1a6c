//! Evaluation metrics for hybrid predictions and attention-map export.
//!
//! MAE and RMSE are measured on the residual target `y = y_true - y_me`.
//! Relative errors, the `<1%` / `>5%` counts and MIR are measured on the
//! hybrid prediction `ŷ + y_me` against `y_true`. The tables of the original
//! work call ARE "AER"; both names refer to the same quantity.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::MetricsError;
use crate::tensor::Tensor;

/// Sum that does not depend on the order of `values`: terms are added in
/// ascending order.
fn order_free_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.into_iter().collect();
    v.sort_by(f64::total_cmp);
    v.into_iter().sum()
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<(), MetricsError> {
    if expected != got {
        return Err(MetricsError::LengthMismatch { what, expected, got });
    }
    Ok(())
}

/// Percent relative error of `correction + y_me` against `y_true`, per
/// sample. `None` where `y_true` is zero.
pub fn relative_errors(correction: &[f64], y_true: &[f64], y_me: &[f64]) -> Result<Vec<Option<f64>>, MetricsError> {
    check_len("y_true", correction.len(), y_true.len())?;
    check_len("y_me", correction.len(), y_me.len())?;
    Ok(correction
        .iter()
        .zip(y_true)
        .zip(y_me)
        .map(|((c, t), me)| (*t != 0.0).then(|| (c + me - t).abs() / t.abs() * 100.0))
        .collect())
}

/// Counts of samples strictly below 1% and strictly above 5% relative error.
pub fn error_counts(rel: &[Option<f64>]) -> (usize, usize) {
    let lt1 = rel.iter().flatten().filter(|&&e| e < 1.0).count();
    let gt5 = rel.iter().flatten().filter(|&&e| e > 5.0).count();
    (lt1, gt5)
}

/// Model improvement rate over the mechanistic model, in percent.
pub fn mir(correction: &[f64], y_me: &[f64], y_true: &[f64]) -> Result<f64, MetricsError> {
    let m = correction.len();
    if m == 0 {
        return Err(MetricsError::Empty);
    }
    check_len("y_me", m, y_me.len())?;
    check_len("y_true", m, y_true.len())?;

    let hybrid_abs = order_free_sum(correction.iter().zip(y_me).zip(y_true).map(|((c, me), t)| (c + me - t).abs()));
    let mech_abs = order_free_sum(y_me.iter().zip(y_true).map(|(me, t)| (me - t).abs()));
    if mech_abs == 0.0 {
        return Err(MetricsError::MechanisticZeroError);
    }
    let zeros = vec![0.0; m];
    let (hybrid_lt1, _) = error_counts(&relative_errors(correction, y_true, y_me)?);
    let (mech_lt1, _) = error_counts(&relative_errors(&zeros, y_true, y_me)?);
    if mech_lt1 == m {
        return Err(MetricsError::MechanisticPerfectCount);
    }
    let error_term = 1.0 - hybrid_abs / mech_abs;
    let count_term = (hybrid_lt1 as f64 - mech_lt1 as f64) / (m - mech_lt1) as f64;
    Ok((0.5 * error_term + 0.5 * count_term) * 100.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub variant: String,
    pub m: usize,
    pub mae: f64,
    pub rmse: f64,
    /// Mean relative error in percent over samples with nonzero `y_true`.
    pub are_percent: Option<f64>,
    pub err_lt_1pct: usize,
    pub err_gt_5pct: usize,
    pub mir_percent: f64,
    /// Samples with `y_true = 0`, left out of ARE and the error counts.
    #[serde(default)]
    pub zero_denominator: usize,
}

fn report(variant: &str, correction: &[f64], d: &Dataset, mir_percent: f64) -> Result<MetricsReport, MetricsError> {
    let m = d.m();
    check_len("predictions", m, correction.len())?;
    let mae = order_free_sum(correction.iter().zip(d.y()).map(|(p, y)| (p - y).abs())) / m as f64;
    let mse = order_free_sum(correction.iter().zip(d.y()).map(|(p, y)| (p - y).powi(2))) / m as f64;
    let rel = relative_errors(correction, d.y_true(), d.y_me())?;
    let valid: Vec<f64> = rel.iter().flatten().copied().collect();
    let zero_denominator = m - valid.len();
    if zero_denominator > 0 {
        log::warn!("{zero_denominator} samples with y_true = 0 excluded from relative errors");
    }
    let are_percent = (!valid.is_empty()).then(|| order_free_sum(valid.iter().copied()) / valid.len() as f64);
    let (err_lt_1pct, err_gt_5pct) = error_counts(&rel);
    Ok(MetricsReport {
        variant: variant.to_string(),
        m,
        mae,
        rmse: mse.sqrt(),
        are_percent,
        err_lt_1pct,
        err_gt_5pct,
        mir_percent,
        zero_denominator,
    })
}

/// Reports for the mechanistic model alone and for the hybrid model whose
/// residual correction is `correction` (original sample order).
pub fn full_report(correction: &[f64], d: &Dataset, variant: &str) -> Result<(MetricsReport, MetricsReport), MetricsError> {
    check_len("predictions", d.m(), correction.len())?;
    let mechanistic = report("mechanistic", &vec![0.0; d.m()], d, 0.0)?;
    let hybrid_mir = mir(correction, d.y_me(), d.y_true())?;
    let hybrid = report(variant, correction, d, hybrid_mir)?;
    Ok((mechanistic, hybrid))
}

pub fn write_reports(path: &Path, reports: &[MetricsReport]) -> io::Result<()> {
    let text = serde_json::to_string_pretty(reports).map_err(io::Error::other)?;
    fs::write(path, text + "\n")
}

pub fn read_reports(path: &Path) -> io::Result<Vec<MetricsReport>> {
    serde_json::from_str(&fs::read_to_string(path)?).map_err(io::Error::other)
}

/// Attention weights of every repetition, `m × n` each, sample-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub maps: Vec<Tensor>,
    pub feature_names: Vec<String>,
}

impl AttentionMap {
    /// Mean weight of each feature over samples, for repetition `r` (0-based).
    pub fn averages(&self, r: usize) -> Vec<f64> {
        let t = &self.maps[r];
        let (m, n) = (t.shape()[0], t.shape()[1]);
        (0..n)
            .map(|c| order_free_sum((0..m).map(|i| t.get2(i, c))) / m as f64)
            .collect()
    }
}

/// Write `attention_N{r}.csv` and `attention_N{r}.svg` per repetition plus
/// `attention_averages.csv` under `dir`. CSV rows are features, columns are
/// samples.
pub fn export_attention(map: &AttentionMap, dir: &Path) -> io::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut averages = String::from("repetition");
    for name in &map.feature_names {
        averages.push(',');
        averages.push_str(name);
    }
    averages.push('\n');

    for (r, t) in map.maps.iter().enumerate() {
        let label = r + 1;
        let (m, n) = (t.shape()[0], t.shape()[1]);
        let mut csv = String::from("feature");
        for i in 0..m {
            write!(csv, ",{i}").unwrap();
        }
        csv.push('\n');
        for c in 0..n {
            csv.push_str(&map.feature_names[c]);
            for i in 0..m {
                write!(csv, ",{:?}", t.get2(i, c)).unwrap();
            }
            csv.push('\n');
        }
        let csv_path = dir.join(format!("attention_N{label}.csv"));
        fs::write(&csv_path, csv)?;
        written.push(csv_path);

        let avg = map.averages(r);
        write!(averages, "{label}").unwrap();
        for a in &avg {
            write!(averages, ",{a:?}").unwrap();
        }
        averages.push('\n');

        let svg_path = dir.join(format!("attention_N{label}.svg"));
        fs::write(&svg_path, heatmap_svg(t, &avg, &map.feature_names, &format!("N:{label}")))?;
        written.push(svg_path);
    }
    let avg_path = dir.join("attention_averages.csv");
    fs::write(&avg_path, averages)?;
    written.push(avg_path);
    Ok(written)
}

/// Five-stop approximation of the viridis colormap.
fn color(v: f64) -> String {
    const STOPS: [(f64, f64, f64); 5] = [
        (68.0, 1.0, 84.0),
        (59.0, 82.0, 139.0),
        (33.0, 145.0, 140.0),
        (94.0, 201.0, 98.0),
        (253.0, 231.0, 37.0),
    ];
    let x = v.clamp(0.0, 1.0) * (STOPS.len() - 1) as f64;
    let i = (x.floor() as usize).min(STOPS.len() - 2);
    let f = x - i as f64;
    let (a, b) = (STOPS[i], STOPS[i + 1]);
    let mix = |p: f64, q: f64| (p + (q - p) * f).round() as u8;
    format!("#{:02x}{:02x}{:02x}", mix(a.0, b.0), mix(a.1, b.1), mix(a.2, b.2))
}

fn heatmap_svg(t: &Tensor, averages: &[f64], names: &[String], title: &str) -> String {
    let (m, n) = (t.shape()[0], t.shape()[1]);
    let cell_w = (600.0 / m as f64).clamp(2.0, 24.0);
    let cell_h = 40.0;
    let left = 70.0;
    let top = 30.0;
    let plot_w = cell_w * m as f64;
    let plot_h = cell_h * n as f64;
    let bar_x = left + plot_w + 30.0;
    let bar_w = 18.0;
    let width = bar_x + bar_w + 110.0;
    let height = top + plot_h.max(160.0) + 40.0;

    let lo = t.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = t.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let norm = |v: f64| (v - lo) / span;

    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" font-family="sans-serif" font-size="11">"#
    )
    .unwrap();
    writeln!(s, r#"<text x="{left}" y="18" font-size="13">{title}</text>"#).unwrap();
    for (c, name) in names.iter().enumerate().take(n) {
        let y = top + c as f64 * cell_h;
        writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            left - 6.0,
            y + cell_h / 2.0 + 4.0,
            name
        )
        .unwrap();
        for i in 0..m {
            let v = t.get2(i, c);
            writeln!(
                s,
                r#"<rect x="{:.2}" y="{y:.2}" width="{cell_w:.2}" height="{cell_h:.2}" fill="{}"><title>sample {i}, {}: {v:.4}</title></rect>"#,
                left + i as f64 * cell_w,
                color(norm(v)),
                name
            )
            .unwrap();
        }
    }
    writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">sample index</text>"#,
        left + plot_w / 2.0,
        top + plot_h + 18.0
    )
    .unwrap();

    // color bar, high values on top
    let bar_h = plot_h.max(160.0);
    let steps = 50;
    for k in 0..steps {
        let frac = k as f64 / steps as f64;
        writeln!(
            s,
            r#"<rect x="{bar_x:.1}" y="{:.2}" width="{bar_w}" height="{:.2}" fill="{}"/>"#,
            top + (1.0 - frac - 1.0 / steps as f64) * bar_h,
            bar_h / steps as f64 + 0.5,
            color(frac)
        )
        .unwrap();
    }
    for (label, v) in [("max", hi), ("min", lo)] {
        let y = top + (1.0 - norm(v)) * bar_h;
        writeln!(s, r#"<text x="{:.1}" y="{:.1}">{label} {v:.4}</text>"#, bar_x + bar_w + 4.0, y + 4.0).unwrap();
    }
    for (c, a) in averages.iter().enumerate() {
        let y = top + (1.0 - norm(*a)) * bar_h;
        writeln!(
            s,
            r#"<line x1="{:.1}" x2="{:.1}" y1="{y:.2}" y2="{y:.2}" stroke="red" stroke-width="2"/>"#,
            bar_x - 4.0,
            bar_x + bar_w + 4.0
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="{:.1}" y="{:.2}" fill="red">{} avg {a:.4}</text>"#,
            bar_x + bar_w + 4.0,
            y + 14.0 + 12.0 * c as f64,
            names[c]
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_examples() {
        let e = relative_errors(&[0.01], &[1.0], &[1.0]).unwrap();
        assert!((e[0].unwrap() - 1.0).abs() < 1e-9);
        let e = relative_errors(&[0.5, 0.0], &[2.0, 3.0], &[1.5, 3.0]).unwrap();
        assert_eq!(e, vec![Some(0.0), Some(0.0)]);
        let e = relative_errors(&[0.0], &[0.0], &[0.1]).unwrap();
        assert_eq!(e, vec![None]);
    }

    #[test]
    fn mir_identities() {
        let y_true = [1.0, 2.0, 3.0, 4.0];
        let y_me = [1.1, 1.9, 3.3, 3.5];
        assert_eq!(mir(&[0.0; 4], &y_me, &y_true).unwrap(), 0.0);
        let perfect: Vec<f64> = y_true.iter().zip(&y_me).map(|(t, m)| t - m).collect();
        assert!((mir(&perfect, &y_me, &y_true).unwrap() - 100.0).abs() < 1e-12);
    }

    #[test]
    fn mir_undefined_cases() {
        assert_eq!(
            mir(&[0.1, 0.1], &[1.0, 2.0], &[1.0, 2.0]),
            Err(MetricsError::MechanisticZeroError)
        );
        // mechanistic within 1% everywhere but not exact
        assert_eq!(
            mir(&[0.0, 0.0], &[1.001, 2.0], &[1.0, 2.0]),
            Err(MetricsError::MechanisticPerfectCount)
        );
    }

    #[test]
    fn strict_boundaries() {
        let rel = [Some(1.0), Some(5.0), Some(0.999), Some(5.001), None];
        assert_eq!(error_counts(&rel), (1, 1));
    }

    #[test]
    fn colors_are_hex() {
        assert_eq!(color(0.0), "#440154");
        assert_eq!(color(1.0), "#fde725");
    }
}
