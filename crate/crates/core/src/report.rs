//! Tables and plots from sweep records. Output depends only on the records,
//! so regenerating from a saved JSON-lines file is byte-identical.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::metrics::MetricReport;
use crate::pipeline::Method;
use crate::sweep::RunRecord;

fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6}")
    } else {
        "nan".into()
    }
}

/// One row per record with every mean metric.
pub fn summary_csv(records: &[RunRecord]) -> String {
    let mut s = String::from("dataset,method,channel,snr_db,qam,seed,cbr,start_step,nfe,wall_ms");
    for f in MetricReport::FIELDS.iter().filter(|f| !matches!(**f, "cbr" | "nfe")) {
        let _ = write!(s, ",{f}");
    }
    s.push_str(",psnr_db_std,ms_ssim_db_std\n");
    for r in records {
        let _ = write!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            r.dataset,
            r.method.name(),
            r.channel.kind.label(),
            num(r.channel.snr_db),
            r.channel.qam,
            r.seed,
            num(r.cbr),
            r.start_step,
            r.nfe,
            num(r.wall_ms)
        );
        for f in MetricReport::FIELDS.iter().filter(|f| !matches!(**f, "cbr" | "nfe")) {
            let _ = write!(s, ",{}", num(r.mean.get(*f).copied().unwrap_or(f64::NAN)));
        }
        let _ = writeln!(
            s,
            ",{},{}",
            num(r.std.get("psnr_db").copied().unwrap_or(f64::NAN)),
            num(r.std.get("ms_ssim_db").copied().unwrap_or(f64::NAN))
        );
    }
    s
}

/// Teacher/student latency pairs by CSI, SNR and dataset.
pub fn latency_csv(records: &[RunRecord]) -> String {
    let mut rows: BTreeMap<(String, String, String), [Option<(f64, u64)>; 2]> = BTreeMap::new();
    for r in records {
        let slot = match r.method {
            Method::VefLdmTeacher => 0,
            Method::EecdS1 => 1,
            _ => continue,
        };
        let n = r.per_image.len().max(1) as f64;
        let key = (r.channel.kind.label(), num(r.channel.snr_db), r.dataset.clone());
        let e = rows.entry(key).or_default();
        // Average over seeds.
        let (ms, nfe) = e[slot].unwrap_or((0.0, r.nfe));
        e[slot] = Some((ms + r.wall_ms / n, nfe));
    }
    let mut s = String::from("csi,snr_db,dataset,teacher_ms,student_ms,teacher_nfe,student_nfe\n");
    for ((csi, snr, ds), v) in rows {
        let seeds = |slot: usize| records.iter().filter(|r| {
            r.channel.kind.label() == csi && num(r.channel.snr_db) == snr && r.dataset == ds
                && r.method == if slot == 0 { Method::VefLdmTeacher } else { Method::EecdS1 }
        }).count().max(1) as f64;
        let ms = |slot: usize| v[slot].map(|x| num(x.0 / seeds(slot))).unwrap_or_default();
        let nfe = |slot: usize| v[slot].map(|x| x.1.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{csi},{snr},{ds},{},{},{},{}", ms(0), ms(1), nfe(0), nfe(1));
    }
    s
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

/// A labelled line chart.
pub fn line_plot(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let (w, h) = (560.0, 380.0);
    let (l, r, t, b) = (64.0, 150.0, 36.0, 48.0);
    let pts: Vec<(f64, f64)> = series.iter().flat_map(|s| s.1.iter().copied()).filter(|p| p.0.is_finite() && p.1.is_finite()).collect();
    let (mut x0, mut x1) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, p| (a.0.min(p.0), a.1.max(p.0)));
    let (mut y0, mut y1) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, p| (a.0.min(p.1), a.1.max(p.1)));
    if pts.is_empty() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x0 -= 1.0;
        x1 += 1.0;
    }
    if y1 - y0 < 1e-12 {
        y0 -= 1.0;
        y1 += 1.0;
    }
    let pad = 0.05 * (y1 - y0);
    let (y0, y1) = (y0 - pad, y1 + pad);
    let px = |x: f64| l + (x - x0) / (x1 - x0) * (w - l - r);
    let py = |y: f64| h - b - (y - y0) / (y1 - y0) * (h - t - b);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#, (l + w - r) / 2.0, esc(title));
    let _ = writeln!(s, r##"<rect x="{l}" y="{t}" width="{}" height="{}" fill="none" stroke="#444"/>"##, w - l - r, h - t - b);
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        let _ = writeln!(s, r##"<line x1="{0:.1}" y1="{1}" x2="{0:.1}" y2="{2}" stroke="#ddd"/>"##, px(fx), t, h - b);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#, px(fx), h - b + 14.0, tick(fx));
        let _ = writeln!(s, r##"<line x1="{l}" y1="{0:.1}" x2="{1}" y2="{0:.1}" stroke="#ddd"/>"##, py(fy), w - r);
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#, l - 4.0, py(fy) + 4.0, tick(fy));
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, (l + w - r) / 2.0, h - 10.0, esc(x_label));
    let _ = writeln!(s, r#"<text x="16" y="{0}" text-anchor="middle" transform="rotate(-90 16 {0})">{1}</text>"#, (t + h - b) / 2.0, esc(y_label));
    for (i, (name, data)) in series.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        let mut d: Vec<(f64, f64)> = data.iter().copied().filter(|p| p.0.is_finite() && p.1.is_finite()).collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0));
        let path: Vec<String> = d.iter().map(|p| format!("{:.1},{:.1}", px(p.0), py(p.1))).collect();
        if path.len() > 1 {
            let _ = writeln!(s, r#"<polyline fill="none" stroke="{c}" stroke-width="1.6" points="{}"/>"#, path.join(" "));
        }
        for p in &d {
            let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="2.6" fill="{c}"/>"#, px(p.0), py(p.1));
        }
        let ly = t + 14.0 + 16.0 * i as f64;
        let _ = writeln!(s, r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{c}" stroke-width="2"/>"#, w - r + 8.0, w - r + 26.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, w - r + 30.0, ly + 4.0, esc(name));
    }
    s.push_str("</svg>\n");
    s
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 || v == v.round() {
        format!("{v:.0}")
    } else if v.abs() >= 1.0 {
        format!("{v:.1}")
    } else {
        format!("{v:.3}")
    }
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn mean_over_seeds<K: Ord + Clone>(points: Vec<(K, f64, f64)>) -> BTreeMap<K, Vec<(f64, f64)>> {
    let mut acc: BTreeMap<(K, u64), (f64, f64, usize)> = BTreeMap::new();
    for (k, x, y) in points {
        let e = acc.entry((k, x.to_bits())).or_insert((x, 0.0, 0));
        e.1 += y;
        e.2 += 1;
    }
    let mut out: BTreeMap<K, Vec<(f64, f64)>> = BTreeMap::new();
    for ((k, _), (x, sum, n)) in acc {
        out.entry(k).or_default().push((x, sum / n as f64));
    }
    out
}

/// Writes the summary table, latency table and plots into `dir`; returns the written paths.
pub fn write_report(records: &[RunRecord], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut put = |name: String, body: String| -> Result<()> {
        let p = dir.join(name);
        std::fs::write(&p, body)?;
        written.push(p);
        Ok(())
    };
    put("summary.csv".into(), summary_csv(records))?;
    put("latency.csv".into(), latency_csv(records))?;
    let mut channels: Vec<String> = records.iter().map(|r| channel_tag(r)).collect();
    channels.sort();
    channels.dedup();
    for (metric, label) in [("ms_ssim_db", "MS-SSIM (dB)"), ("psnr_db", "PSNR (dB)")] {
        for ch in &channels {
            let pts = records
                .iter()
                .filter(|r| &channel_tag(r) == ch)
                .map(|r| (r.method, r.channel.snr_db, r.mean.get(metric).copied().unwrap_or(f64::NAN)))
                .collect();
            let series: Vec<(String, Vec<(f64, f64)>)> =
                mean_over_seeds(pts).into_iter().map(|(m, d)| (m.name().to_string(), d)).collect();
            put(format!("{metric}_vs_snr_{ch}.svg"), line_plot(&format!("{label} vs SNR, {ch}"), "SNR (dB)", label, &series))?;
        }
        let pts = records
            .iter()
            .map(|r| {
                (format!("{} {}@{}dB", r.method.name(), channel_tag(r), r.channel.snr_db), r.cbr, r.mean.get(metric).copied().unwrap_or(f64::NAN))
            })
            .collect();
        let series: Vec<(String, Vec<(f64, f64)>)> = mean_over_seeds(pts).into_iter().collect();
        put(format!("{metric}_vs_cbr.svg"), line_plot(&format!("{label} vs bandwidth ratio"), "CBR", label, &series))?;
    }
    Ok(written)
}

fn channel_tag(r: &RunRecord) -> String {
    if r.channel.qam {
        format!("{}-qam", r.channel.kind.label())
    } else {
        r.channel.kind.label()
    }
}
