//! CSV and SVG report emitters. CSV schemas are fixed per report type (see
//! the README); SVGs are hand-rolled so there is no imaging dependency.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use tnet_core::analysis::{CompressionReport, EntropyMap};
use tnet_core::classifier::Evaluation;
use tnet_core::trainer::TrainReport;

/// `path` with `suffix` appended to the file name.
pub fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    path.with_file_name(name)
}

pub fn train_report_csv(rep: &TrainReport, path: &Path) -> std::io::Result<()> {
    let mut out = String::from("sweep,train_loss,train_accuracy,val_loss,val_accuracy\n");
    for i in 0..rep.train_loss.len() {
        writeln!(
            out,
            "{i},{},{},{},{}",
            rep.train_loss[i], rep.train_accuracy[i], rep.val_loss[i], rep.val_accuracy[i]
        )
        .unwrap();
    }
    std::fs::write(path, out)
}

/// Raw H×W grid of entropies in nats — one CSV row per image row, no header,
/// so the file dimensions equal the image dimensions.
pub fn entropy_grid_csv(map: &EntropyMap, path: &Path) -> std::io::Result<()> {
    let mut out = String::new();
    for r in 0..map.height {
        let row: Vec<String> = (0..map.width).map(|c| map.get(r, c).to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)
}

pub fn compression_csv(reports: &[CompressionReport], path: &Path) -> std::io::Result<()> {
    let mut out =
        String::from("eps,params_before,params_after,ratio,accuracy_before,accuracy_after\n");
    for r in reports {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.eps,
            r.params_before,
            r.params_after,
            r.ratio,
            r.accuracy_before.unwrap_or(f64::NAN),
            r.accuracy_after.unwrap_or(f64::NAN)
        )
        .unwrap();
    }
    std::fs::write(path, out)
}

pub fn eval_csv(rows: &[(String, Evaluation)], path: &Path) -> std::io::Result<()> {
    let mut out = String::from("dataset,n_samples,accuracy\n");
    for (name, ev) in rows {
        writeln!(out, "{name},{},{}", ev.n_samples, ev.accuracy).unwrap();
    }
    std::fs::write(path, out)
}

/// Confusion matrix with a header row; cell (r, c) counts samples of true
/// class r predicted as class c.
pub fn confusion_csv(ev: &Evaluation, path: &Path) -> std::io::Result<()> {
    let c = ev.confusion.len();
    let mut out = String::from("true_class");
    for j in 0..c {
        write!(out, ",pred_{j}").unwrap();
    }
    out.push('\n');
    for (i, row) in ev.confusion.iter().enumerate() {
        write!(out, "{i}").unwrap();
        for v in row {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    std::fs::write(path, out)
}

/// Linear black-to-yellow color scale.
fn heat_color(t: f64) -> String {
    let t = t.clamp(0.0, 1.0);
    let r = (255.0 * t.min(0.5) * 2.0).round() as u8;
    let g = (255.0 * (t - 0.25).max(0.0) / 0.75).round() as u8;
    let b = (96.0 * (1.0 - t)).round() as u8;
    format!("#{r:02x}{g:02x}{b:02x}")
}

/// Heatmap of the entropy grid with a legend annotated in nats.
pub fn entropy_heatmap_svg(map: &EntropyMap, path: &Path) -> std::io::Result<()> {
    let cell = 18usize;
    let legend_w = 90usize;
    let w = map.width * cell + legend_w;
    let h = map.height * cell + 20;
    let max = map.values.iter().cloned().fold(0.0f64, f64::max);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
         font-family=\"monospace\" font-size=\"11\">\n"
    );
    for r in 0..map.height {
        for c in 0..map.width {
            let v = map.get(r, c);
            let t = if max > 0.0 { v / max } else { 0.0 };
            writeln!(
                svg,
                "<rect x=\"{}\" y=\"{}\" width=\"{cell}\" height=\"{cell}\" fill=\"{}\">\
                 <title>({r}, {c}): {v:.6} nats</title></rect>",
                c * cell,
                r * cell,
                heat_color(t)
            )
            .unwrap();
        }
    }
    let lx = map.width * cell + 10;
    for i in 0..=10 {
        let t = i as f64 / 10.0;
        writeln!(
            svg,
            "<rect x=\"{lx}\" y=\"{}\" width=\"14\" height=\"{}\" fill=\"{}\"/>",
            ((10 - i) as f64 * (map.height * cell) as f64 / 11.0).round() as usize,
            (map.height * cell) / 11 + 1,
            heat_color(t)
        )
        .unwrap();
    }
    writeln!(svg, "<text x=\"{}\" y=\"12\">{max:.4} nats</text>", lx + 18).unwrap();
    writeln!(
        svg,
        "<text x=\"{}\" y=\"{}\">0 nats</text>",
        lx + 18,
        map.height * cell
    )
    .unwrap();
    svg.push_str("</svg>\n");
    std::fs::write(path, svg)
}

/// Two-series chart over the eps grid (log x): parameter ratio and test
/// accuracy.
pub fn compression_chart_svg(reports: &[CompressionReport], path: &Path) -> std::io::Result<()> {
    let (w, h) = (520usize, 320usize);
    let (ml, mr, mt, mb) = (55.0, 20.0, 20.0, 45.0);
    let (pw, ph) = (w as f64 - ml - mr, h as f64 - mt - mb);
    let xs: Vec<f64> = reports.iter().map(|r| r.eps.max(1e-300).ln()).collect();
    let (xmin, xmax) = (
        xs.iter().cloned().fold(f64::INFINITY, f64::min),
        xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    );
    let span = if (xmax - xmin).abs() < 1e-12 { 1.0 } else { xmax - xmin };
    let px = |x: f64| ml + (x - xmin) / span * pw;
    let py = |y: f64| mt + (1.0 - y.clamp(0.0, 1.0)) * ph;

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
         font-family=\"monospace\" font-size=\"11\">\n\
         <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n\
         <rect x=\"{ml}\" y=\"{mt}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" stroke=\"#999\"/>\n"
    );
    for (i, &g) in [0.0, 0.25, 0.5, 0.75, 1.0].iter().enumerate() {
        let y = py(g);
        writeln!(
            svg,
            "<line x1=\"{ml}\" y1=\"{y}\" x2=\"{}\" y2=\"{y}\" stroke=\"#eee\"/>\
             <text x=\"8\" y=\"{}\">{g:.2}</text>",
            ml + pw,
            y + 4.0
        )
        .unwrap();
        let _ = i;
    }
    let series_list: [(Vec<f64>, &str); 2] = [
        (reports.iter().map(|r| r.ratio).collect(), "#1f77b4"),
        (
            reports
                .iter()
                .map(|r| r.accuracy_after.unwrap_or(f64::NAN))
                .collect(),
            "#d62728",
        ),
    ];
    for (series, color) in &series_list {
        let pts: Vec<String> = series
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, &v)| format!("{:.1},{:.1}", px(xs[i]), py(v)))
            .collect();
        writeln!(
            svg,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>",
            pts.join(" ")
        )
        .unwrap();
    }
    writeln!(
        svg,
        "<text x=\"{ml}\" y=\"{}\" fill=\"#1f77b4\">ratio r</text>\
         <text x=\"{}\" y=\"{}\" fill=\"#d62728\">test accuracy</text>\
         <text x=\"{}\" y=\"{}\">log eps ({:.0e} .. {:.0e})</text>",
        h as f64 - 8.0,
        ml + 90.0,
        h as f64 - 8.0,
        ml + 230.0,
        h as f64 - 8.0,
        reports.first().map_or(0.0, |r| r.eps),
        reports.last().map_or(0.0, |r| r.eps),
    )
    .unwrap();
    svg.push_str("</svg>\n");
    std::fs::write(path, svg)
}
