//! Cross-validation report artifacts: CSV tables plus self-contained SVG
//! renderings of the pooled confusion matrix and ROC curve.

use crate::error::{Error, Result};
use crate::eval::{ConfusionMatrix, CvReport, RocPoint};
use std::path::{Path, PathBuf};

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn metrics_csv(report: &CvReport) -> String {
    let mut out = String::from("fold,test_images,acc4,acc2,auc\n");
    for f in &report.folds {
        out.push_str(&format!(
            "{},{},{:.6},{},{}\n",
            f.fold,
            f.test_images,
            f.acc4,
            fmt_opt(f.acc2),
            fmt_opt(f.auc)
        ));
    }
    out.push_str(&format!(
        "mean,,{:.6},{},{}\n",
        report.mean_acc4,
        fmt_opt(report.mean_acc2),
        fmt_opt(report.mean_auc)
    ));
    out.push_str(&format!(
        "std,,{:.6},{},{}\n",
        report.std_acc4,
        fmt_opt(report.std_acc2),
        fmt_opt(report.std_auc)
    ));
    out
}

/// Heat-shaded count grid with row/column class indices.
pub fn confusion_svg(cm: &ConfusionMatrix) -> String {
    let k = cm.classes;
    let cell = 60.0;
    let margin = 50.0;
    let size = margin + k as f64 * cell + 10.0;
    let max = cm.counts.iter().flatten().copied().max().unwrap_or(0).max(1) as f64;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\" \
         font-family=\"monospace\" font-size=\"12\">\n"
    );
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"16\" text-anchor=\"middle\">predicted</text>\n",
        margin + k as f64 * cell / 2.0
    ));
    svg.push_str(&format!(
        "<text x=\"14\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">true</text>\n",
        margin + k as f64 * cell / 2.0,
        margin + k as f64 * cell / 2.0
    ));
    for t in 0..k {
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{t}</text>\n",
            margin - 14.0,
            margin + t as f64 * cell + cell / 2.0 + 4.0
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{t}</text>\n",
            margin + t as f64 * cell + cell / 2.0,
            margin - 8.0
        ));
        for p in 0..k {
            let count = cm.counts[t][p];
            let shade = 255.0 - 175.0 * count as f64 / max;
            let x = margin + p as f64 * cell;
            let y = margin + t as f64 * cell;
            svg.push_str(&format!(
                "<rect x=\"{x}\" y=\"{y}\" width=\"{cell}\" height=\"{cell}\" \
                 fill=\"rgb({0},{0},255)\" stroke=\"black\"/>\n",
                shade.round() as u32
            ));
            svg.push_str(&format!(
                "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{count}</text>\n",
                x + cell / 2.0,
                y + cell / 2.0 + 4.0
            ));
        }
    }
    svg.push_str("</svg>\n");
    svg
}

/// ROC polyline over a unit box with the chance diagonal.
pub fn roc_svg(points: &[RocPoint], auc: Option<f64>) -> String {
    let size = 320.0;
    let margin = 40.0;
    let plot = size - 2.0 * margin;
    let px = |fpr: f64| margin + fpr * plot;
    let py = |tpr: f64| size - margin - tpr * plot;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\" \
         font-family=\"monospace\" font-size=\"12\">\n"
    );
    svg.push_str(&format!(
        "<rect x=\"{margin}\" y=\"{margin}\" width=\"{plot}\" height=\"{plot}\" \
         fill=\"none\" stroke=\"black\"/>\n"
    ));
    svg.push_str(&format!(
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"gray\" \
         stroke-dasharray=\"4\"/>\n",
        px(0.0),
        py(0.0),
        px(1.0),
        py(1.0)
    ));
    if !points.is_empty() {
        let path: Vec<String> = points
            .iter()
            .map(|p| format!("{:.2},{:.2}", px(p.fpr), py(p.tpr)))
            .collect();
        svg.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"blue\" stroke-width=\"2\"/>\n",
            path.join(" ")
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">false positive rate</text>\n",
        size / 2.0,
        size - 10.0
    ));
    svg.push_str(&format!(
        "<text x=\"14\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">true positive rate</text>\n",
        size / 2.0,
        size / 2.0
    ));
    if let Some(auc) = auc {
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\">AUC = {auc:.4}</text>\n",
            margin + 10.0,
            margin + 16.0
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Write `metrics.csv`, `confusion.csv`, `confusion.svg`, `roc.csv`,
/// `roc.svg`, and `folds.json` into `dir`, creating it if needed.
/// Returns the paths written.
pub fn write_report(report: &CvReport, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut roc_csv = String::from("threshold,fpr,tpr\n");
    for p in &report.pooled_roc {
        roc_csv.push_str(&format!("{:.17e},{:.17e},{:.17e}\n", p.threshold, p.fpr, p.tpr));
    }
    let files = [
        ("metrics.csv", metrics_csv(report)),
        ("confusion.svg", confusion_svg(&report.pooled_confusion)),
        ("roc.csv", roc_csv),
        ("roc.svg", roc_svg(&report.pooled_roc, report.pooled_auc)),
        (
            "folds.json",
            serde_json::to_string_pretty(report).expect("report serializes") + "\n",
        ),
    ];
    let mut written = Vec::new();
    for (name, text) in files {
        let path = dir.join(name);
        write(&path, &text)?;
        written.push(path);
    }
    let confusion_path = dir.join("confusion.csv");
    report.pooled_confusion.save_csv(&confusion_path)?;
    written.push(confusion_path);
    Ok(written)
}
