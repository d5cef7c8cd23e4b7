//! Standalone SVG plots: ROC curves with CI ribbons and risk-coverage
//! sweeps. Output is deterministic text so repeated runs are byte-identical.

use crate::eval::{RiskCoveragePoint, RocCurve};

const W: f64 = 640.0;
const H: f64 = 480.0;
const MARGIN: f64 = 60.0;

struct Frame {
    x_label: &'static str,
    y_label: &'static str,
    title: String,
}

fn px(x: f64) -> f64 {
    MARGIN + x.clamp(0.0, 1.0) * (W - 2.0 * MARGIN)
}

fn py(y: f64) -> f64 {
    H - MARGIN - y.clamp(0.0, 1.0) * (H - 2.0 * MARGIN)
}

fn header(f: &Frame) -> String {
    let mut s = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">
<rect width="{W}" height="{H}" fill="white"/>
<text x="{:.1}" y="24" text-anchor="middle" font-family="sans-serif" font-size="15">{}</text>
"#,
        W / 2.0,
        f.title
    );
    // axes
    s.push_str(&format!(
        "<line x1=\"{0:.1}\" y1=\"{1:.1}\" x2=\"{2:.1}\" y2=\"{1:.1}\" stroke=\"black\"/>\n",
        px(0.0),
        py(0.0),
        px(1.0)
    ));
    s.push_str(&format!(
        "<line x1=\"{0:.1}\" y1=\"{1:.1}\" x2=\"{0:.1}\" y2=\"{2:.1}\" stroke=\"black\"/>\n",
        px(0.0),
        py(0.0),
        py(1.0)
    ));
    for i in 0..=5 {
        let v = i as f64 / 5.0;
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">{v:.1}</text>\n",
            px(v),
            py(0.0) + 18.0
        ));
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">{v:.1}</text>\n",
            px(0.0) - 8.0,
            py(v) + 4.0
        ));
    }
    s.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\">{}</text>\n",
        W / 2.0,
        H - 14.0,
        f.x_label
    ));
    s.push_str(&format!(
        "<text x=\"18\" y=\"{:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\" transform=\"rotate(-90 18 {:.1})\">{}</text>\n",
        H / 2.0,
        H / 2.0,
        f.y_label
    ));
    s
}

fn polyline(points: &[(f64, f64)], color: &str) -> String {
    let coords: Vec<String> = points
        .iter()
        .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
        .collect();
    format!(
        "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.8\"/>\n",
        coords.join(" ")
    )
}

/// ROC curve with an optional bootstrap ribbon sampled on an FPR grid.
pub fn roc_svg(curve: &RocCurve, ribbon: Option<&[(f64, f64, f64)]>, title: &str) -> String {
    let frame = Frame {
        x_label: "false positive rate",
        y_label: "true positive rate",
        title: format!("{title} (AUC {:.4})", curve.auc),
    };
    let mut s = header(&frame);
    if let Some(band) = ribbon {
        let mut poly: Vec<String> = band
            .iter()
            .map(|&(fpr, _, hi)| format!("{:.2},{:.2}", px(fpr), py(hi)))
            .collect();
        for &(fpr, lo, _) in band.iter().rev() {
            poly.push(format!("{:.2},{:.2}", px(fpr), py(lo)));
        }
        s.push_str(&format!(
            "<polygon points=\"{}\" fill=\"steelblue\" fill-opacity=\"0.25\" stroke=\"none\"/>\n",
            poly.join(" ")
        ));
    }
    s.push_str(&polyline(
        &[(0.0, 0.0), (1.0, 1.0)],
        "lightgray",
    ));
    let pts: Vec<(f64, f64)> = curve.points.iter().map(|p| (p.fpr, p.tpr)).collect();
    s.push_str(&polyline(&pts, "steelblue"));
    s.push_str("</svg>\n");
    s
}

/// Risk-coverage sweep: coverage on x, miss rate on y (scaled to its max).
pub fn risk_coverage_svg(points: &[RiskCoveragePoint], title: &str) -> String {
    let max_csmr = points
        .iter()
        .filter_map(|p| p.csmr)
        .fold(0.0f64, f64::max)
        .max(1e-9);
    let frame = Frame {
        x_label: "coverage (reported fraction)",
        y_label: "clinically significant miss rate",
        title: format!("{title} (max CSMR {max_csmr:.4})"),
    };
    let mut s = header(&frame);
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter_map(|p| p.csmr.map(|c| (p.coverage, c / max_csmr)))
        .collect();
    if !pts.is_empty() {
        s.push_str(&polyline(&pts, "firebrick"));
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::roc;

    #[test]
    fn svg_output_is_deterministic_and_well_formed() {
        let curve = roc(&[0.9, 0.7, 0.3, 0.1], &[true, false, true, false]).unwrap();
        let a = roc_svg(&curve, Some(&[(0.0, 0.2, 0.6), (1.0, 0.8, 1.0)]), "roc test");
        let b = roc_svg(&curve, Some(&[(0.0, 0.2, 0.6), (1.0, 0.8, 1.0)]), "roc test");
        assert_eq!(a, b);
        assert!(a.starts_with("<svg"));
        assert!(a.ends_with("</svg>\n"));
        assert!(a.contains("polygon"));
    }

    #[test]
    fn risk_coverage_svg_handles_undefined_points() {
        use crate::eval::RiskCoveragePoint;
        let pts = vec![
            RiskCoveragePoint { tau: 0.1, coverage: 1.0, n_reported: 10, csmr: Some(0.2) },
            RiskCoveragePoint { tau: 1.1, coverage: 0.0, n_reported: 0, csmr: None },
        ];
        let svg = risk_coverage_svg(&pts, "rc");
        assert!(svg.contains("polyline"));
    }
}
