use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub class: String,
    pub n_images: usize,
    pub precision: f64,
    pub recall: f64,
    pub ap50: f64,
    pub ap50_95: f64,
}

/// PR curve of one class at IoU 0.5 as `(recall, precision)` points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCurve {
    pub class: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// "All" first, then one row per class in class-id order.
    pub rows: Vec<EvalRow>,
    /// Confidence threshold of the reported precision/recall.
    pub conf_threshold: Option<f32>,
    pub curves: Vec<ClassCurve>,
}

impl EvalReport {
    pub fn all(&self) -> &EvalRow {
        &self.rows[0]
    }

    pub fn row(&self, class: &str) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.class == class)
    }

    /// Pipe-separated table with three decimals per metric.
    pub fn render_text(&self) -> String {
        let mut s = String::from(
            "Class | Number of picture | Precision | Recall | mAP@0.5 | mAP@0.5:0.95\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{} | {} | {:.3} | {:.3} | {:.3} | {:.3}",
                r.class, r.n_images, r.precision, r.recall, r.ap50, r.ap50_95
            );
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is plain data")
    }
}

/// All class curves as CSV with columns `class,recall,precision`.
pub fn pr_curve_csv(report: &EvalReport) -> String {
    let mut s = String::from("class,recall,precision\n");
    for c in &report.curves {
        for (r, p) in &c.points {
            let _ = writeln!(s, "{},{r:.6},{p:.6}", c.class);
        }
    }
    s
}

/// Self-contained SVG plot of one class's PR curve as a step line.
pub fn pr_curve_svg(curve: &ClassCurve, ap50: f64) -> String {
    const W: f64 = 480.0;
    const H: f64 = 360.0;
    const M: f64 = 48.0;
    let x = |r: f64| M + r * (W - 2.0 * M);
    let y = |p: f64| H - M - p * (H - 2.0 * M);
    let mut path = String::new();
    let mut last = (0.0, curve.points.first().map_or(0.0, |p| p.1));
    let _ = write!(path, "{:.2},{:.2}", x(last.0), y(last.1));
    for &(r, p) in &curve.points {
        let _ = write!(
            path,
            " {:.2},{:.2} {:.2},{:.2}",
            x(r),
            y(last.1),
            x(r),
            y(p)
        );
        last = (r, p);
    }
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    for k in 0..=10 {
        let v = k as f64 / 10.0;
        let _ = writeln!(
            s,
            r##"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#ddd"/><line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#ddd"/>"##,
            x(v),
            y(0.0),
            x(v),
            y(1.0),
            x(0.0),
            y(v),
            x(1.0),
            y(v)
        );
    }
    for k in 0..=5 {
        let v = k as f64 / 5.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{v:.1}</text><text x="{:.2}" y="{:.2}" text-anchor="end">{v:.1}</text>"#,
            x(v),
            H - M + 16.0,
            M - 6.0,
            y(v) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<rect x="{M}" y="{M}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        W - 2.0 * M,
        H - 2.0 * M
    );
    let _ = writeln!(
        s,
        r##"<polyline points="{path}" fill="none" stroke="#1f77b4" stroke-width="2"/>"##
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="14">P-R curve: {} (AP@0.5 {ap50:.3})</text>"#,
        W / 2.0,
        M - 16.0,
        xml_escape(&curve.class)
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">Recall</text>"#,
        W / 2.0,
        H - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">Precision</text>"#,
        H / 2.0,
        H / 2.0
    );
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}
