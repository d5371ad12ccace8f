//! Minimal SVG box plots for per-area metric distributions, written
//! directly without a plotting dependency.

use std::fmt::Write as _;

/// One labeled box in the plot.
#[derive(Debug, Clone)]
pub struct BoxSpec {
    pub label: String,
    pub values: Vec<f64>,
}

fn quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = p * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

struct FiveNum {
    low: f64,
    q1: f64,
    med: f64,
    q3: f64,
    high: f64,
    outliers: Vec<f64>,
}

fn five_number(values: &[f64]) -> FiveNum {
    let mut v: Vec<f64> = values.iter().cloned().filter(|x| x.is_finite()).collect();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q1 = quantile(&v, 0.25);
    let med = quantile(&v, 0.5);
    let q3 = quantile(&v, 0.75);
    let iqr = q3 - q1;
    let lo_fence = q1 - 1.5 * iqr;
    let hi_fence = q3 + 1.5 * iqr;
    let low = v.iter().cloned().find(|&x| x >= lo_fence).unwrap_or(q1);
    let high = v
        .iter()
        .rev()
        .cloned()
        .find(|&x| x <= hi_fence)
        .unwrap_or(q3);
    let outliers = v
        .iter()
        .cloned()
        .filter(|&x| x < lo_fence || x > hi_fence)
        .collect();
    FiveNum {
        low,
        q1,
        med,
        q3,
        high,
        outliers,
    }
}

/// Render side-by-side box plots (1.5 IQR whiskers, outliers as circles).
pub fn boxplot_svg(title: &str, y_label: &str, boxes: &[BoxSpec]) -> String {
    let width = 160 * boxes.len().max(1) + 120;
    let height = 420;
    let plot_left = 80.0;
    let plot_top = 50.0;
    let plot_bottom = height as f64 - 60.0;

    let stats: Vec<FiveNum> = boxes.iter().map(|b| five_number(&b.values)).collect();
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for (b, s) in boxes.iter().zip(&stats) {
        for &v in b.values.iter().filter(|v| v.is_finite()) {
            min = min.min(v);
            max = max.max(v);
        }
        min = min.min(s.low);
        max = max.max(s.high);
    }
    if !min.is_finite() || !max.is_finite() {
        min = 0.0;
        max = 1.0;
    }
    if (max - min).abs() < 1e-12 {
        max = min + 1.0;
    }
    let pad = 0.05 * (max - min);
    let (min, max) = (min - pad, max + pad);
    let y_of = |v: f64| plot_bottom - (v - min) / (max - min) * (plot_bottom - plot_top);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\">"
    );
    let _ = writeln!(
        svg,
        "<rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>"
    );
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"28\" text-anchor=\"middle\" font-size=\"16\" \
         font-family=\"sans-serif\">{}</text>",
        width / 2,
        xml_escape(title)
    );
    let _ = writeln!(
        svg,
        "<text x=\"18\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"12\" \
         font-family=\"sans-serif\" transform=\"rotate(-90 18 {:.1})\">{}</text>",
        (plot_top + plot_bottom) / 2.0,
        (plot_top + plot_bottom) / 2.0,
        xml_escape(y_label)
    );

    // Horizontal gridlines at five ticks.
    for t in 0..=4 {
        let v = min + (max - min) * t as f64 / 4.0;
        let y = y_of(v);
        let _ = writeln!(
            svg,
            "<line x1=\"{plot_left}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" \
             stroke=\"#ddd\"/>",
            width as f64 - 30.0
        );
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" font-size=\"11\" \
             font-family=\"sans-serif\">{v:.2}</text>",
            plot_left - 6.0,
            y + 4.0
        );
    }

    for (idx, (b, s)) in boxes.iter().zip(&stats).enumerate() {
        let cx = plot_left + 80.0 + 160.0 * idx as f64;
        let half = 45.0;
        let _ = writeln!(
            svg,
            "<line x1=\"{cx}\" y1=\"{:.1}\" x2=\"{cx}\" y2=\"{:.1}\" stroke=\"black\"/>",
            y_of(s.high),
            y_of(s.q3)
        );
        let _ = writeln!(
            svg,
            "<line x1=\"{cx}\" y1=\"{:.1}\" x2=\"{cx}\" y2=\"{:.1}\" stroke=\"black\"/>",
            y_of(s.q1),
            y_of(s.low)
        );
        for (v, w) in [(s.high, 0.5), (s.low, 0.5)] {
            let _ = writeln!(
                svg,
                "<line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>",
                cx - half * w,
                y_of(v),
                cx + half * w,
                y_of(v)
            );
        }
        let _ = writeln!(
            svg,
            "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" \
             fill=\"#9ecae9\" stroke=\"black\"/>",
            cx - half,
            y_of(s.q3),
            2.0 * half,
            (y_of(s.q1) - y_of(s.q3)).max(0.5)
        );
        let _ = writeln!(
            svg,
            "<line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" \
             stroke=\"black\" stroke-width=\"2\"/>",
            cx - half,
            y_of(s.med),
            cx + half,
            y_of(s.med)
        );
        for &o in &s.outliers {
            let _ = writeln!(
                svg,
                "<circle cx=\"{cx}\" cy=\"{:.1}\" r=\"2.5\" fill=\"none\" stroke=\"black\"/>",
                y_of(o)
            );
        }
        let _ = writeln!(
            svg,
            "<text x=\"{cx}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"12\" \
             font-family=\"sans-serif\">{}</text>",
            plot_bottom + 22.0,
            xml_escape(&b.label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
