//! Minimal static SVG charts for diagnostics output.

use std::fmt::Write as _;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 56.0;
const PALETTE: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Frame {
    y_min: f64,
    y_max: f64,
}

impl Frame {
    fn new(values: impl Iterator<Item = f64>) -> Self {
        let (mut lo, mut hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        if !lo.is_finite() {
            (lo, hi) = (0.0, 1.0);
        }
        lo = lo.min(0.0);
        hi = hi.max(1.0);
        Self { y_min: lo, y_max: hi }
    }

    fn y(&self, v: f64) -> f64 {
        HEIGHT - MARGIN - (v - self.y_min) / (self.y_max - self.y_min) * (HEIGHT - 2.0 * MARGIN)
    }

    fn open(&self, title: &str, y_label: &str) -> String {
        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" font-family=\"sans-serif\" font-size=\"12\">\n\
             <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
             <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n\
             <text x=\"16\" y=\"{}\" transform=\"rotate(-90 16 {})\" text-anchor=\"middle\">{}</text>\n",
            WIDTH / 2.0,
            escape(title),
            HEIGHT / 2.0,
            HEIGHT / 2.0,
            escape(y_label)
        );
        for i in 0..=4 {
            let v = self.y_min + (self.y_max - self.y_min) * i as f64 / 4.0;
            let y = self.y(v);
            let _ = writeln!(
                s,
                "<line x1=\"{MARGIN}\" x2=\"{}\" y1=\"{y:.1}\" y2=\"{y:.1}\" stroke=\"#ddd\"/>\
                 <text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{v:.2}</text>",
                WIDTH - MARGIN,
                MARGIN - 6.0,
                y + 4.0
            );
        }
        let _ = writeln!(
            s,
            "<line x1=\"{MARGIN}\" x2=\"{MARGIN}\" y1=\"{MARGIN}\" y2=\"{}\" stroke=\"black\"/>",
            HEIGHT - MARGIN
        );
        s
    }

    fn legend(s: &mut String, names: &[&str]) {
        for (i, name) in names.iter().enumerate() {
            let x = WIDTH - MARGIN - 150.0;
            let y = MARGIN + 16.0 * i as f64;
            let _ = writeln!(
                s,
                "<rect x=\"{x}\" y=\"{:.1}\" width=\"10\" height=\"10\" fill=\"{}\"/>\
                 <text x=\"{}\" y=\"{:.1}\">{}</text>",
                y - 9.0,
                PALETTE[i % PALETTE.len()],
                x + 14.0,
                y,
                escape(name)
            );
        }
    }
}

/// Line chart with categorical x positions.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, xs: &[String], series: &[(&str, Vec<f64>)]) -> String {
    let frame = Frame::new(series.iter().flat_map(|(_, v)| v.iter().copied()));
    let mut s = frame.open(title, y_label);
    let step = (WIDTH - 2.0 * MARGIN) / (xs.len().max(2) - 1) as f64;
    let x_at = |i: usize| MARGIN + step * i as f64;
    for (i, label) in xs.iter().enumerate() {
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
            x_at(i),
            HEIGHT - MARGIN + 18.0,
            escape(label)
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
        WIDTH / 2.0,
        HEIGHT - 12.0,
        escape(x_label)
    );
    for (k, (_, values)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let points: Vec<String> = values
            .iter()
            .enumerate()
            .map(|(i, v)| format!("{:.1},{:.1}", x_at(i), frame.y(*v)))
            .collect();
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>",
            points.join(" ")
        );
        for p in &points {
            let (x, y) = p.split_once(',').unwrap_or(("0", "0"));
            let _ = writeln!(s, "<circle cx=\"{x}\" cy=\"{y}\" r=\"3\" fill=\"{color}\"/>");
        }
    }
    Frame::legend(&mut s, &series.iter().map(|(n, _)| *n).collect::<Vec<_>>());
    s.push_str("</svg>\n");
    s
}

/// Grouped bar chart: one group per entry, one bar per series within it.
pub fn bar_chart(title: &str, y_label: &str, series: &[&str], groups: &[(String, Vec<f64>)]) -> String {
    let frame = Frame::new(groups.iter().flat_map(|(_, v)| v.iter().copied()));
    let mut s = frame.open(title, y_label);
    let group_w = (WIDTH - 2.0 * MARGIN) / groups.len().max(1) as f64;
    let bar_w = group_w * 0.7 / series.len().max(1) as f64;
    let zero = frame.y(0.0);
    for (g, (label, values)) in groups.iter().enumerate() {
        let x0 = MARGIN + group_w * g as f64 + group_w * 0.15;
        for (k, v) in values.iter().enumerate() {
            let y = frame.y(*v);
            let _ = writeln!(
                s,
                "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{bar_w:.1}\" height=\"{:.1}\" fill=\"{}\"/>\
                 <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"10\">{v:.3}</text>",
                x0 + bar_w * k as f64,
                y.min(zero),
                (zero - y).abs(),
                PALETTE[k % PALETTE.len()],
                x0 + bar_w * (k as f64 + 0.5),
                y.min(zero) - 4.0
            );
        }
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
            x0 + group_w * 0.35,
            HEIGHT - MARGIN + 18.0,
            escape(label)
        );
    }
    Frame::legend(&mut s, series);
    s.push_str("</svg>\n");
    s
}
