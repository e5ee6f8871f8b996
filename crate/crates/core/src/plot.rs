//! Static SVG loss curves (training loss and target test loss per run).

use crate::error::{Error, Result};
use crate::metrics::RunMetrics;

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 500.0;
const MARGIN: f64 = 60.0;
const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

fn fmt(v: f64) -> String {
    format!("{v:.2}")
}

/// Renders one training-loss and one target-test-loss polyline per run into
/// an `800×500` SVG with linear, min/max autoscaled axes.
pub fn loss_curves_svg(runs: &[(String, RunMetrics)]) -> Result<String> {
    if runs.is_empty() {
        return Err(Error::Parameter("no runs to plot".into()));
    }
    if let Some((name, _)) = runs.iter().find(|(_, m)| m.rows().is_empty()) {
        return Err(Error::Parameter(format!(
            "run {name:?} has no metrics rows"
        )));
    }
    let rows = runs.iter().flat_map(|(_, m)| m.rows());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for r in rows {
        x0 = x0.min(r.iter as f64);
        x1 = x1.max(r.iter as f64);
        for v in [r.train_loss, r.tgt_test_loss] {
            y0 = y0.min(v);
            y1 = y1.max(v);
        }
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let sy = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" width=\"{WIDTH}\" height=\"{HEIGHT}\">\n"
    );
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<g stroke=\"black\" stroke-width=\"1\"><line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\"/><line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{b}\"/></g>\n",
        m = MARGIN,
        b = HEIGHT - MARGIN,
        r = WIDTH - MARGIN
    ));
    svg.push_str(&format!(
        "<g font-family=\"sans-serif\" font-size=\"12\"><text x=\"{}\" y=\"{}\">{}</text><text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text><text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text><text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text><text x=\"{}\" y=\"{}\" text-anchor=\"middle\">iteration</text></g>\n",
        MARGIN, HEIGHT - MARGIN + 16.0, x0,
        WIDTH - MARGIN, HEIGHT - MARGIN + 16.0, x1,
        MARGIN - 6.0, HEIGHT - MARGIN, fmt(y0),
        MARGIN - 6.0, MARGIN + 4.0, fmt(y1),
        WIDTH / 2.0, HEIGHT - 20.0
    ));
    for (k, (name, m)) in runs.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        for (series, dash, label) in [
            (0, "", "train"),
            (1, " stroke-dasharray=\"6 4\"", "target test"),
        ] {
            let points: Vec<String> = m
                .rows()
                .iter()
                .map(|r| {
                    let y = if series == 0 {
                        r.train_loss
                    } else {
                        r.tgt_test_loss
                    };
                    format!("{},{}", fmt(sx(r.iter as f64)), fmt(sy(y)))
                })
                .collect();
            svg.push_str(&format!(
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"{dash} points=\"{}\"><title>{} {label}</title></polyline>\n",
                points.join(" "),
                escape(name)
            ));
            let ly = MARGIN + 16.0 * (2 * k + series) as f64;
            svg.push_str(&format!(
                "<g class=\"legend\"><line x1=\"{}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\"{dash}/><text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\">{} {label}</text></g>\n",
                WIDTH - MARGIN - 170.0,
                WIDTH - MARGIN - 140.0,
                WIDTH - MARGIN - 134.0,
                ly + 4.0,
                escape(name)
            ));
        }
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}
