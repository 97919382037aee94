//! Minimal deterministic SVG rendering for the report plots. Fixed
//! layout, fixed-precision coordinates, no timestamps: identical inputs
//! produce identical bytes.

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 48.0;

const SERIES_COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

fn fmt(v: f64) -> String {
    format!("{v:.2}")
}

fn header(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n\
         <text x=\"{tx}\" y=\"24\" font-family=\"monospace\" font-size=\"14\" text-anchor=\"middle\">{title}</text>\n",
        w = WIDTH,
        h = HEIGHT,
        tx = WIDTH / 2.0,
    )
}

/// Multi-series line chart over a shared x axis.
pub fn line_chart(title: &str, xs: &[f64], series: &[(&str, &[f64])]) -> String {
    let mut out = header(title);
    if xs.is_empty() {
        out.push_str("</svg>\n");
        return out;
    }
    let xmin = xs.first().copied().unwrap_or(0.0);
    let xmax = xs.last().copied().unwrap_or(1.0).max(xmin + 1e-9);
    let ymin = 0.0f64;
    let ymax = series
        .iter()
        .flat_map(|(_, ys)| ys.iter().copied())
        .fold(1e-9f64, f64::max);
    let px = |x: f64| MARGIN + (x - xmin) / (xmax - xmin) * (WIDTH - 2.0 * MARGIN);
    let py = |y: f64| HEIGHT - MARGIN - (y - ymin) / (ymax - ymin) * (HEIGHT - 2.0 * MARGIN);

    // axes
    out.push_str(&format!(
        "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <text x=\"{m}\" y=\"{lb}\" font-family=\"monospace\" font-size=\"10\">{x0}</text>\n\
         <text x=\"{r}\" y=\"{lb}\" font-family=\"monospace\" font-size=\"10\" text-anchor=\"end\">{x1}</text>\n\
         <text x=\"4\" y=\"{t}\" font-family=\"monospace\" font-size=\"10\">{y1}</text>\n\
         <text x=\"4\" y=\"{b}\" font-family=\"monospace\" font-size=\"10\">{y0}</text>\n",
        m = fmt(MARGIN),
        r = fmt(WIDTH - MARGIN),
        t = fmt(MARGIN),
        b = fmt(HEIGHT - MARGIN),
        lb = fmt(HEIGHT - MARGIN + 16.0),
        x0 = fmt(xmin),
        x1 = fmt(xmax),
        y0 = fmt(ymin),
        y1 = fmt(ymax),
    ));

    for (i, (name, ys)) in series.iter().enumerate() {
        let color = SERIES_COLORS[i % SERIES_COLORS.len()];
        let pts: Vec<String> =
            xs.iter().zip(*ys).map(|(&x, &y)| format!("{},{}", fmt(px(x)), fmt(py(y)))).collect();
        out.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
            pts.join(" ")
        ));
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"11\" fill=\"{color}\">{name}</text>\n",
            fmt(WIDTH - MARGIN - 140.0),
            fmt(MARGIN + 16.0 * (i as f64 + 1.0)),
        ));
    }
    out.push_str("</svg>\n");
    out
}

/// Row-labelled heatmap; one row per label, cells shaded by value
/// relative to the row maximum of the whole matrix.
pub fn heatmap(title: &str, row_labels: &[String], rows: &[Vec<f64>]) -> String {
    let mut out = header(title);
    if rows.is_empty() || rows[0].is_empty() {
        out.push_str("</svg>\n");
        return out;
    }
    let cols = rows[0].len();
    let max = rows.iter().flat_map(|r| r.iter().copied()).fold(1e-12f64, f64::max);
    let cell_w = (WIDTH - 2.0 * MARGIN - 80.0) / cols as f64;
    let cell_h = ((HEIGHT - 2.0 * MARGIN) / rows.len() as f64).min(40.0);
    for (r, row) in rows.iter().enumerate() {
        let y = MARGIN + r as f64 * cell_h;
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"10\" text-anchor=\"end\">{}</text>\n",
            fmt(MARGIN + 72.0),
            fmt(y + cell_h / 2.0 + 3.0),
            row_labels[r]
        ));
        for (c, &v) in row.iter().enumerate() {
            let x = MARGIN + 80.0 + c as f64 * cell_w;
            let shade = (255.0 - (v / max) * 200.0).round() as u8;
            out.push_str(&format!(
                "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"rgb({shade},{shade},255)\" stroke=\"#ccc\"/>\n",
                fmt(x),
                fmt(y),
                fmt(cell_w),
                fmt(cell_h),
            ));
        }
    }
    // column indices under the grid
    for c in 0..cols {
        let x = MARGIN + 80.0 + c as f64 * cell_w + cell_w / 2.0;
        let y = MARGIN + rows.len() as f64 * cell_h + 14.0;
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"10\" text-anchor=\"middle\">{c}</text>\n",
            fmt(x),
            fmt(y),
        ));
    }
    out.push_str("</svg>\n");
    out
}

/// Horizontal bar chart.
pub fn bar_chart(title: &str, labels: &[String], values: &[f64]) -> String {
    let mut out = header(title);
    if values.is_empty() {
        out.push_str("</svg>\n");
        return out;
    }
    let max = values.iter().copied().fold(1e-12f64, f64::max);
    let bar_h = ((HEIGHT - 2.0 * MARGIN) / values.len() as f64).min(28.0);
    for (i, (&v, label)) in values.iter().zip(labels).enumerate() {
        let y = MARGIN + i as f64 * bar_h;
        let w = (v / max) * (WIDTH - 2.0 * MARGIN - 160.0);
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"10\" text-anchor=\"end\">{label}</text>\n",
            fmt(MARGIN + 110.0),
            fmt(y + bar_h / 2.0 + 3.0),
        ));
        out.push_str(&format!(
            "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"#1f77b4\"/>\n",
            fmt(MARGIN + 118.0),
            fmt(y + 3.0),
            fmt(w.max(0.5)),
            fmt(bar_h - 6.0),
        ));
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"10\">{}</text>\n",
            fmt(MARGIN + 122.0 + w),
            fmt(y + bar_h / 2.0 + 3.0),
            format!("{v:.4}"),
        ));
    }
    out.push_str("</svg>\n");
    out
}
