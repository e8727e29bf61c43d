//! Dependency-free SVG chart builders for the evaluation report.
//!
//! Output is a pure function of the input data (fixed float formatting, no
//! timestamps or randomness), so regenerating a plot from the same numbers
//! yields identical bytes.

fn fmt(v: f64) -> String {
    format!("{v:.3}")
}

const PALETTE: [&str; 6] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];

/// Five-number summary plus mean and outliers, whiskers at 1.5 IQR.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxStats {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub whisker_lo: f64,
    pub whisker_hi: f64,
    pub mean: f64,
    pub outliers: Vec<f64>,
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

pub fn box_stats(values: &[f64]) -> Option<BoxStats> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q1 = quantile(&sorted, 0.25);
    let median = quantile(&sorted, 0.5);
    let q3 = quantile(&sorted, 0.75);
    let iqr = q3 - q1;
    let (lo_fence, hi_fence) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    let whisker_lo = sorted
        .iter()
        .cloned()
        .find(|&v| v >= lo_fence)
        .unwrap_or(q1);
    let whisker_hi = sorted
        .iter()
        .rev()
        .cloned()
        .find(|&v| v <= hi_fence)
        .unwrap_or(q3);
    let outliers = sorted
        .iter()
        .cloned()
        .filter(|&v| v < lo_fence || v > hi_fence)
        .collect();
    let mean = sorted.iter().sum::<f64>() / sorted.len() as f64;
    Some(BoxStats { q1, median, q3, whisker_lo, whisker_hi, mean, outliers })
}

struct Svg {
    body: String,
    width: f64,
    height: f64,
}

impl Svg {
    fn new(width: f64, height: f64) -> Self {
        Svg { body: String::new(), width, height }
    }

    fn text(&mut self, x: f64, y: f64, size: f64, anchor: &str, content: &str) {
        self.body.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"{}\" text-anchor=\"{anchor}\" \
             font-family=\"sans-serif\">{}</text>\n",
            fmt(x),
            fmt(y),
            fmt(size),
            escape(content)
        ));
    }

    fn line(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, stroke: &str, width: f64) {
        self.body.push_str(&format!(
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"{stroke}\" stroke-width=\"{}\"/>\n",
            fmt(x1), fmt(y1), fmt(x2), fmt(y2), fmt(width)
        ));
    }

    fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, fill: &str, stroke: &str) {
        self.body.push_str(&format!(
            "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"{fill}\" stroke=\"{stroke}\"/>\n",
            fmt(x), fmt(y), fmt(w), fmt(h)
        ));
    }

    fn circle(&mut self, cx: f64, cy: f64, r: f64, fill: &str) {
        self.body.push_str(&format!(
            "<circle cx=\"{}\" cy=\"{}\" r=\"{}\" fill=\"{fill}\"/>\n",
            fmt(cx),
            fmt(cy),
            fmt(r)
        ));
    }

    fn polygon(&mut self, points: &[(f64, f64)], fill: &str) {
        let pts: Vec<String> = points.iter().map(|(x, y)| format!("{},{}", fmt(*x), fmt(*y))).collect();
        self.body.push_str(&format!(
            "<polygon points=\"{}\" fill=\"{fill}\"/>\n",
            pts.join(" ")
        ));
    }

    fn path(&mut self, d: &str, stroke: &str, fill: &str) {
        self.body.push_str(&format!(
            "<path d=\"{d}\" stroke=\"{stroke}\" fill=\"{fill}\" stroke-width=\"1.5\"/>\n"
        ));
    }

    fn finish(self) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" \
             viewBox=\"0 0 {} {}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{}</svg>\n",
            fmt(self.width),
            fmt(self.height),
            fmt(self.width),
            fmt(self.height),
            self.body
        )
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Multi-panel boxplot: one panel per metric, one box per group.
pub fn boxplot_panels_svg(title: &str, panels: &[(String, Vec<(String, Vec<f64>)>)]) -> String {
    let panel_w = 320.0;
    let panel_h = 260.0;
    let margin = 44.0;
    let width = margin + panels.len() as f64 * (panel_w + 24.0);
    let height = panel_h + 110.0;
    let mut svg = Svg::new(width, height);
    svg.text(width / 2.0, 22.0, 15.0, "middle", title);

    for (pi, (metric, groups)) in panels.iter().enumerate() {
        let x0 = margin + pi as f64 * (panel_w + 24.0);
        let y0 = 46.0;
        svg.rect(x0, y0, panel_w, panel_h, "none", "#444444");
        svg.text(x0 + panel_w / 2.0, y0 + panel_h + 48.0, 12.0, "middle", metric);

        // Fixed 0..1 score scale with a small headroom for sentinels.
        let (lo, hi) = value_bounds(groups.iter().flat_map(|(_, v)| v.iter().cloned()));
        let scale = |v: f64| y0 + panel_h - (v - lo) / (hi - lo) * panel_h;
        for tick in 0..=4 {
            let v = lo + (hi - lo) * tick as f64 / 4.0;
            let y = scale(v);
            svg.line(x0 - 4.0, y, x0, y, "#444444", 1.0);
            svg.text(x0 - 6.0, y + 3.0, 9.0, "end", &fmt(v));
        }

        let slot = panel_w / groups.len().max(1) as f64;
        for (gi, (label, values)) in groups.iter().enumerate() {
            let cx = x0 + slot * (gi as f64 + 0.5);
            svg.text(cx, y0 + panel_h + 14.0, 9.0, "middle", label);
            let Some(stats) = box_stats(values) else { continue };
            let bw = (slot * 0.5).min(26.0);
            svg.line(cx, scale(stats.whisker_lo), cx, scale(stats.q1), "#333333", 1.0);
            svg.line(cx, scale(stats.q3), cx, scale(stats.whisker_hi), "#333333", 1.0);
            svg.line(cx - bw / 2.0, scale(stats.whisker_lo), cx + bw / 2.0, scale(stats.whisker_lo), "#333333", 1.0);
            svg.line(cx - bw / 2.0, scale(stats.whisker_hi), cx + bw / 2.0, scale(stats.whisker_hi), "#333333", 1.0);
            let top = scale(stats.q3);
            let bot = scale(stats.q1);
            svg.rect(cx - bw / 2.0, top, bw, (bot - top).max(0.5), "#aec7e8", "#333333");
            // Orange median, green triangle mean, red outlier dots.
            svg.line(cx - bw / 2.0, scale(stats.median), cx + bw / 2.0, scale(stats.median), "#ff7f0e", 2.0);
            let my = scale(stats.mean);
            svg.polygon(
                &[(cx, my - 4.0), (cx - 4.0, my + 3.0), (cx + 4.0, my + 3.0)],
                "#2ca02c",
            );
            for &o in &stats.outliers {
                svg.circle(cx, scale(o), 2.0, "#d62728");
            }
        }
    }
    svg.finish()
}

fn value_bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = 0.0f64;
    let mut hi = 1.0f64;
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi - lo < 1e-9 {
        hi = lo + 1.0;
    }
    (lo, hi)
}

/// Pie chart with slice angles proportional to the values.
pub fn pie_svg(title: &str, slices: &[(String, f64)]) -> String {
    let size = 460.0;
    let mut svg = Svg::new(size + 240.0, size);
    svg.text((size + 240.0) / 2.0, 24.0, 15.0, "middle", title);
    let (cx, cy, r) = (size / 2.0, size / 2.0 + 14.0, size / 2.0 - 50.0);
    let total: f64 = slices.iter().map(|(_, v)| v.max(0.0)).sum();
    if total <= 0.0 {
        svg.text(cx, cy, 12.0, "middle", "no data");
        return svg.finish();
    }
    let mut angle = -std::f64::consts::FRAC_PI_2;
    for (i, (label, value)) in slices.iter().enumerate() {
        let frac = value.max(0.0) / total;
        let sweep = frac * std::f64::consts::TAU;
        let (x1, y1) = (cx + r * angle.cos(), cy + r * angle.sin());
        let end = angle + sweep;
        let (x2, y2) = (cx + r * end.cos(), cy + r * end.sin());
        let large = if sweep > std::f64::consts::PI { 1 } else { 0 };
        let color = PALETTE[i % PALETTE.len()];
        svg.path(
            &format!(
                "M {} {} L {} {} A {} {} 0 {large} 1 {} {} Z",
                fmt(cx), fmt(cy), fmt(x1), fmt(y1), fmt(r), fmt(r), fmt(x2), fmt(y2)
            ),
            "#ffffff",
            color,
        );
        let mid = angle + sweep / 2.0;
        let (lx, ly) = (cx + (r + 18.0) * mid.cos(), cy + (r + 18.0) * mid.sin());
        svg.text(lx, ly, 9.0, "middle", &format!("{value:.1}"));
        // Legend.
        let ly = 56.0 + i as f64 * 18.0;
        svg.rect(size + 10.0, ly - 9.0, 12.0, 12.0, color, "none");
        svg.text(size + 28.0, ly + 1.0, 10.0, "start", label);
        angle = end;
    }
    svg.finish()
}

/// Line chart: one polyline per series over shared x labels. `None` entries
/// leave gaps.
pub fn multi_line_svg(
    title: &str,
    x_labels: &[String],
    series: &[(String, Vec<Option<f64>>)],
    y_label: &str,
) -> String {
    let plot_w = 520.0;
    let plot_h = 280.0;
    let (mx, my) = (64.0, 48.0);
    let width = mx + plot_w + 180.0;
    let height = my + plot_h + 70.0;
    let mut svg = Svg::new(width, height);
    svg.text(width / 2.0, 24.0, 15.0, "middle", title);
    svg.rect(mx, my, plot_w, plot_h, "none", "#444444");
    svg.text(14.0, my + plot_h / 2.0, 11.0, "middle", y_label);

    let (lo, hi) = value_bounds(series.iter().flat_map(|(_, v)| v.iter().flatten().cloned()));
    let sx = |i: usize| mx + plot_w * (i as f64 + 0.5) / x_labels.len() as f64;
    let sy = |v: f64| my + plot_h - (v - lo) / (hi - lo) * plot_h;
    for tick in 0..=4 {
        let v = lo + (hi - lo) * tick as f64 / 4.0;
        svg.line(mx - 4.0, sy(v), mx, sy(v), "#444444", 1.0);
        svg.text(mx - 6.0, sy(v) + 3.0, 9.0, "end", &fmt(v));
    }
    for (i, label) in x_labels.iter().enumerate() {
        svg.text(sx(i), my + plot_h + 16.0, 9.0, "middle", label);
    }

    for (si, (name, values)) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let mut d = String::new();
        let mut pen_down = false;
        for (i, v) in values.iter().enumerate() {
            match v {
                Some(v) => {
                    let cmd = if pen_down { 'L' } else { 'M' };
                    d.push_str(&format!("{cmd} {} {} ", fmt(sx(i)), fmt(sy(*v))));
                    pen_down = true;
                    svg.circle(sx(i), sy(*v), 2.5, color);
                }
                None => pen_down = false,
            }
        }
        if !d.is_empty() {
            svg.path(d.trim_end(), color, "none");
        }
        let ly = my + 12.0 + si as f64 * 18.0;
        svg.line(mx + plot_w + 12.0, ly, mx + plot_w + 34.0, ly, color, 2.0);
        svg.text(mx + plot_w + 40.0, ly + 3.0, 10.0, "start", name);
    }
    svg.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_stats_five_number_summary() {
        let values = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 100.0];
        let s = box_stats(&values).unwrap();
        assert_eq!(s.median, 5.0);
        assert_eq!(s.q1, 3.0);
        assert_eq!(s.q3, 7.0);
        // 100 sits beyond q3 + 1.5*iqr = 13.
        assert_eq!(s.outliers, vec![100.0]);
        assert_eq!(s.whisker_hi, 8.0);
        assert_eq!(s.whisker_lo, 1.0);
        assert!(box_stats(&[]).is_none());
    }

    #[test]
    fn svg_builders_are_deterministic() {
        let panels = vec![(
            "dsc".to_string(),
            vec![("c1".to_string(), vec![0.5, 0.7, 0.9]), ("c2".to_string(), vec![0.2])],
        )];
        assert_eq!(
            boxplot_panels_svg("t", &panels),
            boxplot_panels_svg("t", &panels)
        );
        let slices = vec![("a".to_string(), 1.0), ("b".to_string(), 2.0)];
        assert_eq!(pie_svg("p", &slices), pie_svg("p", &slices));
        let series = vec![("run".to_string(), vec![Some(0.5), None, Some(0.8)])];
        let labels: Vec<String> = (1..=3).map(|i| i.to_string()).collect();
        let a = multi_line_svg("l", &labels, &series, "y");
        assert_eq!(a, multi_line_svg("l", &labels, &series, "y"));
        assert!(a.starts_with("<svg"));
        assert!(a.ends_with("</svg>\n"));
    }
}
