//! Minimal standalone SVG emitters for the evaluation plots.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 420.0;
const MARGIN: f64 = 60.0;

fn header(title: &str, config_hash: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <!-- config_hash={config_hash} -->\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" font-size=\"16\" text-anchor=\"middle\" font-family=\"sans-serif\">{}</text>\n",
        W / 2.0,
        title
    )
}

fn axes(x_label: &str, y_label: &str) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <text x=\"{cx}\" y=\"{by}\" font-size=\"12\" text-anchor=\"middle\" font-family=\"sans-serif\">{xl}</text>\n\
         <text x=\"16\" y=\"{cy}\" font-size=\"12\" text-anchor=\"middle\" font-family=\"sans-serif\" transform=\"rotate(-90 16 {cy})\">{yl}</text>\n",
        m = MARGIN,
        t = MARGIN,
        b = H - MARGIN,
        r = W - 20.0,
        cx = W / 2.0,
        by = H - 16.0,
        cy = H / 2.0,
        xl = x_label,
        yl = y_label,
    );
    s
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Success rate against the spawn-noise radius, one polyline per task.
pub fn success_vs_rho(series: &[(String, Vec<(f64, f64)>)], config_hash: &str) -> String {
    let x_max = series
        .iter()
        .flat_map(|(_, pts)| pts.iter().map(|p| p.0))
        .fold(0.05, f64::max);
    let span_x = (W - MARGIN - 20.0) - MARGIN;
    let span_y = (H - MARGIN) - MARGIN;
    let sx = |x: f64| MARGIN + x / x_max * span_x;
    let sy = |y: f64| (H - MARGIN) - y.clamp(0.0, 1.0) * span_y;

    let mut svg = header("Success rate vs spawn-noise radius", config_hash);
    svg.push_str(&axes("spawn-noise radius rho (m)", "success rate"));
    for frac in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let _ = write!(
            svg,
            "<text x=\"{}\" y=\"{}\" font-size=\"10\" text-anchor=\"end\" font-family=\"sans-serif\">{:.2}</text>\n",
            MARGIN - 6.0,
            sy(frac) + 4.0,
            frac
        );
    }
    for (i, (name, points)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = points
            .iter()
            .map(|(x, y)| format!("{:.2},{:.2}", sx(*x), sy(*y)))
            .collect();
        let _ = write!(
            svg,
            "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"2\" points=\"{}\"/>\n",
            color,
            path.join(" ")
        );
        for (x, y) in points {
            let _ = write!(
                svg,
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{}\"/>\n",
                sx(*x),
                sy(*y),
                color
            );
        }
        let _ = write!(
            svg,
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{}\" font-family=\"sans-serif\">{}</text>\n",
            W - 170.0,
            40.0 + 16.0 * i as f64,
            color,
            name
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Histogram of per-episode reasoning-invocation counts.
pub fn reasoning_histogram(counts: &[u32], config_hash: &str) -> String {
    let mut svg = header("Reasoning invocations per episode", config_hash);
    svg.push_str(&axes("reasoning invocations", "episodes"));
    if counts.is_empty() {
        svg.push_str("</svg>\n");
        return svg;
    }
    let max_count = *counts.iter().max().unwrap() as usize;
    let mut bins = vec![0usize; max_count + 1];
    for &c in counts {
        bins[c as usize] += 1;
    }
    let tallest = bins.iter().copied().max().unwrap().max(1) as f64;
    let span_x = (W - MARGIN - 20.0) - MARGIN;
    let span_y = (H - MARGIN) - MARGIN;
    let bar_w = (span_x / bins.len() as f64).min(48.0);
    for (i, &n) in bins.iter().enumerate() {
        let x = MARGIN + i as f64 * span_x / bins.len() as f64;
        let h = n as f64 / tallest * span_y;
        let _ = write!(
            svg,
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"#1f77b4\"/>\n\
             <text x=\"{:.2}\" y=\"{}\" font-size=\"10\" text-anchor=\"middle\" font-family=\"sans-serif\">{}</text>\n",
            x + 1.0,
            (H - MARGIN) - h,
            bar_w - 2.0,
            h,
            x + bar_w / 2.0,
            H - MARGIN + 14.0,
            i
        );
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plots_are_wellformed_svg() {
        let line = success_vs_rho(
            &[("place_red".into(), vec![(0.0, 1.0), (0.2, 0.6), (0.4, 0.2)])],
            "abc",
        );
        assert!(line.starts_with("<svg"));
        assert!(line.ends_with("</svg>\n"));
        assert!(line.contains("config_hash=abc"));
        assert!(line.contains("polyline"));

        let hist = reasoning_histogram(&[3, 3, 4, 5, 3], "abc");
        assert!(hist.contains("<rect"));
        assert!(hist.ends_with("</svg>\n"));
    }
}
