//! A minimal SVG step plot for survival curves.

use std::fmt::Write;

use factsurv_core::StepFunction;

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 50.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// Draws each curve as a right-continuous step line on `[0, t_max]`.
pub fn survival_plot(curves: &[(String, StepFunction)], x_label: &str) -> String {
    let t_max = curves
        .iter()
        .filter_map(|(_, c)| c.knots().last().copied())
        .fold(0.0_f64, f64::max)
        .max(1e-9);
    let x = |t: f64| MARGIN + (W - 2.0 * MARGIN) * t / t_max;
    let y = |s: f64| H - MARGIN - (H - 2.0 * MARGIN) * s;

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(
        out,
        r##"<rect x="{MARGIN}" y="{MARGIN}" width="{}" height="{}" fill="none" stroke="#888"/>"##,
        W - 2.0 * MARGIN,
        H - 2.0 * MARGIN
    );
    for k in 0..=4 {
        let s = k as f64 / 4.0;
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{s:.2}</text>"#,
            MARGIN - 6.0,
            y(s) + 4.0
        );
        let t = t_max * s;
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{t:.0}</text>"#,
            x(t),
            H - MARGIN + 16.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{x_label}</text>"#,
        W / 2.0,
        H - 10.0
    );
    for (i, (label, curve)) in curves.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let mut pts = vec![(0.0, curve.left_value())];
        let mut prev = curve.left_value();
        for (&t, &s) in curve.knots().iter().zip(curve.values()) {
            pts.push((t, prev));
            pts.push((t, s));
            prev = s;
        }
        let path: Vec<String> = pts.iter().map(|&(t, s)| format!("{:.2},{:.2}", x(t), y(s))).collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            path.join(" ")
        );
        let ly = MARGIN + 16.0 * (i as f64 + 1.0);
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{ly}" fill="{color}" text-anchor="end">{}</text>"#,
            W - MARGIN - 8.0,
            escape(label)
        );
    }
    out.push_str("</svg>\n");
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plot_has_one_line_per_curve_and_escapes_labels() {
        let c = StepFunction::new(vec![1.0, 2.0], vec![0.5, 0.25], 1.0).unwrap();
        let svg = survival_plot(&[("<a".into(), c.clone()), ("b".into(), c)], "minutes");
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("&lt;a"));
        assert!(svg.ends_with("</svg>\n"));
    }
}
