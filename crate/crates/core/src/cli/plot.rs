//! Self-contained SVG line plots and latent strips.

use std::fmt::Write;

use crate::tensor::Latent;

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
];

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// Horizontal reference line.
pub struct Reference {
    pub name: String,
    pub y: f64,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    });
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

pub fn line_plot(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
    refs: &[Reference],
) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (64.0, 160.0, 36.0, 48.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let (x0, x1) = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let (y0, y1) = bounds(
        series
            .iter()
            .flat_map(|s| s.points.iter().map(|p| p.1))
            .chain(refs.iter().map(|r| r.y)),
    );
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        left + pw / 2.0,
        escape(title)
    );
    let _ = writeln!(
        svg,
        r##"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>"##
    );
    for i in 0..=4 {
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="end">{:.3}</text>"#,
            left - 6.0,
            sy(fy) + 4.0,
            fy
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="middle">{:.1}</text>"#,
            sx(fx),
            top + ph + 16.0,
            fx
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        left + pw / 2.0,
        h - 10.0,
        escape(x_label)
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0,
        escape(y_label)
    );
    let mut legend_y = top + 8.0;
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            pts.join(" ")
        );
        for &(x, y) in &s.points {
            let _ = writeln!(
                svg,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                sx(x),
                sy(y)
            );
        }
        legend(&mut svg, w - right + 12.0, legend_y, color, "", &s.name);
        legend_y += 18.0;
    }
    for (i, r) in refs.iter().enumerate() {
        let color = PALETTE[(series.len() + i) % PALETTE.len()];
        let _ = writeln!(
            svg,
            r#"<line x1="{left}" x2="{}" y1="{:.2}" y2="{:.2}" stroke="{color}" stroke-dasharray="6 4"/>"#,
            left + pw,
            sy(r.y),
            sy(r.y)
        );
        legend(
            &mut svg,
            w - right + 12.0,
            legend_y,
            color,
            r#" stroke-dasharray="6 4""#,
            &r.name,
        );
        legend_y += 18.0;
    }
    svg.push_str("</svg>\n");
    svg
}

fn legend(svg: &mut String, x: f64, y: f64, color: &str, dash: &str, name: &str) {
    let _ = writeln!(
        svg,
        r#"<line x1="{x}" x2="{}" y1="{y}" y2="{y}" stroke="{color}" stroke-width="2"{dash}/>"#,
        x + 20.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}">{}</text>"#,
        x + 26.0,
        y + 4.0,
        escape(name)
    );
}

fn channel_byte(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 255.0).round() as u8
}

/// One row of RGB latents per labelled run, drawn pixel by pixel.
pub fn latent_strip(rows: &[(String, Vec<Latent<f32>>)], cell: usize) -> String {
    let label_w = 120;
    let gap = 4;
    let (gh, gw) = rows
        .iter()
        .flat_map(|(_, l)| l.first())
        .map(|l| (l.shape().h, l.shape().w))
        .next()
        .unwrap_or((1, 1));
    let max_len = rows.iter().map(|(_, l)| l.len()).max().unwrap_or(0);
    let w = label_w + max_len * (gw * cell + gap);
    let h = rows.len() * (gh * cell + gap) + gap;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12" shape-rendering="crispEdges">"#
    );
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    for (r, (name, latents)) in rows.iter().enumerate() {
        let y0 = gap + r * (gh * cell + gap);
        let _ = writeln!(
            svg,
            r#"<text x="4" y="{}">{}</text>"#,
            y0 + gh * cell / 2 + 4,
            escape(name)
        );
        for (k, lat) in latents.iter().enumerate() {
            let x0 = label_w + k * (gw * cell + gap);
            let sh = lat.shape();
            for i in 0..sh.h {
                for j in 0..sh.w {
                    let rgb: Vec<u8> = (0..3)
                        .map(|c| channel_byte(lat.get(i, j, c.min(sh.c - 1))))
                        .collect();
                    let _ = writeln!(
                        svg,
                        "<rect x=\"{}\" y=\"{}\" width=\"{cell}\" height=\"{cell}\" fill=\"#{:02x}{:02x}{:02x}\"/>",
                        x0 + j * cell,
                        y0 + i * cell,
                        rgb[0],
                        rgb[1],
                        rgb[2]
                    );
                }
            }
        }
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::GridShape;

    #[test]
    fn plot_has_one_polyline_per_series() {
        let s = vec![
            Series {
                name: "a".into(),
                points: vec![(0.0, 0.1), (2.0, 0.4)],
            },
            Series {
                name: "b<c".into(),
                points: vec![(0.0, 0.3)],
            },
        ];
        let svg = line_plot(
            "t",
            "x",
            "y",
            &s,
            &[Reference {
                name: "base".into(),
                y: 0.2,
            }],
        );
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("b&lt;c"));
        assert!(svg.ends_with("</svg>\n"));
    }

    #[test]
    fn strip_draws_every_pixel() {
        let lat = Latent::filled(GridShape::new(2, 3, 3), 1.0f32);
        let svg = latent_strip(&[("run".into(), vec![lat.clone(), lat])], 4);
        assert_eq!(svg.matches("#ffffff").count(), 12);
    }
}
