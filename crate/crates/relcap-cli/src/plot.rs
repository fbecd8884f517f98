//! Dependency-free SVG charts. All numbers render with fixed precision so
//! identical inputs give identical bytes.

const W: f64 = 640.0;
const H: f64 = 400.0;
const ML: f64 = 62.0;
const MR: f64 = 18.0;
const MT: f64 = 34.0;
const MB: f64 = 46.0;
pub const PALETTE: [&str; 6] =
    ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    let s = if a >= 1000.0 {
        format!("{v:.0}")
    } else if a >= 1.0 {
        format!("{v:.2}")
    } else {
        format!("{v:.4}")
    };
    let s = if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    };
    if s.is_empty() || s == "-" {
        "0".into()
    } else {
        s
    }
}

fn range_of(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if lo == hi {
        let pad = if lo == 0.0 { 1.0 } else { lo.abs() * 0.1 };
        return (lo - pad, hi + pad);
    }
    (lo, hi)
}

fn pad(lo: f64, hi: f64, frac: f64) -> (f64, f64) {
    let d = (hi - lo) * frac;
    (lo - d, hi + d)
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn sx(&self, x: f64) -> f64 {
        ML + (x - self.x0) / (self.x1 - self.x0) * (W - ML - MR)
    }

    fn sy(&self, y: f64) -> f64 {
        H - MB - (y - self.y0) / (self.y1 - self.y0) * (H - MT - MB)
    }
}

fn header(out: &mut String, title: &str) {
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    ));
    out.push_str(&format!("<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n"));
    out.push_str(&format!(
        "<text x=\"{:.2}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        W / 2.0,
        escape(title)
    ));
}

fn axes(out: &mut String, f: &Frame, x_label: &str, y_label: &str) {
    for i in 0..5 {
        let t = i as f64 / 4.0;
        let xv = f.x0 + t * (f.x1 - f.x0);
        let yv = f.y0 + t * (f.y1 - f.y0);
        let sx = f.sx(xv);
        let sy = f.sy(yv);
        out.push_str(&format!(
            "<line x1=\"{sx:.2}\" y1=\"{:.2}\" x2=\"{sx:.2}\" y2=\"{:.2}\" stroke=\"#dddddd\"/>\n",
            MT,
            H - MB
        ));
        out.push_str(&format!(
            "<line x1=\"{:.2}\" y1=\"{sy:.2}\" x2=\"{:.2}\" y2=\"{sy:.2}\" stroke=\"#dddddd\"/>\n",
            ML,
            W - MR
        ));
        out.push_str(&format!(
            "<text x=\"{sx:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>\n",
            H - MB + 16.0,
            fmt_tick(xv)
        ));
        out.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{}</text>\n",
            ML - 6.0,
            sy + 4.0,
            fmt_tick(yv)
        ));
    }
    out.push_str(&format!(
        "<rect x=\"{ML}\" y=\"{MT}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"none\" stroke=\"#333333\"/>\n",
        W - ML - MR,
        H - MT - MB
    ));
    out.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>\n",
        ML + (W - ML - MR) / 2.0,
        H - 10.0,
        escape(x_label)
    ));
    out.push_str(&format!(
        "<text x=\"14\" y=\"{:.2}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {:.2})\">{}</text>\n",
        MT + (H - MT - MB) / 2.0,
        MT + (H - MT - MB) / 2.0,
        escape(y_label)
    ));
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Overlaid line series on shared axes; `vlines` mark x positions with a
/// dashed rule (phase boundaries and the like).
pub fn line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
    vlines: &[f64],
) -> String {
    let (xlo, xhi) = range_of(
        series
            .iter()
            .flat_map(|s| s.points.iter().map(|p| p.0))
            .chain(vlines.iter().copied()),
    );
    let (ylo, yhi) = range_of(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let (ylo, yhi) = pad(ylo, yhi, 0.06);
    let f = Frame { x0: xlo, x1: xhi, y0: ylo, y1: yhi };

    let mut out = String::new();
    header(&mut out, title);
    axes(&mut out, &f, x_label, y_label);
    for &x in vlines {
        let sx = f.sx(x);
        out.push_str(&format!(
            "<line x1=\"{sx:.2}\" y1=\"{MT}\" x2=\"{sx:.2}\" y2=\"{:.2}\" stroke=\"#888888\" stroke-dasharray=\"4 3\"/>\n",
            H - MB
        ));
    }
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> =
            s.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", f.sx(x), f.sy(y))).collect();
        out.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
            pts.join(" ")
        ));
        if s.points.len() == 1 {
            let (x, y) = s.points[0];
            out.push_str(&format!(
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>\n",
                f.sx(x),
                f.sy(y)
            ));
        }
    }
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let y = MT + 14.0 + 16.0 * i as f64;
        out.push_str(&format!(
            "<line x1=\"{:.2}\" y1=\"{y:.2}\" x2=\"{:.2}\" y2=\"{y:.2}\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            W - MR - 120.0,
            W - MR - 96.0
        ));
        out.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\">{}</text>\n",
            W - MR - 90.0,
            y + 4.0,
            escape(&s.label)
        ));
    }
    out.push_str("</svg>\n");
    out
}

/// Labeled vertical bars from zero; `color_of` picks the palette slot so
/// callers can pair related bars.
pub fn bar_chart(title: &str, y_label: &str, bars: &[(String, f64, usize)]) -> String {
    let hi = bars.iter().map(|b| b.1).fold(0.0f64, f64::max);
    let f = Frame {
        x0: 0.0,
        x1: bars.len().max(1) as f64,
        y0: 0.0,
        y1: if hi > 0.0 { hi * 1.12 } else { 1.0 },
    };
    let mut out = String::new();
    header(&mut out, title);
    axes(&mut out, &f, "", y_label);
    let slot = (W - ML - MR) / bars.len().max(1) as f64;
    for (i, (label, value, color)) in bars.iter().enumerate() {
        let cx = ML + (i as f64 + 0.5) * slot;
        let bw = slot * 0.6;
        let top = f.sy(*value);
        out.push_str(&format!(
            "<rect x=\"{:.2}\" y=\"{top:.2}\" width=\"{bw:.2}\" height=\"{:.2}\" fill=\"{}\"/>\n",
            cx - bw / 2.0,
            (H - MB - top).max(0.0),
            PALETTE[color % PALETTE.len()]
        ));
        out.push_str(&format!(
            "<text x=\"{cx:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>\n",
            top - 6.0,
            fmt_tick(*value)
        ));
        out.push_str(&format!(
            "<text x=\"{cx:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>\n",
            H - MB + 16.0,
            escape(label)
        ));
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn demo() -> Vec<Series> {
        vec![
            Series { label: "a".into(), points: vec![(0.0, 1.0), (1.0, 0.5), (2.0, 0.25)] },
            Series { label: "b".into(), points: vec![(0.0, 0.9), (1.0, 0.7), (2.0, 0.6)] },
        ]
    }

    #[test]
    fn identical_inputs_render_identical_bytes() {
        let one = line_chart("loss", "epoch", "loss", &demo(), &[1.0]);
        let two = line_chart("loss", "epoch", "loss", &demo(), &[1.0]);
        assert_eq!(one, two);
        assert!(!one.contains("date"), "no timestamps in output");
    }

    #[test]
    fn one_polyline_per_series_and_a_legend() {
        let svg = line_chart("loss", "epoch", "loss", &demo(), &[]);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains(">a</text>"));
        assert!(svg.contains(">b</text>"));
        assert!(svg.contains("stroke-dasharray") == false);
    }

    #[test]
    fn bars_carry_values_and_paired_colors() {
        let bars = vec![
            ("run1 w/ caa".to_string(), 2.3, 0),
            ("run1 w/o caa".to_string(), 2.38, 1),
        ];
        let svg = bar_chart("emd", "mean emd", &bars, );
        assert_eq!(svg.matches("<rect").count(), 2 + 2, "two bars, background, frame");
        assert!(svg.contains("2.3"));
        assert!(svg.contains(PALETTE[0]) && svg.contains(PALETTE[1]));
        assert_eq!(svg, bar_chart("emd", "mean emd", &bars));
    }

    #[test]
    fn tick_labels_trim_noise() {
        assert_eq!(fmt_tick(0.0), "0");
        assert_eq!(fmt_tick(2.5), "2.5");
        assert_eq!(fmt_tick(0.1250), "0.125");
        assert_eq!(fmt_tick(3.0), "3");
        assert_eq!(fmt_tick(1500.0), "1500");
    }

    #[test]
    fn degenerate_ranges_still_render() {
        let flat = vec![Series { label: "c".into(), points: vec![(0.0, 0.5)] }];
        let svg = line_chart("x", "epoch", "v", &flat, &[]);
        assert!(svg.contains("<circle"));
        assert!(!svg.contains("NaN"));
    }
}
