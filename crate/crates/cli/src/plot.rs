//! Standalone SVG plots written by hand.

use std::fmt::Write;

use mmfilter::fusion::Trace;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 260.0;
const MARGIN: f64 = 40.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

fn header(s: &mut String, w: f64, h: f64) {
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">"
    );
    let _ = writeln!(s, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>");
}

/// Maximal runs `[start, end)` of true flags.
pub fn runs(flags: &[bool]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (t, &f) in flags.iter().enumerate() {
        match (f, start) {
            (true, None) => start = Some(t),
            (false, Some(s)) => {
                out.push((s, t));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, flags.len()));
    }
    out
}

/// Per-modality weights (averaged over state dimensions) against time, with
/// contact frames shaded and blackout frames ticked along the bottom.
pub fn beta_plot(trace: &Trace, labels: &[&str]) -> String {
    let steps = trace.len().max(1);
    let series: Vec<Vec<f64>> = (0..labels.len())
        .map(|k| {
            trace
                .rows
                .iter()
                .map(|r| {
                    r.beta
                        .get(k)
                        .map_or(0.0, |b| b.iter().sum::<f64>() / b.len().max(1) as f64)
                })
                .collect()
        })
        .collect();
    let top = series
        .iter()
        .flatten()
        .copied()
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::max)
        .max(1e-12)
        * 1.05;
    let plot_w = WIDTH - 2.0 * MARGIN;
    let plot_h = HEIGHT - 2.0 * MARGIN;
    let x = |t: f64| MARGIN + plot_w * t / steps as f64;
    let y = |v: f64| HEIGHT - MARGIN - plot_h * v / top;

    let mut s = String::new();
    header(&mut s, WIDTH, HEIGHT);
    let contact: Vec<bool> = trace.rows.iter().map(|r| r.contact).collect();
    for (a, b) in runs(&contact) {
        let _ = writeln!(
            s,
            "<rect class=\"contact\" data-start=\"{a}\" data-end=\"{b}\" x=\"{:.2}\" y=\"{MARGIN}\" width=\"{:.2}\" height=\"{plot_h}\" fill=\"#f2c38b\" fill-opacity=\"0.5\"/>",
            x(a as f64),
            x(b as f64) - x(a as f64)
        );
    }
    for (t, r) in trace.rows.iter().enumerate() {
        if r.blackout {
            let _ = writeln!(
                s,
                "<line class=\"blackout\" x1=\"{0:.2}\" x2=\"{0:.2}\" y1=\"{1}\" y2=\"{2}\" stroke=\"#555\"/>",
                x(t as f64 + 0.5),
                HEIGHT - MARGIN,
                HEIGHT - MARGIN + 6.0
            );
        }
    }
    let _ = writeln!(
        s,
        "<rect x=\"{MARGIN}\" y=\"{MARGIN}\" width=\"{plot_w}\" height=\"{plot_h}\" fill=\"none\" stroke=\"black\"/>"
    );
    for (k, values) in series.iter().enumerate() {
        let points: Vec<String> = values
            .iter()
            .enumerate()
            .map(|(t, v)| format!("{:.2},{:.2}", x(t as f64 + 0.5), y(v.clamp(0.0, top))))
            .collect();
        let color = COLORS[k % COLORS.len()];
        let _ = writeln!(
            s,
            "<polyline class=\"beta\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
            points.join(" ")
        );
        let _ = writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"12\" fill=\"{color}\">{}</text>",
            MARGIN + 8.0 + 150.0 * k as f64,
            MARGIN - 10.0,
            labels[k]
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"12\">time step (0..{steps}); shaded: contact</text>",
        MARGIN,
        HEIGHT - 8.0
    );
    let _ = writeln!(
        s,
        "<text x=\"4\" y=\"{:.2}\" font-size=\"12\">{top:.3}</text>",
        MARGIN + 4.0
    );
    s.push_str("</svg>\n");
    s
}

fn color(v: f64) -> String {
    // Dark blue through teal to yellow.
    let stops = [
        (68.0, 1.0, 84.0),
        (33.0, 145.0, 140.0),
        (253.0, 231.0, 37.0),
    ];
    let v = v.clamp(0.0, 1.0) * 2.0;
    let i = (v.floor() as usize).min(1);
    let f = v - i as f64;
    let (a, b) = (stops[i], stops[i + 1]);
    let mix = |p: f64, q: f64| (p + (q - p) * f).round() as u8;
    format!(
        "#{:02x}{:02x}{:02x}",
        mix(a.0, b.0),
        mix(a.1, b.1),
        mix(a.2, b.2)
    )
}

/// Heatmap of `values` on a `cells x cells` grid of offsets in `[-half_range, half_range]`.
/// Index `i * cells + j` is offset `(dx_i, dy_j)`; `dx` runs right and `dy` up. The true
/// state sits at the centre cross, the grid maximum is circled.
pub fn heatmap(values: &[f64], cells: usize, half_range: f64, title: &str) -> String {
    let side = 400.0;
    let cell = side / cells as f64;
    let (w, h) = (side + 2.0 * MARGIN, side + 2.0 * MARGIN);
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    let mut s = String::new();
    header(&mut s, w, h);
    let mut best = (0, f64::NEG_INFINITY);
    for i in 0..cells {
        for j in 0..cells {
            let v = values[i * cells + j];
            if v > best.1 {
                best = (i * cells + j, v);
            }
            let fill = if v.is_finite() {
                color((v - lo) / span)
            } else {
                "#888888".to_string()
            };
            let _ = writeln!(
                s,
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{fill}\"/>",
                MARGIN + i as f64 * cell,
                MARGIN + (cells - 1 - j) as f64 * cell,
                cell + 0.05,
                cell + 0.05
            );
        }
    }
    let centre = |k: usize| MARGIN + (k as f64 + 0.5) * cell;
    let (mx, my) = (
        centre(cells / 2),
        MARGIN + side - (cells / 2) as f64 * cell - 0.5 * cell,
    );
    let _ = writeln!(
        s,
        "<path class=\"truth\" d=\"M{:.2} {my:.2}H{:.2}M{mx:.2} {:.2}V{:.2}\" stroke=\"white\" stroke-width=\"2\"/>",
        mx - cell,
        mx + cell,
        my - cell,
        my + cell
    );
    let (bi, bj) = (best.0 / cells, best.0 % cells);
    let _ = writeln!(
        s,
        "<circle class=\"peak\" cx=\"{:.2}\" cy=\"{:.2}\" r=\"{:.2}\" fill=\"none\" stroke=\"red\" stroke-width=\"2\"/>",
        centre(bi),
        MARGIN + side - (bj as f64 + 0.5) * cell,
        cell
    );
    let _ = writeln!(
        s,
        "<text x=\"{MARGIN}\" y=\"{:.2}\" font-size=\"12\">{title}</text>",
        MARGIN - 12.0
    );
    let _ = writeln!(
        s,
        "<text x=\"{MARGIN}\" y=\"{:.2}\" font-size=\"12\">offsets +-{half_range} (normalized); log-likelihood {lo:.2} .. {hi:.2}</text>",
        h - 12.0
    );
    s.push_str("</svg>\n");
    s
}
