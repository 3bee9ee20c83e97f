//! Minimal SVG scatter of estimated against true counts, with a residual panel.

use std::fmt::Write;

const W: f64 = 360.0;
const H: f64 = 320.0;
const PAD: f64 = 40.0;

fn bounds(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    });
    if hi > lo {
        (lo, hi)
    } else {
        (lo - 1.0, lo + 1.0)
    }
}

fn panel(
    out: &mut String,
    x0: f64,
    title: &str,
    xs: &[f64],
    ys: &[f64],
    identity: bool,
    zero_line: bool,
) {
    let (xlo, xhi) = bounds(xs.iter().copied());
    let (ylo, yhi) = if identity {
        bounds(xs.iter().chain(ys).copied())
    } else {
        bounds(ys.iter().copied().chain([0.0]))
    };
    let (xlo, xhi) = if identity { (ylo, yhi) } else { (xlo, xhi) };
    let sx = |v: f64| x0 + PAD + (v - xlo) / (xhi - xlo) * (W - 2.0 * PAD);
    let sy = |v: f64| H - PAD - (v - ylo) / (yhi - ylo) * (H - 2.0 * PAD);
    let _ = writeln!(
        out,
        r#"<rect x="{:.1}" y="{PAD:.1}" width="{:.1}" height="{:.1}" fill="none" stroke="black"/>"#,
        x0 + PAD,
        W - 2.0 * PAD,
        H - 2.0 * PAD
    );
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="20" font-size="13">{title}</text>"#,
        x0 + PAD
    );
    if identity {
        let _ = writeln!(
            out,
            r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="gray" stroke-dasharray="4"/>"#,
            sx(xlo),
            sy(xlo),
            sx(xhi),
            sy(xhi)
        );
    }
    if zero_line {
        let _ = writeln!(
            out,
            r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="gray" stroke-dasharray="4"/>"#,
            sx(xlo),
            sy(0.0),
            sx(xhi),
            sy(0.0)
        );
    }
    for (x, y) in xs.iter().zip(ys) {
        let _ = writeln!(
            out,
            r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="steelblue"/>"#,
            sx(*x),
            sy(*y)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" font-size="11">{xlo:.1} .. {xhi:.1}</text>"#,
        x0 + PAD,
        H - 12.0
    );
}

pub fn count_scatter(truth: &[f64], est: &[f64]) -> String {
    let residuals: Vec<f64> = est.iter().zip(truth).map(|(e, t)| e - t).collect();
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{:.0}" height="{H:.0}">"#,
        2.0 * W
    );
    panel(
        &mut s,
        0.0,
        "estimated vs true count",
        truth,
        est,
        true,
        false,
    );
    panel(
        &mut s,
        W,
        "residual (estimated - true)",
        truth,
        &residuals,
        false,
        true,
    );
    s.push_str("</svg>\n");
    s
}
