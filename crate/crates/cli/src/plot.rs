//! Minimal SVG loss curve: loss against tokens, a star on each batch
//! doubling, dashed lines at stage starts and red ticks at spikes.

use std::fmt::Write;

use desklm_core::train::{Record, RunReport};

const W: f64 = 800.0;
const H: f64 = 400.0;
const PAD: f64 = 50.0;

fn star(cx: f64, cy: f64, r: f64) -> String {
    (0..10)
        .map(|i| {
            let a = std::f64::consts::PI * (i as f64 / 5.0 - 0.5);
            let rr = if i % 2 == 0 { r } else { r * 0.45 };
            format!("{:.1},{:.1}", cx + rr * a.cos(), cy + rr * a.sin())
        })
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn loss_svg(rep: &RunReport) -> String {
    let pts: Vec<(f64, f64)> = rep
        .steps()
        .map(|(_, _, t, l)| (t as f64, l))
        .filter(|p| p.1.is_finite())
        .collect();
    let mut s = format!(r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#);
    s.push('\n');
    if pts.is_empty() {
        s.push_str("<text x=\"20\" y=\"30\">no steps</text>\n</svg>\n");
        return s;
    }
    let x_max = pts.iter().map(|p| p.0).fold(1.0, f64::max);
    let (lo, hi) = pts.iter().fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.1), b.max(p.1)));
    let span = (hi - lo).max(1e-9);
    let x = |t: f64| PAD + (W - 2.0 * PAD) * t / x_max;
    let y = |l: f64| H - PAD - (H - 2.0 * PAD) * (l - lo) / span;
    // loss at the last step at or before `t`
    let loss_at = |t: f64| pts.iter().take_while(|p| p.0 <= t).last().unwrap_or(&pts[0]).1;

    let _ = writeln!(
        s,
        r##"<rect x="{PAD}" y="{PAD}" width="{}" height="{}" fill="none" stroke="#999"/>"##,
        W - 2.0 * PAD,
        H - 2.0 * PAD
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">tokens</text>"#, W / 2.0, H - 15.0);
    let _ = writeln!(s, r#"<text x="10" y="{}">{hi:.3}</text>"#, PAD + 4.0);
    let _ = writeln!(s, r#"<text x="10" y="{}">{lo:.3}</text>"#, H - PAD);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{x_max:.0}</text>"#, W - PAD, H - PAD + 15.0);
    for r in &rep.records {
        match *r {
            Record::StageStart { stage, tokens_seen, .. } => {
                let px = x(tokens_seen as f64);
                let _ = writeln!(
                    s,
                    r##"<line x1="{px:.1}" y1="{PAD}" x2="{px:.1}" y2="{}" stroke="#888" stroke-dasharray="4 3"/><text x="{:.1}" y="{}">stage {stage}</text>"##,
                    H - PAD,
                    px + 3.0,
                    PAD - 5.0
                );
            }
            Record::Spike { tokens_seen, .. } => {
                let px = x(tokens_seen as f64);
                let _ = writeln!(
                    s,
                    r##"<line x1="{px:.1}" y1="{}" x2="{px:.1}" y2="{}" stroke="#d00"/>"##,
                    H - PAD,
                    H - PAD - 10.0
                );
            }
            _ => {}
        }
    }
    let line: Vec<String> = pts.iter().map(|&(t, l)| format!("{:.1},{:.1}", x(t), y(l))).collect();
    let _ = writeln!(
        s,
        r##"<polyline fill="none" stroke="#1f4e9c" stroke-width="1.2" points="{}"/>"##,
        line.join(" ")
    );
    for r in &rep.records {
        if let Record::Doubling { tokens_seen, to, .. } = *r {
            let t = tokens_seen as f64;
            let _ = writeln!(
                s,
                r##"<polygon fill="#e6a100" stroke="#7a5500" points="{}"><title>batch {to}</title></polygon>"##,
                star(x(t), y(loss_at(t)), 8.0)
            );
        }
    }
    s.push_str("</svg>\n");
    s
}
