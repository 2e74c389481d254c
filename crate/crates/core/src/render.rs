//! Plain-file renderings: binary graymaps and SVG charts.

use crate::metrics::{EmbeddingReport, PointKind};

/// Binary PGM (P5), values min-max scaled to 0..=255. A constant map
/// renders mid-gray.
pub fn pgm(values: &[f64], width: usize, height: usize) -> Vec<u8> {
    assert_eq!(values.len(), width * height, "pgm size");
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| {
        if hi > lo {
            ((v - lo) / (hi - lo) * 255.0).round() as u8
        } else {
            128
        }
    }));
    out
}

const SIZE: f64 = 400.0;
const PAD: f64 = 20.0;

fn color(label: f64, lo: f64, hi: f64) -> String {
    let t = if hi > lo { (label - lo) / (hi - lo) } else { 0.5 };
    let r = (255.0 * t).round() as u8;
    let b = (255.0 * (1.0 - t)).round() as u8;
    format!("rgb({r},64,{b})")
}

/// Samples as stars, prototypes as circles, colored by label.
pub fn scatter_svg(report: &EmbeddingReport) -> String {
    let pts = &report.points;
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    let (mut l0, mut l1) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in pts {
        x0 = x0.min(p.x);
        x1 = x1.max(p.x);
        y0 = y0.min(p.y);
        y1 = y1.max(p.y);
        l0 = l0.min(p.label);
        l1 = l1.max(p.label);
    }
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0).max(1e-12) * (SIZE - 2.0 * PAD);
    let sy = |y: f64| SIZE - PAD - (y - y0) / (y1 - y0).max(1e-12) * (SIZE - 2.0 * PAD);
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SIZE}\" height=\"{SIZE}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    for kind in [PointKind::Sample, PointKind::Prototype] {
        for p in pts.iter().filter(|p| p.kind == kind) {
            let (cx, cy, fill) = (sx(p.x), sy(p.y), color(p.label, l0, l1));
            match kind {
                PointKind::Sample => out.push_str(&format!(
                    "<text x=\"{cx:.2}\" y=\"{cy:.2}\" font-size=\"8\" text-anchor=\"middle\" fill=\"{fill}\">*</text>\n"
                )),
                PointKind::Prototype => out.push_str(&format!(
                    "<circle cx=\"{cx:.2}\" cy=\"{cy:.2}\" r=\"5\" fill=\"{fill}\" stroke=\"black\"/>\n"
                )),
            }
        }
    }
    out.push_str(&format!(
        "<text x=\"{PAD}\" y=\"12\" font-size=\"10\">PC1 {:.1}%  PC2 {:.1}%</text>\n</svg>\n",
        100.0 * report.explained_variance[0],
        100.0 * report.explained_variance[1]
    ));
    out
}

/// Bar chart of per-prototype frequencies.
pub fn histogram_svg(freq: &[f64]) -> String {
    let top = freq.iter().copied().fold(0.0, f64::max).max(1e-12);
    let bar = (SIZE - 2.0 * PAD) / freq.len().max(1) as f64;
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SIZE}\" height=\"{SIZE}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    for (j, &f) in freq.iter().enumerate() {
        let h = f / top * (SIZE - 2.0 * PAD);
        out.push_str(&format!(
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{h:.2}\" fill=\"steelblue\"><title>prototype {j}: {f:.4}</title></rect>\n",
            PAD + j as f64 * bar,
            SIZE - PAD - h,
            bar * 0.9
        ));
    }
    out.push_str("</svg>\n");
    out
}
