//! Snapshot renderers: SVG with an optional id overlay, and binary PPM.

use std::fmt::Write as _;

use crate::monitor::Snapshot;
use crate::perception::ObjectMap;
use crate::workspace::{Rect, Symbol, BAND_MAX_Y, BAND_MIN_Y, WORKSPACE_HEIGHT, WORKSPACE_WIDTH};

pub fn render_svg(snapshot: &Snapshot, overlay: Option<&ObjectMap>) -> String {
    let mut svg = String::new();
    let _ = write!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {w} {h}" width="{w}" height="{h}">"#,
        w = WORKSPACE_WIDTH,
        h = WORKSPACE_HEIGHT
    );
    let _ = write!(
        svg,
        r##"<rect x="0" y="0" width="{w}" height="{h}" fill="#f4efe6"/><rect x="0" y="{b0}" width="{w}" height="{bh}" fill="#e2ecf5"/>"##,
        w = WORKSPACE_WIDTH,
        h = WORKSPACE_HEIGHT,
        b0 = BAND_MIN_Y,
        bh = BAND_MAX_Y - BAND_MIN_Y
    );
    for block in &snapshot.observation {
        let r = Rect::centered(block.pose.position(), block.footprint, block.footprint);
        let _ = write!(
            svg,
            r##"<g transform="rotate({deg} {cx} {cy})"><rect x="{x}" y="{y}" width="{s}" height="{s}" fill="#fffdf8" stroke="#333"/></g><text x="{cx}" y="{ty}" font-size="24" text-anchor="middle">{sym}</text>"##,
            deg = block.pose.theta.to_degrees(),
            cx = block.pose.x,
            cy = block.pose.y,
            x = r.min_x,
            y = r.min_y,
            s = block.footprint,
            ty = block.pose.y + 8.0,
            sym = block.symbol
        );
    }
    if let Some(map) = overlay {
        for (id, entry) in &map.entries {
            let _ = write!(
                svg,
                r##"<text x="{x}" y="{y}" font-size="12" fill="#c0392b">ID:{id}</text>"##,
                x = entry.bbox.min_x,
                y = entry.bbox.min_y - 3.0
            );
        }
    }
    svg.push_str("</svg>");
    svg
}

// 3x5 glyphs, one row per byte (bits 2..0 left to right)
fn glyph(symbol: Symbol) -> [u8; 5] {
    match symbol {
        Symbol::Digit(0) => [7, 5, 5, 5, 7],
        Symbol::Digit(1) => [2, 6, 2, 2, 7],
        Symbol::Digit(2) => [7, 1, 7, 4, 7],
        Symbol::Digit(3) => [7, 1, 7, 1, 7],
        Symbol::Digit(4) => [5, 5, 7, 1, 1],
        Symbol::Digit(5) => [7, 4, 7, 1, 7],
        Symbol::Digit(6) => [7, 4, 7, 5, 7],
        Symbol::Digit(7) => [7, 1, 1, 1, 1],
        Symbol::Digit(8) => [7, 5, 7, 5, 7],
        Symbol::Digit(_) => [7, 5, 7, 1, 7],
        Symbol::Op(crate::workspace::Operator::Add) => [0, 2, 7, 2, 0],
        Symbol::Op(crate::workspace::Operator::Sub) => [0, 0, 7, 0, 0],
        Symbol::Op(crate::workspace::Operator::Mul) => [0, 5, 2, 5, 0],
        Symbol::Op(crate::workspace::Operator::Div) => [2, 0, 7, 0, 2],
        Symbol::Equals => [0, 7, 0, 7, 0],
    }
}

/// Binary PPM (P6) at `px_per_mm` resolution.
pub fn render_ppm(snapshot: &Snapshot, px_per_mm: f64) -> Vec<u8> {
    let w = (WORKSPACE_WIDTH * px_per_mm).round().max(1.0) as usize;
    let h = (WORKSPACE_HEIGHT * px_per_mm).round().max(1.0) as usize;
    let mut pixels = vec![[244u8, 239, 230]; w * h];
    let band = ((BAND_MIN_Y * px_per_mm) as usize, (BAND_MAX_Y * px_per_mm) as usize);
    for y in band.0..band.1.min(h) {
        for x in 0..w {
            pixels[y * w + x] = [226, 236, 245];
        }
    }
    let mut fill = |r: Rect, color: [u8; 3]| {
        let x0 = (r.min_x * px_per_mm).floor().max(0.0) as usize;
        let y0 = (r.min_y * px_per_mm).floor().max(0.0) as usize;
        let x1 = ((r.max_x * px_per_mm).ceil() as usize).min(w);
        let y1 = ((r.max_y * px_per_mm).ceil() as usize).min(h);
        for y in y0..y1 {
            for x in x0..x1 {
                pixels[y * w + x] = color;
            }
        }
    };
    for block in &snapshot.observation {
        let r = Rect::centered(block.pose.position(), block.footprint, block.footprint);
        fill(r, [51, 51, 51]);
        let inset = block.footprint * 0.05;
        fill(
            Rect::new(r.min_x + inset, r.min_y + inset, r.max_x - inset, r.max_y - inset),
            [255, 253, 248],
        );
        let cell = block.footprint / 8.0;
        let origin_x = block.pose.x - 1.5 * cell;
        let origin_y = block.pose.y - 2.5 * cell;
        for (row, bits) in glyph(block.symbol).iter().enumerate() {
            for col in 0..3 {
                if bits & (4 >> col) != 0 {
                    let x = origin_x + col as f64 * cell;
                    let y = origin_y + row as f64 * cell;
                    fill(Rect::new(x, y, x + cell, y + cell), [20, 20, 20]);
                }
            }
        }
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(w * h * 3);
    for p in pixels {
        out.extend_from_slice(&p);
    }
    out
}
