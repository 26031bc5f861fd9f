//! Static PNG rendering: Wigner heatmaps and simple line plots. No text is
//! drawn; axis ranges go into the accompanying JSON reports.

use std::path::Path;

use anyhow::{Context, Result};
use image::{Rgb, RgbImage};

use kerrcat::tomography::WignerGrid;

const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([40, 40, 40]);
const GUIDE: Rgb<u8> = Rgb([200, 200, 200]);
const SERIES: [Rgb<u8>; 6] = [
    Rgb([31, 119, 180]),
    Rgb([214, 39, 40]),
    Rgb([44, 160, 44]),
    Rgb([255, 127, 14]),
    Rgb([148, 103, 189]),
    Rgb([140, 86, 75]),
];

/// Blue–white–red map for `t ∈ [−1, 1]`, white at 0.
pub fn diverging(t: f64) -> Rgb<u8> {
    let t = t.clamp(-1.0, 1.0);
    let (end, w) = if t < 0.0 { ([59.0, 76.0, 192.0], -t) } else { ([180.0, 4.0, 38.0], t) };
    let mix = |a: f64| (255.0 + (a - 255.0) * w).round() as u8;
    Rgb([mix(end[0]), mix(end[1]), mix(end[2])])
}

/// Heatmap with the color scale symmetric about zero; `Im γ` increases
/// upwards.
pub fn wigner_heatmap(grid: &WignerGrid, path: &Path) -> Result<()> {
    let (nx, ny) = (grid.spec.nx, grid.spec.ny);
    let scale = (600 / nx.max(ny)).max(1) as u32;
    let vmax = grid.values.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    let mut img = RgbImage::new(nx as u32 * scale, ny as u32 * scale);
    for iy in 0..ny {
        for ix in 0..nx {
            let c = diverging(grid.at(ix, iy) / vmax);
            let row = (ny - 1 - iy) as u32;
            for dy in 0..scale {
                for dx in 0..scale {
                    img.put_pixel(ix as u32 * scale + dx, row * scale + dy, c);
                }
            }
        }
    }
    img.save(path).with_context(|| format!("writing {}", path.display()))
}

pub struct Series<'a> {
    pub x: &'a [f64],
    pub y: &'a [f64],
}

fn bounds(v: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) =
        v.filter(|x| x.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && x < w && y < h {
            img.put_pixel(x as u32, y as u32, c);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Line plot of several series on shared axes, with a horizontal guide at
/// `y = 0` when it is in range and optional vertical markers.
pub fn line_plot(series: &[Series], markers_x: &[f64], path: &Path) -> Result<()> {
    let (w, h, m) = (800u32, 500u32, 40i64);
    let mut img = RgbImage::from_pixel(w, h, BACKGROUND);
    let (x0, x1) = bounds(series.iter().flat_map(|s| s.x.iter().copied()));
    let (y0, y1) = bounds(series.iter().flat_map(|s| s.y.iter().copied()));
    let px = |x: f64| m + ((x - x0) / (x1 - x0) * (w as i64 - 2 * m) as f64).round() as i64;
    let py = |y: f64| h as i64 - m - ((y - y0) / (y1 - y0) * (h as i64 - 2 * m) as f64).round() as i64;
    if y0 < 0.0 && y1 > 0.0 {
        line(&mut img, (m, py(0.0)), (w as i64 - m, py(0.0)), GUIDE);
    }
    for &mx in markers_x {
        if mx > x0 && mx < x1 {
            line(&mut img, (px(mx), m), (px(mx), h as i64 - m), GUIDE);
        }
    }
    let (l, r, t, b) = (m, w as i64 - m, m, h as i64 - m);
    for (a, c) in [((l, b), (r, b)), ((l, t), (l, b)), ((r, t), (r, b)), ((l, t), (r, t))] {
        line(&mut img, a, c, AXIS);
    }
    for (k, s) in series.iter().enumerate() {
        let c = SERIES[k % SERIES.len()];
        let pts: Vec<(i64, i64)> =
            s.x.iter()
                .zip(s.y)
                .filter(|(x, y)| x.is_finite() && y.is_finite())
                .map(|(x, y)| (px(*x), py(*y)))
                .collect();
        if pts.len() == 1 {
            let (x, y) = pts[0];
            for d in -2..=2 {
                line(&mut img, (x - 2, y + d), (x + 2, y + d), c);
            }
        }
        for p in pts.windows(2) {
            line(&mut img, p[0], p[1], c);
        }
    }
    img.save(path).with_context(|| format!("writing {}", path.display()))
}
