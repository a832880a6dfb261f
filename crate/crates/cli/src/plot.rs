//! Raster heatmaps of BAU-level summaries.

use image::{Rgb, RgbImage};

/// Viridis at nine evenly spaced positions.
const VIRIDIS: [[u8; 3]; 9] = [
    [68, 1, 84],
    [71, 44, 122],
    [59, 81, 139],
    [44, 113, 142],
    [33, 144, 141],
    [39, 173, 129],
    [92, 200, 99],
    [170, 220, 50],
    [253, 231, 37],
];

const MISSING: Rgb<u8> = Rgb([128, 128, 128]);
const GAP: u32 = 4;

pub fn viridis(t: f64) -> Rgb<u8> {
    if !t.is_finite() {
        return MISSING;
    }
    let x = t.clamp(0.0, 1.0) * (VIRIDIS.len() - 1) as f64;
    let i = (x.floor() as usize).min(VIRIDIS.len() - 2);
    let f = x - i as f64;
    let (a, b) = (VIRIDIS[i], VIRIDIS[i + 1]);
    let mix = |k: usize| (a[k] as f64 + f * (b[k] as f64 - a[k] as f64)).round() as u8;
    Rgb([mix(0), mix(1), mix(2)])
}

fn range(values: &[f64]) -> (f64, f64) {
    let finite = values.iter().copied().filter(|v| v.is_finite());
    let lo = finite.clone().fold(f64::INFINITY, f64::min);
    let hi = finite.fold(f64::NEG_INFINITY, f64::max);
    if lo.is_finite() {
        (lo, hi)
    } else {
        (0.0, 1.0)
    }
}

/// Panels side by side, one row of panels per time slice. Each panel has its
/// own colour scale. `panels[k]` holds full (space-time) BAU values.
pub fn heatmap(panels: &[&[f64]], nx: usize, ny: usize, n_time: usize) -> RgbImage {
    let scale = (256 / nx.max(ny)).max(1) as u32;
    let (pw, ph) = (nx as u32 * scale, ny as u32 * scale);
    let np = panels.len() as u32;
    let width = np * pw + (np.saturating_sub(1)) * GAP;
    let height = n_time as u32 * ph + (n_time as u32).saturating_sub(1) * GAP;
    let mut img = RgbImage::from_pixel(width.max(1), height.max(1), Rgb([255, 255, 255]));
    let ns = nx * ny;
    for (p, values) in panels.iter().enumerate() {
        let (lo, hi) = range(values);
        let span = if hi > lo { hi - lo } else { 1.0 };
        for t in 0..n_time {
            for s in 0..ns {
                let v = values[t * ns + s];
                let colour = viridis((v - lo) / span);
                let (col, row) = ((s % nx) as u32, (s / nx) as u32);
                let x0 = p as u32 * (pw + GAP) + col * scale;
                let y0 = t as u32 * (ph + GAP) + row * scale;
                for dy in 0..scale {
                    for dx in 0..scale {
                        img.put_pixel(x0 + dx, y0 + dy, colour);
                    }
                }
            }
        }
    }
    img
}

pub fn encode_png(img: &RgbImage) -> Vec<u8> {
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png).expect("PNG encoding into memory");
    out.into_inner()
}
