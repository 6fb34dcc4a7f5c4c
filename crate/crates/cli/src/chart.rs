//! Grouped bar charts rendered straight to pixels.

use image::{Rgb, RgbImage};

/// Series colours, cycled when there are more series than entries.
pub const PALETTE: [[u8; 3]; 8] = [
    [0x1f, 0x77, 0xb4],
    [0xff, 0x7f, 0x0e],
    [0x2c, 0xa0, 0x2c],
    [0xd6, 0x27, 0x28],
    [0x94, 0x67, 0xbd],
    [0x8c, 0x56, 0x4b],
    [0xe3, 0x77, 0xc2],
    [0x7f, 0x7f, 0x7f],
];

const MARGIN: u32 = 16;
const PLOT_HEIGHT: u32 = 160;
const BAR_WIDTH: u32 = 16;
const BAR_GAP: u32 = 2;
const GROUP_GAP: u32 = 24;
const GRID: Rgb<u8> = Rgb([0xdd, 0xdd, 0xdd]);
const AXIS: Rgb<u8> = Rgb([0x33, 0x33, 0x33]);

pub fn colour_hex(series: usize) -> String {
    let [r, g, b] = PALETTE[series % PALETTE.len()];
    format!("#{r:02x}{g:02x}{b:02x}")
}

/// One cluster of bars per group, one bar per series, on a fixed 0..1 axis
/// with grid lines every 0.25. Missing values leave a gap.
pub fn grouped_bars(groups: &[Vec<Option<f64>>]) -> RgbImage {
    let series = groups.iter().map(Vec::len).max().unwrap_or(0).max(1) as u32;
    let n = groups.len().max(1) as u32;
    let group_width = series * (BAR_WIDTH + BAR_GAP) - BAR_GAP;
    let width = 2 * MARGIN + n * group_width + (n - 1) * GROUP_GAP;
    let height = 2 * MARGIN + PLOT_HEIGHT;
    let mut img = RgbImage::from_pixel(width, height, Rgb([0xff, 0xff, 0xff]));
    let base = MARGIN + PLOT_HEIGHT;

    for step in 1..=4 {
        let y = base - PLOT_HEIGHT * step / 4;
        for x in MARGIN..width - MARGIN {
            img.put_pixel(x, y, GRID);
        }
    }
    for (g, values) in groups.iter().enumerate() {
        let left = MARGIN + g as u32 * (group_width + GROUP_GAP);
        for (s, v) in values.iter().enumerate() {
            let Some(v) = v else { continue };
            let h = (v.clamp(0.0, 1.0) * PLOT_HEIGHT as f64).round() as u32;
            let x0 = left + s as u32 * (BAR_WIDTH + BAR_GAP);
            let colour = Rgb(PALETTE[s % PALETTE.len()]);
            for y in base - h..base {
                for x in x0..x0 + BAR_WIDTH {
                    img.put_pixel(x, y, colour);
                }
            }
        }
    }
    for x in MARGIN - 1..width - MARGIN {
        img.put_pixel(x, base, AXIS);
    }
    for y in MARGIN..=base {
        img.put_pixel(MARGIN - 1, y, AXIS);
    }
    img
}
