use std::io::Cursor;

use anyhow::Result;
use hvmunet::metrics::FoldSummary;
use hvmunet::synthetic::PALETTE;
use image::{ImageFormat, Rgb, RgbImage};

const BAR: u32 = 48;
const GAP: u32 = 16;
const PLOT_H: u32 = 200;
const MARGIN: u32 = 20;

fn fill(img: &mut RgbImage, x0: u32, y0: u32, x1: u32, y1: u32, c: Rgb<u8>) {
    for y in y0.min(y1)..y0.max(y1) {
        for x in x0..x1 {
            if x < img.width() && y < img.height() {
                img.put_pixel(x, y, c);
            }
        }
    }
}

/// Per-class mean Dice bars with ±std whiskers, then the weighted bar in
/// grey. The frame spans Dice 0 (bottom) to 1 (top).
pub fn dice_bars(summary: &FoldSummary) -> Result<Vec<u8>> {
    let rows: Vec<_> = summary.classes.iter().chain(std::iter::once(&summary.weighted)).collect();
    let n = rows.len() as u32;
    let w = 2 * MARGIN + n * BAR + (n - 1) * GAP;
    let h = PLOT_H + 2 * MARGIN;
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let y_of = |v: f64| MARGIN + PLOT_H - (v.clamp(0.0, 1.0) * PLOT_H as f64).round() as u32;
    let black = Rgb([0, 0, 0]);
    for (i, row) in rows.iter().enumerate() {
        let x0 = MARGIN + i as u32 * (BAR + GAP);
        let colour = if i + 1 == rows.len() {
            Rgb([140, 140, 140])
        } else {
            Rgb(PALETTE[(i + 1).min(PALETTE.len() - 1)])
        };
        fill(&mut img, x0, y_of(row.f1_dice.mean), x0 + BAR, MARGIN + PLOT_H, colour);
        let mid = x0 + BAR / 2;
        let (lo, hi) = (
            y_of(row.f1_dice.mean - row.f1_dice.std),
            y_of(row.f1_dice.mean + row.f1_dice.std),
        );
        fill(&mut img, mid, hi, mid + 1, lo + 1, black);
        fill(&mut img, mid - 6, hi, mid + 7, hi + 1, black);
        fill(&mut img, mid - 6, lo, mid + 7, lo + 1, black);
    }
    fill(&mut img, MARGIN - 2, MARGIN, MARGIN - 1, MARGIN + PLOT_H + 1, black);
    fill(&mut img, MARGIN - 2, MARGIN + PLOT_H, w - MARGIN + 2, MARGIN + PLOT_H + 1, black);
    let mut out = Vec::new();
    img.write_to(&mut Cursor::new(&mut out), ImageFormat::Png)?;
    Ok(out)
}
