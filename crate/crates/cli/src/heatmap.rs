//! PNG rendering of a grid's first component on a linear color scale.

use anyhow::Result;
use image::codecs::png::PngEncoder;
use image::{ExtendedColorType, ImageEncoder, Rgb, RgbImage};
use sparsescape::landscape::GridResult;

const CELL: u32 = 12;
const DIVERGED: Rgb<u8> = Rgb([128, 128, 128]);

/// Anchor colors of a perceptually ordered dark-to-bright ramp.
const RAMP: [[f64; 3]; 5] = [
    [68.0, 1.0, 84.0],
    [59.0, 82.0, 139.0],
    [33.0, 145.0, 140.0],
    [94.0, 201.0, 98.0],
    [253.0, 231.0, 37.0],
];

fn color(t: f64) -> Rgb<u8> {
    let t = t.clamp(0.0, 1.0) * (RAMP.len() - 1) as f64;
    let i = (t.floor() as usize).min(RAMP.len() - 2);
    let f = t - i as f64;
    let mut c = [0u8; 3];
    for (k, ck) in c.iter_mut().enumerate() {
        *ck = (RAMP[i][k] + f * (RAMP[i + 1][k] - RAMP[i][k])).round() as u8;
    }
    Rgb(c)
}

/// Alpha runs left to right, beta bottom to top. Returns the PNG bytes and the
/// `(min, max)` mapped to the ends of the scale.
pub fn render(grid: &GridResult) -> Result<(Vec<u8>, Option<(f64, f64)>)> {
    let (na, nb) = grid.shape();
    let range = grid.range();
    let (lo, hi) = range.unwrap_or((0.0, 1.0));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut img = RgbImage::new(na as u32 * CELL, nb as u32 * CELL);
    for i in 0..na {
        for j in 0..nb {
            let px = if grid.is_diverged(i, j) { DIVERGED } else { color((grid.cell(i, j)[0] - lo) / span) };
            let x0 = i as u32 * CELL;
            let y0 = (nb - 1 - j) as u32 * CELL;
            for dy in 0..CELL {
                for dx in 0..CELL {
                    img.put_pixel(x0 + dx, y0 + dy, px);
                }
            }
        }
    }
    let mut bytes = Vec::new();
    PngEncoder::new(&mut bytes).write_image(img.as_raw(), img.width(), img.height(), ExtendedColorType::Rgb8)?;
    Ok((bytes, range))
}

#[cfg(test)]
mod tests {
    use super::*;
    use sparsescape::landscape::FieldKind;

    #[test]
    fn ramp_endpoints() {
        assert_eq!(color(0.0), Rgb([68, 1, 84]));
        assert_eq!(color(1.0), Rgb([253, 231, 37]));
        assert_eq!(color(2.0), color(1.0));
    }

    #[test]
    fn renders_png_of_expected_size() {
        let g = GridResult {
            field: FieldKind::TrainLoss,
            alphas: vec![0.0, 1.0],
            betas: vec![0.0, 1.0, 2.0],
            width: 1,
            values: vec![1.0, 2.0, 3.0, 4.0, f64::NAN, 6.0],
            diverged: vec![false, false, false, false, true, false],
        };
        let (png, range) = render(&g).unwrap();
        assert_eq!(range, Some((1.0, 6.0)));
        let img = image::load_from_memory(&png).unwrap().to_rgb8();
        assert_eq!(img.dimensions(), (2 * CELL, 3 * CELL));
        // cell (alpha 0, beta 0) sits bottom-left and holds the minimum
        assert_eq!(*img.get_pixel(0, 3 * CELL - 1), color(0.0));
        assert_eq!(*img.get_pixel(CELL, CELL), DIVERGED);
    }
}
