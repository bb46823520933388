//! Server-side PNG rendering of pool samples.

use std::io::Cursor;

use image::{DynamicImage, GrayImage, ImageFormat, Rgb, RgbImage};

use crate::data::Dataset;
use crate::error::{Error, Result};

const BAR_WIDTH: u32 = 256;
const BAR_HEIGHT: u32 = 16;
const BAR_GAP: u32 = 2;
const POSITIVE: Rgb<u8> = Rgb([46, 112, 190]);
const NEGATIVE: Rgb<u8> = Rgb([200, 70, 60]);
const AXIS: Rgb<u8> = Rgb([40, 40, 40]);

/// Renders row `row` of `dataset` as PNG bytes: images as grayscale or RGB,
/// tabular rows as a horizontal bar chart of feature values.
pub fn render_sample(dataset: &Dataset, row: usize) -> Result<Vec<u8>> {
    if row >= dataset.len() {
        return Err(Error::Index(format!(
            "row {row} outside 0..{}",
            dataset.len()
        )));
    }
    let values = dataset.features.row(row);
    let img = match dataset.image_shape() {
        Some((h, w, c)) => image_pixels(values, h, w, c),
        None => bar_chart(values),
    };
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    Ok(out.into_inner())
}

/// Maps values to 0..=255; data already in [0, 1] is scaled directly,
/// anything else is min-max normalised.
fn to_bytes(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, span) = if lo >= 0.0 && hi <= 1.0 {
        (0.0, 1.0)
    } else if hi > lo {
        (lo, hi - lo)
    } else {
        (lo, 1.0)
    };
    values
        .iter()
        .map(|v| (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

fn image_pixels(values: &[f64], h: usize, w: usize, c: usize) -> DynamicImage {
    let (w32, h32) = (w as u32, h as u32);
    if c == 3 {
        let bytes = to_bytes(values);
        DynamicImage::ImageRgb8(RgbImage::from_raw(w32, h32, bytes).expect("buffer matches H×W×3"))
    } else {
        let gray: Vec<f64> = values
            .chunks(c)
            .map(|px| px.iter().sum::<f64>() / c as f64)
            .collect();
        DynamicImage::ImageLuma8(
            GrayImage::from_raw(w32, h32, to_bytes(&gray)).expect("buffer matches H×W"),
        )
    }
}

fn bar_chart(values: &[f64]) -> DynamicImage {
    let rows = values.len().max(1) as u32;
    let height = rows * (BAR_HEIGHT + BAR_GAP) + BAR_GAP;
    let mut img = RgbImage::from_pixel(BAR_WIDTH, height, Rgb([255, 255, 255]));
    let centre = BAR_WIDTH / 2;
    let half = (centre - 4) as f64;
    let scale = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for (i, &v) in values.iter().enumerate() {
        let len = if scale > 0.0 {
            (v.abs() / scale * half).round() as u32
        } else {
            0
        };
        let top = BAR_GAP + i as u32 * (BAR_HEIGHT + BAR_GAP);
        let (x0, x1, colour) = if v >= 0.0 {
            (centre, centre + len, POSITIVE)
        } else {
            (centre - len, centre, NEGATIVE)
        };
        for y in top..top + BAR_HEIGHT {
            for x in x0..x1 {
                img.put_pixel(x, y, colour);
            }
        }
    }
    for y in 0..height {
        img.put_pixel(centre, y, AXIS);
    }
    DynamicImage::ImageRgb8(img)
}
