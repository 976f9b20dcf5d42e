//! Plain-text AUC tables and cumulative error curve images.

use std::fmt::Write as _;
use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::Result;
use crate::eval::metrics::ErrorCurve;

/// One row per threshold, AUC in percent.
pub fn auc_table(title: &str, unit: &str, curve: &ErrorCurve) -> Result<String> {
    let aucs = curve.aucs()?;
    let mut s = String::new();
    let _ = writeln!(s, "{title}");
    let _ = writeln!(s, "pairs: {}", curve.errors().len());
    let failed = curve.errors().iter().filter(|e| !e.is_finite()).count();
    if failed > 0 {
        let _ = writeln!(s, "failed estimates: {failed}");
    }
    let _ = writeln!(s, "{:>12}  {:>8}", format!("threshold"), "AUC (%)");
    for (t, a) in curve.thresholds().iter().zip(aucs) {
        let _ = writeln!(s, "{:>12}  {:>8.2}", format!("{t}{unit}"), 100.0 * a);
    }
    Ok(s)
}

const WIDTH: u32 = 480;
const HEIGHT: u32 = 320;
const MARGIN: u32 = 32;

fn put(img: &mut RgbImage, x: i64, y: i64, color: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, color);
    }
}

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
    let steps = (x1 - x0).abs().max((y1 - y0).abs()).max(1);
    for k in 0..=steps {
        let x = x0 + (x1 - x0) * k / steps;
        let y = y0 + (y1 - y0) * k / steps;
        put(img, x, y, color);
    }
}

/// Cumulative fraction of pairs with error `<= t` for `t` in `[0, max threshold]`,
/// with a dotted marker at every threshold.
pub fn render_curve(curve: &ErrorCurve) -> RgbImage {
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    let t_max = curve.thresholds().iter().cloned().fold(0.0, f64::max).max(1e-9);
    let (x0, y0) = (MARGIN as i64, (HEIGHT - MARGIN) as i64);
    let (x1, y1) = ((WIDTH - MARGIN) as i64, MARGIN as i64);
    let black = Rgb([0, 0, 0]);
    line(&mut img, (x0, y0), (x1, y0), black);
    line(&mut img, (x0, y0), (x0, y1), black);
    let to_px = |t: f64, f: f64| -> (i64, i64) {
        let x = x0 as f64 + (x1 - x0) as f64 * (t / t_max);
        let y = y0 as f64 - (y0 - y1) as f64 * f;
        (x.round() as i64, y.round() as i64)
    };
    for &t in curve.thresholds() {
        let (x, _) = to_px(t, 0.0);
        for y in (y1..=y0).step_by(4) {
            put(&mut img, x, y, Rgb([150, 150, 150]));
        }
    }
    let samples = (x1 - x0) as usize;
    let mut prev = to_px(0.0, curve.cdf(0.0));
    for k in 1..=samples {
        let t = t_max * k as f64 / samples as f64;
        let p = to_px(t, curve.cdf(t));
        line(&mut img, prev, p, Rgb([200, 30, 30]));
        line(&mut img, (prev.0, prev.1 + 1), (p.0, p.1 + 1), Rgb([200, 30, 30]));
        prev = p;
    }
    img
}

/// Writes the table to `path` and the curve next to it with a `.png` extension.
pub fn write_report(path: &Path, title: &str, unit: &str, curve: &ErrorCurve) -> Result<String> {
    let table = auc_table(title, unit, curve)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, &table)?;
    render_curve(curve).save(path.with_extension("png"))?;
    Ok(table)
}
