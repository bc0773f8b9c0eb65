use std::path::Path;

use image::{ImageFormat, RgbImage};

use crate::data::quantize;
use crate::{Error, ImageBatch, Result};

/// Tiles each batch as one row of images, top to bottom.
pub fn grid_image(rows: &[&ImageBatch]) -> Result<RgbImage> {
    let first = rows
        .first()
        .ok_or_else(|| Error::Contract("grid needs at least one row".into()))?;
    let (n, c, h, w) = first.dim();
    if rows.iter().any(|r| r.dim() != (n, c, h, w)) {
        return Err(Error::Contract("grid rows must share one shape".into()));
    }
    if !(c == 1 || c == 3) {
        return Err(Error::Contract(format!(
            "grid needs 1 or 3 channels, got {c}"
        )));
    }
    let mut img = RgbImage::new((n * w) as u32, (rows.len() * h) as u32);
    for (r, batch) in rows.iter().enumerate() {
        for i in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let px = std::array::from_fn(|k| {
                        quantize(batch[[i, if c == 1 { 0 } else { k }, y, x]])
                    });
                    img.put_pixel((i * w + x) as u32, (r * h + y) as u32, image::Rgb(px));
                }
            }
        }
    }
    Ok(img)
}

/// Writes originals above their translations (and above a source sample row when
/// given) as a PNG.
pub fn export_grid(
    x: &ImageBatch,
    translated: &ImageBatch,
    source: Option<&ImageBatch>,
    path: &Path,
) -> Result<()> {
    if x.dim() != translated.dim() {
        return Err(Error::Contract(format!(
            "original batch {:?} and translated batch {:?} differ in shape",
            x.dim(),
            translated.dim()
        )));
    }
    let mut rows = vec![x, translated];
    rows.extend(source);
    let img = grid_image(&rows)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save_with_format(path, ImageFormat::Png)
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn batch(n: usize, offset: usize) -> ImageBatch {
        Array4::from_shape_fn((n, 3, 32, 32), |(i, c, y, x)| {
            ((i * 31 + c * 7 + y * 3 + x + offset) % 256) as f32 / 255.0
        })
    }

    #[test]
    fn layout_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g/grid.png");
        let (a, b) = (batch(8, 0), batch(8, 5));
        export_grid(&a, &b, None, &path).unwrap();
        let back = image::open(&path).unwrap().to_rgb8();
        assert_eq!(back.dimensions(), (8 * 32, 2 * 32));
        assert_eq!(
            back.get_pixel(3 * 32 + 4, 32 + 6).0[1],
            quantize(b[[3, 1, 6, 4]])
        );
        assert_eq!(back, grid_image(&[&a, &b]).unwrap());
    }

    #[test]
    fn three_rows_and_identity() {
        let a = batch(4, 2);
        let img = grid_image(&[&a, &a, &batch(4, 9)]).unwrap();
        assert_eq!(img.dimensions(), (4 * 32, 3 * 32));
        for y in 0..32 {
            for x in 0..128 {
                assert_eq!(img.get_pixel(x, y), img.get_pixel(x, y + 32));
            }
        }
    }

    #[test]
    fn shape_mismatch() {
        assert!(export_grid(
            &batch(2, 0),
            &batch(3, 0),
            None,
            Path::new("/tmp/never.png")
        )
        .is_err());
    }
}
