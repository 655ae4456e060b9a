//! Directory datasets: `labels.csv` (`filename,label` rows) next to 8-bit
//! grayscale or RGB PNG files.

use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn load_directory_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let csv_path = dir.join("labels.csv");
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(&csv_path)
        .map_err(|e| Error::Data(format!("{}: {e}", csv_path.display())))?;
    let mut entries = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Data(format!("{}: {e}", csv_path.display())))?;
        if record.len() != 2 {
            return Err(Error::Data(format!(
                "{} row {}: expected `filename,label`",
                csv_path.display(),
                row + 1
            )));
        }
        match record[1].parse::<usize>() {
            Ok(label) => entries.push((record[0].to_string(), label)),
            // A non-numeric label on the first row is a header.
            Err(_) if row == 0 => continue,
            Err(_) => {
                return Err(Error::Data(format!(
                    "{} row {}: label `{}` is not a class index",
                    csv_path.display(),
                    row + 1,
                    &record[1]
                )))
            }
        }
    }
    let mut shape = None;
    let mut pixels = Vec::new();
    let mut labels = Vec::with_capacity(entries.len());
    for (name, label) in entries {
        let path = dir.join(&name);
        let img = image::open(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let (channels, planes) = match img {
            image::DynamicImage::ImageLuma8(g) => (1, vec![g.into_raw()]),
            image::DynamicImage::ImageLumaA8(_) => (1, vec![img.to_luma8().into_raw()]),
            image::DynamicImage::ImageRgb8(_) | image::DynamicImage::ImageRgba8(_) => {
                let rgb = img.to_rgb8().into_raw();
                let planes = (0..3)
                    .map(|ch| rgb.iter().skip(ch).step_by(3).copied().collect())
                    .collect();
                (3, planes)
            }
            other => {
                return Err(Error::Data(format!(
                    "{}: unsupported pixel format {:?} (need 8-bit gray or RGB)",
                    path.display(),
                    other.color()
                )))
            }
        };
        match shape {
            None => shape = Some((channels, h, w)),
            Some(s) if s != (channels, h, w) => {
                return Err(Error::Data(format!(
                    "{}: image is {channels}×{h}×{w}, expected {}×{}×{}",
                    path.display(),
                    s.0,
                    s.1,
                    s.2
                )))
            }
            _ => {}
        }
        for plane in planes {
            pixels.extend(plane.iter().map(|&b: &u8| b as f32 / 255.0));
        }
        labels.push(label);
    }
    let (c, h, w) = shape.ok_or_else(|| Error::Data(format!("{}: no samples", csv_path.display())))?;
    let class_count = labels.iter().copied().max().unwrap_or(0) + 1;
    let n = labels.len();
    Dataset::new(Tensor::from_vec(&[n, c, h, w], pixels), labels, class_count)
}
