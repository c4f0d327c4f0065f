//! JPEG round-trip augmentation through the `image` codecs.

use std::io::Cursor;

use digress_core::eval::Augmenter;
use digress_core::{Error, Result, Tensor};
use image::codecs::jpeg::JpegEncoder;
use image::ImageFormat;

use crate::io;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Jpeg {
    /// 1..=100.
    pub quality: u8,
}

impl Default for Jpeg {
    fn default() -> Self {
        Self { quality: 80 }
    }
}

impl Augmenter for Jpeg {
    fn name(&self) -> String {
        "jpeg".into()
    }

    fn apply(&self, image: &Tensor, _seed: u64) -> Result<Tensor> {
        jpeg_round_trip(image, self.quality)
    }
}

pub fn jpeg_round_trip(image: &Tensor, quality: u8) -> Result<Tensor> {
    if !(1..=100).contains(&quality) {
        return Err(Error::OutOfRange {
            what: "jpeg quality",
            value: quality as i64,
            min: 1,
            max: 100,
        });
    }
    let rgb = io::tensor_to_rgb(image).map_err(|e| Error::Validation(e.to_string()))?;
    let mut buf = Vec::new();
    JpegEncoder::new_with_quality(&mut buf, quality)
        .encode_image(&rgb)
        .map_err(|e| Error::Validation(format!("jpeg encode: {e}")))?;
    let decoded = image::load(Cursor::new(buf), ImageFormat::Jpeg)
        .map_err(|e| Error::Validation(format!("jpeg decode: {e}")))?;
    Ok(io::rgb_to_tensor(&decoded.to_rgb8()))
}
