// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;

use rlens_core::sap::Image;

use crate::error::{Error, Result};

/// Loads a PNG or binary PPM as 8-bit RGB.
pub fn load_rgb(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_owned(),
        source,
    })?;
    Ok(from_rgb8(&img.to_rgb8()))
}

pub fn from_rgb8(img: &image::RgbImage) -> Image {
    let (w, h) = img.dimensions();
    Image {
        height: h as usize,
        width: w as usize,
        channels: 3,
        data: img.as_raw().iter().map(|&b| f64::from(b)).collect(),
    }
}
