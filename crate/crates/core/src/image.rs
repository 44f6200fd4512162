//! RGB images with floating-point channels in `[0, 1]`, plus PNG helpers.

use std::io::Cursor;
use std::path::Path;

use ndarray::Array3;

use crate::error::{Error, Result};

/// An `H x W x 3` image with channels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    data: Array3<f64>,
}

impl Image {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (h, w, c) = data.dim();
        if c != 3 {
            return Err(Error::Dimension(format!("expected 3 channels, got {c}")));
        }
        if h == 0 || w == 0 {
            return Err(Error::Dimension("image has zero extent".into()));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Input(format!("non-finite pixel value {bad}")));
        }
        Ok(Self { data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let data = Array3::from_shape_fn((height, width, 3), |(_, _, c)| rgb[c]);
        Self { data }
    }

    /// Converts 8-bit channels at the ingestion boundary.
    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != height * width * 3 {
            return Err(Error::Dimension(format!(
                "expected {} bytes for {height}x{width} RGB, got {}",
                height * width * 3,
                bytes.len()
            )));
        }
        let data = Array3::from_shape_fn((height, width, 3), |(y, x, c)| {
            f64::from(bytes[(y * width + x) * 3 + c]) / 255.0
        });
        Self::new(data)
    }

    /// Copy with every channel clamped to `[0, 1]`.
    pub fn clamped(&self) -> Self {
        Self { data: self.data.mapv(|v| v.clamp(0.0, 1.0)) }
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        [self.data[[y, x, 0]], self.data[[y, x, 1]], self.data[[y, x, 2]]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        for (c, v) in rgb.into_iter().enumerate() {
            self.data[[y, x, c]] = v;
        }
    }

    /// Fills the axis-aligned rectangle `[y0, y1) x [x0, x1)`, clipped to the image.
    pub fn fill_rect(&mut self, y0: usize, x0: usize, y1: usize, x1: usize, rgb: [f64; 3]) {
        for y in y0..y1.min(self.height()) {
            for x in x0..x1.min(self.width()) {
                self.set_pixel(y, x, rgb);
            }
        }
    }

    /// Clamps to `[0, 1]` and quantizes to 8-bit RGB.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let buf = image::RgbImage::from_raw(
            self.width() as u32,
            self.height() as u32,
            self.to_rgb8(),
        )
        .ok_or_else(|| Error::Image("buffer size mismatch".into()))?;
        let mut out = Cursor::new(Vec::new());
        buf.write_to(&mut out, image::ImageFormat::Png)
            .map_err(|e| Error::Image(e.to_string()))?;
        Ok(out.into_inner())
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_png_bytes()?;
        std::fs::write(path.as_ref(), bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory(bytes)
            .map_err(|e| Error::Image(e.to_string()))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        Self::from_rgb8(h as usize, w as usize, img.as_raw())
    }
}

/// Encodes a boolean mask as a 1-bit grayscale PNG (true = white).
pub fn encode_mask_png(bits: &ndarray::Array2<bool>) -> Result<Vec<u8>> {
    let (h, w) = bits.dim();
    let stride = w.div_ceil(8);
    let mut packed = vec![0u8; stride * h];
    for ((y, x), &on) in bits.indexed_iter() {
        if on {
            packed[y * stride + x / 8] |= 0x80 >> (x % 8);
        }
    }
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, w as u32, h as u32);
        encoder.set_color(png::ColorType::Grayscale);
        encoder.set_depth(png::BitDepth::One);
        let mut writer = encoder
            .write_header()
            .map_err(|e| Error::Image(e.to_string()))?;
        writer
            .write_image_data(&packed)
            .map_err(|e| Error::Image(e.to_string()))?;
    }
    Ok(out)
}

/// Decodes a mask PNG; any nonzero luma counts as set.
pub fn decode_mask_png(bytes: &[u8]) -> Result<ndarray::Array2<bool>> {
    let img = image::load_from_memory(bytes)
        .map_err(|e| Error::Image(e.to_string()))?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok(ndarray::Array2::from_shape_fn(
        (h as usize, w as usize),
        |(y, x)| img.get_pixel(x as u32, y as u32)[0] > 0,
    ))
}

/// Blends a translucent red tint over masked pixels.
pub fn overlay_mask(image: &Image, bits: &ndarray::Array2<bool>, opacity: f64) -> Result<Image> {
    if bits.dim() != image.dims() {
        return Err(Error::Dimension(format!(
            "mask {:?} vs image {:?}",
            bits.dim(),
            image.dims()
        )));
    }
    let mut out = image.clone();
    for ((y, x), &on) in bits.indexed_iter() {
        if on {
            let p = image.pixel(y, x);
            out.set_pixel(
                y,
                x,
                [
                    p[0] * (1.0 - opacity) + opacity,
                    p[1] * (1.0 - opacity),
                    p[2] * (1.0 - opacity),
                ],
            );
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_finite_pixels() {
        let mut data = Array3::zeros((2, 2, 3));
        data[[0, 1, 2]] = f64::NAN;
        assert!(matches!(Image::new(data), Err(Error::Input(_))));
    }

    #[test]
    fn mask_png_round_trips_with_odd_width() {
        let bits = ndarray::Array2::from_shape_fn((5, 11), |(y, x)| (x + y) % 3 == 0);
        let png = encode_mask_png(&bits).unwrap();
        assert_eq!(decode_mask_png(&png).unwrap(), bits);
    }

    #[test]
    fn png_round_trip_preserves_8bit_values() {
        let bytes: Vec<u8> = (0..4 * 3 * 3).map(|i| (i * 7) as u8).collect();
        let img = Image::from_rgb8(4, 3, &bytes).unwrap();
        let back = Image::decode(&img.to_png_bytes().unwrap()).unwrap();
        assert_eq!(back.to_rgb8(), bytes);
    }
}
