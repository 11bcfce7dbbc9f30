//! Visual crop & mark: draw a green 1-pixel marker around a detection and
//! crop a region twice the box size around it.
//!
//! Pixel conventions: a real-valued box is rasterized by rounding each
//! corner to the nearest integer (halves round up). The rounded box covers
//! the half-open pixel ranges `[x1, x2) x [y1, y2)`, so the marker occupies
//! columns `x1` and `x2 - 1` and rows `y1` and `y2 - 1`. Crop regions are
//! half-open as well and are clamped to the image without padding.

use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, RgbImage};
use thiserror::Error;

use crate::geometry::{BBox, Modality};
use crate::pairing::PairedDetection;

pub const MARKER_COLOR: [u8; 3] = [0, 255, 0];

#[derive(Debug, Error)]
pub enum VcmError {
    #[error("pixel buffer holds {got} bytes, expected {expected} for {width}x{height} RGB")]
    BufferSize {
        width: u32,
        height: u32,
        expected: usize,
        got: usize,
    },
    #[error("image dimensions must be at least 1x1")]
    EmptyImage,
    #[error("box {bbox} lies outside the {width}x{height} image")]
    OutsideImage { bbox: BBox, width: u32, height: u32 },
    #[error("pair {pair_index}: {source}")]
    Pair {
        pair_index: usize,
        #[source]
        source: Box<VcmError>,
    },
    #[error("image codec: {0}")]
    Codec(#[from] image::ImageError),
}

/// 8-bit RGB raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageBuffer {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl ImageBuffer {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self, VcmError> {
        if width == 0 || height == 0 {
            return Err(VcmError::EmptyImage);
        }
        let expected = width as usize * height as usize * 3;
        if pixels.len() != expected {
            return Err(VcmError::BufferSize {
                width,
                height,
                expected,
                got: pixels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Result<Self, VcmError> {
        let n = width as usize * height as usize;
        Self::new(width, height, rgb.repeat(n))
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = self.offset(x, y);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set_pixel(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = self.offset(x, y);
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    fn offset(&self, x: u32, y: u32) -> usize {
        assert!(
            x < self.width && y < self.height,
            "pixel ({x}, {y}) out of bounds"
        );
        (y as usize * self.width as usize + x as usize) * 3
    }

    /// Decodes any supported image file; grayscale is replicated to RGB.
    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self, VcmError> {
        let img = image::load_from_memory(bytes)?.to_rgb8();
        let (w, h) = img.dimensions();
        Self::new(w, h, img.into_raw())
    }

    pub fn open(path: &Path) -> Result<Self, VcmError> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        Self::new(w, h, img.into_raw())
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>, VcmError> {
        let img = RgbImage::from_raw(self.width, self.height, self.pixels.clone())
            .expect("dimensions checked at construction");
        let mut out = Cursor::new(Vec::new());
        img.write_to(&mut out, ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    pub fn save_png(&self, path: &Path) -> Result<(), VcmError> {
        std::fs::write(path, self.to_png_bytes()?).map_err(|e| VcmError::Codec(e.into()))
    }
}

/// Integer pixel rectangle, half-open on the right and bottom.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelRect {
    pub x1: i64,
    pub y1: i64,
    pub x2: i64,
    pub y2: i64,
}

impl PixelRect {
    pub fn width(&self) -> i64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> i64 {
        self.y2 - self.y1
    }

    pub fn contains(&self, x: i64, y: i64) -> bool {
        x >= self.x1 && x < self.x2 && y >= self.y1 && y < self.y2
    }

    /// Whether `(x, y)` lies on the 1-pixel border of this rectangle.
    pub fn on_perimeter(&self, x: i64, y: i64) -> bool {
        self.contains(x, y)
            && (x == self.x1 || x == self.x2 - 1 || y == self.y1 || y == self.y2 - 1)
    }

    fn to_bbox(self) -> BBox {
        BBox::new(
            self.x1 as f64,
            self.y1 as f64,
            self.x2 as f64,
            self.y2 as f64,
        )
        .expect("pixel rects are non-empty")
    }
}

fn round_half_up(v: f64) -> i64 {
    (v + 0.5).floor() as i64
}

/// Rounds a box to pixel corners, keeping at least one pixel per axis.
pub fn rasterize(bbox: &BBox) -> PixelRect {
    let x1 = round_half_up(bbox.x1());
    let y1 = round_half_up(bbox.y1());
    let x2 = round_half_up(bbox.x2()).max(x1 + 1);
    let y2 = round_half_up(bbox.y2()).max(y1 + 1);
    PixelRect { x1, y1, x2, y2 }
}

/// Region of twice the marker's width and height centred on it, before
/// clamping. Odd sizes put the extra pixel on the right / bottom.
pub fn unclamped_region(marker: &PixelRect) -> PixelRect {
    let (w, h) = (marker.width(), marker.height());
    let x1 = marker.x1 - w.div_euclid(2);
    let y1 = marker.y1 - h.div_euclid(2);
    PixelRect {
        x1,
        y1,
        x2: x1 + 2 * w,
        y2: y1 + 2 * h,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarkedCrop {
    pub image: ImageBuffer,
    pub source_box: BBox,
    /// Crop bounds in source-image pixels.
    pub crop_region: BBox,
    /// Marker rectangle in source-image pixels.
    pub marker: PixelRect,
    pub pair_index: usize,
}

pub fn crop_and_mark(image: &ImageBuffer, bbox: &BBox) -> Result<MarkedCrop, VcmError> {
    let (iw, ih) = (image.width as i64, image.height as i64);
    let marker = rasterize(bbox);
    if marker.x2 <= 0 || marker.y2 <= 0 || marker.x1 >= iw || marker.y1 >= ih {
        return Err(VcmError::OutsideImage {
            bbox: *bbox,
            width: image.width,
            height: image.height,
        });
    }
    let raw = unclamped_region(&marker);
    let region = PixelRect {
        x1: raw.x1.max(0),
        y1: raw.y1.max(0),
        x2: raw.x2.min(iw),
        y2: raw.y2.min(ih),
    };

    let (cw, ch) = (region.width() as u32, region.height() as u32);
    let row_bytes = cw as usize * 3;
    let mut pixels = Vec::with_capacity(row_bytes * ch as usize);
    for y in region.y1..region.y2 {
        let start = image.offset(region.x1 as u32, y as u32);
        pixels.extend_from_slice(&image.pixels[start..start + row_bytes]);
    }
    let mut crop = ImageBuffer::new(cw, ch, pixels)?;

    for y in marker.y1.max(region.y1)..marker.y2.min(region.y2) {
        for x in marker.x1.max(region.x1)..marker.x2.min(region.x2) {
            if marker.on_perimeter(x, y) {
                crop.set_pixel((x - region.x1) as u32, (y - region.y1) as u32, MARKER_COLOR);
            }
        }
    }

    Ok(MarkedCrop {
        image: crop,
        source_box: *bbox,
        crop_region: region.to_bbox(),
        marker,
        pair_index: 0,
    })
}

/// Crops every pair's `side` box out of `image`; output `i` belongs to pair `i`.
pub fn vcm_batch(
    image: &ImageBuffer,
    pairs: &[PairedDetection],
    side: Modality,
) -> Result<Vec<MarkedCrop>, VcmError> {
    pairs
        .iter()
        .enumerate()
        .map(|(pair_index, pair)| {
            crop_and_mark(image, pair.bbox(side))
                .map(|mut c| {
                    c.pair_index = pair_index;
                    c
                })
                .map_err(|e| VcmError::Pair {
                    pair_index,
                    source: Box::new(e),
                })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Detection;
    use crate::pairing::{dpair, PairingConfig, Provenance};

    fn gradient(w: u32, h: u32) -> ImageBuffer {
        let mut px = Vec::new();
        for y in 0..h {
            for x in 0..w {
                px.extend_from_slice(&[(x % 256) as u8, (y % 256) as u8, ((x + y) % 200) as u8]);
            }
        }
        ImageBuffer::new(w, h, px).unwrap()
    }

    fn bx(c: [f64; 4]) -> BBox {
        BBox::try_from(c).unwrap()
    }

    #[test]
    fn centred_crop() {
        let img = gradient(100, 100);
        let c = crop_and_mark(&img, &bx([40., 40., 60., 60.])).unwrap();
        assert_eq!(c.crop_region.to_array(), [30., 30., 70., 70.]);
        assert_eq!((c.image.width(), c.image.height()), (40, 40));
        // source (40, 40) sits at crop (10, 10)
        assert_eq!(c.image.pixel(10, 10), MARKER_COLOR);
        assert_eq!(c.image.pixel(29, 29), MARKER_COLOR);
        assert_eq!(c.image.pixel(11, 11), img.pixel(41, 41));
        assert_eq!(c.image.pixel(0, 0), img.pixel(30, 30));
    }

    #[test]
    fn crop_clamps_at_border() {
        let img = gradient(100, 100);
        let c = crop_and_mark(&img, &bx([0., 0., 20., 20.])).unwrap();
        assert_eq!(c.crop_region.to_array(), [0., 0., 30., 30.]);
        assert_eq!((c.image.width(), c.image.height()), (30, 30));
    }

    #[test]
    fn partial_marker_at_edge() {
        let img = gradient(50, 50);
        let c = crop_and_mark(&img, &bx([40., 10., 60., 20.])).unwrap();
        assert_eq!(c.crop_region.to_array(), [30., 5., 50., 25.]);
        // left edge visible, right edge (x = 59) clipped away
        assert_eq!(c.image.pixel(10, 7), MARKER_COLOR);
        assert_eq!(c.image.pixel(19, 5), MARKER_COLOR); // top row
        assert_eq!(c.image.pixel(19, 8), img.pixel(49, 13));
    }

    #[test]
    fn rounding_is_half_up() {
        let r = rasterize(&bx([1.5, 2.49, 3.5, 4.5]));
        assert_eq!(
            r,
            PixelRect {
                x1: 2,
                y1: 2,
                x2: 4,
                y2: 5
            }
        );
        let r = rasterize(&bx([-1.5, 0.0, 0.2, 0.3]));
        assert_eq!(
            r,
            PixelRect {
                x1: -1,
                y1: 0,
                x2: 0,
                y2: 1
            }
        );
    }

    #[test]
    fn outside_image_is_an_error() {
        let img = gradient(10, 10);
        assert!(matches!(
            crop_and_mark(&img, &bx([20., 20., 30., 30.])),
            Err(VcmError::OutsideImage { .. })
        ));
        assert!(crop_and_mark(&img, &bx([-5., -5., 0.4, 3.])).is_err());
    }

    #[test]
    fn source_not_mutated() {
        let img = gradient(64, 64);
        let before = img.clone();
        let a = crop_and_mark(&img, &bx([10., 10., 30., 40.])).unwrap();
        let b = crop_and_mark(&img, &bx([10., 10., 30., 40.])).unwrap();
        assert_eq!(img, before);
        assert_eq!(a.image.as_bytes(), b.image.as_bytes());
    }

    #[test]
    fn batch_follows_pair_order() {
        let img = gradient(100, 100);
        assert!(vcm_batch(&img, &[], Modality::Rgb).unwrap().is_empty());

        let d = |m, c: [f64; 4], s| Detection::new(bx(c), s, m, "person", "i").unwrap();
        let rgb = [
            d(Modality::Rgb, [10., 10., 20., 30.], 0.9),
            d(Modality::Rgb, [60., 60., 70., 80.], 0.8),
        ];
        let t = [d(Modality::Thermal, [10., 11., 20., 31.], 0.7)];
        let pairs = dpair(&rgb, &t, &PairingConfig::default()).unwrap();
        let crops = vcm_batch(&img, &pairs, Modality::Rgb).unwrap();
        assert_eq!(crops.len(), 2);
        assert_eq!(crops[0].pair_index, 0);
        assert_eq!(crops[1].pair_index, 1);
        assert_eq!(crops[1].source_box, rgb[1].bbox);

        // override pair: the thermal side reuses the copied RGB box
        assert_eq!(pairs[1].provenance, Provenance::OverrideFromRgb);
        let tcrops = vcm_batch(&img, &pairs, Modality::Thermal).unwrap();
        assert_eq!(tcrops[1].source_box, rgb[1].bbox);
    }

    #[test]
    fn batch_error_names_pair() {
        let img = gradient(20, 20);
        let d = Detection::new(
            bx([50., 50., 60., 60.]),
            0.5,
            Modality::Thermal,
            "person",
            "i",
        )
        .unwrap();
        let pairs = dpair(&[], &[d], &PairingConfig::default()).unwrap();
        let err = vcm_batch(&img, &pairs, Modality::Rgb).unwrap_err();
        assert!(matches!(err, VcmError::Pair { pair_index: 0, .. }));
    }

    #[test]
    fn png_round_trip_is_lossless() {
        let img = gradient(17, 9);
        let back = ImageBuffer::from_png_bytes(&img.to_png_bytes().unwrap()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn buffer_size_checked() {
        assert!(ImageBuffer::new(2, 2, vec![0; 11]).is_err());
        assert!(ImageBuffer::new(0, 2, vec![]).is_err());
    }
}
