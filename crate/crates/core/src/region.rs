//! Pixel regions to visual-token selections.
//!
//! Annotations come as a binary object mask plus a bounding box around the
//! edited, count-relevant part. Their intersection (Mask-BB) is the minimal
//! evidence region. Any of the three regions can be mapped onto the model's
//! visual-token grid: a token is selected when strictly more than
//! `threshold` of its cell's pixels belong to the region.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RegionKind;

/// Default fraction of a token cell that must be covered (strictly exceeded).
pub const DEFAULT_TOKEN_THRESHOLD: f64 = 0.10;

#[derive(Debug, Error)]
pub enum RegionError {
    #[error("region is {found_w}x{found_h} pixels but the token grid expects {expected_w}x{expected_h}")]
    DimensionMismatch {
        expected_w: u32,
        expected_h: u32,
        found_w: u32,
        found_h: u32,
    },
    #[error("invalid token grid: {0}")]
    InvalidGrid(String),
    #[error("threshold {0} outside [0, 1)")]
    InvalidThreshold(f64),
    #[error("invalid annotation: {0}")]
    InvalidAnnotation(String),
    #[error("failed to decode mask {path}: {reason}")]
    MaskDecode { path: String, reason: String },
}

/// Axis-aligned box in pixels, inclusive-exclusive: a pixel `(x, y)` is inside
/// iff `x_min <= x < x_max` and `y_min <= y < y_max`.
///
/// Serialized as the four integers `[x_min, y_min, x_max, y_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[u32; 4]", into = "[u32; 4]")]
pub struct BBox {
    pub x_min: u32,
    pub y_min: u32,
    pub x_max: u32,
    pub y_max: u32,
}

impl BBox {
    pub fn new(x_min: u32, y_min: u32, x_max: u32, y_max: u32) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    #[inline]
    pub fn contains(&self, x: u32, y: u32) -> bool {
        self.x_min <= x && x < self.x_max && self.y_min <= y && y < self.y_max
    }

    pub fn is_empty(&self) -> bool {
        self.x_min >= self.x_max || self.y_min >= self.y_max
    }

    pub fn fits(&self, width: u32, height: u32) -> bool {
        self.x_max <= width && self.y_max <= height
    }
}

impl From<[u32; 4]> for BBox {
    fn from(v: [u32; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [u32; 4] {
    fn from(b: BBox) -> Self {
        [b.x_min, b.y_min, b.x_max, b.y_max]
    }
}

/// Row-major binary pixel grid.
#[derive(Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: u32,
    height: u32,
    pixels: Vec<bool>,
}

impl fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BinaryMask")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("set", &self.count_set())
            .finish()
    }
}

impl BinaryMask {
    pub fn zeros(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            pixels: vec![false; width as usize * height as usize],
        }
    }

    pub fn ones(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            pixels: vec![true; width as usize * height as usize],
        }
    }

    /// Builds a mask from row-major pixels. Returns `None` on a length mismatch.
    pub fn from_pixels(width: u32, height: u32, pixels: Vec<bool>) -> Option<Self> {
        (pixels.len() == width as usize * height as usize).then_some(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        let mut pixels = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            pixels,
        }
    }

    /// Rasterizes a bounding box onto a `width` × `height` canvas.
    pub fn from_bbox(width: u32, height: u32, bbox: &BBox) -> Self {
        Self::from_fn(width, height, |x, y| bbox.contains(x, y))
    }

    /// Loads a lossless single-channel mask whose pixels are 0 or 255.
    pub fn load(path: &Path) -> Result<Self, RegionError> {
        let err = |reason: String| RegionError::MaskDecode {
            path: path.display().to_string(),
            reason,
        };
        let img = image::open(path).map_err(|e| err(e.to_string()))?;
        if img.color().channel_count() != 1 {
            return Err(err(format!(
                "expected a single-channel image, found {:?}",
                img.color()
            )));
        }
        let luma = img.into_luma8();
        let (width, height) = luma.dimensions();
        let mut pixels = Vec::with_capacity(width as usize * height as usize);
        for (x, y, p) in luma.enumerate_pixels() {
            match p.0[0] {
                0 => pixels.push(false),
                255 => pixels.push(true),
                v => return Err(err(format!("pixel ({x}, {y}) has value {v}, expected 0 or 255"))),
            }
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    /// Writes the mask as an 8-bit grayscale PNG with values {0, 255}.
    pub fn save_png(&self, path: &Path) -> Result<(), image::ImageError> {
        let raw: Vec<u8> = self.pixels.iter().map(|&p| if p { 255 } else { 0 }).collect();
        image::save_buffer(path, &raw, self.width, self.height, image::ExtendedColorType::L8)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.pixels[y as usize * self.width as usize + x as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        let w = self.width as usize;
        self.pixels[y as usize * w + x as usize] = value;
    }

    pub fn count_set(&self) -> usize {
        self.pixels.iter().filter(|&&p| p).count()
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.pixels.iter().zip(&other.pixels).all(|(&a, &b)| !a || b)
    }
}

/// Pixel-space annotation of the edited part of an object.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionAnnotation {
    pub mask: BinaryMask,
    pub bbox: BBox,
}

impl RegionAnnotation {
    /// Checks the annotation invariants: bbox non-empty and inside the image,
    /// and the mask overlapping the bbox.
    pub fn new(mask: BinaryMask, bbox: BBox) -> Result<Self, RegionError> {
        if bbox.is_empty() {
            return Err(RegionError::InvalidAnnotation(format!(
                "bbox {:?} is empty",
                <[u32; 4]>::from(bbox)
            )));
        }
        if !bbox.fits(mask.width(), mask.height()) {
            return Err(RegionError::InvalidAnnotation(format!(
                "bbox {:?} exceeds the {}x{} image",
                <[u32; 4]>::from(bbox),
                mask.width(),
                mask.height()
            )));
        }
        let overlap = (bbox.y_min..bbox.y_max)
            .any(|y| (bbox.x_min..bbox.x_max).any(|x| mask.get(x, y)));
        if !overlap {
            return Err(RegionError::InvalidAnnotation(
                "mask and bbox do not intersect".to_string(),
            ));
        }
        Ok(Self { mask, bbox })
    }

    pub fn width(&self) -> u32 {
        self.mask.width()
    }

    pub fn height(&self) -> u32 {
        self.mask.height()
    }
}

/// The model's visual-token grid laid over the input image.
///
/// Cell `k` along an axis spans pixels `[⌊k·image/grid⌋, ⌊(k+1)·image/grid⌋)`,
/// so grids that do not divide the image still tile it exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenGrid {
    pub grid_w: u32,
    pub grid_h: u32,
    pub image_w: u32,
    pub image_h: u32,
}

impl TokenGrid {
    pub fn new(grid_w: u32, grid_h: u32, image_w: u32, image_h: u32) -> Result<Self, RegionError> {
        if grid_w == 0 || grid_h == 0 {
            return Err(RegionError::InvalidGrid(format!(
                "grid {grid_w}x{grid_h} must be at least 1x1"
            )));
        }
        if grid_w > image_w || grid_h > image_h {
            return Err(RegionError::InvalidGrid(format!(
                "grid {grid_w}x{grid_h} is finer than the {image_w}x{image_h} image"
            )));
        }
        Ok(Self {
            grid_w,
            grid_h,
            image_w,
            image_h,
        })
    }

    pub fn len(&self) -> usize {
        self.grid_w as usize * self.grid_h as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Pixel span `[start, end)` of column `col`.
    pub fn col_span(&self, col: u32) -> (u32, u32) {
        (
            boundary(col, self.image_w, self.grid_w),
            boundary(col + 1, self.image_w, self.grid_w),
        )
    }

    /// Pixel span `[start, end)` of row `row`.
    pub fn row_span(&self, row: u32) -> (u32, u32) {
        (
            boundary(row, self.image_h, self.grid_h),
            boundary(row + 1, self.image_h, self.grid_h),
        )
    }

    pub fn index(&self, col: u32, row: u32) -> usize {
        row as usize * self.grid_w as usize + col as usize
    }
}

fn boundary(k: u32, pixels: u32, cells: u32) -> u32 {
    (u64::from(k) * u64::from(pixels) / u64::from(cells)) as u32
}

/// Row-major token indices on a [`TokenGrid`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSelection {
    pub grid: TokenGrid,
    pub indices: BTreeSet<usize>,
}

impl TokenSelection {
    pub fn all(grid: TokenGrid) -> Self {
        Self {
            grid,
            indices: (0..grid.len()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn is_subset(&self, other: &TokenSelection) -> bool {
        self.indices.is_subset(&other.indices)
    }

    pub fn to_vec(&self) -> Vec<usize> {
        self.indices.iter().copied().collect()
    }
}

/// Pixels set in the mask AND inside the bounding box (Mask-BB).
pub fn intersect_mask_bbox(annotation: &RegionAnnotation) -> BinaryMask {
    let bbox = annotation.bbox;
    let mask = &annotation.mask;
    BinaryMask::from_fn(mask.width(), mask.height(), |x, y| {
        bbox.contains(x, y) && mask.get(x, y)
    })
}

/// Selects every token whose cell is covered by strictly more than
/// `threshold` of region pixels.
///
/// Per-cell counts come from a summed-area table, so the cost is linear in
/// the pixel count regardless of the grid size.
pub fn pixels_to_tokens(
    region: &BinaryMask,
    grid: &TokenGrid,
    threshold: f64,
) -> Result<TokenSelection, RegionError> {
    if region.width() != grid.image_w || region.height() != grid.image_h {
        return Err(RegionError::DimensionMismatch {
            expected_w: grid.image_w,
            expected_h: grid.image_h,
            found_w: region.width(),
            found_h: region.height(),
        });
    }
    if !(0.0..1.0).contains(&threshold) {
        return Err(RegionError::InvalidThreshold(threshold));
    }

    let sat = SummedArea::new(region);
    let mut indices = BTreeSet::new();
    for row in 0..grid.grid_h {
        let (y0, y1) = grid.row_span(row);
        for col in 0..grid.grid_w {
            let (x0, x1) = grid.col_span(col);
            let area = u64::from(x1 - x0) * u64::from(y1 - y0);
            let covered = sat.sum(x0, y0, x1, y1);
            if area > 0 && covered as f64 / area as f64 > threshold {
                indices.insert(grid.index(col, row));
            }
        }
    }
    Ok(TokenSelection {
        grid: *grid,
        indices,
    })
}

/// Token selection for one of the supported region kinds.
pub fn region_tokens(
    annotation: &RegionAnnotation,
    kind: RegionKind,
    grid: &TokenGrid,
    threshold: f64,
) -> Result<TokenSelection, RegionError> {
    match kind {
        RegionKind::WholeImg => Ok(TokenSelection::all(*grid)),
        RegionKind::Mask => pixels_to_tokens(&annotation.mask, grid, threshold),
        RegionKind::BB => {
            let raster = BinaryMask::from_bbox(annotation.width(), annotation.height(), &annotation.bbox);
            pixels_to_tokens(&raster, grid, threshold)
        }
        RegionKind::MaskBB => pixels_to_tokens(&intersect_mask_bbox(annotation), grid, threshold),
    }
}

struct SummedArea {
    stride: usize,
    table: Vec<u64>,
}

impl SummedArea {
    fn new(mask: &BinaryMask) -> Self {
        let w = mask.width() as usize;
        let h = mask.height() as usize;
        let stride = w + 1;
        let mut table = vec![0u64; stride * (h + 1)];
        for y in 0..h {
            let mut row_sum = 0u64;
            for x in 0..w {
                row_sum += u64::from(mask.pixels[y * w + x]);
                table[(y + 1) * stride + x + 1] = table[y * stride + x + 1] + row_sum;
            }
        }
        Self { stride, table }
    }

    fn sum(&self, x0: u32, y0: u32, x1: u32, y1: u32) -> u64 {
        let at = |x: u32, y: u32| self.table[y as usize * self.stride + x as usize];
        at(x1, y1) + at(x0, y0) - at(x0, y1) - at(x1, y0)
    }
}
