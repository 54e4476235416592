use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::sim::veg::{ObsRole, ShapeTag, VegKind, VegetableState};

/// Observation raster side length.
pub const IMG_SIZE: usize = 32;
/// Maximum drawable horizontal extent in pixels.
pub const DRAW_MAX: usize = 28;
/// Intensity of interior shape columns.
const FILL: f64 = 0.9;
/// Default amplitude of additive uniform pixel noise.
pub const PIXEL_NOISE: f64 = 0.05;
/// Pixels above this are treated as object when recovering a bounding box;
/// sits between the noise ceiling (0.05) and the dimmest shape pixel after
/// noise (0.15 - 0.05).
pub const BBOX_THRESHOLD: f64 = 0.075;

const LEFT_MARGIN: usize = 2;
const BAR_HALF_HEIGHT: isize = 4;
const ELLIPSE_HALF_HEIGHT: f64 = 10.5;

/// Integer pixel rectangle, x/y top-left corner, inside the image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

/// Rendered grayscale observation with its detection box.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    /// Row-major H x W pixels in [0, 1].
    pub pixels: Vec<f64>,
    pub bbox: BBox,
    pub role: ObsRole,
}

impl Observation {
    /// Rebuild an observation from raw pixels by thresholding for the box.
    pub fn from_pixels(pixels: Vec<f64>, role: ObsRole) -> Result<Self> {
        if pixels.len() != IMG_SIZE * IMG_SIZE {
            return Err(Error::DataLength { expected: IMG_SIZE * IMG_SIZE, got: pixels.len() });
        }
        let mask: Vec<bool> = pixels.iter().map(|&v| v > BBOX_THRESHOLD).collect();
        let bbox = tight_bbox(&mask)
            .ok_or(Error::EmptyInput("no object pixels above bbox threshold"))?;
        Ok(Self { pixels, bbox, role })
    }

    /// Crop the bbox region and resize it to IMG_SIZE x IMG_SIZE with
    /// nearest-neighbor sampling. This is the network input.
    pub fn crop_resized(&self) -> Result<Vec<f64>> {
        if self.bbox.w < 1 || self.bbox.h < 1 {
            return Err(Error::InvalidValue { context: "bbox extent", value: 0.0 });
        }
        let mut out = vec![0.0; IMG_SIZE * IMG_SIZE];
        for y in 0..IMG_SIZE {
            let sy = self.bbox.y + y * self.bbox.h / IMG_SIZE;
            for x in 0..IMG_SIZE {
                let sx = self.bbox.x + x * self.bbox.w / IMG_SIZE;
                out[y * IMG_SIZE + x] = self.pixels[sy * IMG_SIZE + sx];
            }
        }
        Ok(out)
    }
}

/// Tight extent of `true` pixels dilated by one pixel, clipped to bounds.
fn tight_bbox(mask: &[bool]) -> Option<BBox> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0usize, 0usize);
    for y in 0..IMG_SIZE {
        for x in 0..IMG_SIZE {
            if mask[y * IMG_SIZE + x] {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
    }
    if x0 == usize::MAX {
        return None;
    }
    let x0 = x0.saturating_sub(1);
    let y0 = y0.saturating_sub(1);
    let x1 = (x1 + 1).min(IMG_SIZE - 1);
    let y1 = (y1 + 1).min(IMG_SIZE - 1);
    Some(BBox { x: x0, y: y0, w: x1 - x0 + 1, h: y1 - y0 + 1 })
}

/// Render a piece of the given thickness.
///
/// The horizontal pixel extent is `round(thickness * 28 / l_max)` clamped
/// to [1, 28]. The trailing column is drawn dimmer in proportion to the
/// sub-pixel remainder, so the exact thickness stays decodable from the
/// raster the way partial pixel coverage does in a real camera image.
/// Vertical placement is jittered by ±2 px from the seed; uniform pixel
/// noise of the given amplitude is added and the result clamped to [0, 1].
pub fn render_with_noise(
    thickness: f64,
    kind: VegKind,
    role: ObsRole,
    seed: u64,
    noise_amp: f64,
) -> Result<Observation> {
    if !(thickness > 0.0) {
        return Err(Error::InvalidValue { context: "render thickness", value: thickness });
    }
    let profile = kind.profile();
    let scale = DRAW_MAX as f64 / profile.length_range.1;
    let extent = thickness * scale;
    let cols = (extent.round() as isize).clamp(1, DRAW_MAX as isize) as usize;
    // Position of the true extent inside the rounding bin, mapped to an
    // edge-column intensity below FILL.
    let edge = (0.3 + 0.4 * (extent - (cols as f64 - 0.5))).clamp(0.15, FILL);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter: isize = rng.gen_range(-2..=2);
    let cy = (IMG_SIZE / 2) as isize + jitter;

    let mut pixels = vec![0.0; IMG_SIZE * IMG_SIZE];
    let mut mask = vec![false; IMG_SIZE * IMG_SIZE];
    for col in 0..cols {
        let x = LEFT_MARGIN + col;
        let value = if col + 1 == cols { edge } else { FILL };
        let half = match profile.shape {
            ShapeTag::Bar => BAR_HALF_HEIGHT,
            ShapeTag::Ellipse => {
                let u = ((col as f64 + 0.5) / cols as f64) * 2.0 - 1.0;
                (ELLIPSE_HALF_HEIGHT * (1.0 - u * u).sqrt()).round() as isize
            }
        };
        for dy in -half..=half {
            let y = cy + dy;
            if (0..IMG_SIZE as isize).contains(&y) {
                pixels[y as usize * IMG_SIZE + x] = value;
                mask[y as usize * IMG_SIZE + x] = true;
            }
        }
    }
    let bbox = tight_bbox(&mask).expect("shape always draws at least one pixel");

    if noise_amp > 0.0 {
        for p in pixels.iter_mut() {
            *p = (*p + rng.gen_range(-noise_amp..noise_amp)).clamp(0.0, 1.0);
        }
    }
    Ok(Observation { pixels, bbox, role })
}

/// Render with the default pixel-noise amplitude.
pub fn render(thickness: f64, kind: VegKind, role: ObsRole, seed: u64) -> Result<Observation> {
    render_with_noise(thickness, kind, role, seed, PIXEL_NOISE)
}

/// Render the remaining piece of a vegetable state.
pub fn render_state(state: &VegetableState, seed: u64) -> Result<Observation> {
    render(state.remaining_length, state.kind, ObsRole::WholeVegetable, seed)
}

/// Render a cut slice of the given thickness.
pub fn render_slice(thickness: f64, kind: VegKind, seed: u64) -> Result<Observation> {
    render(thickness, kind, ObsRole::Slice, seed)
}
