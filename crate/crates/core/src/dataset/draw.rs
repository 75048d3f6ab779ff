//! Raster primitives shared by the synthetic benchmark and the extractor's
//! auxiliary pretraining task. Every primitive reports the exact pixels it
//! painted so masks can be built from them.

use image::{Rgb, RgbImage};
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Plus,
    Ring,
    Disc,
    Square,
    Triangle,
    Bar,
}

impl Shape {
    pub const ALL: [Shape; 6] = [
        Shape::Plus,
        Shape::Ring,
        Shape::Disc,
        Shape::Square,
        Shape::Triangle,
        Shape::Bar,
    ];

    pub fn index(self) -> usize {
        Shape::ALL.iter().position(|s| *s == self).unwrap()
    }

    /// Pixel offsets inside a `size × size` box.
    pub fn offsets(self, size: u32) -> Vec<(u32, u32)> {
        let s = size as i64;
        let c = (s - 1) as f64 / 2.0;
        let thick = (s / 4).max(1);
        let mut out = Vec::new();
        for y in 0..s {
            for x in 0..s {
                let inside = match self {
                    Shape::Plus => {
                        let mid = (s - thick) / 2;
                        (x >= mid && x < mid + thick) || (y >= mid && y < mid + thick)
                    }
                    Shape::Ring => {
                        x < thick || y < thick || x >= s - thick || y >= s - thick
                    }
                    Shape::Disc => {
                        let dx = x as f64 - c;
                        let dy = y as f64 - c;
                        dx * dx + dy * dy <= (c + 0.5) * (c + 0.5)
                    }
                    Shape::Square => true,
                    Shape::Triangle => {
                        // Apex at top, base along the bottom row.
                        let half_width = (y as f64 + 1.0) / s as f64 * (c + 0.5);
                        (x as f64 - c).abs() <= half_width
                    }
                    Shape::Bar => {
                        let h = (s / 3).max(1);
                        let top = (s - h) / 2;
                        y >= top && y < top + h
                    }
                };
                if inside {
                    out.push((x as u32, y as u32));
                }
            }
        }
        out
    }
}

pub const RED: [u8; 3] = [215, 40, 40];
pub const BLUE: [u8; 3] = [40, 70, 215];
pub const GREEN: [u8; 3] = [40, 170, 60];
pub const YELLOW: [u8; 3] = [230, 200, 30];
pub const WHITE: [u8; 3] = [245, 245, 245];
pub const BLACK: [u8; 3] = [20, 20, 20];
pub const DARK: [u8; 3] = [80, 80, 80];

pub const PALETTE: [[u8; 3]; 6] = [RED, BLUE, GREEN, YELLOW, WHITE, DARK];

/// Mottled gray background; also returns its base gray level.
pub fn background(width: u32, height: u32, rng: &mut impl Rng) -> (RgbImage, i32) {
    let base: i32 = rng.random_range(115..=145);
    let mut img = RgbImage::new(width, height);
    for p in img.pixels_mut() {
        *p = noisy_gray(base, rng);
    }
    (img, base)
}

fn noisy_gray(base: i32, rng: &mut impl Rng) -> Rgb<u8> {
    let v = (base + rng.random_range(-14..=14)).clamp(0, 255);
    let tint = |d: i32| (v + d).clamp(0, 255) as u8;
    Rgb([
        tint(rng.random_range(-3..=3)),
        tint(rng.random_range(-3..=3)),
        tint(rng.random_range(-3..=3)),
    ])
}

/// Paints `shape` with `color` (plus per-pixel jitter) at `(x0, y0)` and
/// returns the painted absolute coordinates.
pub fn paint(
    img: &mut RgbImage,
    shape: Shape,
    size: u32,
    x0: u32,
    y0: u32,
    color: [u8; 3],
    rng: &mut impl Rng,
) -> Vec<(u32, u32)> {
    let mut painted = Vec::new();
    for (dx, dy) in shape.offsets(size) {
        let (x, y) = (x0 + dx, y0 + dy);
        if x < img.width() && y < img.height() {
            let mut j = |c: u8| (c as i32 + rng.random_range(-10..=10)).clamp(0, 255) as u8;
            img.put_pixel(x, y, Rgb([j(color[0]), j(color[1]), j(color[2])]));
            painted.push((x, y));
        }
    }
    painted
}

/// Repaints the given pixels with background noise around `base`.
pub fn erase(img: &mut RgbImage, pixels: &[(u32, u32)], base: i32, rng: &mut impl Rng) {
    for &(x, y) in pixels {
        img.put_pixel(x, y, noisy_gray(base, rng));
    }
}

/// Axis-aligned box used for non-overlapping placement.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl Rect {
    /// True when the boxes, each grown by `margin`, intersect.
    pub fn near(&self, other: &Rect, margin: u32) -> bool {
        let (ax0, ay0) = (self.x as i64 - margin as i64, self.y as i64 - margin as i64);
        let (ax1, ay1) = (
            (self.x + self.w + margin) as i64,
            (self.y + self.h + margin) as i64,
        );
        let (bx0, by0) = (other.x as i64, other.y as i64);
        let (bx1, by1) = ((other.x + other.w) as i64, (other.y + other.h) as i64);
        ax0 < bx1 && bx0 < ax1 && ay0 < by1 && by0 < ay1
    }
}

/// Rejection-samples a `size × size` box inside the image (keeping a one
/// pixel border free) that stays `margin` away from every taken box.
pub fn place(
    width: u32,
    height: u32,
    size: u32,
    taken: &[Rect],
    margin: u32,
    rng: &mut impl Rng,
) -> Option<Rect> {
    if size + 2 > width || size + 2 > height {
        return None;
    }
    for _ in 0..500 {
        let r = Rect {
            x: rng.random_range(1..=width - size - 1),
            y: rng.random_range(1..=height - size - 1),
            w: size,
            h: size,
        };
        if taken.iter().all(|t| !t.near(&r, margin)) {
            return Some(r);
        }
    }
    None
}
