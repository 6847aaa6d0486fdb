//! Geometric stand-in for a face: a subject-coloured oval on a textured
//! background, with one dark ellipse per AU whose height follows intensity.

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{validation, Result};

pub const IMAGE_SIZE: u32 = 256;
const SUPERSAMPLE: u32 = 4;

/// Nuisance appearance of one synthetic subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSubject {
    pub subject_id: String,
    /// Scale of the face oval, in `[0.92, 1.08]`.
    pub scale: f64,
    /// Skin hue in `[0,1)`.
    pub hue: f64,
    pub texture_seed: u64,
    pub background_seed: u64,
}

/// Axis-aligned pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl Region {
    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

/// Placement of the primitive driven by one AU.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrimitiveGeometry {
    pub region: Region,
    pub center: (f64, f64),
    pub half_width: f64,
    pub half_height: f64,
}

#[derive(Debug, Clone)]
pub struct RenderedFrame {
    pub image: RgbImage,
    pub geometry: Vec<PrimitiveGeometry>,
}

const MIN_HALF_HEIGHT: f64 = 1.5;

/// Designated region of AU `c` out of `au_count`. Regions tile a band inside
/// the smallest face oval: two rows of up to three cells.
pub fn au_region(c: usize, au_count: usize) -> Region {
    let per_row = au_count.div_ceil(2).clamp(1, 3) as u32;
    let rows = au_count.div_ceil(per_row as usize) as u32;
    let (left, right, top, bottom) = (72u32, 184u32, 80u32, 196u32);
    let cell_w = (right - left) / per_row;
    let cell_h = (bottom - top) / rows.max(1);
    let (col, row) = ((c as u32) % per_row, (c as u32) / per_row);
    Region {
        x0: left + col * cell_w,
        y0: top + row * cell_h,
        x1: left + (col + 1) * cell_w,
        y1: top + (row + 1) * cell_h,
    }
}

/// Primitive placement for AU `c` at a given intensity. Independent of the subject.
pub fn primitive_geometry(c: usize, au_count: usize, intensity: f64) -> PrimitiveGeometry {
    let region = au_region(c, au_count);
    let w = f64::from(region.x1 - region.x0);
    let h = f64::from(region.y1 - region.y0);
    let max_half_height = 0.5 * h - 3.0;
    PrimitiveGeometry {
        region,
        center: (f64::from(region.x0) + 0.5 * w, f64::from(region.y0) + 0.5 * h),
        half_width: 0.5 * w - 6.0,
        half_height: MIN_HALF_HEIGHT + (max_half_height - MIN_HALF_HEIGHT) * intensity.clamp(0.0, 1.0),
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Deterministic value in `[0,1)` from a seed and a salt.
fn unit_hash(seed: u64, salt: u64) -> f64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

struct Waves {
    fx: f64,
    fy: f64,
    phase: f64,
    amp: f64,
}

impl Waves {
    fn new(seed: u64, amp: f64) -> Self {
        Self {
            fx: 0.02 + 0.08 * unit_hash(seed, 1),
            fy: 0.02 + 0.08 * unit_hash(seed, 2),
            phase: std::f64::consts::TAU * unit_hash(seed, 3),
            amp,
        }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        self.amp * (self.fx * x + self.phase).sin() * (self.fy * y + 0.5 * self.phase).cos()
    }
}

fn ellipse_coverage(g: &PrimitiveGeometry, x: u32, y: u32) -> f64 {
    let mut hits = 0u32;
    for sy in 0..SUPERSAMPLE {
        for sx in 0..SUPERSAMPLE {
            let px = f64::from(x) + (f64::from(sx) + 0.5) / f64::from(SUPERSAMPLE);
            let py = f64::from(y) + (f64::from(sy) + 0.5) / f64::from(SUPERSAMPLE);
            let dx = (px - g.center.0) / g.half_width;
            let dy = (py - g.center.1) / g.half_height;
            if dx * dx + dy * dy <= 1.0 {
                hits += 1;
            }
        }
    }
    f64::from(hits) / f64::from(SUPERSAMPLE * SUPERSAMPLE)
}

/// Renders one frame. A pure function of `(subject, intensities)`.
pub fn render_frame(subject: &SyntheticSubject, intensities: &[f64]) -> Result<RenderedFrame> {
    if let Some(v) = intensities.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(validation(format!("intensity {v} outside [0,1]")));
    }
    let au_count = intensities.len();
    let geometry: Vec<PrimitiveGeometry> = intensities
        .iter()
        .enumerate()
        .map(|(c, &v)| primitive_geometry(c, au_count, v))
        .collect();

    let skin = hsv_to_rgb(subject.hue, 0.45, 0.88);
    let mark = skin.map(|v| v * 0.3);
    let bg_base = hsv_to_rgb(unit_hash(subject.background_seed, 4), 0.3, 0.35 + 0.3 * unit_hash(subject.background_seed, 5));
    let bg_waves = Waves::new(subject.background_seed, 0.08);
    let skin_waves = Waves::new(subject.texture_seed, 0.05);
    let (cx, cy) = (128.0, 136.0);
    let (ax, ay) = (92.0 * subject.scale, 112.0 * subject.scale);

    let mut image = RgbImage::new(IMAGE_SIZE, IMAGE_SIZE);
    for (x, y, px) in image.enumerate_pixels_mut() {
        let (fx, fy) = (f64::from(x) + 0.5, f64::from(y) + 0.5);
        let dx = (fx - cx) / ax;
        let dy = (fy - cy) / ay;
        let mut rgb = if dx * dx + dy * dy <= 1.0 {
            let t = skin_waves.at(fx, fy);
            skin.map(|v| v + t)
        } else {
            let t = bg_waves.at(fx, fy);
            bg_base.map(|v| v + t)
        };
        if let Some(g) = geometry.iter().find(|g| g.region.contains(x, y)) {
            let cov = ellipse_coverage(g, x, y);
            if cov > 0.0 {
                for (v, m) in rgb.iter_mut().zip(mark) {
                    *v = (1.0 - cov) * *v + cov * m;
                }
            }
        }
        *px = Rgb(rgb.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    Ok(RenderedFrame { image, geometry })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn subject(id: &str, scale: f64, hue: f64, seed: u64) -> SyntheticSubject {
        SyntheticSubject {
            subject_id: id.into(),
            scale,
            hue,
            texture_seed: seed,
            background_seed: seed + 100,
        }
    }

    #[test]
    fn deterministic() {
        let s = subject("S1", 1.0, 0.05, 1);
        let a = render_frame(&s, &[0.2, 0.7, 0.4]).unwrap();
        let b = render_frame(&s, &[0.2, 0.7, 0.4]).unwrap();
        assert_eq!(a.image.as_raw(), b.image.as_raw());
    }

    #[test]
    fn change_stays_in_region() {
        let s = subject("S1", 0.92, 0.1, 2);
        for c in 0..3 {
            let mut v = vec![0.3, 0.3, 0.3];
            let a = render_frame(&s, &v).unwrap();
            v[c] = 0.95;
            let b = render_frame(&s, &v).unwrap();
            let region = au_region(c, 3);
            let mut changed = 0;
            for (x, y, p) in a.image.enumerate_pixels() {
                if p != b.image.get_pixel(x, y) {
                    assert!(region.contains(x, y), "AU{c} changed pixel ({x},{y}) outside its region");
                    changed += 1;
                }
            }
            assert!(changed > 100);
        }
    }

    #[test]
    fn regions_are_disjoint_and_inside_smallest_face() {
        for c_total in 1..=6 {
            let regions: Vec<Region> = (0..c_total).map(|c| au_region(c, c_total)).collect();
            for (i, a) in regions.iter().enumerate() {
                for b in &regions[i + 1..] {
                    assert!(a.x1 <= b.x0 || b.x1 <= a.x0 || a.y1 <= b.y0 || b.y1 <= a.y0);
                }
                for (x, y) in [(a.x0, a.y0), (a.x1, a.y0), (a.x0, a.y1), (a.x1, a.y1)] {
                    let dx = (f64::from(x) - 128.0) / (92.0 * 0.92);
                    let dy = (f64::from(y) - 136.0) / (112.0 * 0.92);
                    assert!(dx * dx + dy * dy <= 1.0);
                }
            }
        }
    }

    #[test]
    fn subjects_differ_but_geometry_matches() {
        let v = [0.5, 0.1, 0.9];
        let a = render_frame(&subject("S1", 0.95, 0.02, 3), &v).unwrap();
        let b = render_frame(&subject("S2", 1.05, 0.12, 4), &v).unwrap();
        assert_ne!(a.image.as_raw(), b.image.as_raw());
        assert_eq!(a.geometry, b.geometry);
    }

    #[test]
    fn primitive_grows_with_intensity() {
        let lo = primitive_geometry(1, 3, 0.0);
        let hi = primitive_geometry(1, 3, 1.0);
        assert!(hi.half_height > lo.half_height);
        assert!(hi.center.1 + hi.half_height < f64::from(hi.region.y1));
        assert!(hi.center.0 + hi.half_width < f64::from(hi.region.x1));
    }

    #[test]
    fn rejects_out_of_range() {
        assert!(render_frame(&subject("S", 1.0, 0.0, 1), &[1.2]).is_err());
    }
}
