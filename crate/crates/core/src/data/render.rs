//! Hard-edged rasterization of shapes and textures.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{PaletteColor, ShapeKind, TextureKind, IMAGE_SIZE, PIXELS};

/// Pixel scale of one shape-space unit at scale 1.0.
const UNIT_PX: f64 = 12.0;

/// Fraction by which "off" texture pixels darken the foreground color.
pub const TEXTURE_CONTRAST: f32 = 0.3;

/// Placement of a shape on the canvas.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    /// Rotation in degrees.
    pub rotation: f64,
    pub scale: f64,
    pub dx: f64,
    pub dy: f64,
}

impl Pose {
    pub fn sample(rng: &mut ChaCha8Rng) -> Self {
        Self {
            rotation: rng.gen_range(-25.0..=25.0),
            scale: rng.gen_range(0.7..=1.1),
            dx: rng.gen_range(-4.0..=4.0),
            dy: rng.gen_range(-4.0..=4.0),
        }
    }
}

fn in_polygon(u: f64, v: f64, pts: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = pts.len() - 1;
    for i in 0..pts.len() {
        let (xi, yi) = pts[i];
        let (xj, yj) = pts[j];
        if (yi > v) != (yj > v) && u < (xj - xi) * (v - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn regular_points(count: usize, radius: f64, phase: f64) -> Vec<(f64, f64)> {
    (0..count)
        .map(|k| {
            let a = phase + k as f64 * std::f64::consts::TAU / count as f64;
            (radius * a.cos(), radius * a.sin())
        })
        .collect()
}

fn star_points() -> Vec<(f64, f64)> {
    let (outer, inner) = (1.35, 0.56);
    (0..10)
        .map(|k| {
            let r = if k % 2 == 0 { outer } else { inner };
            let a = -std::f64::consts::FRAC_PI_2 + k as f64 * std::f64::consts::PI / 5.0;
            (r * a.cos(), r * a.sin())
        })
        .collect()
}

/// Membership test in unit shape space (image y axis points down).
pub fn shape_contains(shape: ShapeKind, u: f64, v: f64) -> bool {
    let r2 = u * u + v * v;
    match shape {
        ShapeKind::Circle => r2 <= 1.0,
        ShapeKind::Square => u.abs() <= 0.86 && v.abs() <= 0.86,
        ShapeKind::Triangle => in_polygon(u, v, &regular_points(3, 1.38, -std::f64::consts::FRAC_PI_2)),
        ShapeKind::Diamond => u.abs() + v.abs() <= 1.2,
        ShapeKind::Star => in_polygon(u, v, &star_points()),
        ShapeKind::Cross => (u.abs() <= 0.4 && v.abs() <= 1.1) || (v.abs() <= 0.4 && u.abs() <= 1.1),
        ShapeKind::Annulus => (0.25..=1.1025).contains(&r2),
        ShapeKind::Crescent => r2 <= 1.1025 && (u - 0.55).powi(2) + v * v > 0.7225,
    }
}

/// Rasterizes a shape into a `PIXELS`-long 0/1 mask by sampling pixel centers.
pub fn rasterize(shape: ShapeKind, pose: Pose) -> Vec<u8> {
    let c = IMAGE_SIZE as f64 / 2.0;
    let (sin, cos) = pose.rotation.to_radians().sin_cos();
    let unit = UNIT_PX * pose.scale;
    let mut mask = vec![0u8; PIXELS];
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            let px = x as f64 + 0.5 - c - pose.dx;
            let py = y as f64 + 0.5 - c - pose.dy;
            // inverse rotation
            let u = (cos * px + sin * py) / unit;
            let v = (-sin * px + cos * py) / unit;
            mask[y * IMAGE_SIZE + x] = shape_contains(shape, u, v) as u8;
        }
    }
    mask
}

/// Texture "on" map over the full canvas. Periodic textures have period 4 px
/// and a random phase; speckle is i.i.d. Bernoulli(1/2).
pub fn texture_pattern(texture: TextureKind, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let (ox, oy) = (rng.gen_range(0..4usize), rng.gen_range(0..4usize));
    let mut out = vec![0u8; PIXELS];
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            out[y * IMAGE_SIZE + x] = match texture {
                TextureKind::Speckle => rng.gen_bool(0.5) as u8,
                _ => periodic_on(texture, x + ox, y + oy) as u8,
            };
        }
    }
    out
}

/// Whether pixel `(x, y)` (already phase-shifted) is "on" for a periodic
/// texture. Speckle is not periodic and always returns `true`.
pub fn periodic_on(texture: TextureKind, x: usize, y: usize) -> bool {
    match texture {
        TextureKind::HorizontalStripes => (y / 2) % 2 == 0,
        TextureKind::VerticalStripes => (x / 2) % 2 == 0,
        TextureKind::DiagonalStripes => (x + y) % 4 < 2,
        TextureKind::Checkerboard => (x / 2 + y / 2) % 2 == 0,
        TextureKind::PolkaDots => x % 4 < 2 && y % 4 < 2,
        TextureKind::GridLines => x % 4 == 0 || y % 4 == 0,
        TextureKind::SolidFill | TextureKind::Speckle => true,
    }
}

pub fn off_color(fg: PaletteColor) -> [f32; 3] {
    fg.rgb().map(|c| c * (1.0 - TEXTURE_CONTRAST))
}

/// Paints a `[3, 32, 32]` image: textured foreground inside the mask, solid
/// background elsewhere.
pub fn paint(mask: &[u8], pattern: &[u8], fg: PaletteColor, bg: PaletteColor) -> Vec<f32> {
    let (on, off, bgc) = (fg.rgb(), off_color(fg), bg.rgb());
    let mut img = vec![0.0f32; 3 * PIXELS];
    for p in 0..PIXELS {
        let rgb = if mask[p] == 0 {
            bgc
        } else if pattern[p] == 1 {
            on
        } else {
            off
        };
        for ch in 0..3 {
            img[ch * PIXELS + p] = rgb[ch];
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn area(shape: ShapeKind, scale: f64) -> f64 {
        let pose = Pose { rotation: 0.0, scale, dx: 0.0, dy: 0.0 };
        rasterize(shape, pose).iter().map(|&m| m as f64).sum::<f64>() / PIXELS as f64
    }

    #[test]
    fn every_shape_has_reasonable_area() {
        for shape in ShapeKind::ALL {
            let (lo, hi) = (area(shape, 0.7), area(shape, 1.1));
            assert!(lo > 0.10 && hi < 0.70, "{shape:?}: {lo} .. {hi}");
        }
    }

    #[test]
    fn annulus_has_a_hole() {
        let m = rasterize(ShapeKind::Annulus, Pose { rotation: 0.0, scale: 1.0, dx: 0.0, dy: 0.0 });
        assert_eq!(m[16 * IMAGE_SIZE + 16], 0);
        let m = rasterize(ShapeKind::Circle, Pose { rotation: 0.0, scale: 1.0, dx: 0.0, dy: 0.0 });
        assert_eq!(m[16 * IMAGE_SIZE + 16], 1);
    }

    #[test]
    fn solid_pattern_is_all_on() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(texture_pattern(TextureKind::SolidFill, &mut rng).iter().all(|&v| v == 1));
    }
}
