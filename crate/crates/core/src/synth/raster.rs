use super::{Entity, PanelSpec, Raster, ShapeKind};

pub const BACKGROUND: u8 = 255;

/// Gray value of a shade level (1 = lightest).
pub fn shade_gray(level: u8) -> u8 {
    match level {
        1 => 224,
        2 => 160,
        3 => 96,
        _ => 32,
    }
}

/// Circumradius as a fraction of half a grid cell, by size level.
fn radius_fraction(level: u8) -> f64 {
    match level {
        1 => 0.4,
        2 => 0.58,
        3 => 0.76,
        _ => 0.94,
    }
}

/// Regular polygon vertices, first vertex pointing up, counter-clockwise in image space.
fn polygon(sides: usize, cx: f64, cy: f64, r: f64, rotation: f64) -> Vec<(f64, f64)> {
    (0..sides)
        .map(|i| {
            let a = rotation - std::f64::consts::FRAC_PI_2 + i as f64 * std::f64::consts::TAU / sides as f64;
            (cx + r * a.cos(), cy + r * a.sin())
        })
        .collect()
}

fn inside_convex(poly: &[(f64, f64)], x: f64, y: f64) -> bool {
    let n = poly.len();
    let mut sign = 0.0f64;
    for i in 0..n {
        let (x0, y0) = poly[i];
        let (x1, y1) = poly[(i + 1) % n];
        let cross = (x1 - x0) * (y - y0) - (y1 - y0) * (x - x0);
        if cross != 0.0 {
            if sign != 0.0 && cross.signum() != sign {
                return false;
            }
            sign = cross.signum();
        }
    }
    true
}

fn draw(entity: &Entity, size: usize, pixels: &mut [u8]) {
    let cell = size as f64 / 2.0;
    let cx = (f64::from(entity.cell % 2) + 0.5) * cell;
    let cy = (f64::from(entity.cell / 2) + 0.5) * cell;
    let r = radius_fraction(entity.size) * cell / 2.0;
    let gray = shade_gray(entity.shade);
    let poly = match entity.shape {
        ShapeKind::Triangle => Some(polygon(3, cx, cy, r, 0.0)),
        ShapeKind::Square => Some(polygon(4, cx, cy, r, std::f64::consts::FRAC_PI_4)),
        ShapeKind::Pentagon => Some(polygon(5, cx, cy, r, 0.0)),
        ShapeKind::Circle => None,
    };
    let lo_y = (cy - r).floor().max(0.0) as usize;
    let hi_y = ((cy + r).ceil() as usize).min(size);
    let lo_x = (cx - r).floor().max(0.0) as usize;
    let hi_x = ((cx + r).ceil() as usize).min(size);
    for y in lo_y..hi_y {
        for x in lo_x..hi_x {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let hit = match &poly {
                Some(p) => inside_convex(p, px, py),
                None => (px - cx).powi(2) + (py - cy).powi(2) <= r * r,
            };
            if hit {
                pixels[y * size + x] = gray;
            }
        }
    }
}

/// Render a panel: white background, hard-edged filled shapes.
pub fn rasterize(spec: &PanelSpec, size: u16) -> Raster {
    let n = usize::from(size);
    let mut pixels = vec![BACKGROUND; n * n];
    for e in &spec.entities {
        draw(e, n, &mut pixels);
    }
    Raster { size, pixels }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(shape: ShapeKind, size: u8, shade: u8) -> PanelSpec {
        PanelSpec { entities: vec![Entity { shape, size, shade, cell: 3 }] }
    }

    fn ink(r: &Raster) -> usize {
        r.pixels.iter().filter(|&&p| p != BACKGROUND).count()
    }

    #[test]
    fn empty_panel_is_background() {
        let r = rasterize(&PanelSpec::default(), 32);
        assert_eq!(r.pixels.len(), 32 * 32);
        assert!(r.pixels.iter().all(|&p| p == BACKGROUND));
    }

    #[test]
    fn deterministic_bytes() {
        let spec = one(ShapeKind::Pentagon, 3, 2);
        assert_eq!(rasterize(&spec, 64), rasterize(&spec, 64));
    }

    #[test]
    fn coverage_grows_with_size_level() {
        for shape in ShapeKind::ALL {
            for panel in [32u16, 64, 96] {
                let counts: Vec<usize> = (1..=4).map(|s| ink(&rasterize(&one(shape, s, 4), panel))).collect();
                assert!(counts.windows(2).all(|w| w[0] < w[1]), "{shape:?} @ {panel}: {counts:?}");
            }
        }
    }

    #[test]
    fn shade_sets_gray_value() {
        for level in 1..=4 {
            let r = rasterize(&one(ShapeKind::Square, 4, level), 32);
            assert!(r.pixels.iter().all(|&p| p == BACKGROUND || p == shade_gray(level)));
            assert!(ink(&r) > 0);
        }
    }
}
