//! Planar geometry on oriented rectangles.

use serde::{Deserialize, Serialize};

/// Pose in the world frame: meters and radians (counter-clockwise from +x).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl Pose {
    pub const fn new(x: f64, y: f64, yaw: f64) -> Self {
        Self { x, y, yaw }
    }

    pub fn distance_to(&self, other: &Pose) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Wraps an angle to `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut r = a.rem_euclid(two_pi);
    if r > std::f64::consts::PI {
        r -= two_pi;
    }
    r
}

/// Rectangle of `length` along its heading and `width` across it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox {
    pub cx: f64,
    pub cy: f64,
    pub length: f64,
    pub width: f64,
    pub yaw: f64,
}

impl OrientedBox {
    pub fn new(cx: f64, cy: f64, length: f64, width: f64, yaw: f64) -> Self {
        Self {
            cx,
            cy,
            length,
            width,
            yaw,
        }
    }

    pub fn area(&self) -> f64 {
        self.length * self.width
    }

    /// Counter-clockwise corners.
    pub fn corners(&self) -> [(f64, f64); 4] {
        let (s, c) = self.yaw.sin_cos();
        let hl = 0.5 * self.length;
        let hw = 0.5 * self.width;
        [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)].map(|(lx, ly)| {
            (self.cx + c * lx - s * ly, self.cy + s * lx + c * ly)
        })
    }

    /// Point inside or on the boundary.
    pub fn contains(&self, px: f64, py: f64) -> bool {
        let (s, c) = self.yaw.sin_cos();
        let dx = px - self.cx;
        let dy = py - self.cy;
        let lx = c * dx + s * dy;
        let ly = -s * dx + c * dy;
        lx.abs() <= 0.5 * self.length + 1e-12 && ly.abs() <= 0.5 * self.width + 1e-12
    }

    /// Whether the open segment `a -> b` passes through the rectangle.
    pub fn intersects_segment(&self, a: (f64, f64), b: (f64, f64)) -> bool {
        // Slab clipping in the box frame.
        let (s, c) = self.yaw.sin_cos();
        let to_local = |p: (f64, f64)| {
            let dx = p.0 - self.cx;
            let dy = p.1 - self.cy;
            (c * dx + s * dy, -s * dx + c * dy)
        };
        let (ax, ay) = to_local(a);
        let (bx, by) = to_local(b);
        let d = (bx - ax, by - ay);
        let half = (0.5 * self.length, 0.5 * self.width);
        let mut t0 = 0.0f64;
        let mut t1 = 1.0f64;
        for (p, dp, h) in [(ax, d.0, half.0), (ay, d.1, half.1)] {
            if dp.abs() < 1e-15 {
                if p.abs() > h {
                    return false;
                }
            } else {
                let mut ta = (-h - p) / dp;
                let mut tb = (h - p) / dp;
                if ta > tb {
                    std::mem::swap(&mut ta, &mut tb);
                }
                t0 = t0.max(ta);
                t1 = t1.min(tb);
                if t0 > t1 {
                    return false;
                }
            }
        }
        t1 > t0
    }
}

/// Shoelace area of a simple polygon (signed, counter-clockwise positive).
pub fn polygon_area(poly: &[(f64, f64)]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let (x0, y0) = poly[i];
        let (x1, y1) = poly[(i + 1) % n];
        acc += x0 * y1 - x1 * y0;
    }
    0.5 * acc
}

/// Sutherland-Hodgman clip of `subject` against the convex counter-clockwise `clip`.
pub fn clip_polygon(subject: &[(f64, f64)], clip: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut output = subject.to_vec();
    let n = clip.len();
    for i in 0..n {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % n];
        let inside = |p: (f64, f64)| (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0) >= 0.0;
        let intersect = |p: (f64, f64), q: (f64, f64)| {
            let a1 = b.1 - a.1;
            let b1 = a.0 - b.0;
            let c1 = a1 * a.0 + b1 * a.1;
            let a2 = q.1 - p.1;
            let b2 = p.0 - q.0;
            let c2 = a2 * p.0 + b2 * p.1;
            let det = a1 * b2 - a2 * b1;
            if det.abs() < 1e-18 {
                p
            } else {
                ((b2 * c1 - b1 * c2) / det, (a1 * c2 - a2 * c1) / det)
            }
        };
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            match (inside(prev), inside(cur)) {
                (true, true) => output.push(cur),
                (true, false) => output.push(intersect(prev, cur)),
                (false, true) => {
                    output.push(intersect(prev, cur));
                    output.push(cur);
                }
                (false, false) => {}
            }
        }
    }
    output
}

pub fn intersection_area(a: &OrientedBox, b: &OrientedBox) -> f64 {
    let poly = clip_polygon(&a.corners(), &b.corners());
    polygon_area(&poly).abs()
}

pub fn iou(a: &OrientedBox, b: &OrientedBox) -> f64 {
    let inter = intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Positive-area overlap.
pub fn overlaps(a: &OrientedBox, b: &OrientedBox) -> bool {
    // Cheap reject on bounding circles.
    let ra = 0.5 * a.length.hypot(a.width);
    let rb = 0.5 * b.length.hypot(b.width);
    if (a.cx - b.cx).hypot(a.cy - b.cy) > ra + rb {
        return false;
    }
    intersection_area(a, b) > 1e-9
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn identical_boxes_have_unit_iou() {
        let b = OrientedBox::new(1.0, 2.0, 4.0, 2.0, 0.3);
        assert_relative_eq!(iou(&b, &b), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn axis_aligned_overlap() {
        let a = OrientedBox::new(0.0, 0.0, 2.0, 2.0, 0.0);
        let b = OrientedBox::new(1.0, 0.0, 2.0, 2.0, 0.0);
        // Intersection 2, union 6.
        assert_relative_eq!(iou(&a, &b), 1.0 / 3.0, epsilon = 1e-12);
        let c = OrientedBox::new(5.0, 0.0, 2.0, 2.0, 0.0);
        assert_eq!(iou(&a, &c), 0.0);
        assert!(!overlaps(&a, &c));
    }

    #[test]
    fn rotated_square_is_symmetric() {
        let a = OrientedBox::new(0.0, 0.0, 4.0, 2.0, 0.0);
        let b = OrientedBox::new(0.0, 0.0, 4.0, 2.0, FRAC_PI_2);
        // Cross of two 4x2 rectangles: overlap is the 2x2 center.
        assert_relative_eq!(intersection_area(&a, &b), 4.0, epsilon = 1e-9);
        assert_relative_eq!(iou(&a, &b), 4.0 / 12.0, epsilon = 1e-9);
    }

    #[test]
    fn segment_hits() {
        let b = OrientedBox::new(5.0, 0.0, 2.0, 2.0, 0.0);
        assert!(b.intersects_segment((0.0, 0.0), (10.0, 0.0)));
        assert!(!b.intersects_segment((0.0, 3.0), (10.0, 3.0)));
        assert!(!b.intersects_segment((0.0, 0.0), (3.0, 0.0)));
    }

    #[test]
    fn containment() {
        let b = OrientedBox::new(0.0, 0.0, 4.0, 2.0, FRAC_PI_2);
        assert!(b.contains(0.0, 1.9));
        assert!(!b.contains(1.5, 0.0));
    }

    #[test]
    fn wraps() {
        assert_relative_eq!(wrap_angle(3.0 * std::f64::consts::PI), std::f64::consts::PI, epsilon = 1e-12);
        assert_relative_eq!(wrap_angle(-0.1), -0.1, epsilon = 1e-12);
    }
}
