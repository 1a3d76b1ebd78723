//! Planar geometry shared by the filter and the simulator.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

#[allow(clippy::should_implement_trait)]
impl Point2 {
    pub const ORIGIN: Point2 = Point2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn sub(self, o: Point2) -> Point2 {
        Point2::new(self.x - o.x, self.y - o.y)
    }

    pub fn add(self, o: Point2) -> Point2 {
        Point2::new(self.x + o.x, self.y + o.y)
    }

    pub fn scale(self, s: f64) -> Point2 {
        Point2::new(self.x * s, self.y * s)
    }

    pub fn dot(self, o: Point2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn cross(self, o: Point2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn distance(self, o: Point2) -> f64 {
        self.sub(o).norm()
    }

    /// Rotates counter-clockwise about the origin.
    pub fn rotate(self, angle: f64) -> Point2 {
        let (s, c) = angle.sin_cos();
        Point2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    pub fn from_heading(heading: f64) -> Point2 {
        let (s, c) = heading.sin_cos();
        Point2::new(c, s)
    }
}

/// Wraps an angle into `[-π, π)`.
pub fn normalize_angle(angle: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let mut a = (angle + PI).rem_euclid(two_pi) - PI;
    // rem_euclid can return exactly two_pi for tiny negative inputs.
    if a >= PI {
        a -= two_pi;
    }
    a
}

/// A directed segment with distinct endpoints.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment2 {
    a: Point2,
    b: Point2,
}

impl Segment2 {
    pub fn new(a: Point2, b: Point2) -> Result<Self> {
        if !a.is_finite() || !b.is_finite() {
            return Err(Error::Geometry("segment endpoint is not finite".into()));
        }
        if a == b {
            return Err(Error::Geometry(format!(
                "degenerate segment at ({}, {})",
                a.x, a.y
            )));
        }
        Ok(Self { a, b })
    }

    pub fn start(&self) -> Point2 {
        self.a
    }

    pub fn end(&self) -> Point2 {
        self.b
    }

    pub fn direction(&self) -> Point2 {
        self.b.sub(self.a)
    }

    pub fn length(&self) -> f64 {
        self.direction().norm()
    }

    /// Clamped projection parameter of `p` onto the segment, in `[0, 1]`.
    pub fn project(&self, p: Point2) -> f64 {
        let d = self.direction();
        (p.sub(self.a).dot(d) / d.dot(d)).clamp(0.0, 1.0)
    }

    pub fn point_at(&self, t: f64) -> Point2 {
        self.a.add(self.direction().scale(t))
    }
}

/// Shortest Euclidean distance from `p` to any point of `s`.
pub fn point_segment_distance(p: Point2, s: &Segment2) -> f64 {
    p.distance(s.point_at(s.project(p)))
}

/// Unsigned angle in `[0, π]` between two non-zero vectors.
pub fn heading_alignment_angle(v_ego: Point2, v_lane: Point2) -> Result<f64> {
    let ne = v_ego.norm();
    let nl = v_lane.norm();
    if !(ne > 0.0 && ne.is_finite()) || !(nl > 0.0 && nl.is_finite()) {
        return Err(Error::Geometry(
            "alignment angle of a zero-length or non-finite vector".into(),
        ));
    }
    let cos = (v_ego.dot(v_lane) / (ne * nl)).clamp(-1.0, 1.0);
    Ok(cos.acos())
}

/// Heading-aligned rectangle: `length` along the heading, `width` across it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedBox {
    center: Point2,
    heading: f64,
    length: f64,
    width: f64,
}

impl OrientedBox {
    pub fn new(center: Point2, heading: f64, length: f64, width: f64) -> Result<Self> {
        if !center.is_finite() || !heading.is_finite() {
            return Err(Error::Geometry("box pose is not finite".into()));
        }
        if length.is_nan() || width.is_nan() || length <= 0.0 || width <= 0.0 {
            return Err(Error::Geometry(format!(
                "box dimensions must be positive, got {length} x {width}"
            )));
        }
        Ok(Self {
            center,
            heading: normalize_angle(heading),
            length,
            width,
        })
    }

    pub fn center(&self) -> Point2 {
        self.center
    }

    pub fn heading(&self) -> f64 {
        self.heading
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    /// Unit vectors along the length and the width.
    pub fn axes(&self) -> [Point2; 2] {
        let u = Point2::from_heading(self.heading);
        [u, Point2::new(-u.y, u.x)]
    }

    /// Corners in counter-clockwise order starting front-left.
    pub fn corners(&self) -> [Point2; 4] {
        let [u, v] = self.axes();
        let hl = u.scale(self.length / 2.0);
        let hw = v.scale(self.width / 2.0);
        let c = self.center;
        [
            c.add(hl).add(hw),
            c.sub(hl).add(hw),
            c.sub(hl).sub(hw),
            c.add(hl).sub(hw),
        ]
    }

    /// Closed containment test.
    pub fn contains(&self, p: Point2) -> bool {
        let [u, v] = self.axes();
        let d = p.sub(self.center);
        d.dot(u).abs() <= self.length / 2.0 && d.dot(v).abs() <= self.width / 2.0
    }

    fn projected_radius(&self, axis: Point2) -> f64 {
        let [u, v] = self.axes();
        (self.length / 2.0) * u.dot(axis).abs() + (self.width / 2.0) * v.dot(axis).abs()
    }
}

/// Largest gap between the two boxes' projections over the four edge normals.
///
/// Positive means a separating axis exists; zero is touching; negative is
/// the smallest penetration depth among the tested axes.
pub fn box_separation(a: &OrientedBox, b: &OrientedBox) -> f64 {
    let d = b.center.sub(a.center);
    a.axes()
        .into_iter()
        .chain(b.axes())
        .map(|axis| d.dot(axis).abs() - a.projected_radius(axis) - b.projected_radius(axis))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Separating-axis overlap test. Touching boxes intersect.
pub fn boxes_intersect(a: &OrientedBox, b: &OrientedBox) -> bool {
    box_separation(a, b) <= 0.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seg(ax: f64, ay: f64, bx: f64, by: f64) -> Segment2 {
        Segment2::new(Point2::new(ax, ay), Point2::new(bx, by)).unwrap()
    }

    #[test]
    fn distance_examples() {
        assert_eq!(point_segment_distance(Point2::new(0.0, 1.0), &seg(0.0, 0.0, 2.0, 0.0)), 1.0);
        assert_eq!(point_segment_distance(Point2::new(0.0, 0.0), &seg(0.0, 0.0, 1.0, 1.0)), 0.0);
        let d = point_segment_distance(Point2::new(3.0, 4.0), &seg(0.0, 0.0, 1.0, 0.0));
        assert!((d - 20f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn degenerate_segment_rejected() {
        assert!(Segment2::new(Point2::new(1.0, 1.0), Point2::new(1.0, 1.0)).is_err());
    }

    #[test]
    fn alignment_examples() {
        let e = Point2::new(1.0, 0.0);
        assert_eq!(heading_alignment_angle(e, e).unwrap(), 0.0);
        let a = heading_alignment_angle(e, Point2::new(0.0, 1.0)).unwrap();
        assert!((a - PI / 2.0).abs() < 1e-15);
        let a = heading_alignment_angle(e, Point2::new(-1.0, 1e-12)).unwrap();
        assert!(a.is_finite() && (a - PI).abs() < 1e-9);
        // ulp overshoot of the normalized dot product must not produce NaN
        let v = Point2::new(0.1, 0.2);
        assert!(!heading_alignment_angle(v, v.scale(3.0)).unwrap().is_nan());
        assert!(heading_alignment_angle(Point2::ORIGIN, e).is_err());
    }

    #[test]
    fn box_examples() {
        let a = OrientedBox::new(Point2::ORIGIN, 0.3, 5.0, 2.0).unwrap();
        assert!(boxes_intersect(&a, &a));
        let far = OrientedBox::new(Point2::new(100.0, 0.0), 0.0, 5.0, 2.0).unwrap();
        assert!(!boxes_intersect(&a, &far));
        assert!(OrientedBox::new(Point2::ORIGIN, 0.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn touching_boxes_intersect() {
        let a = OrientedBox::new(Point2::ORIGIN, 0.0, 4.0, 2.0).unwrap();
        let b = OrientedBox::new(Point2::new(4.0, 0.0), 0.0, 4.0, 2.0).unwrap();
        assert_eq!(box_separation(&a, &b), 0.0);
        assert!(boxes_intersect(&a, &b));
    }

    #[test]
    fn normalize_range() {
        for a in [-10.0, -PI, PI, 3.0 * PI, 0.0, -1e-18, 7.5] {
            let n = normalize_angle(a);
            assert!((-PI..PI).contains(&n), "{a} -> {n}");
            assert!(((a - n) / (2.0 * PI)).fract().abs() < 1e-9 || ((a - n) / (2.0 * PI)).fract().abs() > 1.0 - 1e-9);
        }
    }

    proptest! {
        #[test]
        fn intersect_symmetric(
            ax in -5.0..5.0f64, ay in -5.0..5.0f64, ah in -4.0..4.0f64,
            bx in -5.0..5.0f64, by in -5.0..5.0f64, bh in -4.0..4.0f64,
            al in 0.5..6.0f64, aw in 0.5..3.0f64, bl in 0.5..6.0f64, bw in 0.5..3.0f64,
        ) {
            let a = OrientedBox::new(Point2::new(ax, ay), ah, al, aw).unwrap();
            let b = OrientedBox::new(Point2::new(bx, by), bh, bl, bw).unwrap();
            prop_assert_eq!(boxes_intersect(&a, &b), boxes_intersect(&b, &a));
        }

        #[test]
        fn alignment_scale_invariant(
            x in -10.0..10.0f64, y in -10.0..10.0f64, lx in -10.0..10.0f64, ly in -10.0..10.0f64,
            s in 0.01..100.0f64,
        ) {
            prop_assume!(x.hypot(y) > 1e-3 && lx.hypot(ly) > 1e-3);
            let v = Point2::new(x, y);
            let l = Point2::new(lx, ly);
            let base = heading_alignment_angle(v, l).unwrap();
            let scaled = heading_alignment_angle(v.scale(s), l).unwrap();
            // acos amplifies rounding near 0 and π; compare cosines there
            if base > 1e-4 && base < PI - 1e-4 {
                prop_assert!((base - scaled).abs() < 1e-12 * (1.0 + 1.0 / base.sin()));
            } else {
                prop_assert!((base.cos() - scaled.cos()).abs() < 1e-12);
            }
        }
    }
}
