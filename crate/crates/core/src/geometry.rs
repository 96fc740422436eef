//! Oriented bounding box geometry.
//!
//! Angles are radians, counterclockwise-positive, normalized to `[-π/2, π/2)`.
//! The box width runs along the box's local x-axis.

use std::cmp::Ordering;
use std::f64::consts::{FRAC_PI_2, PI};
use std::ops::{Add, Mul, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Vertices closer than this are merged while clipping.
const MERGE_EPS: f64 = 1e-9;
/// Intersections smaller than this (pixels²) are treated as empty.
const AREA_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    #[inline]
    pub fn cross(self, other: Point2) -> f64 {
        self.x * other.y - self.y * other.x
    }

    #[inline]
    pub fn dot(self, other: Point2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn distance(self, other: Point2) -> f64 {
        (self - other).norm()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl Add for Point2 {
    type Output = Point2;
    fn add(self, rhs: Point2) -> Point2 {
        Point2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl Sub for Point2 {
    type Output = Point2;
    fn sub(self, rhs: Point2) -> Point2 {
        Point2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl Mul<f64> for Point2 {
    type Output = Point2;
    fn mul(self, rhs: f64) -> Point2 {
        Point2::new(self.x * rhs, self.y * rhs)
    }
}

/// Counterclockwise rotation matrix `[[cos θ, -sin θ], [sin θ, cos θ]]`.
pub fn rotation_matrix(theta: f64) -> Result<[[f64; 2]; 2]> {
    if !theta.is_finite() {
        return Err(Error::invalid(format!("rotation angle must be finite, got {theta}")));
    }
    let (s, c) = theta.sin_cos();
    Ok([[c, -s], [s, c]])
}

#[inline]
fn rotate(m: &[[f64; 2]; 2], p: Point2) -> Point2 {
    Point2::new(m[0][0] * p.x + m[0][1] * p.y, m[1][0] * p.x + m[1][1] * p.y)
}

/// Maps any finite angle onto `[-π/2, π/2)`. A rectangle is symmetric under a
/// half turn, so this never changes the covered region.
pub fn normalize_angle(theta: f64) -> f64 {
    let mut t = (theta + FRAC_PI_2).rem_euclid(PI) - FRAC_PI_2;
    if t >= FRAC_PI_2 {
        t -= PI;
    }
    t
}

/// Rotated rectangle: center, extents and counterclockwise angle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OrientedBox {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    theta: f64,
}

impl OrientedBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64, theta: f64) -> Result<Self> {
        if !(cx.is_finite() && cy.is_finite() && w.is_finite() && h.is_finite() && theta.is_finite()) {
            return Err(Error::invalid(format!("box fields must be finite: ({cx}, {cy}, {w}, {h}, {theta})")));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::invalid(format!("box extents must be positive, got w={w} h={h}")));
        }
        Ok(Self { cx, cy, w, h, theta: normalize_angle(theta) })
    }

    /// Builds from the `[cx, cy, w, h, theta]` layout used by the record formats.
    pub fn from_array(v: [f64; 5]) -> Result<Self> {
        Self::new(v[0], v[1], v[2], v[3], v[4])
    }

    pub fn to_array(&self) -> [f64; 5] {
        [self.cx, self.cy, self.w, self.h, self.theta]
    }

    pub fn cx(&self) -> f64 {
        self.cx
    }
    pub fn cy(&self) -> f64 {
        self.cy
    }
    pub fn w(&self) -> f64 {
        self.w
    }
    pub fn h(&self) -> f64 {
        self.h
    }
    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn center(&self) -> Point2 {
        Point2::new(self.cx, self.cy)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Radius of the circumscribed circle.
    pub fn half_diagonal(&self) -> f64 {
        0.5 * self.w.hypot(self.h)
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Result<Self> {
        Self::new(self.cx + dx, self.cy + dy, self.w, self.h, self.theta)
    }

    /// Same center and angle, both extents multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(self.cx, self.cy, self.w * factor, self.h * factor, self.theta)
    }

    /// Applies the rigid motion `p ↦ R(angle)·p + (dx, dy)` to the box.
    pub fn rigid_motion(&self, angle: f64, dx: f64, dy: f64) -> Result<Self> {
        let m = rotation_matrix(angle)?;
        let c = rotate(&m, self.center());
        Self::new(c.x + dx, c.y + dy, self.w, self.h, self.theta + angle)
    }

    fn total_cmp(&self, other: &Self) -> Ordering {
        self.to_array()
            .iter()
            .zip(other.to_array().iter())
            .map(|(a, b)| a.total_cmp(b))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    }
}

impl<'de> Deserialize<'de> for OrientedBox {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            cx: f64,
            cy: f64,
            w: f64,
            h: f64,
            theta: f64,
        }
        let r = Raw::deserialize(d)?;
        OrientedBox::new(r.cx, r.cy, r.w, r.h, r.theta).map_err(serde::de::Error::custom)
    }
}

/// Convex polygon with counterclockwise vertices.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvexPolygon {
    vertices: Vec<Point2>,
}

impl ConvexPolygon {
    pub fn vertices(&self) -> &[Point2] {
        &self.vertices
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    /// Shoelace area; positive for counterclockwise order.
    pub fn signed_area(&self) -> f64 {
        shoelace(&self.vertices)
    }

    pub fn area(&self) -> f64 {
        self.signed_area().abs()
    }

    /// True when every consecutive edge pair turns left (or is collinear).
    pub fn is_convex(&self) -> bool {
        let n = self.vertices.len();
        if n < 3 {
            return false;
        }
        (0..n).all(|i| {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            let c = self.vertices[(i + 2) % n];
            (b - a).cross(c - b) >= -1e-9
        })
    }
}

fn shoelace(vertices: &[Point2]) -> f64 {
    let n = vertices.len();
    if n < 3 {
        return 0.0;
    }
    let twice: f64 = (0..n).map(|i| vertices[i].cross(vertices[(i + 1) % n])).sum();
    0.5 * twice
}

/// Corners `center + R(θ)·(±w/2, ±h/2)` in counterclockwise order.
pub fn corners_of(b: &OrientedBox) -> ConvexPolygon {
    let (s, c) = b.theta.sin_cos();
    let m = [[c, -s], [s, c]];
    let (hw, hh) = (0.5 * b.w, 0.5 * b.h);
    let center = b.center();
    let local = [Point2::new(hw, -hh), Point2::new(hw, hh), Point2::new(-hw, hh), Point2::new(-hw, -hh)];
    ConvexPolygon { vertices: local.iter().map(|&p| center + rotate(&m, p)).collect() }
}

/// Boundary-inclusive containment test in the box frame.
pub fn point_in_obb(p: Point2, b: &OrientedBox) -> bool {
    let (s, c) = b.theta.sin_cos();
    let d = p - b.center();
    // R(-θ)·d
    let lx = c * d.x + s * d.y;
    let ly = -s * d.x + c * d.y;
    // Absorbs rounding in the rotation so points on an edge stay inside.
    const TOL: f64 = 1e-9;
    lx.abs() <= 0.5 * b.w + TOL && ly.abs() <= 0.5 * b.h + TOL
}

fn push_merged(out: &mut Vec<Point2>, p: Point2) {
    if let Some(&last) = out.last() {
        if last.distance(p) < MERGE_EPS {
            return;
        }
    }
    out.push(p);
}

/// Clips `subject` against the left half-plane of every directed edge of the
/// counterclockwise `clip` polygon.
fn sutherland_hodgman(subject: &[Point2], clip: &[Point2]) -> Vec<Point2> {
    let mut output = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let e0 = clip[i];
        let e1 = clip[(i + 1) % clip.len()];
        let edge = e1 - e0;
        let side = |p: Point2| edge.cross(p - e0);

        let input = std::mem::take(&mut output);
        let mut prev = *input.last().unwrap();
        let mut prev_side = side(prev);
        for &cur in &input {
            let cur_side = side(cur);
            if cur_side >= 0.0 {
                if prev_side < 0.0 {
                    push_merged(&mut output, prev + (cur - prev) * (prev_side / (prev_side - cur_side)));
                }
                push_merged(&mut output, cur);
            } else if prev_side >= 0.0 {
                push_merged(&mut output, prev + (cur - prev) * (prev_side / (prev_side - cur_side)));
            }
            prev = cur;
            prev_side = cur_side;
        }
        while output.len() > 1 && output[0].distance(*output.last().unwrap()) < MERGE_EPS {
            output.pop();
        }
    }
    output
}

/// Intersection polygon of two boxes, or `None` when it is empty or degenerate.
pub fn intersection_polygon(a: &OrientedBox, b: &OrientedBox) -> Option<ConvexPolygon> {
    let clipped = sutherland_hodgman(corners_of(a).vertices(), corners_of(b).vertices());
    if clipped.len() < 3 || shoelace(&clipped) < AREA_EPS {
        return None;
    }
    Some(ConvexPolygon { vertices: clipped })
}

/// Area of the intersection of two boxes, in `[0, min(area(a), area(b))]`.
pub fn intersect_area(a: &OrientedBox, b: &OrientedBox) -> f64 {
    // Cheap rejection: circumscribed circles do not touch.
    if a.center().distance(b.center()) > a.half_diagonal() + b.half_diagonal() {
        return 0.0;
    }
    match intersection_polygon(a, b) {
        Some(poly) => poly.signed_area().min(a.area()).min(b.area()),
        None => 0.0,
    }
}

/// Intersection over union. Symmetric bit-for-bit and exactly 1 for equal boxes.
pub fn iou(a: &OrientedBox, b: &OrientedBox) -> f64 {
    if a == b {
        return 1.0;
    }
    // Evaluate in a canonical order so that iou(a, b) == iou(b, a) exactly.
    let (first, second) = if a.total_cmp(b).is_le() { (a, b) } else { (b, a) };
    let inter = intersect_area(first, second);
    if inter == 0.0 {
        return 0.0;
    }
    let union = first.area() + second.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Grid estimate of IoU over the union's bounding rectangle; test oracle for [`iou`].
pub fn raster_iou_oracle(a: &OrientedBox, b: &OrientedBox, resolution: usize) -> Result<f64> {
    if resolution < 64 {
        return Err(Error::invalid(format!("raster resolution must be >= 64, got {resolution}")));
    }
    let pts: Vec<Point2> = corners_of(a).vertices().iter().chain(corners_of(b).vertices()).copied().collect();
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in &pts {
        x0 = x0.min(p.x);
        y0 = y0.min(p.y);
        x1 = x1.max(p.x);
        y1 = y1.max(p.y);
    }
    let (dx, dy) = ((x1 - x0) / resolution as f64, (y1 - y0) / resolution as f64);
    if !(dx > 0.0 && dy > 0.0) {
        return Ok(0.0);
    }
    let (mut in_a, mut in_b, mut both) = (0u64, 0u64, 0u64);
    for j in 0..resolution {
        let y = y0 + (j as f64 + 0.5) * dy;
        for i in 0..resolution {
            let p = Point2::new(x0 + (i as f64 + 0.5) * dx, y);
            let (ia, ib) = (point_in_obb(p, a), point_in_obb(p, b));
            in_a += ia as u64;
            in_b += ib as u64;
            both += (ia && ib) as u64;
        }
    }
    let union = in_a + in_b - both;
    if union == 0 {
        return Ok(0.0);
    }
    Ok(both as f64 / union as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_4;

    fn obb(cx: f64, cy: f64, w: f64, h: f64, t: f64) -> OrientedBox {
        OrientedBox::new(cx, cy, w, h, t).unwrap()
    }

    fn assert_vertex_set(poly: &ConvexPolygon, expected: &[(f64, f64)]) {
        assert_eq!(poly.len(), expected.len());
        for &(x, y) in expected {
            assert!(
                poly.vertices().iter().any(|v| (v.x - x).abs() < 1e-12 && (v.y - y).abs() < 1e-12),
                "missing vertex ({x}, {y}) in {:?}",
                poly.vertices()
            );
        }
    }

    #[test]
    fn rotation_matrix_cases() {
        assert_eq!(rotation_matrix(0.0).unwrap(), [[1.0, -0.0], [0.0, 1.0]]);
        let q = rotate(&rotation_matrix(FRAC_PI_2).unwrap(), Point2::new(1.0, 0.0));
        assert!(q.x.abs() < 1e-15 && (q.y - 1.0).abs() < 1e-15);
        // √2/2 to 20 digits: 0.70710678118654752440
        let r = rotate(&rotation_matrix(FRAC_PI_4).unwrap(), Point2::new(1.0, 0.0));
        assert!((r.x - 0.707_106_781_186_547_5).abs() < 1e-15);
        assert!((r.y - 0.707_106_781_186_547_5).abs() < 1e-15);
        assert!(rotation_matrix(f64::NAN).is_err());
        assert!(rotation_matrix(f64::INFINITY).is_err());
    }

    #[test]
    fn rotation_determinant_is_one() {
        for k in -20..20 {
            let m = rotation_matrix(k as f64 * 0.37).unwrap();
            let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
            assert!((det - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn construction_validates_and_normalizes() {
        assert!(OrientedBox::new(0.0, 0.0, 0.0, 1.0, 0.0).is_err());
        assert!(OrientedBox::new(0.0, 0.0, 1.0, -1.0, 0.0).is_err());
        assert!(OrientedBox::new(f64::NAN, 0.0, 1.0, 1.0, 0.0).is_err());
        assert_eq!(obb(0.0, 0.0, 1.0, 1.0, FRAC_PI_2).theta(), -FRAC_PI_2);
        assert!((obb(0.0, 0.0, 1.0, 1.0, PI + 0.25).theta() - 0.25).abs() < 1e-12);
        for k in -50..50 {
            let t = obb(0.0, 0.0, 1.0, 1.0, k as f64 * 0.731).theta();
            assert!((-FRAC_PI_2..FRAC_PI_2).contains(&t));
        }
    }

    #[test]
    fn corners_axis_aligned() {
        let c = corners_of(&obb(0.0, 0.0, 2.0, 2.0, 0.0));
        assert_vertex_set(&c, &[(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)]);
        assert!(c.signed_area() > 0.0);
    }

    #[test]
    fn corners_quarter_turn_swaps_extents() {
        let c = corners_of(&obb(0.0, 0.0, 2.0, 1.0, FRAC_PI_2));
        assert_vertex_set(&c, &[(0.5, 1.0), (-0.5, 1.0), (-0.5, -1.0), (0.5, -1.0)]);
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn corners_rotated_eighth_turn() {
        // (5,5) + R(π/4)·(±2, ±1); √2/2 ≈ 0.7071067811865476, 3√2/2 ≈ 2.1213203435596424.
        let (a, b) = (0.707_106_781_186_547_6, 2.121_320_343_559_642_4);
        let c = corners_of(&obb(5.0, 5.0, 4.0, 2.0, FRAC_PI_4));
        assert_vertex_set(&c, &[(5.0 + a, 5.0 + b), (5.0 + b, 5.0 + a), (5.0 - a, 5.0 - b), (5.0 - b, 5.0 - a)]);
        assert!((c.area() - 8.0).abs() < 1e-12);
    }

    #[test]
    fn point_containment() {
        let b = obb(3.0, -2.0, 4.0, 2.0, 0.3);
        assert!(point_in_obb(b.center(), &b));
        let far = b.half_diagonal() + 1e-6;
        assert!(!point_in_obb(b.center() + Point2::new(far, 0.0), &b));
        assert!(point_in_obb(Point2::new(0.9, 1.9), &obb(0.0, 0.0, 4.0, 2.0, FRAC_PI_2)));
        assert!(!point_in_obb(Point2::new(1.9, 0.9), &obb(0.0, 0.0, 4.0, 2.0, FRAC_PI_2)));
        // Boundary counts as inside.
        assert!(point_in_obb(Point2::new(1.0, 0.0), &obb(0.0, 0.0, 2.0, 2.0, 0.0)));
        assert!(point_in_obb(Point2::new(1.0, 1.0), &obb(0.0, 0.0, 2.0, 2.0, 0.0)));
    }

    #[test]
    fn intersect_area_cases() {
        let a = obb(0.0, 0.0, 3.0, 2.0, 0.4);
        assert!((intersect_area(&a, &a) - 6.0).abs() < 1e-9);
        let u = obb(0.0, 0.0, 1.0, 1.0, 0.0);
        assert_eq!(intersect_area(&u, &obb(1000.0, 0.0, 1.0, 1.0, 0.0)), 0.0);
        assert!((intersect_area(&u, &obb(0.5, 0.0, 1.0, 1.0, 0.0)) - 0.5).abs() < 1e-12);
        // Touching edges share no area.
        assert_eq!(intersect_area(&u, &obb(1.0, 0.0, 1.0, 1.0, 0.0)), 0.0);
        // Nested: the small box is fully contained.
        let small = obb(0.1, 0.0, 0.5, 0.25, 0.7);
        assert!((intersect_area(&obb(0.0, 0.0, 4.0, 4.0, 0.2), &small) - 0.125).abs() < 1e-12);
    }

    #[test]
    fn half_overlap_matches_raster() {
        let (a, b) = (obb(0.0, 0.0, 1.0, 1.0, 0.0), obb(0.5, 0.0, 1.0, 1.0, 0.0));
        let raster = raster_iou_oracle(&a, &b, 1024).unwrap();
        let exact_area = intersect_area(&a, &b);
        // area from the raster IoU: I = r·(A+B)/(1+r)
        let raster_area = raster * 2.0 / (1.0 + raster);
        assert!((raster_area - exact_area).abs() / exact_area < 0.005);
    }

    #[test]
    fn iou_cases() {
        let a = obb(2.0, 1.0, 3.0, 5.0, -0.8);
        assert_eq!(iou(&a, &a), 1.0);
        let u = obb(0.0, 0.0, 1.0, 1.0, 0.0);
        assert_eq!(iou(&u, &obb(10.0, 10.0, 1.0, 1.0, 0.0)), 0.0);
        let half = obb(0.5, 0.0, 1.0, 1.0, 0.0);
        assert!((iou(&u, &half) - 1.0 / 3.0).abs() < 1e-12);
        assert!((raster_iou_oracle(&u, &half, 512).unwrap() - 1.0 / 3.0).abs() < 0.01);
    }

    #[test]
    fn raster_oracle_edges() {
        let a = obb(0.0, 0.0, 7.0, 3.0, 0.2);
        assert!(raster_iou_oracle(&a, &a, 32).is_err());
        for res in [64, 100, 256] {
            assert!((raster_iou_oracle(&a, &a, res).unwrap() - 1.0).abs() <= 1.0 / res as f64);
        }
        assert_eq!(raster_iou_oracle(&a, &obb(100.0, 0.0, 1.0, 1.0, 0.0), 128).unwrap(), 0.0);
    }

    #[test]
    fn midpoints_of_edges_are_inside() {
        let b = obb(-4.0, 9.0, 13.0, 2.5, 1.1);
        let v = corners_of(&b);
        let v = v.vertices();
        for i in 0..4 {
            let m = (v[i] + v[(i + 1) % 4]) * 0.5;
            assert!(point_in_obb(m, &b));
        }
    }

    fn arb_box() -> impl Strategy<Value = OrientedBox> {
        (-50.0..50.0f64, -50.0..50.0f64, 4.0..128.0f64, 4.0..128.0f64, -FRAC_PI_2..FRAC_PI_2)
            .prop_map(|(x, y, w, h, t)| OrientedBox::new(x, y, w, h, t).unwrap())
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn shoelace_matches_extents(b in arb_box()) {
            let area = corners_of(&b).signed_area();
            prop_assert!((area - b.w() * b.h()).abs() <= 1e-9 * b.w() * b.h());
            prop_assert!(corners_of(&b).is_convex());
        }

        #[test]
        fn intersection_is_convex_and_bounded(a in arb_box(), b in arb_box()) {
            if let Some(poly) = intersection_polygon(&a, &b) {
                prop_assert!(poly.is_convex());
                prop_assert!((3..=8).contains(&poly.len()));
            }
            let area = intersect_area(&a, &b);
            prop_assert!(area >= 0.0 && area <= a.area().min(b.area()));
        }

        #[test]
        fn rigid_motion_invariance(a in arb_box(), b in arb_box(),
                                   angle in -PI..PI, dx in -500.0..500.0f64, dy in -500.0..500.0f64) {
            let before = iou(&a, &b);
            let after = iou(&a.rigid_motion(angle, dx, dy).unwrap(), &b.rigid_motion(angle, dx, dy).unwrap());
            prop_assert!((before - after).abs() < 1e-9);
        }
    }
}
