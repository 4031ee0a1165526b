//! Small 2-D vector and polyline helpers shared across the crate.

pub type Point = [f64; 2];

pub fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1]]
}

pub fn add(a: Point, b: Point) -> Point {
    [a[0] + b[0], a[1] + b[1]]
}

pub fn scale(p: Point, s: f64) -> Point {
    [p[0] * s, p[1] * s]
}

pub fn norm(p: Point) -> f64 {
    p[0].hypot(p[1])
}

pub fn dist(a: Point, b: Point) -> f64 {
    norm(sub(a, b))
}

pub fn manhattan(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).abs() + (a[1] - b[1]).abs()
}

pub fn rotate(p: Point, angle: f64) -> Point {
    let (s, c) = angle.sin_cos();
    [c * p[0] - s * p[1], s * p[0] + c * p[1]]
}

pub fn lerp(a: Point, b: Point, t: f64) -> Point {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t]
}

pub fn polyline_length(poly: &[Point]) -> f64 {
    poly.windows(2).map(|w| dist(w[0], w[1])).sum()
}

/// Point at arc length `s` along the polyline, clamped to its endpoints.
pub fn point_at_arc_length(poly: &[Point], s: f64) -> Point {
    assert!(!poly.is_empty(), "empty polyline");
    if s <= 0.0 {
        return poly[0];
    }
    let mut travelled = 0.0;
    for w in poly.windows(2) {
        let seg = dist(w[0], w[1]);
        if travelled + seg >= s && seg > 0.0 {
            return lerp(w[0], w[1], (s - travelled) / seg);
        }
        travelled += seg;
    }
    *poly.last().unwrap()
}

/// Tangent direction of the segment containing arc length `s`.
pub fn tangent_at_arc_length(poly: &[Point], s: f64) -> Point {
    assert!(poly.len() >= 2, "tangent needs at least two points");
    let mut travelled = 0.0;
    let mut last = [1.0, 0.0];
    for w in poly.windows(2) {
        let seg = dist(w[0], w[1]);
        if seg > 0.0 {
            last = scale(sub(w[1], w[0]), 1.0 / seg);
            if travelled + seg >= s {
                return last;
            }
        }
        travelled += seg;
    }
    last
}

/// Resample to exactly `n` points, uniformly spaced by arc length.
pub fn resample(poly: &[Point], n: usize) -> Vec<Point> {
    assert!(n >= 2 && !poly.is_empty(), "resample needs n >= 2 and points");
    let total = polyline_length(poly);
    if total == 0.0 {
        return vec![poly[0]; n];
    }
    (0..n)
        .map(|i| point_at_arc_length(poly, total * i as f64 / (n - 1) as f64))
        .collect()
}

/// Smallest Euclidean distance from `q` to any vertex of `points`.
pub fn min_point_dist(points: &[Point], q: Point) -> f64 {
    points.iter().map(|&p| dist(p, q)).fold(f64::INFINITY, f64::min)
}

/// Mean over `a` of the nearest-vertex distance into `b`.
pub fn directed_chamfer(a: &[Point], b: &[Point]) -> f64 {
    assert!(!a.is_empty() && !b.is_empty(), "chamfer of empty polyline");
    a.iter().map(|&p| min_point_dist(b, p)).sum::<f64>() / a.len() as f64
}

/// Symmetric chamfer distance: mean of the two directed means.
pub fn chamfer(a: &[Point], b: &[Point]) -> f64 {
    0.5 * (directed_chamfer(a, b) + directed_chamfer(b, a))
}
