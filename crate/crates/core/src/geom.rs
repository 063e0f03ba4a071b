//! Small fixed-size vector helpers. Points are `[x, y, z]` in millimetres.

pub type P3 = [f64; 3];

#[inline]
pub fn add(a: P3, b: P3) -> P3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub(a: P3, b: P3) -> P3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale(a: P3, s: f64) -> P3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot(a: P3, b: P3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross(a: P3, b: P3) -> P3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

#[inline]
pub fn norm(a: P3) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn dist(a: P3, b: P3) -> f64 {
    norm(sub(a, b))
}

/// Unit vector along `a`; returns `a` unchanged when it has zero length.
#[inline]
pub fn normalize(a: P3) -> P3 {
    let n = norm(a);
    if n > 0.0 {
        scale(a, 1.0 / n)
    } else {
        a
    }
}

#[inline]
pub fn lerp(a: P3, b: P3, t: f64) -> P3 {
    add(a, scale(sub(b, a), t))
}

/// Closest point parameter `t ∈ [0, 1]` on segment `ab` to `p`, and the distance.
#[inline]
pub fn point_segment(p: P3, a: P3, b: P3) -> (f64, f64) {
    let ab = sub(b, a);
    let len2 = dot(ab, ab);
    let t = if len2 > 0.0 { (dot(sub(p, a), ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
    (t, dist(p, lerp(a, b, t)))
}

/// Minimum distance between segments `p0p1` and `q0q1`.
pub fn segment_segment(p0: P3, p1: P3, q0: P3, q1: P3) -> f64 {
    let d1 = sub(p1, p0);
    let d2 = sub(q1, q0);
    let r = sub(p0, q0);
    let a = dot(d1, d1);
    let e = dot(d2, d2);
    let f = dot(d2, r);
    const EPS: f64 = 1e-18;
    let (s, t);
    if a <= EPS && e <= EPS {
        return dist(p0, q0);
    }
    if a <= EPS {
        s = 0.0;
        t = (f / e).clamp(0.0, 1.0);
    } else {
        let c = dot(d1, r);
        if e <= EPS {
            t = 0.0;
            s = (-c / a).clamp(0.0, 1.0);
        } else {
            let b = dot(d1, d2);
            let denom = a * e - b * b;
            let mut s0 = if denom > EPS { ((b * f - c * e) / denom).clamp(0.0, 1.0) } else { 0.0 };
            let mut t0 = (b * s0 + f) / e;
            if t0 < 0.0 {
                t0 = 0.0;
                s0 = (-c / a).clamp(0.0, 1.0);
            } else if t0 > 1.0 {
                t0 = 1.0;
                s0 = ((b - c) / a).clamp(0.0, 1.0);
            }
            s = s0;
            t = t0;
        }
    }
    dist(add(p0, scale(d1, s)), add(q0, scale(d2, t)))
}

/// Some unit vector perpendicular to the unit vector `v`.
pub fn any_perpendicular(v: P3) -> P3 {
    let pick = if v[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    normalize(cross(v, pick))
}

/// Rodrigues rotation of `v` about the unit `axis` by `angle` radians.
pub fn rotate(v: P3, axis: P3, angle: f64) -> P3 {
    let (s, c) = angle.sin_cos();
    let k_cross_v = cross(axis, v);
    let k_dot_v = dot(axis, v);
    add(add(scale(v, c), scale(k_cross_v, s)), scale(axis, k_dot_v * (1.0 - c)))
}

/// Angle between two vectors in degrees.
pub fn angle_deg(a: P3, b: P3) -> f64 {
    let c = dot(normalize(a), normalize(b)).clamp(-1.0, 1.0);
    c.acos().to_degrees()
}

/// Arc length of a polyline.
pub fn polyline_length(poly: &[P3]) -> f64 {
    poly.windows(2).map(|w| dist(w[0], w[1])).sum()
}
