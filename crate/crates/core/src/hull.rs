//! 2D convex hull (monotone chain) and polygon area.

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Counter-clockwise hull vertices without repeats; collinear points dropped.
pub fn convex_hull(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<(f64, f64)> = Vec::with_capacity(2 * pts.len());
    for &p in &pts {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    // Upper chain must not pop into the lower one.
    let floor = hull.len() + 1;
    for &p in pts.iter().rev().skip(1) {
        while hull.len() >= floor && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    if hull.len() < 3 {
        hull.clear();
    }
    hull
}

/// Shoelace area of a simple polygon (absolute value).
pub fn polygon_area(poly: &[(f64, f64)]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let twice: f64 = (0..poly.len())
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % poly.len()]);
            a.0 * b.1 - b.0 * a.1
        })
        .sum();
    twice.abs() / 2.0
}

/// Area of the convex hull; 0 for fewer than three non-collinear points.
pub fn hull_area(points: &[(f64, f64)]) -> f64 {
    polygon_area(&convex_hull(points))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_square() {
        let pts = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0), (0.5, 0.5)];
        assert_eq!(convex_hull(&pts).len(), 4);
        assert!((hull_area(&pts) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_inputs_have_zero_area() {
        assert_eq!(hull_area(&[]), 0.0);
        assert_eq!(hull_area(&[(1.0, 1.0)]), 0.0);
        assert_eq!(hull_area(&[(0.0, 0.0), (1.0, 1.0), (2.0, 2.0), (3.0, 3.0)]), 0.0);
        assert_eq!(hull_area(&[(0.0, 0.0), (0.0, 0.0), (0.0, 0.0)]), 0.0);
    }

    #[test]
    fn regular_polygon_area() {
        let n = 360;
        let pts: Vec<(f64, f64)> = (0..n)
            .map(|i| {
                let t = i as f64 / n as f64 * std::f64::consts::TAU;
                (3.0 * t.cos(), 3.0 * t.sin())
            })
            .collect();
        let exact = 0.5 * n as f64 * 9.0 * (std::f64::consts::TAU / n as f64).sin();
        assert!((hull_area(&pts) - exact).abs() < 1e-9);
    }
}
