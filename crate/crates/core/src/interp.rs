//! Periodic piecewise-linear interpolation of nodal data.

/// Linear interpolation of `(nodes, values)` at `x` on the periodic domain
/// `[0, length)`. `nodes` must be sorted; points left of the first node or
/// right of the last interpolate across the wrap.
pub fn periodic_linear(nodes: &[f64], values: &[f64], length: f64, x: f64) -> f64 {
    debug_assert_eq!(nodes.len(), values.len());
    let n = nodes.len();
    match n {
        0 => return f64::NAN,
        1 => return values[0],
        _ => {}
    }
    let idx = nodes.partition_point(|&z| z <= x);
    let (zl, ul, zr, ur) = if idx == 0 {
        (nodes[n - 1] - length, values[n - 1], nodes[0], values[0])
    } else if idx == n {
        (nodes[n - 1], values[n - 1], nodes[0] + length, values[0])
    } else {
        (nodes[idx - 1], values[idx - 1], nodes[idx], values[idx])
    };
    let width = zr - zl;
    if width <= 0.0 {
        return ul;
    }
    ul + (x - zl) / width * (ur - ul)
}

/// Interpolate onto many target points.
pub fn periodic_linear_many(
    nodes: &[f64],
    values: &[f64],
    length: f64,
    targets: &[f64],
) -> Vec<f64> {
    targets
        .iter()
        .map(|&x| periodic_linear(nodes, values, length, x))
        .collect()
}
