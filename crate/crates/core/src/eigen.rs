//! Eigendecomposition of symmetric 3×3 matrices.
//!
//! Eigenvalues come from the trigonometric solution of the characteristic
//! cubic and eigenvectors from cross products of the rows of `A - λI`. When
//! two eigenvalues nearly coincide that route loses accuracy, so the result
//! is checked against its residual and recomputed with cyclic Jacobi
//! rotations if it falls short.

use serde::{Deserialize, Serialize};

/// Symmetric 3×3 matrix stored as its six unique entries
/// `[xx, yy, zz, xy, xz, yz]`.
pub type Sym3 = [f64; 6];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EigenSystem {
    /// Descending.
    pub values: [f64; 3],
    /// `vectors[k]` pairs with `values[k]`; orthonormal.
    pub vectors: [[f64; 3]; 3],
}

pub fn to_full(a: &Sym3) -> [[f64; 3]; 3] {
    [[a[0], a[3], a[4]], [a[3], a[1], a[5]], [a[4], a[5], a[2]]]
}

pub fn from_full(m: &[[f64; 3]; 3]) -> Sym3 {
    [m[0][0], m[1][1], m[2][2], m[0][1], m[0][2], m[1][2]]
}

pub fn frobenius(a: &Sym3) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2] + 2.0 * (a[3] * a[3] + a[4] * a[4] + a[5] * a[5])).sqrt()
}

fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn normalize(v: [f64; 3]) -> Option<[f64; 3]> {
    let n = dot(&v, &v).sqrt();
    (n > 0.0 && n.is_finite()).then(|| [v[0] / n, v[1] / n, v[2] / n])
}

pub fn mat_vec(a: &Sym3, v: &[f64; 3]) -> [f64; 3] {
    [
        a[0] * v[0] + a[3] * v[1] + a[4] * v[2],
        a[3] * v[0] + a[1] * v[1] + a[5] * v[2],
        a[4] * v[0] + a[5] * v[1] + a[2] * v[2],
    ]
}

fn cubic_eigenvalues(a: &Sym3) -> [f64; 3] {
    let p1 = a[3] * a[3] + a[4] * a[4] + a[5] * a[5];
    let q = (a[0] + a[1] + a[2]) / 3.0;
    let (d0, d1, d2) = (a[0] - q, a[1] - q, a[2] - q);
    let p2 = d0 * d0 + d1 * d1 + d2 * d2 + 2.0 * p1;
    if p2 == 0.0 {
        return [q, q, q];
    }
    let p = (p2 / 6.0).sqrt();
    let b = [d0 / p, d1 / p, d2 / p, a[3] / p, a[4] / p, a[5] / p];
    let det = b[0] * (b[1] * b[2] - b[5] * b[5]) - b[3] * (b[3] * b[2] - b[5] * b[4])
        + b[4] * (b[3] * b[5] - b[1] * b[4]);
    let r = (det / 2.0).clamp(-1.0, 1.0);
    let phi = r.acos() / 3.0;
    let e1 = q + 2.0 * p * phi.cos();
    let e3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::FRAC_PI_3).cos();
    let e2 = 3.0 * q - e1 - e3;
    [e1, e2, e3]
}

/// Null vector of `A - λI` from the best-conditioned row cross product.
fn null_vector(a: &Sym3, lambda: f64) -> Option<[f64; 3]> {
    let m = to_full(a);
    let r0 = [m[0][0] - lambda, m[0][1], m[0][2]];
    let r1 = [m[1][0], m[1][1] - lambda, m[1][2]];
    let r2 = [m[2][0], m[2][1], m[2][2] - lambda];
    let cands = [cross(&r0, &r1), cross(&r0, &r2), cross(&r1, &r2)];
    let best = cands
        .iter()
        .max_by(|x, y| dot(x, x).total_cmp(&dot(y, y)))
        .copied()?;
    normalize(best)
}

fn closed_form(a: &Sym3) -> Option<EigenSystem> {
    let values = cubic_eigenvalues(a);
    let v1 = null_vector(a, values[0])?;
    let v3 = null_vector(a, values[2])?;
    // Re-orthogonalize v3 against v1 before completing the frame.
    let proj = dot(&v1, &v3);
    let v3 = normalize([v3[0] - proj * v1[0], v3[1] - proj * v1[1], v3[2] - proj * v1[2]])?;
    let v2 = cross(&v3, &v1);
    Some(EigenSystem {
        values,
        vectors: [v1, v2, v3],
    })
}

fn max_residual(a: &Sym3, es: &EigenSystem) -> f64 {
    (0..3)
        .map(|k| {
            let av = mat_vec(a, &es.vectors[k]);
            let l = es.values[k];
            let r = [
                av[0] - l * es.vectors[k][0],
                av[1] - l * es.vectors[k][1],
                av[2] - l * es.vectors[k][2],
            ];
            dot(&r, &r).sqrt()
        })
        .fold(0.0, f64::max)
}

/// Cyclic Jacobi eigenvalue iteration.
pub fn jacobi(a: &Sym3) -> EigenSystem {
    let mut m = to_full(a);
    let mut v = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let scale = frobenius(a);
    for _sweep in 0..64 {
        let off = m[0][1] * m[0][1] + m[0][2] * m[0][2] + m[1][2] * m[1][2];
        if off.sqrt() <= f64::EPSILON * f64::EPSILON * scale || off == 0.0 {
            break;
        }
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            if m[p][q] == 0.0 {
                continue;
            }
            let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let t = if theta == 0.0 { 1.0 } else { t };
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            for k in 0..3 {
                let mkp = m[k][p];
                let mkq = m[k][q];
                m[k][p] = c * mkp - s * mkq;
                m[k][q] = s * mkp + c * mkq;
            }
            for k in 0..3 {
                let mpk = m[p][k];
                let mqk = m[q][k];
                m[p][k] = c * mpk - s * mqk;
                m[q][k] = s * mpk + c * mqk;
            }
            for row in v.iter_mut() {
                let vp = row[p];
                let vq = row[q];
                row[p] = c * vp - s * vq;
                row[q] = s * vp + c * vq;
            }
        }
    }
    let mut pairs: Vec<(f64, [f64; 3])> = (0..3).map(|k| (m[k][k], [v[0][k], v[1][k], v[2][k]])).collect();
    pairs.sort_by(|x, y| y.0.total_cmp(&x.0));
    EigenSystem {
        values: [pairs[0].0, pairs[1].0, pairs[2].0],
        vectors: [pairs[0].1, pairs[1].1, pairs[2].1],
    }
}

/// Eigenvalues (descending) and orthonormal eigenvectors of a symmetric 3×3
/// matrix.
pub fn eigen3_sym(a: &Sym3) -> EigenSystem {
    let scale = frobenius(a);
    if scale == 0.0 {
        return EigenSystem {
            values: [0.0; 3],
            vectors: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        };
    }
    if a[3] == 0.0 && a[4] == 0.0 && a[5] == 0.0 {
        return jacobi(a);
    }
    match closed_form(a) {
        Some(es) if max_residual(a, &es) <= 32.0 * f64::EPSILON * scale => es,
        _ => jacobi(a),
    }
}
