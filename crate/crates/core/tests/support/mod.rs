//! Shared independent oracles for the integration suites. Everything here is
//! deliberately written against the math, not the library internals, so the
//! implementations they check cannot leak back in.

#![allow(dead_code)]

use nalgebra::{Matrix3, Matrix4, Point3, Vector3};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha12Rng {
    use rand::SeedableRng;
    ChaCha12Rng::seed_from_u64(seed)
}

pub fn random_point(rng: &mut ChaCha12Rng, extent: f64) -> Point3<f64> {
    Point3::new(
        rng.random_range(-extent..extent),
        rng.random_range(-extent..extent),
        rng.random_range(-extent..extent),
    )
}

pub fn random_points(rng: &mut ChaCha12Rng, n: usize, extent: f64) -> Vec<Point3<f64>> {
    (0..n).map(|_| random_point(rng, extent)).collect()
}

/// Rodrigues rotation about a unit axis, coded directly from the formula.
pub fn axis_angle_rotation(axis: Vector3<f64>, angle: f64) -> Matrix3<f64> {
    let u = axis.normalize();
    let k = Matrix3::new(0.0, -u.z, u.y, u.z, 0.0, -u.x, -u.y, u.x, 0.0);
    Matrix3::identity() + angle.sin() * k + (1.0 - angle.cos()) * (k * k)
}

pub fn random_unit_vector(rng: &mut ChaCha12Rng) -> Vector3<f64> {
    loop {
        let x: f64 = StandardNormal.sample(rng);
        let y: f64 = StandardNormal.sample(rng);
        let z: f64 = StandardNormal.sample(rng);
        let v = Vector3::new(x, y, z);
        let n = v.norm();
        if n > 1e-6 {
            return v / n;
        }
    }
}

pub fn random_rotation_matrix(rng: &mut ChaCha12Rng) -> Matrix3<f64> {
    let axis = random_unit_vector(rng);
    let angle = rng.random_range(0.0..std::f64::consts::PI);
    axis_angle_rotation(axis, angle)
}

/// Horn's closed-form quaternion solution for least-squares rigid alignment:
/// an independent route to the same optimum the SVD method finds.
pub fn horn_align(
    source: &[Point3<f64>],
    target: &[Point3<f64>],
) -> (Matrix3<f64>, Vector3<f64>) {
    assert_eq!(source.len(), target.len());
    let n = source.len() as f64;
    let sc = source.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / n;
    let tc = target.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / n;
    let mut m = Matrix3::zeros();
    for (s, t) in source.iter().zip(target.iter()) {
        m += (s.coords - sc) * (t.coords - tc).transpose();
    }
    let (sxx, sxy, sxz) = (m[(0, 0)], m[(0, 1)], m[(0, 2)]);
    let (syx, syy, syz) = (m[(1, 0)], m[(1, 1)], m[(1, 2)]);
    let (szx, szy, szz) = (m[(2, 0)], m[(2, 1)], m[(2, 2)]);
    let q = Matrix4::new(
        sxx + syy + szz,
        syz - szy,
        szx - sxz,
        sxy - syx,
        syz - szy,
        sxx - syy - szz,
        sxy + syx,
        szx + sxz,
        szx - sxz,
        sxy + syx,
        -sxx + syy - szz,
        syz + szy,
        sxy - syx,
        szx + sxz,
        syz + szy,
        -sxx - syy + szz,
    );
    let eig = q.symmetric_eigen();
    let mut best = 0;
    for i in 1..4 {
        if eig.eigenvalues[i] > eig.eigenvalues[best] {
            best = i;
        }
    }
    let v = eig.eigenvectors.column(best);
    let (w, x, y, z) = (v[0], v[1], v[2], v[3]);
    let rotation = Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    );
    let translation = tc - rotation * sc;
    (rotation, translation)
}

/// Angle between two rotations in degrees, via the Frobenius chord
/// `‖AᵀB − I‖_F = 2√2·sin(θ/2)`. Unlike the arccos-of-trace form this has
/// full precision near zero, which matters when certifying sub-microdegree
/// recovery.
pub fn precise_rotation_angle_deg(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let d = a.transpose() * b - Matrix3::identity();
    let chord = d.norm() / (2.0 * std::f64::consts::SQRT_2);
    2.0 * chord.clamp(0.0, 1.0).asin().to_degrees()
}

/// Exhaustive nearest neighbor: index and squared distance, ties to the
/// lowest index.
pub fn exhaustive_nearest(points: &[Point3<f64>], q: &Point3<f64>) -> (usize, f64) {
    let d2 = |a: &Point3<f64>, b: &Point3<f64>| {
        let dx = a.x - b.x;
        let dy = a.y - b.y;
        let dz = a.z - b.z;
        dx * dx + dy * dy + dz * dz
    };
    let mut best = (0usize, d2(q, &points[0]));
    for (i, p) in points.iter().enumerate().skip(1) {
        let d = d2(q, p);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// O(nm) Chamfer distance, straight from the formula.
pub fn exhaustive_chamfer(a: &[Point3<f64>], b: &[Point3<f64>]) -> f64 {
    let mean = |from: &[Point3<f64>], to: &[Point3<f64>]| {
        from.iter()
            .map(|p| exhaustive_nearest(to, p).1)
            .sum::<f64>()
            / from.len() as f64
    };
    (0.5 * (mean(a, b) + mean(b, a))).sqrt()
}

/// O(K²·N) greedy farthest point sampling reference: recomputes every
/// min-distance from scratch each round; ties to the lowest index.
pub fn reference_fps(points: &[Point3<f64>], k: usize, first: usize) -> Vec<usize> {
    let mut selected = vec![first];
    while selected.len() < k {
        let mut best_idx = 0;
        let mut best_d2 = f64::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            let min_d2 = selected
                .iter()
                .map(|&s| (p - points[s]).norm_squared())
                .fold(f64::INFINITY, f64::min);
            if min_d2 > best_d2 {
                best_d2 = min_d2;
                best_idx = i;
            }
        }
        selected.push(best_idx);
    }
    selected
}

/// Direct evaluation of the rigidity residual: per view, align inputs onto
/// the prediction with the Horn oracle and accumulate squared gaps.
pub fn direct_rigidity_residual(
    prediction: &[Vec<Point3<f64>>],
    inputs: &[Vec<Point3<f64>>],
) -> f64 {
    let mut sum_sq = 0.0;
    let mut count = 0usize;
    for (pred, inp) in prediction.iter().zip(inputs.iter()) {
        let (r, t) = horn_align(inp, pred);
        for (p, q) in pred.iter().zip(inp.iter()) {
            sum_sq += (p.coords - (r * q.coords + t)).norm_squared();
        }
        count += pred.len();
    }
    (sum_sq / count as f64).sqrt()
}
