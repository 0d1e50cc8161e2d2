//! Real spherical harmonics, receiver-relative angles, Fibonacci lattices and
//! random rotations.
//!
//! Harmonics are orthonormal over the sphere and carry no Condon-Shortley
//! phase. Channels are flattened as `n^2 + n + m`.

use std::f64::consts::PI;

use rand::Rng;

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

/// Highest supported harmonic order.
pub const MAX_ORDER: usize = 3;

/// Pole/receiver distances are clamped to this many meters.
pub const R_MIN: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SphericalError {
    #[error("invalid harmonic index n={n}, m={m}")]
    BadIndex { n: usize, m: i64 },
    #[error("harmonic order {0} exceeds the supported maximum of {MAX_ORDER}")]
    OrderTooHigh(usize),
    #[error("point count must be positive")]
    EmptyLattice,
}

/// Number of harmonic channels up to and including `order`.
pub fn channel_count(order: usize) -> usize {
    (order + 1) * (order + 1)
}

/// A harmonic `Y_n^m`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShIndex {
    n: usize,
    m: i64,
}

impl ShIndex {
    pub fn new(n: usize, m: i64) -> Result<Self, SphericalError> {
        if m.unsigned_abs() as usize > n {
            return Err(SphericalError::BadIndex { n, m });
        }
        Ok(Self { n, m })
    }

    pub fn from_flat(flat: usize) -> Self {
        let n = (flat as f64).sqrt() as usize;
        // Guard against sqrt rounding at perfect squares.
        let n = if (n + 1) * (n + 1) <= flat { n + 1 } else { n };
        Self {
            n,
            m: flat as i64 - (n * n + n) as i64,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> i64 {
        self.m
    }

    pub fn flat(&self) -> usize {
        ((self.n * self.n + self.n) as i64 + self.m) as usize
    }
}

/// Polar coordinates of a pole as seen from a receiver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AngularPosition {
    pub r: f64,
    /// Polar angle from +z, in `[0, pi]`.
    pub theta: f64,
    /// Azimuth in `[-pi, pi)`.
    pub phi: f64,
}

impl AngularPosition {
    pub fn unit_vector(&self) -> Vec3 {
        let (st, ct) = self.theta.sin_cos();
        let (sp, cp) = self.phi.sin_cos();
        [st * cp, st * sp, ct]
    }
}

pub fn sub(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn norm(a: &Vec3) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

/// Distance and direction of `pole` seen from `receiver`. Distances below
/// [`R_MIN`] are clamped; a coincident pair points along +z.
pub fn to_angular(pole: &Vec3, receiver: &Vec3) -> AngularPosition {
    let d = sub(pole, receiver);
    let r = norm(&d);
    let (theta, phi) = if r > 0.0 {
        let theta = (d[2] / r).clamp(-1.0, 1.0).acos();
        let mut phi = d[1].atan2(d[0]);
        if phi >= PI {
            phi -= 2.0 * PI;
        }
        (theta, phi)
    } else {
        (0.0, 0.0)
    };
    AngularPosition {
        r: r.max(R_MIN),
        theta,
        phi,
    }
}

fn factorial(k: usize) -> f64 {
    (1..=k).map(|v| v as f64).product()
}

/// Associated Legendre function `P_n^m(x)` for `m >= 0` without the
/// Condon-Shortley phase.
fn assoc_legendre(n: usize, m: usize, x: f64) -> f64 {
    let s = (1.0 - x * x).max(0.0).sqrt();
    let mut pmm = 1.0;
    for i in 1..=m {
        pmm *= (2 * i - 1) as f64 * s;
    }
    if n == m {
        return pmm;
    }
    let mut prev = pmm;
    let mut cur = x * (2 * m + 1) as f64 * pmm;
    for l in (m + 2)..=n {
        let next = ((2 * l - 1) as f64 * x * cur - (l + m - 1) as f64 * prev) / (l - m) as f64;
        prev = cur;
        cur = next;
    }
    cur
}

/// Orthonormal real spherical harmonic evaluated at the direction of `dir`.
pub fn real_sph_harm(idx: ShIndex, dir: &AngularPosition) -> f64 {
    let n = idx.n;
    let am = idx.m.unsigned_abs() as usize;
    let k = ((2 * n + 1) as f64 * factorial(n - am) / (4.0 * PI * factorial(n + am))).sqrt();
    let p = assoc_legendre(n, am, dir.theta.cos());
    match idx.m {
        0 => k * p,
        m if m > 0 => 2f64.sqrt() * k * (am as f64 * dir.phi).cos() * p,
        _ => 2f64.sqrt() * k * (am as f64 * dir.phi).sin() * p,
    }
}

/// All real harmonics up to `order` at the unit vector `u`, written into
/// `out[flat]`. When `grad` is given, `grad[flat]` receives the gradient of
/// each harmonic's polynomial form with respect to `u`.
///
/// Uses Cartesian polynomial forms; `u` is assumed to have unit norm.
pub fn real_sh_cartesian(order: usize, u: &Vec3, out: &mut [f64], grad: Option<&mut [Vec3]>) {
    let [x, y, z] = *u;
    let c0 = 0.5 * (1.0 / PI).sqrt();
    let c1 = (3.0 / (4.0 * PI)).sqrt();
    let c2a = 0.5 * (15.0 / PI).sqrt();
    let c2b = 0.25 * (5.0 / PI).sqrt();
    let c2c = 0.25 * (15.0 / PI).sqrt();
    let c3a = 0.25 * (35.0 / (2.0 * PI)).sqrt();
    let c3b = 0.5 * (105.0 / PI).sqrt();
    let c3c = 0.25 * (21.0 / (2.0 * PI)).sqrt();
    let c3d = 0.25 * (7.0 / PI).sqrt();
    let c3e = 0.25 * (105.0 / PI).sqrt();

    out[0] = c0;
    if order >= 1 {
        out[1] = c1 * y;
        out[2] = c1 * z;
        out[3] = c1 * x;
    }
    if order >= 2 {
        out[4] = c2a * x * y;
        out[5] = c2a * y * z;
        out[6] = c2b * (3.0 * z * z - 1.0);
        out[7] = c2a * x * z;
        out[8] = c2c * (x * x - y * y);
    }
    if order >= 3 {
        out[9] = c3a * y * (3.0 * x * x - y * y);
        out[10] = c3b * x * y * z;
        out[11] = c3c * y * (5.0 * z * z - 1.0);
        out[12] = c3d * (5.0 * z * z * z - 3.0 * z);
        out[13] = c3c * x * (5.0 * z * z - 1.0);
        out[14] = c3e * z * (x * x - y * y);
        out[15] = c3a * x * (x * x - 3.0 * y * y);
    }

    let Some(g) = grad else { return };
    g[0] = [0.0; 3];
    if order >= 1 {
        g[1] = [0.0, c1, 0.0];
        g[2] = [0.0, 0.0, c1];
        g[3] = [c1, 0.0, 0.0];
    }
    if order >= 2 {
        g[4] = [c2a * y, c2a * x, 0.0];
        g[5] = [0.0, c2a * z, c2a * y];
        g[6] = [0.0, 0.0, 6.0 * c2b * z];
        g[7] = [c2a * z, 0.0, c2a * x];
        g[8] = [2.0 * c2c * x, -2.0 * c2c * y, 0.0];
    }
    if order >= 3 {
        g[9] = [6.0 * c3a * x * y, c3a * (3.0 * x * x - 3.0 * y * y), 0.0];
        g[10] = [c3b * y * z, c3b * x * z, c3b * x * y];
        g[11] = [0.0, c3c * (5.0 * z * z - 1.0), 10.0 * c3c * y * z];
        g[12] = [0.0, 0.0, c3d * (15.0 * z * z - 3.0)];
        g[13] = [c3c * (5.0 * z * z - 1.0), 0.0, 10.0 * c3c * x * z];
        g[14] = [2.0 * c3e * x * z, -2.0 * c3e * y * z, c3e * (x * x - y * y)];
        g[15] = [c3a * (3.0 * x * x - 3.0 * y * y), -6.0 * c3a * x * y, 0.0];
    }
}

/// Fibonacci lattice of `count` unit vectors.
pub fn fibonacci_sphere(count: usize) -> Result<Vec<Vec3>, SphericalError> {
    if count == 0 {
        return Err(SphericalError::EmptyLattice);
    }
    let golden = (1.0 + 5f64.sqrt()) / 2.0;
    Ok((0..count)
        .map(|i| {
            let z = 1.0 - (2 * i + 1) as f64 / count as f64;
            let rho = (1.0 - z * z).max(0.0).sqrt();
            let phi = 2.0 * PI * i as f64 * (1.0 - 1.0 / golden);
            [rho * phi.cos(), rho * phi.sin(), z]
        })
        .collect())
}

/// Uniformly distributed rotation matrix, built from a uniform unit quaternion.
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Mat3 {
    let u1: f64 = rng.gen();
    let u2: f64 = rng.gen();
    let u3: f64 = rng.gen();
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    let (s2, c2) = (2.0 * PI * u2).sin_cos();
    let (s3, c3) = (2.0 * PI * u3).sin_cos();
    let (x, y, z, w) = (a * s2, a * c2, b * s3, b * c3);
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - z * w),
            2.0 * (x * z + y * w),
        ],
        [
            2.0 * (x * y + z * w),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - x * w),
        ],
        [
            2.0 * (x * z - y * w),
            2.0 * (y * z + x * w),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

pub fn rotate(m: &Mat3, v: &Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}
