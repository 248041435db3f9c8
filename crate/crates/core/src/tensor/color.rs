//! Per-pixel sRGB <-> CIE L*a*b* (D65) conversion with analytic Jacobians.
//!
//! Values outside [0, 1] are accepted: both companding curves and the Lab
//! cube-root are extended piecewise so the maps stay total.

type Mat3 = [[f64; 3]; 3];

const RGB_TO_XYZ: Mat3 = [
    [0.412_456_4, 0.357_576_1, 0.180_437_5],
    [0.212_672_9, 0.715_152_2, 0.072_175_0],
    [0.019_333_9, 0.119_192_0, 0.950_304_1],
];

const WHITE: [f64; 3] = [0.950_47, 1.0, 1.088_83];

const DELTA: f64 = 6.0 / 29.0;

fn xyz_to_rgb() -> Mat3 {
    let m = RGB_TO_XYZ;
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let mut inv = [[0.0; 3]; 3];
    for (r, row) in inv.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            // cofactor of (c, r)
            let (r0, r1) = match c {
                0 => (1, 2),
                1 => (0, 2),
                _ => (0, 1),
            };
            let (c0, c1) = match r {
                0 => (1, 2),
                1 => (0, 2),
                _ => (0, 1),
            };
            let minor = m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
            let sign = if (r + c) % 2 == 0 { 1.0 } else { -1.0 };
            *v = sign * minor / det;
        }
    }
    inv
}

fn srgb_to_linear(c: f64) -> (f64, f64) {
    if c <= 0.040_45 {
        (c / 12.92, 1.0 / 12.92)
    } else {
        let base = (c + 0.055) / 1.055;
        (base.powf(2.4), 2.4 / 1.055 * base.powf(1.4))
    }
}

fn linear_to_srgb(l: f64) -> (f64, f64) {
    if l <= 0.003_130_8 {
        (12.92 * l, 12.92)
    } else {
        let p = l.powf(1.0 / 2.4);
        (1.055 * p - 0.055, 1.055 / 2.4 * p / l)
    }
}

fn lab_f(t: f64) -> (f64, f64) {
    if t > DELTA * DELTA * DELTA {
        let r = t.cbrt();
        (r, 1.0 / (3.0 * r * r))
    } else {
        let k = 1.0 / (3.0 * DELTA * DELTA);
        (t * k + 4.0 / 29.0, k)
    }
}

fn lab_f_inv(f: f64) -> (f64, f64) {
    if f > DELTA {
        (f * f * f, 3.0 * f * f)
    } else {
        let k = 3.0 * DELTA * DELTA;
        (k * (f - 4.0 / 29.0), k)
    }
}

fn matvec(m: &Mat3, v: [f64; 3]) -> [f64; 3] {
    std::array::from_fn(|r| m[r][0] * v[0] + m[r][1] * v[1] + m[r][2] * v[2])
}

fn matmul(a: &Mat3, b: &Mat3) -> Mat3 {
    std::array::from_fn(|r| std::array::from_fn(|c| (0..3).map(|k| a[r][k] * b[k][c]).sum()))
}

/// sRGB pixel to Lab, plus the Jacobian `d lab / d rgb` (row = output).
pub(crate) fn rgb_to_lab_jac(rgb: [f64; 3]) -> ([f64; 3], Mat3) {
    let lin: [(f64, f64); 3] = std::array::from_fn(|i| srgb_to_linear(rgb[i]));
    let xyz = matvec(&RGB_TO_XYZ, [lin[0].0, lin[1].0, lin[2].0]);
    let f: [(f64, f64); 3] = std::array::from_fn(|i| lab_f(xyz[i] / WHITE[i]));
    let (fx, fy, fz) = (f[0].0, f[1].0, f[2].0);
    let lab = [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)];

    // lab = A * diag(f'/white) * M * diag(lin')
    let a: Mat3 = [[0.0, 116.0, 0.0], [500.0, -500.0, 0.0], [0.0, 200.0, -200.0]];
    let mut scaled_m = RGB_TO_XYZ;
    for (r, row) in scaled_m.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v *= f[r].1 / WHITE[r] * lin[c].1;
        }
    }
    (lab, matmul(&a, &scaled_m))
}

/// Lab pixel to sRGB, plus the Jacobian `d rgb / d lab`.
pub(crate) fn lab_to_rgb_jac(lab: [f64; 3]) -> ([f64; 3], Mat3) {
    let fy = (lab[0] + 16.0) / 116.0;
    let fx = fy + lab[1] / 500.0;
    let fz = fy - lab[2] / 200.0;
    let inv: [(f64, f64); 3] = [lab_f_inv(fx), lab_f_inv(fy), lab_f_inv(fz)];
    let xyz: [f64; 3] = std::array::from_fn(|i| WHITE[i] * inv[i].0);
    let minv = xyz_to_rgb();
    let lin = matvec(&minv, xyz);
    let out: [(f64, f64); 3] = std::array::from_fn(|i| linear_to_srgb(lin[i]));
    let rgb = [out[0].0, out[1].0, out[2].0];

    // d(fx,fy,fz)/d(L,a,b)
    let b: Mat3 = [
        [1.0 / 116.0, 1.0 / 500.0, 0.0],
        [1.0 / 116.0, 0.0, 0.0],
        [1.0 / 116.0, 0.0, -1.0 / 200.0],
    ];
    let mut scaled = minv;
    for (r, row) in scaled.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v *= out[r].1 * WHITE[c] * inv[c].1;
        }
    }
    (rgb, matmul(&scaled, &b))
}

/// Converts one sRGB triple (nominally in [0, 1]) to L*a*b*.
pub fn rgb_to_lab_pixel(rgb: [f64; 3]) -> [f64; 3] {
    rgb_to_lab_jac(rgb).0
}

/// Converts one L*a*b* triple back to sRGB.
pub fn lab_to_rgb_pixel(lab: [f64; 3]) -> [f64; 3] {
    lab_to_rgb_jac(lab).0
}
