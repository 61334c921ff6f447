//! Small dense helpers on top of nalgebra.

use nalgebra::{Complex, DMatrix, Schur, SVD};

const SCHUR_EPS: f64 = 1e-14;
const SCHUR_MAX_ITER: usize = 10_000;

/// Eigenvalues of a real square matrix, complex in general.
pub(crate) fn eigenvalues(m: &DMatrix<f64>) -> Option<Vec<Complex<f64>>> {
    if m.nrows() == 0 {
        return Some(Vec::new());
    }
    if let Some(schur) = Schur::try_new(m.clone(), SCHUR_EPS, SCHUR_MAX_ITER) {
        return Some(schur.complex_eigenvalues().iter().copied().collect());
    }
    // QR stalls on some permutation-like structures; an orthogonal
    // similarity keeps the spectrum and breaks the structure.
    let n = m.nrows();
    (1..=3).find_map(|attempt| {
        let seed = DMatrix::from_fn(n, n, |i, j| ((i * 7 + j * 13 + attempt * 29) as f64).sin());
        let q = seed.qr().q();
        let rotated = q.transpose() * m * &q;
        Schur::try_new(rotated, SCHUR_EPS, SCHUR_MAX_ITER).map(|s| s.complex_eigenvalues().iter().copied().collect())
    })
}

pub(crate) fn spectral_radius(m: &DMatrix<f64>) -> Option<f64> {
    eigenvalues(m).map(|ev| ev.iter().map(|z| z.norm()).fold(0.0, f64::max))
}

/// Numerical rank of a complex matrix from its singular values.
pub(crate) fn complex_rank(m: DMatrix<Complex<f64>>, tol: f64) -> usize {
    if m.is_empty() {
        return 0;
    }
    let svd = SVD::new(m, false, false);
    svd.singular_values.iter().filter(|&&s| s > tol).count()
}

// Pade coefficients b_0..b_m and the 1-norm thresholds of Higham (2005).
const PADE3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];
const PADE5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
const PADE7: [f64; 8] = [17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0];
const PADE9: [f64; 10] = [
    17643225600.0,
    8821612800.0,
    2075673600.0,
    302702400.0,
    30270240.0,
    2162160.0,
    110880.0,
    3960.0,
    90.0,
    1.0,
];
const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];
const THETA: [(f64, &[f64]); 4] = [
    (1.495585217958292e-2, &PADE3),
    (2.539398330063230e-1, &PADE5),
    (9.504178996162932e-1, &PADE7),
    (2.097847961257068, &PADE9),
];
const THETA13: f64 = 5.371920351148152;

fn one_norm(a: &DMatrix<f64>) -> f64 {
    a.column_iter().map(|c| c.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// Returns (U, V) with the diagonal Pade approximant r(A) = (V - U)^-1 (V + U).
fn pade_uv(a: &DMatrix<f64>, b: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let a2 = a * a;
    let mut odd = DMatrix::<f64>::zeros(n, n);
    let mut even = DMatrix::<f64>::zeros(n, n);
    // power holds A^(2k)
    let mut power = DMatrix::<f64>::identity(n, n);
    for k in 0..b.len().div_ceil(2) {
        if 2 * k < b.len() {
            even += &power * b[2 * k];
        }
        if 2 * k + 1 < b.len() {
            odd += &power * b[2 * k + 1];
        }
        power = &power * &a2;
    }
    (a * odd, even)
}

/// Matrix exponential by scaling and squaring with a diagonal Pade approximant.
pub(crate) fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    assert!(a.is_square(), "expm of a non-square matrix");
    let n = a.nrows();
    if n == 0 {
        return a.clone();
    }
    let norm = one_norm(a);
    let (scaled, squarings, coeffs): (DMatrix<f64>, u32, &[f64]) = match THETA.iter().find(|(theta, _)| norm <= *theta) {
        Some((_, coeffs)) => (a.clone(), 0, coeffs),
        None => {
            let s = (norm / THETA13).log2().ceil().max(0.0) as u32;
            (a * 2f64.powi(-(s as i32)), s, &PADE13)
        }
    };
    let (u, v) = pade_uv(&scaled, coeffs);
    let numer = &v + &u;
    let denom = v - u;
    let mut result = denom
        .lu()
        .solve(&numer)
        .expect("Pade denominator is nonsingular for scaled arguments");
    for _ in 0..squarings {
        result = &result * &result;
    }
    result
}
