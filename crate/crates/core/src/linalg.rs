//! Dense linear-algebra helpers shared by the spectral and density modules.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

pub type CMatrix = DMatrix<Complex64>;

/// Eigenvalues of a real square matrix, sorted by real part, then |imag|,
/// then imaginary part.
pub fn eigenvalues(a: &DMatrix<f64>) -> Vec<Complex64> {
    let mut ev: Vec<Complex64> = a.clone().complex_eigenvalues().iter().copied().collect();
    sort_spectrum(&mut ev);
    ev
}

pub fn sort_spectrum(ev: &mut [Complex64]) {
    ev.sort_by(|x, y| {
        x.re.partial_cmp(&y.re)
            .unwrap()
            .then(x.im.abs().partial_cmp(&y.im.abs()).unwrap())
            .then(x.im.partial_cmp(&y.im).unwrap())
    });
}

/// Largest singular value.
pub fn op_norm(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0.0;
    }
    a.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .fold(0.0_f64, |m, &s| m.max(s))
}

/// Smallest singular value of a complex matrix.
pub fn min_singular_complex(a: &CMatrix) -> f64 {
    a.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .fold(f64::INFINITY, |m, &s| m.min(s))
}

pub fn complexify(a: &DMatrix<f64>) -> CMatrix {
    a.map(|x| Complex64::new(x, 0.0))
}

/// Right singular vectors for the `k` smallest singular values, as columns.
pub fn null_space_real(a: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let n = a.ncols();
    let svd = a.clone().svd(false, true);
    let vt = svd.v_t.expect("requested V^T");
    let mut idx: Vec<usize> = (0..svd.singular_values.len()).collect();
    idx.sort_by(|&i, &j| svd.singular_values[i].partial_cmp(&svd.singular_values[j]).unwrap());
    // A wide SVD may return fewer singular values than columns; the
    // missing directions are exact null vectors.
    let mut out = DMatrix::zeros(n, k);
    for (c, &i) in idx.iter().take(k).enumerate() {
        for r in 0..n {
            out[(r, c)] = vt[(i, r)];
        }
    }
    out
}

/// Complex counterpart of [`null_space_real`].
pub fn null_space_complex(a: &CMatrix, k: usize) -> CMatrix {
    let n = a.ncols();
    let svd = a.clone().svd(false, true);
    let vt = svd.v_t.expect("requested V^H");
    let mut idx: Vec<usize> = (0..svd.singular_values.len()).collect();
    idx.sort_by(|&i, &j| svd.singular_values[i].partial_cmp(&svd.singular_values[j]).unwrap());
    let mut out = CMatrix::zeros(n, k);
    for (c, &i) in idx.iter().take(k).enumerate() {
        for r in 0..n {
            out[(r, c)] = vt[(i, r)].conj();
        }
    }
    out
}

/// Modified Gram–Schmidt with one reorthogonalisation pass. Columns whose
/// residual norm falls below `tol` (relative to their input norm) are dropped.
pub fn gram_schmidt(vectors: &[DVector<f64>], tol: f64) -> Vec<DVector<f64>> {
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(vectors.len());
    for v in vectors {
        let scale = v.norm();
        if scale == 0.0 {
            continue;
        }
        let mut w = v.clone();
        for _ in 0..2 {
            for q in &basis {
                let c = q.dot(&w);
                w.axpy(-c, q, 1.0);
            }
        }
        let nw = w.norm();
        if nw > tol * scale {
            basis.push(w / nw);
        }
    }
    basis
}

/// Extend an orthonormal set `existing` by orthonormalising `extra` against it.
pub fn extend_orthonormal(existing: &[DVector<f64>], extra: &[DVector<f64>], tol: f64) -> Vec<DVector<f64>> {
    let mut all: Vec<DVector<f64>> = existing.to_vec();
    let k = all.len();
    for v in extra {
        let scale = v.norm();
        if scale == 0.0 {
            continue;
        }
        let mut w = v.clone();
        for _ in 0..2 {
            for q in &all {
                let c = q.dot(&w);
                w.axpy(-c, q, 1.0);
            }
        }
        let nw = w.norm();
        if nw > tol * scale {
            all.push(w / nw);
        }
    }
    all.split_off(k)
}

pub fn columns_to_matrix(n: usize, cols: &[DVector<f64>]) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, cols.len());
    for (j, c) in cols.iter().enumerate() {
        m.set_column(j, c);
    }
    m
}

/// Orthonormal basis of the orthogonal complement of `span(cols)` in R^n.
pub fn orthogonal_complement(n: usize, cols: &[DVector<f64>]) -> Vec<DVector<f64>> {
    let q = gram_schmidt(cols, 1e-12);
    let unit: Vec<DVector<f64>> = (0..n)
        .map(|i| {
            let mut e = DVector::zeros(n);
            e[i] = 1.0;
            e
        })
        .collect();
    // Greedy completion in order of largest residual keeps the result well
    // conditioned.
    let mut out: Vec<DVector<f64>> = Vec::new();
    let target = n - q.len();
    let candidates = unit;
    while out.len() < target {
        let mut best: Option<(f64, DVector<f64>)> = None;
        for e in &candidates {
            let mut w = e.clone();
            for _ in 0..2 {
                for b in q.iter().chain(out.iter()) {
                    let c = b.dot(&w);
                    w.axpy(-c, b, 1.0);
                }
            }
            let nw = w.norm();
            if best.as_ref().map_or(true, |(bn, _)| nw > *bn) {
                best = Some((nw, w));
            }
        }
        let (nw, w) = best.expect("non-empty candidate set");
        out.push(w / nw);
    }
    out
}

/// Orthogonal projector `E E^T` onto the span of orthonormal columns.
pub fn projector(n: usize, basis: &[DVector<f64>]) -> DMatrix<f64> {
    let mut p = DMatrix::zeros(n, n);
    for b in basis {
        p += b * b.transpose();
    }
    p
}

/// Matrix exponential by scaling and squaring with a degree-13 Padé
/// approximant.
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "expm needs a square matrix");
    if n == 0 {
        return a.clone();
    }
    const B: [f64; 14] = [
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
    const THETA13: f64 = 5.371920351148152;
    let norm1 = (0..n)
        .map(|j| a.column(j).iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0_f64, f64::max);
    let s = if norm1 > THETA13 {
        (norm1 / THETA13).log2().ceil().max(0.0) as i32
    } else {
        0
    };
    let a = a / 2f64.powi(s);
    let id = DMatrix::<f64>::identity(n, n);
    let a2 = &a * &a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let u_inner = &a6 * (&a6 * B[13] + &a4 * B[11] + &a2 * B[9]) + &a6 * B[7] + &a4 * B[5] + &a2 * B[3] + &id * B[1];
    let u = &a * u_inner;
    let v = &a6 * (&a6 * B[12] + &a4 * B[10] + &a2 * B[8]) + &a6 * B[6] + &a4 * B[4] + &a2 * B[2] + &id * B[0];
    let p = &v + &u;
    let q = &v - &u;
    let mut r = q.lu().solve(&p).expect("Padé denominator is invertible");
    for _ in 0..s {
        r = &r * &r;
    }
    r
}

/// Symmetric eigen-decomposition with eigenvalues sorted in descending order.
pub fn sym_eigen_desc(a: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let sym = (a + a.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let n = a.nrows();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| eig.eigenvalues[j].partial_cmp(&eig.eigenvalues[i]).unwrap());
    let vals = idx.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vecs = DMatrix::zeros(n, n);
    for (c, &i) in idx.iter().enumerate() {
        vecs.set_column(c, &eig.eigenvectors.column(i));
    }
    (vals, vecs)
}

/// Condition number in the 2-norm; infinite for singular input.
pub fn cond2(a: &DMatrix<f64>) -> f64 {
    let sv = a.clone().svd(false, false).singular_values;
    let max = sv.iter().fold(0.0_f64, |m, &s| m.max(s));
    let min = sv.iter().fold(f64::INFINITY, |m, &s| m.min(s));
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}
