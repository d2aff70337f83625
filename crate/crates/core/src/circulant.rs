//! Dense circulant-matrix reference implementation.
//!
//! Everything here materializes `n x n` matrices (`n = p * q`) and is only
//! meant for small verification instances. Nothing in this module touches the
//! FFT path, so it can serve as an independent oracle for `spectral` and
//! `quad`.
//!
//! Two convolution-as-matrix forms are provided:
//!
//! * [`matmul_conv`] multiplies the row-major image vector by the two-level
//!   (block circulant with circulant blocks) matrix generated by `k'`. Its
//!   wraparound stays within rows and columns, and it is exactly the operator
//!   the 2D DFT diagonalizes.
//! * [`matmul_conv_flat`] multiplies by the one-level `circ(k')`. Its
//!   wraparound runs across row boundaries (the last column of row `i` reads
//!   from row `i + 1`), so it agrees with the 2D form only on the valid region.

use ndarray::{Array1, Array2};
use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};
use crate::kernel::{embed, flip, ImageShape, Kernel};
use crate::quad::LossTerm;
use crate::spectral::Image;

/// Condition estimate above which [`dense_solve`] refuses to answer.
pub const MAX_CONDITION: f64 = 1e12;

/// Square matrix whose row `i` is `first_row` rotated right by `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct CirculantMatrix {
    first_row: Array1<f64>,
}

impl CirculantMatrix {
    pub fn first_row(&self) -> &Array1<f64> {
        &self.first_row
    }

    pub fn n(&self) -> usize {
        self.first_row.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let n = self.n();
        self.first_row[(j + n - i % n) % n]
    }

    pub fn materialize(&self) -> Array2<f64> {
        let n = self.n();
        Array2::from_shape_fn((n, n), |(i, j)| self.get(i, j))
    }
}

pub fn circ(a: &[f64]) -> Result<CirculantMatrix> {
    if a.is_empty() {
        return Err(Error::EmptyGrid(0, 0));
    }
    Ok(CirculantMatrix {
        first_row: Array1::from(a.to_vec()),
    })
}

/// Two-level circulant generated by a `p x q` grid: block `(I, J)` is
/// `circ(grid[(J - I) mod p])`, so entry `((i, j), (i', j'))` equals
/// `grid[(i' - i) mod p][(j' - j) mod q]`.
pub fn block_circulant(grid: &Array2<f64>) -> Array2<f64> {
    let (p, q) = grid.dim();
    let blocks: Vec<Array2<f64>> = (0..p)
        .map(|r| {
            let row: Vec<f64> = grid.row(r).to_vec();
            circ(&row).expect("grid rows are nonempty").materialize()
        })
        .collect();
    let n = p * q;
    let mut out = Array2::zeros((n, n));
    for bi in 0..p {
        for bj in 0..p {
            let block = &blocks[(bj + p - bi) % p];
            out.slice_mut(ndarray::s![bi * q..(bi + 1) * q, bj * q..(bj + 1) * q])
                .assign(block);
        }
    }
    out
}

/// A row-major flattened image.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorizedImage {
    pub data: Array1<f64>,
    pub shape: ImageShape,
}

pub fn vectorize(img: &Image) -> VectorizedImage {
    VectorizedImage {
        data: Array1::from(img.as_slice().to_vec()),
        shape: img.shape(),
    }
}

pub fn unvectorize(v: &VectorizedImage) -> Result<Image> {
    if v.data.len() != v.shape.n_pixels() {
        return Err(Error::LengthMismatch {
            expected: v.shape.n_pixels(),
            actual: v.data.len(),
        });
    }
    Image::new(
        Array2::from_shape_vec(v.shape.dims(), v.data.to_vec()).expect("length checked above"),
    )
}

/// `k'` reshaped to the image grid: the flipped kernel at the top-left.
fn embedded_grid(k: &Kernel, shape: ImageShape) -> Result<Array2<f64>> {
    let v = embed(&flip(k), shape)?;
    Ok(Array2::from_shape_vec(shape.dims(), v.to_vec()).expect("embed length is p*q"))
}

/// Dense matrix of circular convolution with `k` acting on row-major vectors.
pub fn convolution_matrix(k: &Kernel, shape: ImageShape) -> Result<Array2<f64>> {
    Ok(block_circulant(&embedded_grid(k, shape)?))
}

/// Circular convolution as a dense matrix-vector product.
pub fn matmul_conv(k: &Kernel, img: &Image) -> Result<Image> {
    let shape = img.shape();
    let m = convolution_matrix(k, shape)?;
    let r = m.dot(&vectorize(img).data);
    unvectorize(&VectorizedImage { data: r, shape })
}

/// `circ(embed(flip(k))) * vec(img)` with the one-level circulant; wraparound
/// crosses row boundaries.
pub fn matmul_conv_flat(k: &Kernel, img: &Image) -> Result<Image> {
    let shape = img.shape();
    let c = circ(embed(&flip(k), shape)?.as_slice().expect("contiguous"))?;
    let r = c.materialize().dot(&vectorize(img).data);
    unvectorize(&VectorizedImage { data: r, shape })
}

/// Top-left `(p - m + 1) x (q - n + 1)` block of a nonvalid convolution.
pub fn valid_region(r_nv: &Image, kernel_dims: (usize, usize)) -> Result<Image> {
    let (p, q) = r_nv.shape().dims();
    let (m, n) = kernel_dims;
    if m == 0 || n == 0 || m > p || n > q {
        return Err(Error::EmptyValidRegion {
            kernel: kernel_dims,
            image: (p, q),
        });
    }
    let block = r_nv
        .as_array()
        .slice(ndarray::s![..p - m + 1, ..q - n + 1])
        .to_owned();
    Image::new(block)
}

fn lu_factor(a: &Array2<f64>) -> Result<(Array2<f64>, Vec<usize>)> {
    let n = a.nrows();
    let mut lu = a.clone();
    let mut perm: Vec<usize> = (0..n).collect();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&x, &y| lu[[x, col]].abs().total_cmp(&lu[[y, col]].abs()))
            .expect("nonempty range");
        if lu[[pivot, col]] == 0.0 {
            return Err(Error::SingularMatrix {
                condition: f64::INFINITY,
            });
        }
        if pivot != col {
            for j in 0..n {
                lu.swap([pivot, j], [col, j]);
            }
            perm.swap(pivot, col);
        }
        let d = lu[[col, col]];
        for i in col + 1..n {
            let f = lu[[i, col]] / d;
            lu[[i, col]] = f;
            if f != 0.0 {
                for j in col + 1..n {
                    lu[[i, j]] -= f * lu[[col, j]];
                }
            }
        }
    }
    Ok((lu, perm))
}

fn lu_solve(lu: &Array2<f64>, perm: &[usize], rhs: &[f64]) -> Array1<f64> {
    let n = lu.nrows();
    let mut x: Array1<f64> = perm.iter().map(|&p| rhs[p]).collect();
    for i in 0..n {
        let mut s = x[i];
        for j in 0..i {
            s -= lu[[i, j]] * x[j];
        }
        x[i] = s;
    }
    for i in (0..n).rev() {
        let mut s = x[i];
        for j in i + 1..n {
            s -= lu[[i, j]] * x[j];
        }
        x[i] = s / lu[[i, i]];
    }
    x
}

fn norm1(a: &Array2<f64>) -> f64 {
    a.columns()
        .into_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Solves `a x = rhs` by Gaussian elimination with partial pivoting.
///
/// The 1-norm condition number is computed exactly from the explicit inverse
/// (cheap at oracle sizes); systems above [`MAX_CONDITION`] are rejected.
pub fn dense_solve(a: &Array2<f64>, rhs: &Array1<f64>) -> Result<Array1<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::ShapeMismatch {
            expected: (n, n),
            actual: a.dim(),
        });
    }
    if rhs.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            actual: rhs.len(),
        });
    }
    let (lu, perm) = lu_factor(a)?;
    let mut inverse = Array2::zeros((n, n));
    let mut e = vec![0.0; n];
    for j in 0..n {
        e[j] = 1.0;
        inverse.column_mut(j).assign(&lu_solve(&lu, &perm, &e));
        e[j] = 0.0;
    }
    let condition = norm1(a) * norm1(&inverse);
    if !(condition <= MAX_CONDITION) {
        return Err(Error::SingularMatrix { condition });
    }
    Ok(lu_solve(&lu, &perm, rhs.as_slice().expect("contiguous")))
}

pub fn dense_solve_circulant(c: &CirculantMatrix, rhs: &Array1<f64>) -> Result<Array1<f64>> {
    dense_solve(&c.materialize(), rhs)
}

/// Builds `C = sum w A^T A` and `r = sum w A^T g` for a list of loss terms,
/// with each `A` the dense convolution matrix of the term's kernel.
pub fn normal_equations(
    terms: &[LossTerm],
    shape: ImageShape,
) -> Result<(Array2<f64>, Array1<f64>)> {
    let n = shape.n_pixels();
    let mut c = Array2::zeros((n, n));
    let mut r = Array1::zeros(n);
    for t in terms {
        t.guide.check_shape(shape)?;
        let a = convolution_matrix(&t.kernel, shape)?;
        let at = a.t();
        c = c + at.dot(&a) * t.weight;
        r = r + at.dot(&vectorize(&t.guide).data) * t.weight;
    }
    Ok((c, r))
}

/// Minimizer of `sum w ||g - k * N||^2` by a dense solve of the normal
/// equations.
pub fn dense_quadratic_solve(terms: &[LossTerm], shape: ImageShape) -> Result<Image> {
    let (c, r) = normal_equations(terms, shape)?;
    let x = dense_solve(&c, &r)?;
    unvectorize(&VectorizedImage { data: x, shape })
}

/// The unnormalized `n`-point DFT matrix, `F[u][t] = exp(-2 pi i u t / n)`.
pub fn dft_matrix(n: usize) -> Array2<Complex64> {
    Array2::from_shape_fn((n, n), |(u, t)| {
        let angle = -2.0 * std::f64::consts::PI * ((u * t) % n) as f64 / n as f64;
        Complex64::from_polar(1.0, angle)
    })
}

/// The 2D DFT acting on row-major vectors of a `p x q` grid (`F_p kron F_q`).
pub fn dft2_matrix(p: usize, q: usize) -> Array2<Complex64> {
    let fp = dft_matrix(p);
    let fq = dft_matrix(q);
    Array2::from_shape_fn((p * q, p * q), |(a, b)| {
        fp[[a / q, b / q]] * fq[[a % q, b % q]]
    })
}

/// Inverse of an unnormalized DFT matrix: its conjugate transpose over `n`.
pub fn inverse_dft_matrix(f: &Array2<Complex64>) -> Array2<Complex64> {
    let n = f.nrows() as f64;
    f.t().mapv(|z| z.conj() / n)
}

/// `left * m * right` for a real `m`.
pub fn similarity_transform(
    left: &Array2<Complex64>,
    m: &Array2<f64>,
    right: &Array2<Complex64>,
) -> Array2<Complex64> {
    let mc = m.mapv(|v| Complex64::new(v, 0.0));
    left.dot(&mc).dot(right)
}

/// Largest off-diagonal magnitude of a square matrix.
pub fn max_off_diagonal(m: &Array2<Complex64>) -> f64 {
    m.indexed_iter()
        .filter(|((i, j), _)| i != j)
        .fold(0.0, |acc, (_, z)| acc.max(z.norm()))
}

/// Largest deviation of a square matrix from being circulant: each row is
/// compared with the previous row rotated right by one.
pub fn circulant_defect(m: &Array2<f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0_f64;
    for i in 1..n {
        for j in 0..n {
            worst = worst.max((m[[i, j]] - m[[i - 1, (j + n - 1) % n]]).abs());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn grid_3x4() -> Image {
        Image::from_rows(&[
            [1.0, 2.0, 3.0, 4.0],
            [5.0, 6.0, 7.0, 8.0],
            [9.0, 10.0, 11.0, 12.0],
        ])
        .unwrap()
    }

    #[test]
    fn circ_three_vector() {
        let c = circ(&[1.0, 2.0, 3.0]).unwrap().materialize();
        assert_eq!(c, arr2(&[[1.0, 2.0, 3.0], [3.0, 1.0, 2.0], [2.0, 3.0, 1.0]]));
        assert_eq!(circ(&[5.0]).unwrap().materialize(), arr2(&[[5.0]]));
        assert!(circ(&[]).is_err());
    }

    #[test]
    fn circ_of_gradient_vector_is_banded() {
        let mut a = vec![0.0; 12];
        a[0] = 1.0;
        a[1] = -1.0;
        let c = circ(&a).unwrap().materialize();
        for i in 0..12 {
            for j in 0..12 {
                let expected = if i == j {
                    1.0
                } else if j == i + 1 || (i == 11 && j == 0) {
                    -1.0
                } else {
                    0.0
                };
                assert_eq!(c[[i, j]], expected, "entry ({i}, {j})");
            }
        }
    }

    #[test]
    fn vectorize_is_row_major() {
        let v = vectorize(&grid_3x4());
        assert_eq!(v.data.to_vec(), (1..=12).map(f64::from).collect::<Vec<_>>());
        let one = Image::from_rows(&[[4.0]]).unwrap();
        assert_eq!(vectorize(&one).data.to_vec(), vec![4.0]);
        let bad = VectorizedImage {
            data: Array1::zeros(5),
            shape: ImageShape::new(2, 3).unwrap(),
        };
        assert!(matches!(unvectorize(&bad), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn flat_product_reproduces_row_crossing_wraparound() {
        // (0,3) is d1 - a2, (2,3) is d3 - a1
        let r = matmul_conv_flat(&Kernel::gradient_x(), &grid_3x4()).unwrap();
        assert_eq!(
            r.as_array(),
            &arr2(&[
                [-1.0, -1.0, -1.0, 4.0 - 5.0],
                [-1.0, -1.0, -1.0, 8.0 - 9.0],
                [-1.0, -1.0, -1.0, 12.0 - 1.0],
            ])
        );
        let valid = valid_region(&r, (1, 2)).unwrap();
        assert_eq!(valid.as_array(), &Array2::from_elem((3, 3), -1.0));
    }

    #[test]
    fn two_level_product_wraps_within_rows() {
        let r = matmul_conv(&Kernel::gradient_x(), &grid_3x4()).unwrap();
        assert_eq!(r.as_array().column(3).to_vec(), vec![3.0, 3.0, 3.0]);
        let flat = matmul_conv_flat(&Kernel::gradient_x(), &grid_3x4()).unwrap();
        assert_eq!(
            valid_region(&r, (1, 2)).unwrap(),
            valid_region(&flat, (1, 2)).unwrap()
        );
    }

    #[test]
    fn identity_kernel_product_is_identity() {
        let img = grid_3x4();
        assert_eq!(matmul_conv(&Kernel::identity(), &img).unwrap(), img);
        assert_eq!(valid_region(&img, (1, 1)).unwrap(), img);
    }

    #[test]
    fn valid_region_errors_when_empty() {
        let img = grid_3x4();
        assert!(matches!(
            valid_region(&img, (4, 1)),
            Err(Error::EmptyValidRegion { .. })
        ));
        assert!(matches!(
            valid_region(&img, (1, 5)),
            Err(Error::EmptyValidRegion { .. })
        ));
    }

    #[test]
    fn dense_solve_identity_and_scaled_identity() {
        let x = dense_solve_circulant(&circ(&[1.0, 0.0, 0.0]).unwrap(), &Array1::from(vec![1.0, 2.0, 3.0]))
            .unwrap();
        assert_eq!(x.to_vec(), vec![1.0, 2.0, 3.0]);
        let x = dense_solve_circulant(
            &circ(&[2.0, 0.0, 0.0, 0.0]).unwrap(),
            &Array1::from(vec![4.0, 8.0, 2.0, 6.0]),
        )
        .unwrap();
        assert_eq!(x.to_vec(), vec![2.0, 4.0, 1.0, 3.0]);
    }

    #[test]
    fn dense_solve_rejects_singular_systems() {
        // rows sum to zero: constant vectors are in the null space
        let c = circ(&[1.0, -1.0, 0.0, 0.0]).unwrap();
        assert!(matches!(
            dense_solve_circulant(&c, &Array1::zeros(4)),
            Err(Error::SingularMatrix { .. })
        ));
        let a = Array2::zeros((2, 3));
        assert!(dense_solve(&a, &Array1::zeros(2)).is_err());
    }

    #[test]
    fn circulant_defect_detects_non_circulant() {
        let c = circ(&[1.0, 2.0, 3.0, 4.0]).unwrap().materialize();
        assert_eq!(circulant_defect(&c), 0.0);
        let mut broken = c.clone();
        broken[[2, 1]] += 0.5;
        assert_eq!(circulant_defect(&broken), 0.5);
    }
}
