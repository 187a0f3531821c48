//! Weighted canonical correlation analysis of two co-registered images.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::raster::RasterStack;

/// Pixel-major f64 view of an image: `values[p * n_bands + b]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BandMatrix {
    n_pixels: usize,
    n_bands: usize,
    values: Vec<f64>,
    valid: Vec<bool>,
}

impl BandMatrix {
    pub fn new(n_pixels: usize, n_bands: usize, values: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        if n_bands == 0 || values.len() != n_pixels * n_bands || valid.len() != n_pixels {
            return Err(Error::InvalidArgument(format!(
                "band matrix {n_pixels}x{n_bands} with {} values and {} flags",
                values.len(),
                valid.len()
            )));
        }
        let mut valid = valid;
        for (p, ok) in valid.iter_mut().enumerate() {
            if values[p * n_bands..(p + 1) * n_bands].iter().any(|v| !v.is_finite()) {
                *ok = false;
            }
        }
        Ok(BandMatrix {
            n_pixels,
            n_bands,
            values,
            valid,
        })
    }

    /// All pixels valid unless a value is non-finite.
    pub fn from_rows(n_bands: usize, values: Vec<f64>) -> Result<Self> {
        let n = values.len() / n_bands.max(1);
        Self::new(n, n_bands, values, vec![true; n])
    }

    pub fn from_stack(stack: &RasterStack) -> Self {
        let n = stack.n_pixels();
        let nb = stack.n_bands();
        let src = stack.data();
        let mut values = vec![0.0; n * nb];
        for b in 0..nb {
            for p in 0..n {
                values[p * nb + b] = src[b * n + p] as f64;
            }
        }
        let valid = stack.nodata_mask().iter().map(|m| !m).collect();
        BandMatrix::new(n, nb, values, valid).expect("stack geometry is consistent")
    }

    pub fn n_pixels(&self) -> usize {
        self.n_pixels
    }

    pub fn n_bands(&self) -> usize {
        self.n_bands
    }

    pub fn pixel(&self, p: usize) -> &[f64] {
        &self.values[p * self.n_bands..(p + 1) * self.n_bands]
    }

    pub fn is_valid(&self, p: usize) -> bool {
        self.valid[p]
    }

    /// Applies `f` to each pixel vector, keeping validity.
    pub fn map_pixels(&self, mut f: impl FnMut(&[f64]) -> Vec<f64>) -> Result<BandMatrix> {
        let mut values = Vec::with_capacity(self.values.len());
        let mut nb = None;
        for p in 0..self.n_pixels {
            let out = f(self.pixel(p));
            let d = *nb.get_or_insert(out.len());
            if d != out.len() {
                return Err(Error::InvalidArgument("pixel map changed arity".into()));
            }
            values.extend(out);
        }
        BandMatrix::new(self.n_pixels, nb.unwrap_or(self.n_bands), values, self.valid.clone())
    }
}

/// One canonical correlation / MAD fit.
///
/// Columns of `a` and `b` are canonical directions ordered like `rho`
/// (descending), so the first MAD variate in the usual ascending-correlation
/// indexing is the last column.
#[derive(Debug, Clone, PartialEq)]
pub struct MadStep {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub rho: Vec<f64>,
    pub sigma2_mad: Vec<f64>,
    pub mean_x: Vec<f64>,
    pub mean_y: Vec<f64>,
    pub n_valid: usize,
}

impl MadStep {
    pub fn n_bands(&self) -> usize {
        self.rho.len()
    }

    /// MAD variates of one pixel pair, in `rho` order.
    pub fn mad_variates(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        let n = self.n_bands();
        (0..n)
            .map(|i| {
                let mut m = 0.0;
                for k in 0..n {
                    m += self.a[(k, i)] * (x[k] - self.mean_x[k])
                        - self.b[(k, i)] * (y[k] - self.mean_y[k]);
                }
                m
            })
            .collect()
    }
}

pub(crate) const CHUNK: usize = 4096;

/// Sums per-chunk partial results in chunk order, so the reduction is the
/// same regardless of thread scheduling.
pub(crate) fn ordered_reduce<T, F>(n: usize, init: impl Fn() -> T + Sync, fold: F, combine: impl Fn(&mut T, T)) -> T
where
    T: Send,
    F: Fn(&mut T, usize) + Sync,
{
    let parts: Vec<T> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut acc = init();
            for p in c * CHUNK..((c + 1) * CHUNK).min(n) {
                fold(&mut acc, p);
            }
            acc
        })
        .collect();
    let mut total = init();
    for part in parts {
        combine(&mut total, part);
    }
    total
}

pub(crate) fn check_pair(x: &BandMatrix, y: &BandMatrix) -> Result<()> {
    if x.n_pixels != y.n_pixels || x.n_bands != y.n_bands {
        return Err(Error::ShapeMismatch {
            left: format!("{} pixels x {} bands", x.n_pixels, x.n_bands),
            right: format!("{} pixels x {} bands", y.n_pixels, y.n_bands),
        });
    }
    Ok(())
}

/// Weighted means and joint covariance of the stacked vector (x, y) over
/// pixels valid in both images.
fn weighted_moments(
    x: &BandMatrix,
    y: &BandMatrix,
    weights: &[f64],
) -> Result<(DVector<f64>, DMatrix<f64>, usize)> {
    let n = x.n_bands;
    let d = 2 * n;
    let usable = |p: usize| x.valid[p] && y.valid[p];
    let (count, wsum, sums) = ordered_reduce(
        x.n_pixels,
        || (0usize, 0.0f64, vec![0.0f64; d]),
        |acc, p| {
            if usable(p) {
                let w = weights[p];
                acc.0 += 1;
                acc.1 += w;
                for (k, v) in x.pixel(p).iter().chain(y.pixel(p)).enumerate() {
                    acc.2[k] += w * v;
                }
            }
        },
        |t, part| {
            t.0 += part.0;
            t.1 += part.1;
            for (a, b) in t.2.iter_mut().zip(part.2) {
                *a += b;
            }
        },
    );
    if count < 2 * n + 1 {
        return Err(Error::TooFewPixels {
            needed: 2 * n + 1,
            have: count,
        });
    }
    if wsum <= 0.0 || wsum.is_nan() {
        return Err(Error::InvalidArgument("weights sum to zero over valid pixels".into()));
    }
    let mean: Vec<f64> = sums.iter().map(|s| s / wsum).collect();
    let (cov, _) = ordered_reduce(
        x.n_pixels,
        || (vec![0.0f64; d * d], vec![0.0f64; d]),
        |(acc, z), p| {
            if usable(p) {
                let w = weights[p];
                for (k, v) in x.pixel(p).iter().chain(y.pixel(p)).enumerate() {
                    z[k] = v - mean[k];
                }
                for i in 0..d {
                    let wi = w * z[i];
                    for j in i..d {
                        acc[i * d + j] += wi * z[j];
                    }
                }
            }
        },
        |t, part| {
            for (a, b) in t.0.iter_mut().zip(part.0) {
                *a += b;
            }
        },
    );
    let mut m = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] / wsum;
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    Ok((DVector::from_vec(mean), m, count))
}

/// Relative ridge added to covariance diagonals before factorization.
pub const COV_RIDGE: f64 = 1e-10;

fn regularize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    let eps = COV_RIDGE * m.trace() / n as f64;
    for i in 0..n {
        m[(i, i)] += eps;
    }
}

fn cholesky(m: DMatrix<f64>, what: &'static str) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(m).ok_or(Error::SingularCovariance(what))
}

/// Eigen-solution of `S_ab S_bb^-1 S_ba v = λ S_aa v`, returned as
/// (λ descending, S_aa-orthonormal columns).
fn generalized_directions(
    saa: &DMatrix<f64>,
    sab: &DMatrix<f64>,
    sbb_chol: &Cholesky<f64, Dyn>,
    saa_chol: &Cholesky<f64, Dyn>,
) -> (Vec<f64>, DMatrix<f64>) {
    let n = saa.nrows();
    let l = saa_chol.l();
    let inner = sab * sbb_chol.solve(&sab.transpose());
    // C = L^-1 inner L^-T
    let left = l
        .solve_lower_triangular(&inner)
        .expect("cholesky factor is invertible");
    let c = l
        .solve_lower_triangular(&left.transpose())
        .expect("cholesky factor is invertible");
    let c = (&c + c.transpose()) * 0.5;
    let eig = SymmetricEigen::new(c);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let lt = l.transpose();
    let mut dirs = DMatrix::zeros(n, n);
    let mut vals = Vec::with_capacity(n);
    for (col, &k) in order.iter().enumerate() {
        let v = eig.eigenvectors.column(k).into_owned();
        let a = lt
            .solve_upper_triangular(&v)
            .expect("cholesky factor is invertible");
        dirs.set_column(col, &a);
        vals.push(eig.eigenvalues[k]);
    }
    (vals, dirs)
}

/// Below this canonical correlation the paired `b` direction is taken from
/// its own eigenproblem instead of being derived from `a`.
const RHO_FLOOR: f64 = 1e-8;

/// Weighted CCA between `x` and `y`. Pixels invalid in either image are
/// excluded; weights are relative (only their ratios matter).
pub fn weighted_cca(x: &BandMatrix, y: &BandMatrix, weights: &[f64]) -> Result<MadStep> {
    check_pair(x, y)?;
    if weights.len() != x.n_pixels {
        return Err(Error::DimensionMismatch {
            expected: x.n_pixels,
            got: weights.len(),
        });
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::InvalidArgument("weights must be finite and non-negative".into()));
    }
    let n = x.n_bands;
    let (mean, cov, n_valid) = weighted_moments(x, y, weights)?;
    let mut sxx = cov.view((0, 0), (n, n)).into_owned();
    let mut syy = cov.view((n, n), (n, n)).into_owned();
    let sxy = cov.view((0, n), (n, n)).into_owned();
    let syx = sxy.transpose();
    regularize(&mut sxx);
    regularize(&mut syy);
    let sxx_chol = cholesky(sxx.clone(), "x")?;
    let syy_chol = cholesky(syy.clone(), "y")?;

    let (lambda, a) = generalized_directions(&sxx, &sxy, &syy_chol, &sxx_chol);
    let rho: Vec<f64> = lambda.iter().map(|l| l.max(0.0).sqrt().min(1.0)).collect();

    let mut b = syy_chol.solve(&(&syx * &a));
    let mut own_b: Option<DMatrix<f64>> = None;
    for (i, &r) in rho.iter().enumerate() {
        let col = b.column(i).into_owned();
        let var = (col.transpose() * &syy * &col)[(0, 0)];
        if r > RHO_FLOOR && var > 0.0 {
            b.set_column(i, &(col / var.sqrt()));
        } else {
            let own = own_b.get_or_insert_with(|| {
                generalized_directions(&syy, &syx, &sxx_chol, &syy_chol).1
            });
            b.set_column(i, &own.column(i).into_owned());
        }
    }
    for i in 0..n {
        let corr = (a.column(i).transpose() * &sxy * b.column(i))[(0, 0)];
        if corr < 0.0 {
            let flipped = -b.column(i).into_owned();
            b.set_column(i, &flipped);
        }
    }
    let sigma2_mad = rho.iter().map(|r| 2.0 * (1.0 - r)).collect();
    Ok(MadStep {
        a,
        b,
        rho,
        sigma2_mad,
        mean_x: mean.rows(0, n).iter().copied().collect(),
        mean_y: mean.rows(n, n).iter().copied().collect(),
        n_valid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg_normals(seed: u64, n: usize) -> Vec<f64> {
        // Box-Muller over a small LCG; deterministic and dependency-free.
        let mut s = seed;
        let mut next = move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 + 0.5) / (1u64 << 53) as f64
        };
        (0..n)
            .map(|_| {
                let (u, v) = (next(), next());
                (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos()
            })
            .collect()
    }

    #[test]
    fn near_identical_images_have_high_correlation() {
        let n = 2000;
        let xv = lcg_normals(1, n * 3);
        let noise = lcg_normals(2, n * 3);
        let yv: Vec<f64> = xv.iter().zip(&noise).map(|(a, e)| a + 1e-3 * e).collect();
        let x = BandMatrix::from_rows(3, xv).unwrap();
        let y = BandMatrix::from_rows(3, yv).unwrap();
        let step = weighted_cca(&x, &y, &vec![1.0; n]).unwrap();
        assert!(step.rho.iter().all(|&r| r >= 0.999), "{:?}", step.rho);
        assert!(step.rho.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn weights_are_relative() {
        let n = 300;
        let x = BandMatrix::from_rows(2, lcg_normals(3, n * 2)).unwrap();
        let yv: Vec<f64> = lcg_normals(4, n * 2)
            .iter()
            .zip(x.values.iter())
            .map(|(e, v)| 0.5 * v + e)
            .collect();
        let y = BandMatrix::from_rows(2, yv).unwrap();
        let half = weighted_cca(&x, &y, &vec![0.5; n]).unwrap();
        let one = weighted_cca(&x, &y, &vec![1.0; n]).unwrap();
        for i in 0..2 {
            assert!((half.rho[i] - one.rho[i]).abs() < 1e-12);
            for k in 0..2 {
                assert!((half.a[(k, i)] - one.a[(k, i)]).abs() < 1e-9);
                assert!((half.b[(k, i)] - one.b[(k, i)]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn too_few_pixels() {
        let x = BandMatrix::from_rows(2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 7.0]).unwrap();
        let r = weighted_cca(&x, &x, &[1.0; 3]);
        assert!(matches!(r, Err(Error::TooFewPixels { needed: 5, have: 3 })));
    }

    #[test]
    fn shape_mismatch() {
        let x = BandMatrix::from_rows(2, vec![0.0; 20]).unwrap();
        let y = BandMatrix::from_rows(1, vec![0.0; 10]).unwrap();
        assert!(matches!(weighted_cca(&x, &y, &[1.0; 10]), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn unit_variance_and_sign_conventions() {
        let n = 500;
        let x = BandMatrix::from_rows(3, lcg_normals(5, n * 3)).unwrap();
        let noise = lcg_normals(6, n * 3);
        let yv: Vec<f64> = x.values.chunks(3).zip(noise.chunks(3))
            .flat_map(|(v, e)| vec![v[1] + e[0], -v[0] + 0.5 * e[1], 0.2 * v[2] + e[2]])
            .collect();
        let y = BandMatrix::from_rows(3, yv).unwrap();
        let step = weighted_cca(&x, &y, &vec![1.0; n]).unwrap();
        for i in 0..3 {
            let (mut su, mut sv, mut suv) = (0.0, 0.0, 0.0);
            for p in 0..n {
                let u: f64 = (0..3).map(|k| step.a[(k, i)] * (x.pixel(p)[k] - step.mean_x[k])).sum();
                let v: f64 = (0..3).map(|k| step.b[(k, i)] * (y.pixel(p)[k] - step.mean_y[k])).sum();
                su += u * u;
                sv += v * v;
                suv += u * v;
            }
            let (su, sv, suv) = (su / n as f64, sv / n as f64, suv / n as f64);
            assert!((su - 1.0).abs() < 1e-6 && (sv - 1.0).abs() < 1e-6);
            assert!(suv >= 0.0);
            assert!((suv - step.rho[i]).abs() < 1e-6);
            assert!((step.sigma2_mad[i] - 2.0 * (1.0 - step.rho[i])).abs() < 1e-9);
        }
    }
}
