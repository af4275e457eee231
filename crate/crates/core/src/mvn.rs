//! Multivariate normal rectangle probabilities and equicoordinate quantiles.
//!
//! Probabilities are computed with the separation-of-variables transform of
//! Genz over a randomly shifted rank-1 lattice. Singular correlation matrices
//! (such as the node correlations of a tree, which have rank G) are handled
//! through a pivoted, rank-revealing Cholesky factor: every constraint row is
//! attached to the last factor column it loads on, so dependent rows simply
//! tighten the integration limits of that column.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::normal;

const PIVOT_TOL: f64 = 1e-10;
const PRIMES: [u32; 100] = [
    2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89, 97, 101, 103, 107,
    109, 113, 127, 131, 137, 139, 149, 151, 157, 163, 167, 173, 179, 181, 191, 193, 197, 199, 211, 223, 227, 229,
    233, 239, 241, 251, 257, 263, 269, 271, 277, 281, 283, 293, 307, 311, 313, 317, 331, 337, 347, 349, 353, 359,
    367, 373, 379, 383, 389, 397, 401, 409, 419, 421, 431, 433, 439, 443, 449, 457, 461, 463, 467, 479, 487, 491,
    499, 503, 509, 521, 523, 541,
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QmcSettings {
    pub seed: u64,
    pub shifts: usize,
    pub min_points: usize,
    pub max_points: usize,
    /// Target standard error of the probability estimate near the solution.
    pub target_se: f64,
}

impl Default for QmcSettings {
    fn default() -> Self {
        QmcSettings {
            seed: 0x5eed_0f_ca11,
            shifts: 10,
            min_points: 256,
            max_points: 1 << 15,
            target_se: 2.5e-4,
        }
    }
}

/// A validated correlation matrix with its rank-revealing factor.
#[derive(Debug, Clone)]
pub struct CorrelationFactor {
    dim: usize,
    rank: usize,
    /// Row-major n × rank factor in pivoted row order.
    factor: Vec<Vec<f64>>,
    /// rows_by_column[j] lists factor rows whose last loading is column j.
    rows_by_column: Vec<Vec<usize>>,
    /// Whether eigenvalue clipping was needed.
    pub repaired: bool,
}

impl CorrelationFactor {
    pub fn new(rho: &[Vec<f64>]) -> Result<Self> {
        let n = rho.len();
        if n == 0 {
            return Err(Error::Numeric("empty correlation matrix".into()));
        }
        for (i, row) in rho.iter().enumerate() {
            if row.len() != n {
                return Err(Error::Numeric("correlation matrix is not square".into()));
            }
            if (row[i] - 1.0).abs() > 1e-8 {
                return Err(Error::Numeric(format!("diagonal entry {i} is {} not 1", row[i])));
            }
            for (j, &v) in row.iter().enumerate() {
                if !v.is_finite() || (v - rho[j][i]).abs() > 1e-8 || v.abs() > 1.0 + 1e-8 {
                    return Err(Error::Numeric(format!("entry ({i},{j}) is not a valid correlation")));
                }
            }
        }
        match pivoted_cholesky(rho) {
            Some((perm, l, rank)) => Ok(Self::assemble(perm, l, rank, false)),
            None => {
                let repaired = clip_eigenvalues(rho);
                let (perm, l, rank) = pivoted_cholesky(&repaired)
                    .ok_or_else(|| Error::Numeric("correlation matrix is not positive semidefinite after repair".into()))?;
                Ok(Self::assemble(perm, l, rank, true))
            }
        }
    }

    fn assemble(_perm: Vec<usize>, l: Vec<Vec<f64>>, rank: usize, repaired: bool) -> Self {
        let n = l.len();
        let mut rows_by_column = vec![Vec::new(); rank];
        for (i, row) in l.iter().enumerate() {
            if let Some(last) = (0..rank).rev().find(|&j| row[j].abs() > PIVOT_TOL) {
                rows_by_column[last].push(i);
            }
        }
        CorrelationFactor {
            dim: n,
            rank,
            factor: l,
            rows_by_column,
            repaired,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    /// Integrand value at a point of the unit cube (length = rank).
    fn integrand(&self, w: &[f64], bound: f64, y: &mut [f64]) -> f64 {
        let mut f = 1.0;
        for j in 0..self.rank {
            let mut lo = f64::NEG_INFINITY;
            let mut hi = f64::INFINITY;
            for &i in &self.rows_by_column[j] {
                let row = &self.factor[i];
                let s: f64 = row[..j].iter().zip(&y[..j]).map(|(a, b)| a * b).sum();
                let c = row[j];
                let (a, b) = ((-bound - s) / c, (bound - s) / c);
                let (a, b) = if c > 0.0 { (a, b) } else { (b, a) };
                lo = lo.max(a);
                hi = hi.min(b);
            }
            if hi <= lo {
                return 0.0;
            }
            let pa = normal::cdf(lo);
            let pb = normal::cdf(hi);
            let width = pb - pa;
            if width <= 0.0 {
                return 0.0;
            }
            f *= width;
            let u = (pa + w[j] * width).clamp(1e-300, 1.0 - 1e-16);
            y[j] = normal::quantile(u);
        }
        f
    }

    /// Pr(|X_k| < bound for all k) with its standard error, using `points` lattice points per shift.
    pub fn symmetric_box_probability(&self, bound: f64, points: usize, shifts: &[Vec<f64>]) -> (f64, f64) {
        if bound <= 0.0 {
            return (0.0, 0.0);
        }
        let r = self.rank;
        let gen: Vec<f64> = (0..r).map(|j| (PRIMES[j % PRIMES.len()] as f64).sqrt().fract()).collect();
        let mut w = vec![0.0; r];
        let mut y = vec![0.0; r];
        let means: Vec<f64> = shifts
            .iter()
            .map(|shift| {
                let mut acc = 0.0;
                for i in 1..=points {
                    for j in 0..r {
                        let x = (i as f64 * gen[j] + shift[j]).fract();
                        w[j] = (2.0 * x - 1.0).abs();
                    }
                    acc += self.integrand(&w, bound, &mut y);
                }
                acc / points as f64
            })
            .collect();
        let m = means.len() as f64;
        let mean = means.iter().sum::<f64>() / m;
        let var = if means.len() > 1 {
            means.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0)
        } else {
            0.0
        };
        (mean, (var / m).sqrt())
    }
}

/// Rank-revealing Cholesky with diagonal pivoting. Returns rows in pivoted
/// order, each with `rank` loadings; `None` when a pivot is clearly negative.
fn pivoted_cholesky(a: &[Vec<f64>]) -> Option<(Vec<usize>, Vec<Vec<f64>>, usize)> {
    let n = a.len();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut l = vec![vec![0.0; n]; n];
    let mut diag: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    let mut rank = 0;
    for k in 0..n {
        let (p, &dmax) = diag[k..]
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.partial_cmp(y.1).unwrap().then(y.0.cmp(&x.0)))
            .map(|(i, d)| (i + k, d))
            .unwrap();
        if dmax <= 1e-9 {
            for i in k..n {
                if diag[i] < -1e-7 {
                    return None;
                }
            }
            break;
        }
        perm.swap(k, p);
        diag.swap(k, p);
        l.swap(k, p);
        let pivot = dmax.sqrt();
        l[k][k] = pivot;
        for i in k + 1..n {
            let s: f64 = (0..k).map(|j| l[i][j] * l[k][j]).sum();
            l[i][k] = (a[perm[i]][perm[k]] - s) / pivot;
            diag[i] -= l[i][k] * l[i][k];
        }
        rank += 1;
    }
    for i in rank..n {
        let s: f64 = (0..rank).map(|j| l[i][j] * l[i][j]).sum();
        if (s - 1.0).abs() > 1e-6 {
            return None;
        }
    }
    let factor = l.into_iter().map(|row| row[..rank].to_vec()).collect();
    Some((perm, factor, rank))
}

fn clip_eigenvalues(rho: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = rho.len();
    let m = DMatrix::from_fn(n, n, |i, j| rho[i][j]);
    let eig = SymmetricEigen::new(m);
    let clipped = eig.eigenvalues.map(|v| v.max(0.0));
    let rebuilt = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    let d: Vec<f64> = (0..n).map(|i| rebuilt[(i, i)].max(1e-300).sqrt()).collect();
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { rebuilt[(i, j)] / (d[i] * d[j]) }).collect())
        .collect()
}

fn random_shifts(settings: &QmcSettings, dim: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    (0..settings.shifts.max(2))
        .map(|_| (0..dim).map(|_| rng.random::<f64>()).collect())
        .collect()
}

/// Pr(max_k |X_k| < bound) for X ~ N(0, rho).
pub fn symmetric_box_probability(rho: &[Vec<f64>], bound: f64, settings: &QmcSettings) -> Result<(f64, f64)> {
    let factor = CorrelationFactor::new(rho)?;
    let shifts = random_shifts(settings, factor.rank());
    let mut points = settings.min_points;
    loop {
        let (p, se) = factor.symmetric_box_probability(bound, points, &shifts);
        if se <= settings.target_se || points >= settings.max_points {
            return Ok((p, se));
        }
        points *= 2;
    }
}

/// κ solving Pr(max_k |X_k| < κ) = level for X ~ N(0, rho).
pub fn mvn_equicoordinate_quantile(rho: &[Vec<f64>], level: f64, settings: &QmcSettings) -> Result<f64> {
    let factor = CorrelationFactor::new(rho)?;
    equicoordinate_quantile_with(&factor, level, settings)
}

pub fn equicoordinate_quantile_with(factor: &CorrelationFactor, level: f64, settings: &QmcSettings) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!("level {level} must lie in (0,1)")));
    }
    let n = factor.dim() as f64;
    let lower = normal::quantile((1.0 + level) / 2.0);
    if factor.rank() == 1 {
        return Ok(lower);
    }
    let upper = normal::quantile(1.0 - (1.0 - level) / (2.0 * n));
    let shifts = random_shifts(settings, factor.rank());

    // Fix the lattice size once, near the expected root, so that the
    // root search sees one smooth function of κ.
    let mid = 0.5 * (lower + upper);
    let mut points = settings.min_points;
    while points < settings.max_points {
        let (_, se) = factor.symmetric_box_probability(mid, points, &shifts);
        if se <= settings.target_se {
            break;
        }
        points *= 2;
    }
    let eval = |k: f64| factor.symmetric_box_probability(k, points, &shifts).0 - level;

    // Illinois regula falsi on a bracket that always contains the root.
    let (mut a, mut b) = (lower - 1e-9, upper + 1e-9);
    let (mut fa, mut fb) = (eval(a), eval(b));
    if fa > 0.0 {
        return Ok(lower);
    }
    if fb < 0.0 {
        return Ok(upper);
    }
    let mut side = 0i8;
    for _ in 0..100 {
        let c = (a * fb - b * fa) / (fb - fa);
        let fc = eval(c);
        if fc.abs() < 1e-7 || (b - a).abs() < 1e-6 {
            return Ok(c);
        }
        if fc * fb > 0.0 {
            b = c;
            fb = fc;
            if side == -1 {
                fa /= 2.0;
            }
            side = -1;
        } else {
            a = c;
            fa = fc;
            if side == 1 {
                fb /= 2.0;
            }
            side = 1;
        }
    }
    Ok(0.5 * (a + b))
}

/// Plain Monte Carlo quantile of max_k |X_k|; an independent check for the lattice path.
#[cfg(test)]
pub(crate) fn monte_carlo_quantile(rho: &[Vec<f64>], level: f64, draws: usize, seed: u64) -> f64 {
    use rand_distr::{Distribution, StandardNormal};
    let n = rho.len();
    let m = DMatrix::from_fn(n, n, |i, j| rho[i][j]);
    let l = m.cholesky().expect("positive definite").l();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut maxima = Vec::with_capacity(draws);
    let mut z = vec![0.0; n];
    for _ in 0..draws {
        for v in z.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        let mut mx = 0.0f64;
        for i in 0..n {
            let x: f64 = (0..=i).map(|j| l[(i, j)] * z[j]).sum();
            mx = mx.max(x.abs());
        }
        maxima.push(mx);
    }
    let k = ((level * draws as f64).ceil() as usize).min(draws) - 1;
    *maxima.select_nth_unstable_by(k, |a, b| a.partial_cmp(b).unwrap()).1
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn identity(n: usize) -> Vec<Vec<f64>> {
        (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect()
    }

    fn exchangeable(n: usize, r: f64) -> Vec<Vec<f64>> {
        (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { r }).collect()).collect()
    }

    #[test]
    fn univariate_is_normal_quantile() {
        let k = mvn_equicoordinate_quantile(&identity(1), 0.95, &QmcSettings::default()).unwrap();
        assert_abs_diff_eq!(k, 1.959964, epsilon = 1e-4);
    }

    #[test]
    fn independent_pair_uses_product_rule() {
        let k = mvn_equicoordinate_quantile(&identity(2), 0.95, &QmcSettings::default()).unwrap();
        let exact = normal::quantile((1.0 + 0.95f64.sqrt()) / 2.0);
        assert_abs_diff_eq!(exact, 2.2365, epsilon = 1e-3);
        assert_abs_diff_eq!(k, exact, epsilon = 2e-3);
    }

    #[test]
    fn independent_probability_matches_product() {
        let (p, _) = symmetric_box_probability(&identity(4), 2.0, &QmcSettings::default()).unwrap();
        let exact = (2.0 * normal::cdf(2.0) - 1.0).powi(4);
        assert_abs_diff_eq!(p, exact, epsilon = 1e-4);
    }

    #[test]
    fn perfectly_correlated_collapses_to_one_dimension() {
        let k = mvn_equicoordinate_quantile(&exchangeable(3, 1.0), 0.95, &QmcSettings::default()).unwrap();
        assert_abs_diff_eq!(k, 1.959964, epsilon = 1e-4);
    }

    #[test]
    fn singular_tree_structure_matches_monte_carlo() {
        // Sex-then-age tree with equal leaf variances: rows l23, l1, l2, l3.
        let s = 0.5f64.sqrt();
        let rho = vec![
            vec![1.0, 0.0, s, s],
            vec![0.0, 1.0, 0.0, 0.0],
            vec![s, 0.0, 1.0, 0.0],
            vec![s, 0.0, 0.0, 1.0],
        ];
        let f = CorrelationFactor::new(&rho).unwrap();
        assert_eq!(f.rank(), 3);
        let k = mvn_equicoordinate_quantile(&rho, 0.95, &QmcSettings::default()).unwrap();
        // Oracle: simulate independent leaves directly.
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws = 2_000_000;
        let mut hits = 0usize;
        for _ in 0..draws {
            let z: Vec<f64> = (0..3).map(|_| StandardNormal.sample(&mut rng)).collect();
            let m = [(z[1] + z[2]) * s, z[0], z[1], z[2]].iter().fold(0.0f64, |a, v| a.max(v.abs()));
            if m < k {
                hits += 1;
            }
        }
        assert_abs_diff_eq!(hits as f64 / draws as f64, 0.95, epsilon = 1e-3);
    }

    #[test]
    fn non_psd_matrix_is_repaired_and_flagged() {
        let rho = vec![vec![1.0, 0.9, -0.9], vec![0.9, 1.0, 0.9], vec![-0.9, 0.9, 1.0]];
        let f = CorrelationFactor::new(&rho).unwrap();
        assert!(f.repaired);
    }

    #[test]
    fn asymmetric_matrix_is_rejected() {
        let rho = vec![vec![1.0, 0.2], vec![0.3, 1.0]];
        assert!(CorrelationFactor::new(&rho).is_err());
    }

    #[test]
    fn bad_level_is_rejected() {
        assert!(mvn_equicoordinate_quantile(&identity(2), 1.0, &QmcSettings::default()).is_err());
    }

    #[test]
    fn quantile_lies_between_bounds() {
        let rho = exchangeable(6, 0.3);
        let k = mvn_equicoordinate_quantile(&rho, 0.96, &QmcSettings::default()).unwrap();
        assert!(k > normal::quantile(0.98) && k < normal::quantile(1.0 - 0.04 / 12.0));
        let (p, _) = symmetric_box_probability(&rho, k, &QmcSettings::default()).unwrap();
        assert_abs_diff_eq!(p, 0.96, epsilon = 2e-3);
    }

    #[test]
    fn exchangeable_quantile_matches_simulation() {
        let rho = exchangeable(5, 0.5);
        let k = mvn_equicoordinate_quantile(&rho, 0.95, &QmcSettings::default()).unwrap();
        let mc = monte_carlo_quantile(&rho, 0.95, 400_000, 5);
        assert_abs_diff_eq!(k, mc, epsilon = 0.01);
    }
}
