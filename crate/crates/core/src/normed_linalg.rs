//! Determinants and Lebesgue measures on subspaces of finite-dimensional
//! normed spaces.
//!
//! A k-dimensional subspace carries no canonical volume. Fixing a unit basis
//! `η = {v_i}` gives the coordinate map `L_η : R^k → V` and the pulled-back
//! Lebesgue measure `μ_η`. Determinants of maps between two such subspaces are
//! taken in coordinates, `det_{η_V,η_W}(T) = det(L_{η_W}^{-1} T L_{η_V})`, and
//! every estimate below is controlled by the separation constant
//! `α = min_i dist(v_i, span{v_j}_{j≠i})`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::qmc::{unit_hash, Halton};

/// Unit-length tolerance for basis vectors.
pub const UNIT_TOL: f64 = 1e-12;
/// Bases with a smaller separation constant are rejected.
pub const DEGENERATE_ALPHA: f64 = 1e-8;
/// Largest basis size handled.
pub const MAX_BASIS_DIM: usize = 16;
const SUBSPACE_TOL: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NormKind {
    /// `(Σ |v_i|^p)^{1/p}` for finite `p ≥ 1`.
    P { p: f64 },
    /// `max_i |v_i|`.
    Sup,
    /// `max_i w_i |v_i|` with positive weights.
    WeightedSup { weights: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormedSpace {
    pub dim: usize,
    pub norm: NormKind,
}

impl NormedSpace {
    pub fn new(dim: usize, norm: NormKind) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidInput("dimension must be positive".into()));
        }
        match &norm {
            NormKind::P { p } if !(p.is_finite() && *p >= 1.0) => {
                return Err(Error::InvalidInput(format!("p-norm exponent {p} not in [1, inf)")));
            }
            NormKind::WeightedSup { weights } => {
                if weights.len() != dim {
                    return Err(Error::InvalidInput("weight vector length differs from dimension".into()));
                }
                if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
                    return Err(Error::InvalidInput("weights must be positive and finite".into()));
                }
            }
            _ => {}
        }
        Ok(Self { dim, norm })
    }

    pub fn sup(dim: usize) -> Self {
        Self { dim, norm: NormKind::Sup }
    }

    pub fn euclidean(dim: usize) -> Self {
        Self { dim, norm: NormKind::P { p: 2.0 } }
    }

    /// `p = ∞` maps to the sup norm.
    pub fn lp(dim: usize, p: f64) -> Result<Self> {
        if p.is_infinite() && p > 0.0 {
            Ok(Self::sup(dim))
        } else {
            Self::new(dim, NormKind::P { p })
        }
    }

    pub fn norm_slice(&self, v: &[f64]) -> f64 {
        match &self.norm {
            NormKind::Sup => v.iter().fold(0.0, |m, x| m.max(x.abs())),
            NormKind::WeightedSup { weights } => v.iter().zip(weights).fold(0.0, |m, (x, w)| m.max(w * x.abs())),
            NormKind::P { p } => {
                if *p == 2.0 {
                    let scale = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
                    if scale == 0.0 {
                        return 0.0;
                    }
                    scale * v.iter().map(|x| (x / scale).powi(2)).sum::<f64>().sqrt()
                } else if *p == 1.0 {
                    v.iter().map(|x| x.abs()).sum()
                } else {
                    let scale = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
                    if scale == 0.0 {
                        return 0.0;
                    }
                    scale * v.iter().map(|x| (x.abs() / scale).powf(*p)).sum::<f64>().powf(1.0 / p)
                }
            }
        }
    }

    pub fn norm(&self, v: &DVector<f64>) -> f64 {
        self.norm_slice(v.as_slice())
    }

    pub fn distance(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        self.norm(&(a - b))
    }

    pub fn is_polyhedral(&self) -> bool {
        matches!(self.norm, NormKind::Sup | NormKind::WeightedSup { .. } | NormKind::P { p: 1.0 })
    }
}

/// `inf_c |v − Σ c_j w_j|`, the distance from `v` to the span of `spanning`.
///
/// Polyhedral norms are solved exactly as a linear program, the Euclidean
/// norm by least squares, and other `p` by damped Newton iteration on the
/// convex objective `Σ |r_i|^p`.
pub fn dist_to_span(v: &DVector<f64>, spanning: &[DVector<f64>], space: &NormedSpace) -> Result<f64> {
    ensure_finite(v.as_slice(), "vector")?;
    if v.len() != space.dim {
        return Err(Error::InvalidInput("vector dimension differs from space".into()));
    }
    for w in spanning {
        ensure_finite(w.as_slice(), "spanning vector")?;
        if w.len() != space.dim {
            return Err(Error::InvalidInput("spanning vector dimension differs from space".into()));
        }
    }
    if spanning.is_empty() {
        return Ok(space.norm(v));
    }
    let w = DMatrix::from_columns(spanning);
    let c = minimizing_coefficients(v, &w, space);
    let r = v - &w * &c;
    Ok(space.norm(&r))
}

/// Same as [`dist_to_span`] with the spanning set given as matrix columns.
pub fn dist_to_column_span(v: &DVector<f64>, w: &DMatrix<f64>, space: &NormedSpace) -> f64 {
    if w.ncols() == 0 {
        return space.norm(v);
    }
    let c = minimizing_coefficients(v, w, space);
    space.norm(&(v - w * c))
}

fn least_squares(v: &DVector<f64>, w: &DMatrix<f64>) -> DVector<f64> {
    let svd = w.clone().svd(true, true);
    svd.solve(v, 1e-14).unwrap_or_else(|_| DVector::zeros(w.ncols()))
}

fn minimizing_coefficients(v: &DVector<f64>, w: &DMatrix<f64>, space: &NormedSpace) -> DVector<f64> {
    match &space.norm {
        NormKind::P { p } if *p == 2.0 => least_squares(v, w),
        NormKind::P { p } if *p == 1.0 => l1_lp(v, w),
        NormKind::Sup => chebyshev_lp(v, w, None),
        NormKind::WeightedSup { weights } => chebyshev_lp(v, w, Some(weights)),
        NormKind::P { p } => lp_newton(v, w, *p),
    }
}

fn chebyshev_lp(v: &DVector<f64>, w: &DMatrix<f64>, weights: Option<&[f64]>) -> DVector<f64> {
    let (d, m) = w.shape();
    let wt = |i: usize| weights.map_or(1.0, |ws| ws[i]);
    let t0 = (0..d).fold(0.0f64, |acc, i| acc.max(wt(i) * v[i].abs()));
    // variables: c+ (m), c- (m), t1, t2 with t = t0 + t1 - t2
    let nvar = 2 * m + 2;
    let mut a = DMatrix::zeros(2 * d, nvar);
    let mut b = DVector::zeros(2 * d);
    for i in 0..d {
        for j in 0..m {
            let g = wt(i) * w[(i, j)];
            a[(2 * i, j)] = -g;
            a[(2 * i, m + j)] = g;
            a[(2 * i + 1, j)] = g;
            a[(2 * i + 1, m + j)] = -g;
        }
        for r in [2 * i, 2 * i + 1] {
            a[(r, 2 * m)] = -1.0;
            a[(r, 2 * m + 1)] = 1.0;
        }
        b[2 * i] = (t0 - wt(i) * v[i]).max(0.0);
        b[2 * i + 1] = (t0 + wt(i) * v[i]).max(0.0);
    }
    let mut obj = DVector::zeros(nvar);
    obj[2 * m] = -1.0;
    obj[2 * m + 1] = 1.0;
    let x = simplex_max(&a, &b, &obj);
    DVector::from_fn(m, |j, _| x[j] - x[m + j])
}

fn l1_lp(v: &DVector<f64>, w: &DMatrix<f64>) -> DVector<f64> {
    let (d, m) = w.shape();
    // variables: c+ (m), c- (m), s+ (d), s- (d) with s_i = |v_i| + s+_i - s-_i
    let nvar = 2 * m + 2 * d;
    let mut a = DMatrix::zeros(2 * d, nvar);
    let mut b = DVector::zeros(2 * d);
    for i in 0..d {
        for j in 0..m {
            a[(2 * i, j)] = -w[(i, j)];
            a[(2 * i, m + j)] = w[(i, j)];
            a[(2 * i + 1, j)] = w[(i, j)];
            a[(2 * i + 1, m + j)] = -w[(i, j)];
        }
        for r in [2 * i, 2 * i + 1] {
            a[(r, 2 * m + i)] = -1.0;
            a[(r, 2 * m + d + i)] = 1.0;
        }
        b[2 * i] = (v[i].abs() - v[i]).max(0.0);
        b[2 * i + 1] = (v[i].abs() + v[i]).max(0.0);
    }
    let mut obj = DVector::zeros(nvar);
    for i in 0..d {
        obj[2 * m + i] = -1.0;
        obj[2 * m + d + i] = 1.0;
    }
    let x = simplex_max(&a, &b, &obj);
    DVector::from_fn(m, |j, _| x[j] - x[m + j])
}

/// Dense tableau simplex for `max objᵀx` subject to `Ax ≤ b`, `x ≥ 0`, `b ≥ 0`.
/// Bland's rule; the origin is feasible by construction.
fn simplex_max(a: &DMatrix<f64>, b: &DVector<f64>, obj: &DVector<f64>) -> DVector<f64> {
    let (rows, nvar) = a.shape();
    let cols = nvar + rows + 1;
    let mut t = DMatrix::<f64>::zeros(rows + 1, cols);
    let scale = a.iter().chain(b.iter()).fold(1.0f64, |m, x| m.max(x.abs()));
    let eps = 1e-13 * scale;
    for r in 0..rows {
        for c in 0..nvar {
            t[(r, c)] = a[(r, c)];
        }
        t[(r, nvar + r)] = 1.0;
        t[(r, cols - 1)] = b[r];
    }
    for c in 0..nvar {
        t[(rows, c)] = -obj[c];
    }
    let mut basis: Vec<usize> = (nvar..nvar + rows).collect();
    for _ in 0..10_000 {
        let Some(enter) = (0..cols - 1).find(|&c| t[(rows, c)] < -eps) else {
            break;
        };
        let mut leave: Option<(usize, f64)> = None;
        for r in 0..rows {
            let coef = t[(r, enter)];
            if coef > eps {
                let ratio = t[(r, cols - 1)] / coef;
                match leave {
                    None => leave = Some((r, ratio)),
                    Some((lr, lratio)) => {
                        if ratio < lratio - 1e-15 * scale || ((ratio - lratio).abs() <= 1e-15 * scale && basis[r] < basis[lr]) {
                            leave = Some((r, ratio));
                        }
                    }
                }
            }
        }
        let Some((pr, _)) = leave else {
            break; // unbounded direction; callers pose bounded programs
        };
        let piv = t[(pr, enter)];
        for c in 0..cols {
            t[(pr, c)] /= piv;
        }
        for r in 0..=rows {
            if r != pr {
                let f = t[(r, enter)];
                if f != 0.0 {
                    for c in 0..cols {
                        let delta = f * t[(pr, c)];
                        t[(r, c)] -= delta;
                    }
                }
            }
        }
        basis[pr] = enter;
    }
    let mut x = DVector::zeros(nvar);
    for (r, &bv) in basis.iter().enumerate() {
        if bv < nvar {
            x[bv] = t[(r, cols - 1)];
        }
    }
    x
}

fn lp_newton(v: &DVector<f64>, w: &DMatrix<f64>, p: f64) -> DVector<f64> {
    let m = w.ncols();
    let objective = |c: &DVector<f64>| -> f64 {
        let r = v - w * c;
        r.iter().map(|x| x.abs().powf(p)).sum()
    };
    let mut c = least_squares(v, w);
    let mut f = objective(&c);
    let mut mu = 1e-12;
    for _ in 0..200 {
        let r = v - w * &c;
        let rmax = r.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        if rmax == 0.0 {
            break;
        }
        let mut g = DVector::zeros(m);
        let mut h = DMatrix::zeros(m, m);
        for i in 0..r.len() {
            let ri = r[i];
            let a = ri.abs();
            let row = w.row(i).transpose();
            g -= &row * (p * a.powf(p - 1.0) * ri.signum());
            let curv = if a > 1e-300 { p * (p - 1.0) * a.powf(p - 2.0) } else { 0.0 };
            let capped = curv.min(1e12 * p * (p - 1.0) * rmax.powf(p - 2.0).max(1e-300));
            h += &row * row.transpose() * capped;
        }
        let diag_scale = (0..m).fold(0.0f64, |acc, j| acc.max(h[(j, j)])).max(1e-300);
        let mut improved = false;
        for _ in 0..60 {
            let mut hm = h.clone();
            for j in 0..m {
                hm[(j, j)] += mu * diag_scale;
            }
            let Some(step) = hm.lu().solve(&(-&g)) else {
                mu *= 10.0;
                continue;
            };
            let cand = &c + &step;
            let fc = objective(&cand);
            if fc < f {
                let rel = (f - fc) / f.max(1e-300);
                c = cand;
                f = fc;
                mu = (mu * 0.3).max(1e-14);
                improved = rel > 1e-15;
                break;
            }
            mu *= 10.0;
        }
        if !improved {
            break;
        }
    }
    c
}

/// Ordered unit vectors spanning a k-dimensional subspace together with their
/// separation constant.
#[derive(Clone, Debug)]
pub struct UnitBasis {
    vectors: DMatrix<f64>,
    alpha: f64,
    space: NormedSpace,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
}

impl Serialize for UnitBasis {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let cols: Vec<Vec<f64>> = self.vectors.column_iter().map(|c| c.iter().copied().collect()).collect();
        cols.serialize(s)
    }
}

impl UnitBasis {
    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn ambient_dim(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.vectors
    }

    pub fn vector(&self, i: usize) -> DVector<f64> {
        self.vectors.column(i).into_owned()
    }

    pub fn space(&self) -> &NormedSpace {
        &self.space
    }

    /// Normalizes the given vectors in the space's norm, then validates.
    pub fn normalized(vectors: &[DVector<f64>], space: &NormedSpace) -> Result<Self> {
        let unit: Vec<DVector<f64>> = vectors
            .iter()
            .map(|v| {
                let n = space.norm(v);
                if n > 0.0 {
                    v / n
                } else {
                    v.clone()
                }
            })
            .collect();
        make_unit_basis(&unit, space)
    }

    /// Parses a JSON array of ambient coordinate arrays.
    pub fn from_json(json: &str, space: &NormedSpace) -> Result<Self> {
        let cols: Vec<Vec<f64>> = serde_json::from_str(json)?;
        let vecs: Vec<DVector<f64>> = cols.into_iter().map(DVector::from_vec).collect();
        make_unit_basis(&vecs, space)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("basis serializes")
    }

    /// Coordinates of `y` in this basis together with the residual
    /// `y − L_η c` (zero when `y` lies in the span).
    pub fn coordinates(&self, y: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let qty = self.q.transpose() * y;
        let c = self.r.solve_upper_triangular(&qty).unwrap_or_else(|| DVector::zeros(self.dim()));
        let resid = y - &self.vectors * &c;
        (c, resid)
    }

    /// `L_η c`.
    pub fn embed(&self, c: &DVector<f64>) -> DVector<f64> {
        &self.vectors * c
    }

    /// True when every vector of `other` lies in this basis' span.
    pub fn same_span(&self, other: &UnitBasis) -> bool {
        if self.dim() != other.dim() {
            return false;
        }
        (0..other.dim()).all(|i| {
            let v = other.vector(i);
            let (_, r) = self.coordinates(&v);
            self.space.norm(&r) <= SUBSPACE_TOL
        })
    }
}

/// Validates unit vectors and computes `α = min_i dist(v_i, span{v_j}_{j≠i})`.
pub fn make_unit_basis(vectors: &[DVector<f64>], space: &NormedSpace) -> Result<UnitBasis> {
    let k = vectors.len();
    if k == 0 {
        return Err(Error::InvalidInput("basis needs at least one vector".into()));
    }
    if k > space.dim || k > MAX_BASIS_DIM {
        return Err(Error::InvalidInput(format!("basis size {k} exceeds ambient dimension {} or limit {MAX_BASIS_DIM}", space.dim)));
    }
    for (i, v) in vectors.iter().enumerate() {
        ensure_finite(v.as_slice(), "basis vector")?;
        if v.len() != space.dim {
            return Err(Error::InvalidInput("basis vector dimension differs from space".into()));
        }
        let n = space.norm(v);
        if (n - 1.0).abs() > UNIT_TOL {
            return Err(Error::Normalization { index: i, norm: n });
        }
    }
    let mut alpha = f64::INFINITY;
    for i in 0..k {
        let others: Vec<DVector<f64>> = vectors.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, v)| v.clone()).collect();
        alpha = alpha.min(dist_to_span(&vectors[i], &others, space)?);
    }
    if alpha < DEGENERATE_ALPHA {
        return Err(Error::DegenerateBasis { alpha });
    }
    let m = DMatrix::from_columns(vectors);
    let qr = m.clone().qr();
    Ok(UnitBasis { q: qr.q(), r: qr.r(), vectors: m, alpha, space: space.clone() })
}

/// Coordinate matrix `L_{η_W}^{-1} T L_{η_V}` of an ambient linear map.
pub fn coordinate_matrix(t: &DMatrix<f64>, eta_v: &UnitBasis, eta_w: &UnitBasis) -> Result<DMatrix<f64>> {
    ensure_finite(t.as_slice(), "linear map")?;
    let k = eta_v.dim();
    if eta_w.dim() != k {
        return Err(Error::Contract(format!("basis dimensions differ: {} vs {}", k, eta_w.dim())));
    }
    let d = eta_v.ambient_dim();
    if t.shape() != (d, d) || eta_w.ambient_dim() != d {
        return Err(Error::Contract("linear map shape does not match ambient dimension".into()));
    }
    let space = eta_v.space();
    let mut m = DMatrix::zeros(k, k);
    let mut scale = 0.0f64;
    let mut worst = 0.0f64;
    for i in 0..k {
        let img = t * eta_v.matrix().column(i);
        scale = scale.max(space.norm(&img));
        let (c, r) = eta_w.coordinates(&img);
        worst = worst.max(space.norm(&r));
        m.set_column(i, &c);
    }
    if worst > SUBSPACE_TOL * scale.max(f64::MIN_POSITIVE) && worst > 1e-300 {
        return Err(Error::Subspace(format!("image leaves the codomain span (residual {worst:.3e}, scale {scale:.3e})")));
    }
    Ok(m)
}

/// `det_{η_V,η_W}(T) = det(L_{η_W}^{-1} T L_{η_V})`.
pub fn det_between_bases(t: &DMatrix<f64>, eta_v: &UnitBasis, eta_w: &UnitBasis) -> Result<f64> {
    Ok(coordinate_matrix(t, eta_v, eta_w)?.lu().determinant())
}

/// Estimate of `sup { |T v| : v ∈ span(domain), |v| = 1 }`.
///
/// Exact for one-dimensional domains. Otherwise the maximum over `2^k·64`
/// deterministic points on the boundary of the coefficient cube, followed by
/// a shrinking pattern search from the best samples; relative accuracy about
/// `1e-3` or better.
pub fn operator_norm(t: &DMatrix<f64>, domain: &DMatrix<f64>, space: &NormedSpace) -> f64 {
    extremal_stretch(t, domain, space, 1.0)
}

/// Estimate of `inf { |T v| : v ∈ span(domain), |v| = 1 }`, same sampling as
/// [`operator_norm`].
pub fn min_stretch(t: &DMatrix<f64>, domain: &DMatrix<f64>, space: &NormedSpace) -> f64 {
    extremal_stretch(t, domain, space, -1.0)
}

fn extremal_stretch(t: &DMatrix<f64>, domain: &DMatrix<f64>, space: &NormedSpace, sign: f64) -> f64 {
    let k = domain.ncols();
    if k == 0 {
        return 0.0;
    }
    let (best, _) = maximize_over_directions(k, |c| {
        let v = domain * c;
        let nv = space.norm(&v);
        if nv == 0.0 {
            f64::NEG_INFINITY
        } else {
            sign * space.norm(&(t * v)) / nv
        }
    });
    sign * best
}

/// Maximizes a function of a nonzero direction `c ∈ R^k` that is invariant
/// under positive scaling: coordinate axes plus `2^k·64` Halton points on the
/// boundary of the unit cube, refined by a shrinking pattern search from the
/// four best samples. Deterministic.
pub fn maximize_over_directions<F: Fn(&DVector<f64>) -> f64>(k: usize, f: F) -> (f64, DVector<f64>) {
    if k == 1 {
        let e = DVector::from_element(1, 1.0);
        let (a, b) = (f(&e), f(&(-&e)));
        return if a >= b { (a, e) } else { (b, -e) };
    }
    let halton = Halton::new(k.min(16), 0, "opnorm");
    let n = (1usize << k.min(10)) * 64;
    let mut samples: Vec<(f64, DVector<f64>)> = Vec::with_capacity(n + k);
    for i in 0..k {
        let mut e = DVector::zeros(k);
        e[i] = 1.0;
        samples.push((f(&e), e));
    }
    for idx in 0..n as u64 {
        let p = halton.point(idx);
        let mut c = DVector::from_fn(k, |j, _| 2.0 * p[j] - 1.0);
        let m = c.amax();
        if m == 0.0 {
            continue;
        }
        c /= m;
        samples.push((f(&c), c));
    }
    samples.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut best = (samples[0].0, samples[0].1.clone());
    for (start_idx, (val, c0)) in samples.iter().take(4).enumerate() {
        let mut c = c0.clone();
        let mut cur = *val;
        let mut step = 0.25;
        let mut iter = 0u64;
        while step > 1e-7 {
            let mut moved = false;
            for dir in 0..(2 * k + 4) {
                let mut cand = c.clone();
                if dir < 2 * k {
                    cand[dir / 2] += if dir % 2 == 0 { step } else { -step };
                } else {
                    for j in 0..k {
                        let key = (start_idx as u64) << 40 | iter << 8 | (dir * k + j) as u64;
                        cand[j] += step * (2.0 * unit_hash(key) - 1.0);
                    }
                }
                let r = f(&cand);
                if r > cur {
                    cur = r;
                    c = cand;
                    moved = true;
                }
                iter += 1;
            }
            if !moved {
                step *= 0.5;
            }
        }
        if cur > best.0 {
            best = (cur, c);
        }
    }
    best
}

/// Norm of `T` restricted to the span of a unit basis.
pub fn restricted_norm(t: &DMatrix<f64>, eta: &UnitBasis) -> f64 {
    operator_norm(t, eta.matrix(), eta.space())
}

/// Constants controlling `|det|` and its Lipschitz modulus.
#[derive(Clone, Debug, Serialize)]
pub struct DetBounds {
    pub k: usize,
    pub alpha: f64,
    pub operator_norm: f64,
    /// `k^{k/2} ‖T‖^k α^{-k}`.
    pub norm_bound: f64,
}

impl DetBounds {
    /// `k^{k/2+1} (max ‖T_i‖)^{k-1} α^{-k}`, the Lipschitz coefficient for the
    /// pair `(T1, T2)` given their operator norms.
    pub fn lipschitz_coefficient(&self, norm_t1: f64, norm_t2: f64) -> f64 {
        lipschitz_coefficient(self.k, norm_t1.max(norm_t2), self.alpha)
    }
}

pub fn norm_bound(k: usize, op_norm: f64, alpha: f64) -> f64 {
    let kf = k as f64;
    kf.powf(kf / 2.0) * op_norm.powi(k as i32) * alpha.powi(-(k as i32))
}

pub fn lipschitz_coefficient(k: usize, max_norm: f64, alpha: f64) -> f64 {
    let kf = k as f64;
    kf.powf(kf / 2.0 + 1.0) * max_norm.powi(k as i32 - 1) * alpha.powi(-(k as i32))
}

pub fn det_bounds(t: &DMatrix<f64>, eta_v: &UnitBasis, eta_w: &UnitBasis) -> Result<DetBounds> {
    coordinate_matrix(t, eta_v, eta_w)?;
    let k = eta_v.dim();
    let alpha = eta_v.alpha().min(eta_w.alpha());
    let op = restricted_norm(t, eta_v);
    Ok(DetBounds { k, alpha, operator_norm: op, norm_bound: norm_bound(k, op, alpha) })
}

/// The constant `K = μ_{η_W}(A) / μ_{η_V}(A)` for two bases of one subspace.
pub fn measure_ratio(eta_v: &UnitBasis, eta_w: &UnitBasis) -> Result<f64> {
    if !eta_v.same_span(eta_w) {
        return Err(Error::Subspace("bases span different subspaces".into()));
    }
    let id = DMatrix::identity(eta_v.ambient_dim(), eta_v.ambient_dim());
    Ok(det_between_bases(&id, eta_v, eta_w)?.abs())
}

/// Upper bound `k^{k/2} α^{-k}` on [`measure_ratio`].
pub fn measure_ratio_bound(k: usize, alpha: f64) -> f64 {
    norm_bound(k, 1.0, alpha)
}

#[derive(Clone, Debug, Serialize)]
pub struct BasisChange {
    /// `det_{η_V,η_V}(T)` for the map `T v_i = u_i`.
    pub det: f64,
    /// `sup_i |u_i − v_i|`.
    pub perturbation: f64,
    /// `k^{3k/2+3} α^{-k-2} sup_i |u_i − v_i|`.
    pub bound: f64,
    /// `μ_{η_V}(A) / μ_{η_U}(A)`, equal to `|det|`.
    pub measure_factor: f64,
}

impl BasisChange {
    pub fn within_bound(&self) -> bool {
        (self.det - 1.0).abs() <= self.bound * (1.0 + 1e-12) + 1e-14
    }

    pub fn measure_within_bound(&self) -> bool {
        self.measure_factor <= (1.0 + self.bound) * (1.0 + 1e-12)
    }
}

/// Determinant of the basis change `v_i ↦ u_i` measured in `η_V` on both sides.
pub fn basis_change_det(eta_v: &UnitBasis, eta_u: &UnitBasis) -> Result<BasisChange> {
    if !eta_v.same_span(eta_u) {
        return Err(Error::Subspace("bases span different subspaces".into()));
    }
    let k = eta_v.dim();
    let mut coords = DMatrix::zeros(k, k);
    let mut pert = 0.0f64;
    for i in 0..k {
        let u = eta_u.vector(i);
        let (c, _) = eta_v.coordinates(&u);
        coords.set_column(i, &c);
        pert = pert.max(eta_v.space().norm(&(u - eta_v.vector(i))));
    }
    let det = coords.lu().determinant();
    let kf = k as f64;
    let alpha = eta_v.alpha();
    let bound = kf.powf(1.5 * kf + 3.0) * alpha.powi(-(k as i32) - 2) * pert;
    Ok(BasisChange { det, perturbation: pert, bound, measure_factor: det.abs() })
}
