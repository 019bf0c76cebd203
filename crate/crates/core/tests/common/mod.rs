//! Reference implementations used only by tests. Each one computes its
//! answer a different way from the library code it checks.

#![allow(dead_code, clippy::needless_range_loop)]

use clarabel::algebra::CscMatrix;
use clarabel::solver::{DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

/// Solves `a x = b` by Gaussian elimination with partial pivoting; `None`
/// when singular.
pub fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Some(x)
}

pub fn lasso_objective(w: ArrayView2<'_, f64>, d: ArrayView1<'_, f64>, z: &[f64], lambda: f64) -> f64 {
    let z = Array1::from_vec(z.to_vec());
    let r = &d - &w.dot(&z);
    0.5 * r.dot(&r) + lambda * z.iter().map(|v| v.abs()).sum::<f64>()
}

/// LASSO by enumerating every sign pattern in {-1, 0, +1}^K: on a fixed
/// pattern the objective is a quadratic whose stationary point solves
/// `G_S z_S = W_S^T d - lambda s_S`. A candidate is kept when its signs
/// agree with the pattern and the off-support subgradient condition holds;
/// the best kept candidate is the minimizer.
pub fn lasso_enumerate(w: ArrayView2<'_, f64>, d: ArrayView1<'_, f64>, lambda: f64) -> Vec<f64> {
    let k = w.ncols();
    let mut best: Option<(f64, Vec<f64>)> = None;
    let total = 3usize.pow(k as u32);
    for code in 0..total {
        let mut signs = vec![0i32; k];
        let mut c = code;
        for s in signs.iter_mut() {
            *s = (c % 3) as i32 - 1;
            c /= 3;
        }
        let support: Vec<usize> = (0..k).filter(|&j| signs[j] != 0).collect();
        let mut z = vec![0.0; k];
        if !support.is_empty() {
            let g: Vec<Vec<f64>> = support
                .iter()
                .map(|&a| support.iter().map(|&b| w.column(a).dot(&w.column(b))).collect())
                .collect();
            let rhs: Vec<f64> = support
                .iter()
                .map(|&a| w.column(a).dot(&d) - lambda * signs[a] as f64)
                .collect();
            let Some(zs) = solve_dense(g, rhs) else { continue };
            if support.iter().zip(&zs).any(|(&a, &v)| v * signs[a] as f64 <= 0.0) {
                continue;
            }
            for (&a, v) in support.iter().zip(zs) {
                z[a] = v;
            }
        }
        let r = &d - &w.dot(&Array1::from_vec(z.clone()));
        let feasible = (0..k)
            .filter(|j| signs[*j] == 0)
            .all(|j| w.column(j).dot(&r).abs() <= lambda * (1.0 + 1e-9));
        if !feasible {
            continue;
        }
        let f = lasso_objective(w, d, &z, lambda);
        if best.as_ref().is_none_or(|(bf, _)| f < *bf) {
            best = Some((f, z));
        }
    }
    best.expect("the optimum satisfies one pattern").1
}

/// Largest violation of the LASSO optimality conditions at `z`.
pub fn kkt_violation(w: ArrayView2<'_, f64>, d: ArrayView1<'_, f64>, z: &[f64], lambda: f64) -> f64 {
    let zz = Array1::from_vec(z.to_vec());
    let r = &d - &w.dot(&zz);
    let mut worst: f64 = 0.0;
    for j in 0..w.ncols() {
        let g = w.column(j).dot(&r);
        let v = if z[j] != 0.0 {
            (g - lambda * z[j].signum()).abs()
        } else {
            (g.abs() - lambda).max(0.0)
        };
        worst = worst.max(v);
    }
    worst
}

/// Plain Pearson correlation by the textbook two-pass formula; 0 when
/// either side has zero variance.
fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

/// Direct windowed cross-correlation of a `W x Q` window: for every pair
/// and every lag `tau` in `[-max_lag, max_lag]` (multiples of `step`),
/// correlate `x_i[t]` with `x_j[t + tau]` over the frames where both exist,
/// keep the signed value of largest magnitude. Ties prefer the smaller
/// |tau|, then the negative lag.
pub fn wcc_direct(window: ArrayView2<'_, f64>, max_lag: usize, step: usize) -> Array2<f64> {
    let (w, q) = window.dim();
    let const_channel: Vec<bool> = (0..q)
        .map(|c| window.column(c).iter().all(|&v| v == window[[0, c]]))
        .collect();
    let mut taus: Vec<isize> = Vec::new();
    let mut t = -(max_lag as isize) / step as isize * step as isize;
    while t <= max_lag as isize {
        taus.push(t);
        t += step as isize;
    }
    taus.sort_by_key(|t| (t.abs(), *t > 0));
    let mut out = Array2::zeros((q, q));
    for i in 0..q {
        for j in 0..q {
            if const_channel[i] || const_channel[j] {
                continue;
            }
            let mut best = 0.0f64;
            for &tau in &taus {
                let mut xs = Vec::new();
                let mut ys = Vec::new();
                for t in 0..w as isize {
                    let u = t + tau;
                    if u >= 0 && u < w as isize {
                        xs.push(window[[t as usize, i]]);
                        ys.push(window[[u as usize, j]]);
                    }
                }
                if xs.len() < 2 {
                    continue;
                }
                let r = pearson(&xs, &ys);
                if r.abs() > best.abs() {
                    best = r;
                }
            }
            out[[i, j]] = best;
        }
    }
    out
}

/// Soft-margin linear SVM solved as the primal QP
/// `min 1/2 |w|^2 + C sum xi` s.t. `y_i (w x_i + b) >= 1 - xi_i`, `xi >= 0`,
/// with a general-purpose interior-point solver. Returns `w`.
pub fn svm_qp_weights(x: ArrayView2<'_, f64>, y: &[f64], c: f64) -> Array1<f64> {
    let (n, d) = x.dim();
    let nv = d + 1 + n;
    let (mut pi, mut pj, mut pv) = (Vec::new(), Vec::new(), Vec::new());
    for k in 0..d {
        pi.push(k);
        pj.push(k);
        pv.push(1.0);
    }
    let p = CscMatrix::new_from_triplets(nv, nv, pi, pj, pv);
    let mut q = vec![0.0; nv];
    for v in q.iter_mut().skip(d + 1) {
        *v = c;
    }
    let (mut ai, mut aj, mut av) = (Vec::new(), Vec::new(), Vec::new());
    let mut b = Vec::new();
    for i in 0..n {
        for k in 0..d {
            ai.push(i);
            aj.push(k);
            av.push(-y[i] * x[[i, k]]);
        }
        ai.push(i);
        aj.push(d);
        av.push(-y[i]);
        ai.push(i);
        aj.push(d + 1 + i);
        av.push(-1.0);
        b.push(-1.0);
    }
    for i in 0..n {
        ai.push(n + i);
        aj.push(d + 1 + i);
        av.push(-1.0);
        b.push(0.0);
    }
    let a = CscMatrix::new_from_triplets(2 * n, nv, ai, aj, av);
    let cones = [SupportedConeT::NonnegativeConeT(2 * n)];
    let settings = DefaultSettingsBuilder::default()
        .verbose(false)
        .tol_gap_abs(1e-12)
        .tol_gap_rel(1e-12)
        .tol_feas(1e-12)
        .max_iter(500)
        .build()
        .unwrap();
    let mut solver = DefaultSolver::new(&p, &q, &a, &b, &cones, settings);
    solver.solve();
    assert!(
        matches!(solver.solution.status, SolverStatus::Solved | SolverStatus::AlmostSolved),
        "oracle status {:?}",
        solver.solution.status
    );
    Array1::from_iter(solver.solution.x[..d].iter().copied())
}

/// Unit-norm atoms with Gaussian entries on their group rows and exact
/// zeros elsewhere, one atom per entry of `groups`.
pub fn random_dictionary(
    topology: &facial_basis::model::LandmarkTopology,
    groups: &[facial_basis::model::GroupCode],
    rng: &mut impl rand::Rng,
) -> facial_basis::model::BasisDictionary {
    let mut atoms = Array2::zeros((topology.dim(), groups.len()));
    for (k, &g) in groups.iter().enumerate() {
        let rows = topology.rows(g);
        let v: Vec<f64> = rows.iter().map(|_| rng.sample(rand_distr::StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (&r, x) in rows.iter().zip(&v) {
            atoms[[r, k]] = x / norm;
        }
    }
    facial_basis::model::BasisDictionary::new(topology.clone(), atoms, groups.to_vec(), 0.2).unwrap()
}
