//! L1-penalized logistic regression by accelerated proximal gradient.
//!
//! Minimizes `mean_i [softplus(z_i) - y_i z_i] + λ‖β‖₁` with `z = Xβ + b`; the
//! intercept `b` is not penalized. Each step is a soft-thresholded gradient
//! step with backtracking on the smooth part, so coefficients that should be
//! zero are exactly `0.0`.

/// Dense row-major design matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged design matrix");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn select_cols(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(self.rows * idx.len());
        for i in 0..self.rows {
            let row = self.row(i);
            data.extend(idx.iter().map(|&j| row[j]));
        }
        Self {
            rows: self.rows,
            cols: idx.len(),
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// `Xβ + b`, using only the nonzero coefficients when β is sparse.
    fn linear(&self, beta: &[f64], b: f64) -> Vec<f64> {
        let active: Vec<usize> = (0..self.cols).filter(|&j| beta[j] != 0.0).collect();
        if active.len() * 4 < self.cols {
            (0..self.rows)
                .map(|i| {
                    let row = self.row(i);
                    b + active.iter().map(|&j| row[j] * beta[j]).sum::<f64>()
                })
                .collect()
        } else {
            (0..self.rows)
                .map(|i| b + self.row(i).iter().zip(beta).map(|(x, w)| x * w).sum::<f64>())
                .collect()
        }
    }

    /// `Xᵀr / n`.
    fn mean_transpose(&self, r: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.cols];
        for (i, &ri) in r.iter().enumerate() {
            if ri == 0.0 {
                continue;
            }
            for (gj, x) in g.iter_mut().zip(self.row(i)) {
                *gj += ri * x;
            }
        }
        let inv = 1.0 / self.rows as f64;
        g.iter_mut().for_each(|v| *v *= inv);
        g
    }

    // Largest eigenvalue of [X 1]ᵀ[X 1] / n, by power iteration.
    fn gram_norm(&self) -> f64 {
        let mut v = vec![1.0; self.cols + 1];
        let mut est = 1.0;
        for _ in 0..30 {
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return 1.0;
            }
            v.iter_mut().for_each(|x| *x /= norm);
            let z = self.linear(&v[..self.cols], v[self.cols]);
            let mut w = self.mean_transpose(&z);
            w.push(z.iter().sum::<f64>() / self.rows as f64);
            est = w.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>();
            v = w;
        }
        est.max(1e-12)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LassoOptions {
    /// Stop once one step decreases the objective by less than this.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for LassoOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iterations: 5000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LassoFit {
    pub beta: Vec<f64>,
    pub intercept: f64,
    pub objective: f64,
    pub iterations: usize,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Mean logistic cross-entropy of logits `z` against 0/1 targets.
pub fn mean_cross_entropy(z: &[f64], y: &[f64]) -> f64 {
    z.iter().zip(y).map(|(z, y)| softplus(*z) - y * z).sum::<f64>() / z.len() as f64
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Smallest λ for which `β = 0` is optimal.
pub fn lambda_max(x: &Matrix, y: &[f64]) -> f64 {
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let r: Vec<f64> = y.iter().map(|v| mean - v).collect();
    x.mean_transpose(&r).iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn null_intercept(y: &[f64]) -> f64 {
    let p = y.iter().sum::<f64>() / y.len() as f64;
    (p / (1.0 - p)).ln()
}

/// Fits one λ. `warm` seeds `(β, b)`; otherwise the fit starts from the null
/// model `β = 0, b = logit(mean y)`.
///
/// Proximal steps run on a working set of columns (the current support plus
/// the worst KKT violators); the full gradient is checked after each
/// restricted solve and violators are added until none remain.
pub fn fit(x: &Matrix, y: &[f64], lambda: f64, warm: Option<(&[f64], f64)>, opts: LassoOptions) -> LassoFit {
    let (mut beta, mut b) = match warm {
        Some((w, b0)) => (w.to_vec(), b0),
        None => (vec![0.0; x.cols()], null_intercept(y)),
    };
    let mut working: Vec<usize> = (0..x.cols()).filter(|&j| beta[j] != 0.0).collect();
    let mut iterations = 0;
    loop {
        let z = x.linear(&beta, b);
        let r: Vec<f64> = z.iter().zip(y).map(|(z, y)| sigmoid(*z) - y).collect();
        let g = x.mean_transpose(&r);
        let mut violators: Vec<usize> = (0..x.cols())
            .filter(|&j| beta[j] == 0.0 && g[j].abs() > lambda * (1.0 + KKT_SLACK) + 1e-12)
            .filter(|j| working.binary_search(j).is_err())
            .collect();
        if violators.is_empty() && iterations > 0 {
            break;
        }
        violators.sort_by(|a, c| g[*c].abs().total_cmp(&g[*a].abs()).then(a.cmp(c)));
        violators.truncate(working.len().max(MIN_ADDED));
        working.extend(violators);
        working.sort_unstable();
        if iterations >= opts.max_iterations {
            break;
        }
        let sub = x.select_cols(&working);
        let sub_beta: Vec<f64> = working.iter().map(|&j| beta[j]).collect();
        let budget = LassoOptions {
            max_iterations: opts.max_iterations - iterations,
            ..opts
        };
        let f = fit_dense(&sub, y, lambda, Some((&sub_beta, b)), budget, None);
        iterations += f.iterations.max(1);
        for (&j, v) in working.iter().zip(&f.beta) {
            beta[j] = *v;
        }
        b = f.intercept;
    }
    let mut z = x.linear(&beta, b);
    let mut objective = mean_cross_entropy(&z, y) + lambda * beta.iter().map(|v| v.abs()).sum::<f64>();
    // An early-stopped accelerated iterate leaves crumbs like 1e-6 outside the
    // true support; the support *is* the unit set, so drop every coefficient
    // whose removal does not raise the objective.
    let mut support: Vec<usize> = (0..x.cols()).filter(|&j| beta[j] != 0.0).collect();
    support.sort_by(|a, c| beta[*a].abs().total_cmp(&beta[*c].abs()).then(a.cmp(c)));
    for j in support {
        let trial: Vec<f64> = z.iter().enumerate().map(|(i, zi)| zi - beta[j] * x.row(i)[j]).collect();
        let obj = mean_cross_entropy(&trial, y) + lambda * (beta.iter().map(|v| v.abs()).sum::<f64>() - beta[j].abs());
        if obj <= objective {
            beta[j] = 0.0;
            z = trial;
            objective = obj;
        }
    }
    LassoFit {
        objective,
        beta,
        intercept: b,
        iterations,
    }
}

/// Relative tolerance on `|∇ⱼ| ≤ λ` before a zero coefficient joins the working set.
const KKT_SLACK: f64 = 1e-6;
const MIN_ADDED: usize = 8;
const STEP_GROWTH: f64 = 1.5;

/// Plain accelerated proximal gradient on every column.
pub(crate) fn fit_dense(
    x: &Matrix,
    y: &[f64],
    lambda: f64,
    warm: Option<(&[f64], f64)>,
    opts: LassoOptions,
    step: Option<f64>,
) -> LassoFit {
    let l1 = |b: &[f64]| b.iter().map(|v| v.abs()).sum::<f64>();
    let (mut beta, mut b) = match warm {
        Some((w, b0)) => (w.to_vec(), b0),
        None => (vec![0.0; x.cols()], null_intercept(y)),
    };
    // logistic loss has curvature at most 1/4
    let mut t = step.unwrap_or_else(|| 4.0 / x.gram_norm());
    let mut z = x.linear(&beta, b);
    let mut obj = mean_cross_entropy(&z, y) + lambda * l1(&beta);

    let mut yb = beta.clone();
    let mut yi = b;
    let mut zy = z.clone();
    let mut theta = 1.0f64;
    let mut momentum_active = false;
    let mut iterations = 0;

    while iterations < opts.max_iterations {
        iterations += 1;
        let r: Vec<f64> = zy.iter().zip(y).map(|(z, y)| sigmoid(*z) - y).collect();
        let g = x.mean_transpose(&r);
        let gb = r.iter().sum::<f64>() / r.len() as f64;
        let fy = mean_cross_entropy(&zy, y);
        // let the step grow back: curvature is far below the global bound near a separating solution
        t *= STEP_GROWTH;

        let (nb, ni, nz, nf) = loop {
            let nb: Vec<f64> = yb
                .iter()
                .zip(&g)
                .map(|(v, gj)| soft_threshold(v - t * gj, t * lambda))
                .collect();
            let ni = yi - t * gb;
            let nz = x.linear(&nb, ni);
            let nf = mean_cross_entropy(&nz, y);
            let mut lin = gb * (ni - yi);
            let mut sq = (ni - yi) * (ni - yi);
            for ((a, c), gj) in nb.iter().zip(&yb).zip(&g) {
                let d = a - c;
                lin += gj * d;
                sq += d * d;
            }
            if nf <= fy + lin + sq / (2.0 * t) + 1e-14 * fy.abs() || t < 1e-20 {
                break (nb, ni, nz, nf);
            }
            t *= 0.5;
        };

        let new_obj = nf + lambda * l1(&nb);
        if new_obj > obj {
            if momentum_active {
                // restart from the last accepted iterate without momentum
                yb.clone_from(&beta);
                yi = b;
                zy.clone_from(&z);
                theta = 1.0;
                momentum_active = false;
                continue;
            }
            break;
        }
        let decrease = obj - new_obj;
        let theta_next = (1.0 + (1.0 + 4.0 * theta * theta).sqrt()) / 2.0;
        let m = (theta - 1.0) / theta_next;
        momentum_active = m > 0.0;
        yb = nb.iter().zip(&beta).map(|(n, o)| n + m * (n - o)).collect();
        yi = ni + m * (ni - b);
        zy = nz.iter().zip(&z).map(|(n, o)| n + m * (n - o)).collect();
        beta = nb;
        b = ni;
        z = nz;
        obj = new_obj;
        theta = theta_next;
        if decrease < opts.tolerance {
            break;
        }
    }
    LassoFit {
        beta,
        intercept: b,
        objective: obj,
        iterations,
    }
}

/// Fits a descending λ path with warm starts. Returns fits in the order of `lambdas`.
pub fn fit_path(x: &Matrix, y: &[f64], lambdas: &[f64], opts: LassoOptions) -> Vec<LassoFit> {
    let mut order: Vec<usize> = (0..lambdas.len()).collect();
    order.sort_by(|a, b| lambdas[*b].total_cmp(&lambdas[*a]));
    let mut out: Vec<Option<LassoFit>> = vec![None; lambdas.len()];
    let mut prev: Option<LassoFit> = None;
    for i in order {
        let warm = prev.as_ref().map(|f| (f.beta.as_slice(), f.intercept));
        let f = fit(x, y, lambdas[i], warm, opts);
        prev = Some(f.clone());
        out[i] = Some(f);
    }
    out.into_iter().map(Option::unwrap).collect()
}
