//! Soft-margin kernel SVM trained by sequential minimal optimization.
//!
//! The solver maximizes the dual objective J(a) = sum(a) - 1/2 sum_ij
//! a_i a_j y_i y_j K_ij subject to 0 <= a <= C and sum(a_i y_i) = 0. Pair
//! updates preserve the equality constraint exactly, so dual feasibility
//! holds by construction; the loop stops once no point violates the KKT
//! conditions by more than the configured tolerance.

use serde::{Deserialize, Serialize};

use super::{check_binary_data, Kernel, TrainConfig, TrainError};
use crate::features::FEATURE_COUNT;

/// A trained SVM: only support vectors (a > 0) are stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    pub support_vectors: Vec<[f64; FEATURE_COUNT]>,
    pub alphas: Vec<f64>,
    pub labels: Vec<i8>,
    /// Indices of the support vectors in the original training set
    /// (diagnostic; lets feasibility checks reconstruct the full a vector).
    pub sv_indices: Vec<usize>,
    pub bias: f64,
    pub kernel: Kernel,
    pub c: f64,
    /// False when the pair-update budget ran out before the KKT conditions
    /// were met; the model is the best iterate found.
    pub converged: bool,
}

impl SvmModel {
    /// Decision value f(x) = sum_k a_k y_k K(x_k, x) + b. The sign is the
    /// class; zero resolves to fast-flux at the prediction layer.
    pub fn decision(&self, x: &[f64; FEATURE_COUNT]) -> f64 {
        let mut sum = self.bias;
        for k in 0..self.support_vectors.len() {
            sum += self.alphas[k]
                * f64::from(self.labels[k])
                * self.kernel.eval(&self.support_vectors[k], x);
        }
        sum
    }

    pub fn num_support_vectors(&self) -> usize {
        self.support_vectors.len()
    }

    /// sum(a_k y_k) over the stored support vectors; equals the sum over the
    /// whole training set because pruned points have a = 0.
    pub fn equality_residual(&self) -> f64 {
        self.alphas
            .iter()
            .zip(&self.labels)
            .map(|(a, &y)| a * f64::from(y))
            .sum()
    }
}

/// Dual objective J(a); quadratic in a, used by optimality checks.
pub fn dual_objective(
    rows: &[[f64; FEATURE_COUNT]],
    labels: &[i8],
    alpha: &[f64],
    kernel: Kernel,
) -> f64 {
    let n = rows.len();
    let mut j = alpha.iter().sum::<f64>();
    for p in 0..n {
        if alpha[p] == 0.0 {
            continue;
        }
        for q in 0..n {
            if alpha[q] == 0.0 {
                continue;
            }
            j -= 0.5
                * alpha[p]
                * alpha[q]
                * f64::from(labels[p])
                * f64::from(labels[q])
                * kernel.eval(&rows[p], &rows[q]);
        }
    }
    j
}

/// Half-width of the band around 0 and C inside which a multiplier counts
/// as pinned to the bound. Pair updates land near the box corners through
/// rounded float arithmetic, so exact comparisons would classify a pinned
/// point as free even though no step above the noise guard exists.
fn bound_eps(c: f64) -> f64 {
    1e-9 * c.max(1.0)
}

/// KKT violation magnitude for one point, given r = y*(f(x) - y).
/// Points at the lower bound may not sit below the margin; points at the
/// upper bound may not sit above it; free points must sit on it.
fn violation(alpha: f64, r: f64, c: f64, tol: f64) -> f64 {
    let eps = bound_eps(c);
    if r < -tol && alpha < c - eps {
        -r
    } else if r > tol && alpha > eps {
        r
    } else {
        0.0
    }
}

/// Upper bound on memory spent memoizing kernel rows during training.
/// Sized so the full Gram matrix fits for corpora up to ~8k rows (the scale
/// the evaluation harness trains at); larger datasets degrade gracefully to
/// a partial cache. Rows are dropped when training returns.
const KERNEL_CACHE_BYTES: usize = 512 << 20;

struct Smo<'a> {
    rows: &'a [[f64; FEATURE_COUNT]],
    y: Vec<f64>,
    kernel: Kernel,
    diag: Vec<f64>,
    c: f64,
    alpha: Vec<f64>,
    bias: f64,
    /// Error cache e_i = f(x_i) - y_i, maintained exactly on every update.
    err: Vec<f64>,
    /// Memoized kernel rows K(i, ·) for points the solver keeps revisiting.
    /// Pure memoization: the kernel is evaluated with the same expression
    /// either way and K is bitwise symmetric, so cached and direct results
    /// are identical f64s — only speed changes, never the trained model.
    kernel_rows: Vec<Option<Box<[f64]>>>,
    cached_rows: usize,
    cache_cap: usize,
}

impl Smo<'_> {
    /// K(i, j) from either point's memoized row, or evaluated directly.
    fn kernel_at(&self, i: usize, j: usize) -> f64 {
        if let Some(row) = &self.kernel_rows[i] {
            row[j]
        } else if let Some(row) = &self.kernel_rows[j] {
            row[i]
        } else {
            self.kernel.eval(&self.rows[i], &self.rows[j])
        }
    }

    /// Memoizes K(i, ·) unless the cache budget is spent.
    fn ensure_row(&mut self, i: usize) {
        if self.kernel_rows[i].is_some() || self.cached_rows >= self.cache_cap {
            return;
        }
        let x_i = &self.rows[i];
        let row: Box<[f64]> = self.rows.iter().map(|r| self.kernel.eval(x_i, r)).collect();
        self.kernel_rows[i] = Some(row);
        self.cached_rows += 1;
    }

    /// One SMO pair update on (i, j). Returns false when the pair cannot
    /// make progress (degenerate segment or step below noise).
    fn take_step(&mut self, i: usize, j: usize) -> bool {
        if i == j {
            return false;
        }
        let (a_i, a_j) = (self.alpha[i], self.alpha[j]);
        let (y_i, y_j) = (self.y[i], self.y[j]);
        let s = y_i * y_j;
        let (lo, hi) = if s < 0.0 {
            ((a_j - a_i).max(0.0), (self.c + a_j - a_i).min(self.c))
        } else {
            ((a_i + a_j - self.c).max(0.0), (a_i + a_j).min(self.c))
        };
        if hi - lo < 1e-12 {
            return false;
        }
        let k_ij = self.kernel_at(i, j);
        let eta = self.diag[i] + self.diag[j] - 2.0 * k_ij;
        let gap = self.err[i] - self.err[j];
        let a_j_new = if eta > 1e-12 {
            (a_j + y_j * gap / eta).clamp(lo, hi)
        } else {
            // Zero/negative curvature along the constraint line (duplicate
            // or near-duplicate points): the restricted objective
            // dJ(t) = y_j*gap*(t - a_j) - eta/2*(t - a_j)^2 peaks at an end.
            let delta = |t: f64| y_j * gap * (t - a_j) - 0.5 * eta * (t - a_j) * (t - a_j);
            let (d_lo, d_hi) = (delta(lo), delta(hi));
            if d_lo > d_hi + 1e-12 {
                lo
            } else if d_hi > d_lo + 1e-12 {
                hi
            } else {
                return false;
            }
        };
        if (a_j_new - a_j).abs() < 1e-12 * (a_j_new + a_j + 1.0) {
            return false;
        }
        // The pair moves along y_i*da_i + y_j*da_j = 0, preserving the
        // equality constraint; the clamp only absorbs float round-off.
        let a_i_new = (a_i + s * (a_j - a_j_new)).clamp(0.0, self.c);

        let (d_i, d_j) = (y_i * (a_i_new - a_i), y_j * (a_j_new - a_j));
        let k_ii = self.diag[i];
        let k_jj = self.diag[j];
        let b1 = self.bias - self.err[i] - d_i * k_ii - d_j * k_ij;
        let b2 = self.bias - self.err[j] - d_i * k_ij - d_j * k_jj;
        let bias_new = if a_i_new > 0.0 && a_i_new < self.c {
            b1
        } else if a_j_new > 0.0 && a_j_new < self.c {
            b2
        } else {
            0.5 * (b1 + b2)
        };
        let db = bias_new - self.bias;
        // The update is committed, so these two rows are worth memoizing:
        // maintaining the error cache touches them in full.
        self.ensure_row(i);
        self.ensure_row(j);
        let (rows, kernel) = (self.rows, self.kernel);
        let row_i = self.kernel_rows[i].as_deref();
        let row_j = self.kernel_rows[j].as_deref();
        for k in 0..rows.len() {
            let k_ik = match row_i {
                Some(r) => r[k],
                None => kernel.eval(&rows[i], &rows[k]),
            };
            let k_jk = match row_j {
                Some(r) => r[k],
                None => kernel.eval(&rows[j], &rows[k]),
            };
            self.err[k] += d_i * k_ik + d_j * k_jk + db;
        }
        self.alpha[i] = a_i_new;
        self.alpha[j] = a_j_new;
        self.bias = bias_new;
        true
    }

    fn violation_at(&self, i: usize, tol: f64) -> f64 {
        violation(self.alpha[i], self.y[i] * self.err[i], self.c, tol)
    }

    /// Rebuilds the error cache from the multipliers. Incremental updates
    /// accumulate float round-off over many steps; the convergence verdict
    /// should not depend on that drift.
    fn refresh_errors(&mut self) {
        let n = self.rows.len();
        let mut fresh = vec![0.0; n];
        for (k, slot) in fresh.iter_mut().enumerate() {
            let mut f = self.bias;
            for l in 0..n {
                if self.alpha[l] > 0.0 {
                    f += self.alpha[l] * self.y[l] * self.kernel_at(l, k);
                }
            }
            *slot = f - self.y[k];
        }
        self.err = fresh;
    }
}

/// Trains a soft-margin SVM. Deterministic: working pairs are chosen by
/// maximal KKT violation with ties broken by index, no randomness involved.
pub fn svm_train(
    rows: &[[f64; FEATURE_COUNT]],
    labels: &[i8],
    cfg: &TrainConfig,
) -> Result<SvmModel, TrainError> {
    check_binary_data(rows, labels)?;
    let kernel = cfg.kernel();
    let n = rows.len();
    let tol = cfg.tolerance;
    let y: Vec<f64> = labels.iter().map(|&l| f64::from(l)).collect();
    let mut smo = Smo {
        rows,
        err: y.iter().map(|&v| -v).collect(),
        diag: rows.iter().map(|r| kernel.eval(r, r)).collect(),
        y,
        kernel,
        c: cfg.c,
        alpha: vec![0.0; n],
        bias: 0.0,
        kernel_rows: (0..n).map(|_| None).collect(),
        cached_rows: 0,
        cache_cap: (KERNEL_CACHE_BYTES / (8 * n.max(1))).max(32),
    };

    // Points that could not make progress with any partner stay blocked
    // until the working set is exhausted; they are then re-examined in one
    // batch. Unblocking per update instead would re-run a full partner
    // sweep for every stuck point after every tiny step.
    let mut blocked = vec![false; n];
    let mut progressed = true;
    let mut updates = 0usize;
    let mut converged = false;
    while updates < cfg.max_passes {
        // First choice: maximal KKT violation among unblocked points.
        let mut first = None;
        let mut worst = tol;
        for (i, &is_blocked) in blocked.iter().enumerate() {
            if is_blocked {
                continue;
            }
            let v = smo.violation_at(i, tol);
            if v > worst {
                worst = v;
                first = Some(i);
            }
        }
        let Some(i) = first else {
            // Blocked points may step now that the error cache moved; a
            // round that made no progress at all is a fixpoint.
            if progressed && blocked.iter().any(|&b| b) {
                blocked.fill(false);
                progressed = false;
                continue;
            }
            smo.refresh_errors();
            converged = (0..n).all(|k| smo.violation_at(k, tol) <= tol);
            break;
        };
        // The chosen point's kernel row is about to be read n times (partner
        // search and error update), so memoize it up front.
        smo.ensure_row(i);
        // Second choice: the partner with the largest error gap, then a
        // deterministic sweep if that pair stalls.
        let mut second = 0;
        let mut best_gap = -1.0;
        for j in 0..n {
            if j == i {
                continue;
            }
            let gap = (smo.err[i] - smo.err[j]).abs();
            if gap > best_gap {
                best_gap = gap;
                second = j;
            }
        }
        let stepped = smo.take_step(i, second)
            || (0..n).any(|j| j != i && j != second && smo.take_step(i, j));
        if stepped {
            updates += 1;
            progressed = true;
        } else {
            blocked[i] = true;
        }
    }

    // Center the bias between the extreme residuals of the points that can
    // still move, splitting the remaining slack evenly between the two
    // sides. Pure relabeling of the separating offset; multipliers are
    // untouched.
    let eps = bound_eps(smo.c);
    let mut up_min = f64::INFINITY;
    let mut low_max = f64::NEG_INFINITY;
    for k in 0..n {
        let below_c = smo.alpha[k] < smo.c - eps;
        let above_zero = smo.alpha[k] > eps;
        if (smo.y[k] > 0.0 && below_c) || (smo.y[k] < 0.0 && above_zero) {
            up_min = up_min.min(smo.err[k]);
        }
        if (smo.y[k] < 0.0 && below_c) || (smo.y[k] > 0.0 && above_zero) {
            low_max = low_max.max(smo.err[k]);
        }
    }
    if up_min.is_finite() && low_max.is_finite() {
        smo.bias -= (up_min + low_max) / 2.0;
    }

    let mut model = SvmModel {
        support_vectors: Vec::new(),
        alphas: Vec::new(),
        labels: Vec::new(),
        sv_indices: Vec::new(),
        bias: smo.bias,
        kernel,
        c: cfg.c,
        converged,
    };
    for (idx, &a) in smo.alpha.iter().enumerate() {
        if a > 0.0 {
            model.support_vectors.push(rows[idx]);
            model.alphas.push(a);
            model.labels.push(labels[idx]);
            model.sv_indices.push(idx);
        }
    }
    Ok(model)
}
