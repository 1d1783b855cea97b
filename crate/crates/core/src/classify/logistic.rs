//! Class-weighted logistic regression.
//!
//! The fit runs projected Newton with Armijo backtracking on internally
//! standardized features, so that the parameter box `|θ| ≤ 30` means the same
//! thing for every feature scale. The returned model is mapped back to raw
//! feature space.

use super::{ClassifyError, Result};

/// Box on standardized-space parameters. Keeps separable fits finite.
pub const WEIGHT_CLAMP: f64 = 30.0;
pub const MAX_ITERS: usize = 1000;
pub const GRAD_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub weights: Vec<f64>,
    pub intercept: f64,
}

impl LinearModel {
    pub fn score(&self, x: &[f64]) -> f64 {
        self.intercept + self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
    }

    pub fn predict_proba(&self, x: &[f64]) -> f64 {
        sigmoid(self.score(x))
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Per-row weights `N / (2·N_c)`; both classes must be present.
pub fn balanced_weights(labels: &[bool]) -> Result<Vec<f64>> {
    let n = labels.len() as f64;
    let pos = labels.iter().filter(|&&y| y).count() as f64;
    let neg = n - pos;
    if pos == 0.0 || neg == 0.0 {
        return Err(ClassifyError::SingleClass);
    }
    Ok(labels
        .iter()
        .map(|&y| if y { n / (2.0 * pos) } else { n / (2.0 * neg) })
        .collect())
}

/// Mean weighted negative log-likelihood over `params = [w_1..w_d, b]`.
pub struct LogisticObjective<'a> {
    x: &'a [Vec<f64>],
    y: &'a [bool],
    w: &'a [f64],
}

impl<'a> LogisticObjective<'a> {
    pub fn new(x: &'a [Vec<f64>], y: &'a [bool], w: &'a [f64]) -> Self {
        Self { x, y, w }
    }

    fn z(&self, row: &[f64], params: &[f64]) -> f64 {
        let d = params.len() - 1;
        params[d] + row.iter().zip(&params[..d]).map(|(a, b)| a * b).sum::<f64>()
    }

    pub fn loss(&self, params: &[f64]) -> f64 {
        let n = self.x.len() as f64;
        self.x
            .iter()
            .zip(self.y)
            .zip(self.w)
            .map(|((row, &y), &w)| {
                let z = self.z(row, params);
                w * (softplus(z) - if y { z } else { 0.0 })
            })
            .sum::<f64>()
            / n
    }

    pub fn gradient(&self, params: &[f64]) -> Vec<f64> {
        let d = params.len() - 1;
        let n = self.x.len() as f64;
        let mut g = vec![0.0; d + 1];
        for ((row, &y), &w) in self.x.iter().zip(self.y).zip(self.w) {
            let r = w * (sigmoid(self.z(row, params)) - if y { 1.0 } else { 0.0 }) / n;
            for (gk, v) in g.iter_mut().zip(row) {
                *gk += r * v;
            }
            g[d] += r;
        }
        g
    }

    pub fn hessian(&self, params: &[f64]) -> Vec<Vec<f64>> {
        let k = params.len();
        let n = self.x.len() as f64;
        let mut h = vec![vec![0.0; k]; k];
        let mut ext = vec![1.0; k];
        for (row, &w) in self.x.iter().zip(self.w) {
            let s = sigmoid(self.z(row, params));
            let c = w * s * (1.0 - s) / n;
            ext[..k - 1].copy_from_slice(row);
            for a in 0..k {
                for b in 0..k {
                    h[a][b] += c * ext[a] * ext[b];
                }
            }
        }
        h
    }
}

/// Optimizer diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct FitTrace {
    pub losses: Vec<f64>,
    pub projected_grad_norm: f64,
    pub iterations: usize,
}

/// Gradient with components zeroed where the box blocks descent.
fn projected_gradient(params: &[f64], g: &[f64], bound: f64) -> Vec<f64> {
    params
        .iter()
        .zip(g)
        .map(|(&p, &gk)| {
            if (p >= bound && gk < 0.0) || (p <= -bound && gk > 0.0) {
                0.0
            } else {
                gk
            }
        })
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Solve `a x = b` by Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        let (top, rest) = a.split_at_mut(col + 1);
        let pivot = &top[col];
        for (i, row) in rest.iter_mut().enumerate() {
            let f = row[col] / pivot[col];
            for (x, p) in row[col..].iter_mut().zip(&pivot[col..]) {
                *x -= f * p;
            }
            b[col + 1 + i] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| a[i][k] * x[k]).sum();
        x[i] = (b[i] - s) / a[i][i];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Minimize `obj` over the box `|θ_k| ≤ bound`, starting from zero.
pub fn minimize_boxed(obj: &LogisticObjective, dim: usize, bound: f64) -> (Vec<f64>, FitTrace) {
    let mut theta = vec![0.0; dim];
    let mut loss = obj.loss(&theta);
    let mut losses = vec![loss];
    let mut iterations = 0;
    let clip = |v: f64| v.clamp(-bound, bound);

    for _ in 0..MAX_ITERS {
        let g = obj.gradient(&theta);
        let pg = projected_gradient(&theta, &g, bound);
        if norm(&pg) <= GRAD_TOL {
            break;
        }
        iterations += 1;

        // Newton direction on the free variables; blocked ones stay put.
        let free: Vec<usize> = (0..dim).filter(|&k| pg[k] != 0.0).collect();
        let h = obj.hessian(&theta);
        let hf: Vec<Vec<f64>> = free.iter().map(|&a| free.iter().map(|&b| h[a][b]).collect()).collect();
        let gf: Vec<f64> = free.iter().map(|&k| g[k]).collect();
        let mut dir = vec![0.0; dim];
        match solve(hf, gf) {
            Some(step) if step.iter().zip(&free).map(|(s, &k)| s * g[k]).sum::<f64>() > 0.0 => {
                for (s, &k) in step.iter().zip(&free) {
                    dir[k] = -s;
                }
            }
            _ => {
                for &k in &free {
                    dir[k] = -g[k];
                }
            }
        }

        let mut accepted = None;
        for newton in [true, false] {
            if !newton {
                dir = pg.iter().map(|v| -v).collect();
            }
            let mut alpha = 1.0;
            while alpha > 1e-20 {
                let cand: Vec<f64> = theta.iter().zip(&dir).map(|(t, d)| clip(t + alpha * d)).collect();
                let decrease: f64 = g.iter().zip(cand.iter().zip(&theta)).map(|(gk, (c, t))| gk * (c - t)).sum();
                let l = obj.loss(&cand);
                if l <= loss + 1e-4 * decrease && l <= loss {
                    accepted = Some((cand, l));
                    break;
                }
                alpha *= 0.5;
            }
            if accepted.is_some() {
                break;
            }
        }
        let Some((cand, l)) = accepted else {
            break;
        };
        let moved = cand.iter().zip(&theta).any(|(a, b)| a != b);
        theta = cand;
        loss = l;
        losses.push(loss);
        if !moved {
            break;
        }
    }
    let pg = projected_gradient(&theta, &obj.gradient(&theta), bound);
    let trace = FitTrace { losses, projected_grad_norm: norm(&pg), iterations };
    (theta, trace)
}

/// Column means and standard deviations; zero deviations become 1.
pub(crate) fn column_scales(x: &[Vec<f64>], d: usize) -> (Vec<f64>, Vec<f64>) {
    let n = x.len().max(1) as f64;
    let mut mu = vec![0.0; d];
    for row in x {
        for (m, v) in mu.iter_mut().zip(row) {
            *m += v / n;
        }
    }
    let mut sd = vec![0.0; d];
    for row in x {
        for ((s, v), m) in sd.iter_mut().zip(row).zip(&mu) {
            *s += (v - m).powi(2) / n;
        }
    }
    for s in sd.iter_mut() {
        *s = if *s > 0.0 { s.sqrt() } else { 1.0 };
    }
    (mu, sd)
}

pub fn fit_logistic(x: &[Vec<f64>], y: &[bool]) -> Result<LinearModel> {
    fit_logistic_traced(x, y).map(|(m, _)| m)
}

pub fn fit_logistic_traced(x: &[Vec<f64>], y: &[bool]) -> Result<(LinearModel, FitTrace)> {
    if x.len() != y.len() {
        return Err(ClassifyError::Shape(format!("{} rows but {} labels", x.len(), y.len())));
    }
    let w = balanced_weights(y)?;
    let d = x[0].len();
    if x.iter().any(|r| r.len() != d || r.iter().any(|v| !v.is_finite())) {
        return Err(ClassifyError::Shape("ragged or non-finite feature rows".into()));
    }
    let (mu, sd) = column_scales(x, d);
    let xs: Vec<Vec<f64>> = x
        .iter()
        .map(|r| r.iter().zip(mu.iter().zip(&sd)).map(|(v, (m, s))| (v - m) / s).collect())
        .collect();
    let obj = LogisticObjective::new(&xs, y, &w);
    let (theta, trace) = minimize_boxed(&obj, d + 1, WEIGHT_CLAMP);

    let weights: Vec<f64> = theta[..d].iter().zip(&sd).map(|(t, s)| t / s).collect();
    let intercept = theta[d] - theta[..d].iter().zip(mu.iter().zip(&sd)).map(|(t, (m, s))| t * m / s).sum::<f64>();
    Ok((LinearModel { weights, intercept }, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noisy_data(seed: u64, n: usize) -> (Vec<Vec<f64>>, Vec<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for _ in 0..n {
            let a: f64 = rng.random_range(-3.0..3.0);
            let b: f64 = rng.random_range(0.0..10.0);
            let p = sigmoid(1.3 * a - 0.2 * b + 0.5);
            x.push(vec![a, b]);
            y.push(rng.random::<f64>() < p);
        }
        (x, y)
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(800.0) == 1.0 && sigmoid(-800.0) == 0.0);
        assert!((softplus(-800.0)).abs() < 1e-300);
        assert_eq!(softplus(800.0), 800.0);
    }

    #[test]
    fn zero_weights_predict_half() {
        let m = LinearModel { weights: vec![0.0, 0.0], intercept: 0.0 };
        assert_eq!(m.predict_proba(&[3.0, -7.0]), 0.5);
    }

    #[test]
    fn single_class_is_rejected() {
        let x = vec![vec![1.0], vec![2.0]];
        assert!(matches!(fit_logistic(&x, &[true, true]), Err(ClassifyError::SingleClass)));
    }

    #[test]
    fn balanced_weights_values() {
        let w = balanced_weights(&[true, false, false, false]).unwrap();
        assert_eq!(w, vec![2.0, 2.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0]);
    }

    #[test]
    fn separable_data_fits_perfectly() {
        let x: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64]).collect();
        let y: Vec<bool> = (0..20).map(|i| i >= 10).collect();
        let (m, trace) = fit_logistic_traced(&x, &y).unwrap();
        let acc = x.iter().zip(&y).filter(|(r, &l)| (m.predict_proba(r) >= 0.5) == l).count();
        assert_eq!(acc, 20);
        assert!(m.weights[0].is_finite() && m.weights[0] > 0.0);
        assert!(trace.projected_grad_norm <= 1e-6);
    }

    #[test]
    fn symmetric_data_gives_zero_weight() {
        let x: Vec<Vec<f64>> = [-2.0, -1.0, 1.0, 2.0, -2.0, -1.0, 1.0, 2.0].iter().map(|&v| vec![v]).collect();
        let y = vec![true, true, true, true, false, false, false, false];
        let (m, trace) = fit_logistic_traced(&x, &y).unwrap();
        assert!(m.weights[0].abs() < 1e-6);
        assert!(m.intercept.abs() < 1e-6);
        assert!(trace.projected_grad_norm <= 1e-6);
    }

    #[test]
    fn loss_decreases_monotonically() {
        let (x, y) = noisy_data(3, 300);
        let (_, trace) = fit_logistic_traced(&x, &y).unwrap();
        assert!(trace.losses.windows(2).all(|w| w[1] <= w[0]));
        assert!(trace.projected_grad_norm <= 1e-6);
        assert!(trace.iterations < MAX_ITERS);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (x, y) = noisy_data(11, 80);
        let w = balanced_weights(&y).unwrap();
        let obj = LogisticObjective::new(&x, &y, &w);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let p: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let g = obj.gradient(&p);
            for k in 0..3 {
                let h = 1e-5;
                let mut a = p.clone();
                let mut b = p.clone();
                a[k] += h;
                b[k] -= h;
                let fd = (obj.loss(&a) - obj.loss(&b)) / (2.0 * h);
                let rel = (fd - g[k]).abs() / g[k].abs().max(1e-8);
                assert!(rel <= 1e-6, "k={k} fd={fd} g={}", g[k]);
            }
        }
    }

    #[test]
    fn duplication_matches_balanced_weighting() {
        // Minority class is the positive one; replicate it until classes match.
        let (x, y) = noisy_data(21, 200);
        let pos = y.iter().filter(|&&v| v).count();
        let neg = y.len() - pos;
        let (minor, k) = if pos < neg { (true, neg / pos) } else { (false, pos / neg) };
        // Trim the majority so the replication factor is exact.
        let minority = y.iter().filter(|&&v| v == minor).count();
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        let mut kept_major = 0;
        for (r, &l) in x.iter().zip(&y) {
            if l != minor {
                if kept_major == minority * k {
                    continue;
                }
                kept_major += 1;
            }
            xs.push(r.clone());
            ys.push(l);
        }
        let base = fit_logistic(&xs, &ys).unwrap();
        let mut xd = Vec::new();
        let mut yd = Vec::new();
        for (r, &l) in xs.iter().zip(&ys) {
            let reps = if l == minor { k } else { 1 };
            for _ in 0..reps {
                xd.push(r.clone());
                yd.push(l);
            }
        }
        let dup = fit_logistic(&xd, &yd).unwrap();
        for (a, b) in base.weights.iter().zip(&dup.weights) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        assert!((base.intercept - dup.intercept).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn predictions_are_probabilities(w in -50.0f64..50.0, b in -50.0f64..50.0, v in -1e3f64..1e3) {
            let m = LinearModel { weights: vec![w], intercept: b };
            let p = m.predict_proba(&[v]);
            prop_assert!((0.0..=1.0).contains(&p));
        }

        #[test]
        fn monotone_in_positive_weight(w in 0.01f64..10.0, b in -5.0f64..5.0, a in -5.0f64..5.0, d in 0.001f64..5.0) {
            let m = LinearModel { weights: vec![w], intercept: b };
            prop_assert!(m.predict_proba(&[a + d]) >= m.predict_proba(&[a]));
        }
    }
}
