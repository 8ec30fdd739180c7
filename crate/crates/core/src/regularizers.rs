//! Auxiliary routing losses: the load-balancing importance penalty and the
//! sample-similarity loss, both added to the task loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{CustomOp, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegKind {
    #[default]
    None,
    Importance,
    Similarity,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegConfig {
    pub kind: RegKind,
    pub w_importance: f64,
    pub beta_s: f64,
    pub beta_d: f64,
}

impl RegConfig {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn importance(w: f64) -> Self {
        RegConfig {
            kind: RegKind::Importance,
            w_importance: w,
            ..Self::default()
        }
    }

    pub fn similarity(beta_s: f64, beta_d: f64) -> Self {
        RegConfig {
            kind: RegKind::Similarity,
            beta_s,
            beta_d,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("w_importance", self.w_importance),
            ("beta_s", self.beta_s),
            ("beta_d", self.beta_d),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::contract(format!(
                    "{name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// The configured penalty for one batch, or `None` when no regularizer
    /// is active. `x` holds the batch inputs (leading axis = samples).
    pub fn apply(&self, g: &mut Graph, x: &Tensor, gate: Var) -> Result<Option<Var>> {
        match self.kind {
            RegKind::None => Ok(None),
            RegKind::Importance => importance_loss(g, gate, self.w_importance).map(Some),
            RegKind::Similarity => similarity_loss(g, x, gate, self.beta_s, self.beta_d).map(Some),
        }
    }
}

/// `task + reg`, or `task` unchanged when there is no penalty.
pub fn total_loss(g: &mut Graph, task: Var, reg: Option<Var>) -> Result<Var> {
    match reg {
        Some(r) => g.add(task, r),
        None => Ok(task),
    }
}

/// Importance statistics of an `N×M` gate matrix: column sums, their mean
/// and population standard deviation.
fn importance_stats(p: &Tensor) -> (Vec<f64>, f64, f64) {
    let m = p.shape()[1];
    let mut cols = vec![0.0; m];
    for row in p.rows() {
        for (c, v) in cols.iter_mut().zip(row) {
            *c += v;
        }
    }
    let mu = cols.iter().sum::<f64>() / m as f64;
    let var = cols.iter().map(|c| (c - mu) * (c - mu)).sum::<f64>() / m as f64;
    (cols, mu, var.sqrt())
}

struct Importance {
    w: f64,
}

impl CustomOp for Importance {
    fn name(&self) -> &'static str {
        "importance_loss"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let p = inputs[0];
        let (n, m) = (p.shape()[0], p.shape()[1]);
        let (cols, mu, sigma) = importance_stats(p);
        // σ has a kink at zero; the balanced point gets a zero subgradient.
        if sigma == 0.0 || mu == 0.0 {
            return vec![Some(vec![0.0; n * m])];
        }
        let mf = m as f64;
        let dcol: Vec<f64> = cols
            .iter()
            .map(|c| self.w * grad[0] * ((c - mu) / (mf * sigma * mu) - sigma / (mu * mu * mf)))
            .collect();
        let mut d = Vec::with_capacity(n * m);
        for _ in 0..n {
            d.extend_from_slice(&dcol);
        }
        vec![Some(d)]
    }
}

/// `w · σ(I) / μ(I)` where `I` are the column sums of the gate matrix and
/// σ is the population standard deviation.
pub fn importance_loss(g: &mut Graph, gate: Var, w: f64) -> Result<Var> {
    let (_, m) = g.value(gate).dims2("importance_loss")?;
    let (_, mu, sigma) = importance_stats(g.value(gate));
    let value = if m == 1 || sigma == 0.0 { 0.0 } else { w * sigma / mu };
    g.custom(&[gate], Tensor::scalar(value), Box::new(Importance { w }))
}

/// Squared Euclidean distances between all pairs of samples, computed
/// directly from differences so identical samples give exactly zero.
pub fn pairwise_sq_distances(x: &Tensor) -> Tensor {
    let n = x.shape()[0];
    let d = x.len() / n.max(1);
    let data = x.data();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        let xi = &data[i * d..(i + 1) * d];
        for j in i + 1..n {
            let xj = &data[j * d..(j + 1) * d];
            let v: f64 = xi.iter().zip(xj).map(|(a, b)| (a - b) * (a - b)).sum();
            out[i * n + j] = v;
            out[j * n + i] = v;
        }
    }
    Tensor::new(vec![n, n], out).expect("square distance matrix")
}

/// Coefficients of `p·p′` and `s·s′` in the per-pair penalty, where
/// `s = Σ_e p_e`: the cross-expert sum is `s s′ − p·p′`.
fn similarity_coefficients(m: usize, beta_s: f64, beta_d: f64) -> (f64, f64) {
    let mf = m as f64;
    let cross = if m > 1 { beta_d / (mf * mf - mf) } else { 0.0 };
    (beta_s / mf + cross, cross)
}

struct Similarity {
    dist: Tensor,
    a: f64,
    b: f64,
    scale: f64,
}

impl Similarity {
    /// `W = D·P` and `r = D·s` for the current gate matrix.
    fn weighted(&self, p: &Tensor) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (n, m) = (p.shape()[0], p.shape()[1]);
        let s: Vec<f64> = p.rows().map(|r| r.iter().sum()).collect();
        let mut w = vec![0.0; n * m];
        let mut r = vec![0.0; n];
        for i in 0..n {
            let di = self.dist.row(i);
            for j in 0..n {
                let dij = di[j];
                if dij == 0.0 {
                    continue;
                }
                for (wv, pv) in w[i * m..(i + 1) * m].iter_mut().zip(p.row(j)) {
                    *wv += dij * pv;
                }
                r[i] += dij * s[j];
            }
        }
        (w, r, s)
    }

    fn value(&self, p: &Tensor) -> f64 {
        let (w, r, s) = self.weighted(p);
        let pw: f64 = p.data().iter().zip(&w).map(|(a, b)| a * b).sum();
        let sr: f64 = s.iter().zip(&r).map(|(a, b)| a * b).sum();
        self.scale * (self.a * pw - self.b * sr)
    }
}

impl CustomOp for Similarity {
    fn name(&self) -> &'static str {
        "similarity_loss"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let p = inputs[0];
        let m = p.shape()[1];
        let (w, r, _) = self.weighted(p);
        let k = 2.0 * self.scale * grad[0];
        let d = w
            .iter()
            .enumerate()
            .map(|(idx, wv)| k * (self.a * wv - self.b * r[idx / m]))
            .collect();
        vec![Some(d)]
    }
}

/// Pairwise routing penalty over all ordered pairs of distinct samples:
/// pairs far apart in input space are penalized for sharing experts
/// (weight `beta_s`) and rewarded for using different ones (`beta_d`),
/// both scaled by their squared distance. Zero for batches of fewer than
/// two samples.
pub fn similarity_loss(g: &mut Graph, x: &Tensor, gate: Var, beta_s: f64, beta_d: f64) -> Result<Var> {
    let (n, m) = g.value(gate).dims2("similarity_loss")?;
    if x.shape().first() != Some(&n) {
        return Err(Error::shape("similarity_loss", x.shape(), &[n, m]));
    }
    let (a, b) = similarity_coefficients(m, beta_s, beta_d);
    let op = Similarity {
        dist: pairwise_sq_distances(x),
        a,
        b,
        scale: if n < 2 { 0.0 } else { 1.0 / (n * n - n) as f64 },
    };
    let value = op.value(g.value(gate));
    g.custom(&[gate], Tensor::scalar(value), Box::new(op))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, Rng};
    use proptest::prelude::*;

    fn random_gate(n: usize, m: usize, rng: &mut Rng) -> Tensor {
        let mut t = Tensor::zeros(&[n, m]);
        for r in 0..n {
            let raw: Vec<f64> = (0..m).map(|_| rng.uniform(0.0, 1.0)).collect();
            let s: f64 = raw.iter().sum();
            for (e, v) in raw.into_iter().enumerate() {
                t.data_mut()[r * m + e] = v / s;
            }
        }
        t
    }

    fn eval<F: FnOnce(&mut Graph, Var) -> Result<Var>>(p: &Tensor, f: F) -> f64 {
        let mut g = Graph::new();
        let v = g.constant(p.clone());
        let l = f(&mut g, v).unwrap();
        g.value(l).item()
    }

    /// Literal pair/expert/expert loop over the definition.
    fn oracle(x: &Tensor, p: &Tensor, beta_s: f64, beta_d: f64) -> f64 {
        let (n, m) = (p.shape()[0], p.shape()[1]);
        if n < 2 {
            return 0.0;
        }
        let d = x.len() / n;
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let mut dist = 0.0;
                for c in 0..d {
                    let diff = x.data()[i * d + c] - x.data()[j * d + c];
                    dist += diff * diff;
                }
                let mut same = 0.0;
                let mut cross = 0.0;
                for e in 0..m {
                    for e2 in 0..m {
                        let pp = p.at2(i, e) * p.at2(j, e2);
                        if e == e2 {
                            same += beta_s * pp * dist;
                        } else {
                            cross += beta_d * pp * dist;
                        }
                    }
                }
                let s = same / m as f64;
                let dterm = if m > 1 { cross / (m * m - m) as f64 } else { 0.0 };
                total += s - dterm;
            }
        }
        total / (n * n - n) as f64
    }

    #[test]
    fn importance_examples() {
        let balanced = Tensor::full(&[6, 3], 1.0 / 3.0);
        assert_eq!(eval(&balanced, |g, v| importance_loss(g, v, 1.0)), 0.0);

        let mut collapse = Tensor::zeros(&[10, 5]);
        for r in 0..10 {
            collapse.data_mut()[r * 5 + 2] = 1.0;
        }
        let w = 0.3;
        let l = eval(&collapse, |g, v| importance_loss(g, v, w));
        assert!((l - 2.0 * w).abs() < 1e-12);
        let l3 = eval(&collapse, |g, v| importance_loss(g, v, 3.0 * w));
        assert!((l3 - 3.0 * l).abs() < 1e-12);

        let single = Tensor::full(&[4, 1], 1.0);
        assert_eq!(eval(&single, |g, v| importance_loss(g, v, 5.0)), 0.0);
    }

    #[test]
    fn importance_gradient_matches_finite_differences() {
        let p = random_gate(7, 4, &mut Rng::new(3));
        let err = grad_check(&[p], 1e-6, |g, v| importance_loss(g, v[0], 0.7)).unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn similarity_trivial_cases() {
        let mut rng = Rng::new(1);
        let p = random_gate(2, 3, &mut rng);
        let row = Tensor::uniform(&[1, 9], 1.0, &mut rng);
        let x = Tensor::new(vec![2, 9], [row.data(), row.data()].concat()).unwrap();
        assert_eq!(eval(&p, |g, v| similarity_loss(g, &x, v, 2.0, 3.0)), 0.0);

        let x = Tensor::uniform(&[5, 9], 1.0, &mut rng);
        let p = random_gate(5, 3, &mut rng);
        assert_eq!(eval(&p, |g, v| similarity_loss(g, &x, v, 0.0, 0.0)), 0.0);

        let x1 = Tensor::uniform(&[1, 9], 1.0, &mut rng);
        let p1 = random_gate(1, 3, &mut rng);
        assert_eq!(eval(&p1, |g, v| similarity_loss(g, &x1, v, 1.0, 1.0)), 0.0);
    }

    #[test]
    fn similarity_matches_oracle_small_case() {
        let mut rng = Rng::new(77);
        let x = Tensor::uniform(&[3, 6], 1.0, &mut rng);
        let p = random_gate(3, 2, &mut rng);
        let v = eval(&p, |g, v| similarity_loss(g, &x, v, 0.8, 1.3));
        assert!((v - oracle(&x, &p, 0.8, 1.3)).abs() < 1e-12);
    }

    #[test]
    fn single_expert_has_no_cross_term() {
        let mut rng = Rng::new(4);
        let x = Tensor::uniform(&[4, 5], 1.0, &mut rng);
        let p = Tensor::full(&[4, 1], 1.0);
        let v = eval(&p, |g, v| similarity_loss(g, &x, v, 1.0, 100.0));
        let mean_dist = {
            let d = pairwise_sq_distances(&x);
            d.data().iter().sum::<f64>() / 12.0
        };
        assert!((v - mean_dist).abs() < 1e-12);
    }

    #[test]
    fn total_loss_plumbing() {
        let mut g = Graph::new();
        let t = g.leaf(Tensor::scalar(1.5), true);
        assert_eq!(total_loss(&mut g, t, None).unwrap(), t);
        let r = g.leaf(Tensor::scalar(0.25), true);
        let sum = total_loss(&mut g, t, Some(r)).unwrap();
        assert_eq!(g.value(sum).item(), 1.75);
        g.backward(sum).unwrap();
        assert_eq!(g.grad(t).unwrap(), &[1.0]);
        assert_eq!(g.grad(r).unwrap(), &[1.0]);
    }

    #[test]
    fn config_validation_and_serde() {
        assert!(RegConfig::importance(-1.0).validate().is_err());
        assert!(RegConfig::similarity(f64::NAN, 0.0).validate().is_err());
        assert!(RegConfig::similarity(0.1, 0.2).validate().is_ok());
        let c: RegConfig = serde_json::from_str(r#"{"kind":"similarity","beta_s":0.5}"#).unwrap();
        assert_eq!(c, RegConfig::similarity(0.5, 0.0));
    }

    proptest! {
        #[test]
        fn similarity_matches_oracle(seed in 0u64..10_000, n in 1usize..=8, m in 1usize..=4,
                                     bs in 0.0f64..2.0, bd in 0.0f64..2.0) {
            let mut rng = Rng::new(seed);
            let x = Tensor::uniform(&[n, 7], 1.0, &mut rng);
            let p = random_gate(n, m, &mut rng);
            let v = eval(&p, |g, v| similarity_loss(g, &x, v, bs, bd));
            prop_assert!((v - oracle(&x, &p, bs, bd)).abs() < 1e-12);
        }

        #[test]
        fn similarity_is_invariant_to_sample_order(seed in 0u64..10_000, n in 2usize..=8, m in 1usize..=4) {
            let mut rng = Rng::new(seed);
            let x = Tensor::uniform(&[n, 5], 1.0, &mut rng);
            let p = random_gate(n, m, &mut rng);
            let perm = rng.permutation(n);
            let xp = x.gather_rows(&perm);
            let pp = p.gather_rows(&perm);
            let a = eval(&p, |g, v| similarity_loss(g, &x, v, 0.7, 0.4));
            let b = eval(&pp, |g, v| similarity_loss(g, &xp, v, 0.7, 0.4));
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn similarity_gradient_matches_finite_differences(seed in 0u64..10_000, n in 2usize..=6, m in 1usize..=4) {
            let mut rng = Rng::new(seed);
            let x = Tensor::uniform(&[n, 5], 1.0, &mut rng);
            let p = random_gate(n, m, &mut rng);
            let err = grad_check(&[p], 1e-6, |g, v| similarity_loss(g, &x, v[0], 0.9, 0.6)).unwrap();
            prop_assert!(err < 1e-5, "relative error {}", err);
        }

        #[test]
        fn importance_is_nonnegative(seed in 0u64..10_000, n in 1usize..20, m in 1usize..6) {
            let p = random_gate(n, m, &mut Rng::new(seed));
            prop_assert!(eval(&p, |g, v| importance_loss(g, v, 1.0)) >= 0.0);
        }
    }
}
