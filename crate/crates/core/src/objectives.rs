//! Contrastive, regression and classification losses, uncertainty weighting
//! and the joint objective, all built on the autodiff tape.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Graph, ParamStore, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(default, deny_unknown_fields))]
pub struct NtXentConfig {
    pub temperature: f64,
}

impl Default for NtXentConfig {
    fn default() -> Self {
        Self { temperature: 0.2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(default, deny_unknown_fields))]
pub struct ObjectiveWeights {
    pub lambda_ssl: f64,
    pub lambda_sl: f64,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        Self { lambda_ssl: 10.0, lambda_sl: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(default, deny_unknown_fields))]
pub struct ObjectivesConfig {
    pub nt_xent: NtXentConfig,
    pub huber_delta: f64,
    pub weights: ObjectiveWeights,
    /// Initial regression log-variances `s_k`.
    pub init_s: f64,
    /// Initial classification log-variances `r_m`.
    pub init_r: f64,
}

impl Default for ObjectivesConfig {
    fn default() -> Self {
        Self {
            nt_xent: NtXentConfig::default(),
            huber_delta: 1.0,
            weights: ObjectiveWeights::default(),
            init_s: 0.0,
            init_r: 0.0,
        }
    }
}

impl ObjectivesConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.nt_xent.temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be > 0, got {}", self.nt_xent.temperature)));
        }
        if !(self.huber_delta > 0.0) {
            return Err(Error::Config(format!("huber_delta must be > 0, got {}", self.huber_delta)));
        }
        if !(self.weights.lambda_ssl >= 0.0 && self.weights.lambda_sl >= 0.0) {
            return Err(Error::Config("objective weights must be >= 0".into()));
        }
        if !self.init_s.is_finite() || !self.init_r.is_finite() {
            return Err(Error::Config("uncertainty initial values must be finite".into()));
        }
        Ok(())
    }

    /// Sets `uncertainty.s` / `uncertainty.r` to their configured start values.
    pub fn init_uncertainty(&self, store: &mut ParamStore) -> Result<()> {
        store.tensor_mut("uncertainty.s")?.data_mut().fill(self.init_s);
        store.tensor_mut("uncertainty.r")?.data_mut().fill(self.init_r);
        Ok(())
    }
}

/// Normalizes rows of raw projections and applies NT-Xent with positives at
/// `k ^ 1`.
pub fn nt_xent(g: &mut Graph, z: Var, cfg: &NtXentConfig) -> Result<Var> {
    let zn = g.l2_normalize(z)?;
    g.nt_xent(zn, cfg.temperature)
}

/// Per-target masked Huber loss on `(batch, targets)` predictions.
pub fn masked_huber(g: &mut Graph, pred: Var, target: Vec<f64>, mask: Vec<bool>, delta: f64) -> Result<Var> {
    g.masked_huber(pred, target, mask, delta)
}

/// Per-target masked binary cross entropy on `(batch, targets)` logits.
pub fn bce(g: &mut Graph, logits: Var, labels: Vec<f64>, mask: Vec<bool>) -> Result<Var> {
    let cols = g.shape(logits).get(1).copied().unwrap_or(0);
    g.bce_with_logits(logits, labels, mask, vec![1.0; cols])
}

/// `Σ_k (e^{-s_k} l_reg_k + s_k) + Σ_m (e^{-r_m} l_cls_m + r_m)`.
pub fn weighted_supervised(g: &mut Graph, l_reg: Var, l_cls: Var, s: Var, r: Var) -> Result<Var> {
    let a = uncertainty_term(g, l_reg, s)?;
    let b = uncertainty_term(g, l_cls, r)?;
    g.add(a, b)
}

fn uncertainty_term(g: &mut Graph, l: Var, s: Var) -> Result<Var> {
    let ns = g.neg(s);
    let w = g.exp(ns);
    let wl = g.mul(w, l)?;
    let t = g.add(wl, s)?;
    Ok(g.sum(t))
}

pub fn total_objective(g: &mut Graph, l_ssl: Var, l_sl: Var, w: &ObjectiveWeights) -> Result<Var> {
    let a = g.scale(l_ssl, w.lambda_ssl);
    let b = g.scale(l_sl, w.lambda_sl);
    g.add(a, b)
}

/// Per-term values of one objective evaluation.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossBreakdown {
    pub l_ssl: f64,
    pub l_reg: Vec<f64>,
    pub l_cls: Vec<f64>,
    pub l_sl: f64,
    pub total: f64,
    pub s: Vec<f64>,
    pub r: Vec<f64>,
    pub retrieval_acc: f64,
    pub mean_pos_cos: f64,
    pub mean_neg_cos: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, GradCheckConfig, Tensor};
    use crate::math;
    use proptest::prelude::*;

    fn ntx(rows: &[&[f64]], tau: f64) -> Result<f64> {
        let mut g = Graph::new();
        let d = rows[0].len();
        let z = g.constant(vec![rows.len(), d], rows.iter().flat_map(|r| r.iter().copied()).collect())?;
        let l = nt_xent(&mut g, z, &NtXentConfig { temperature: tau })?;
        g.scalar(l)
    }

    /// Direct scalar evaluation of the formula.
    fn ntx_oracle(rows: &[Vec<f64>], tau: f64) -> f64 {
        let n = rows.len();
        let unit: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| {
                let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                r.iter().map(|v| v / norm).collect()
            })
            .collect();
        let sim = |a: usize, b: usize| unit[a].iter().zip(&unit[b]).map(|(x, y)| x * y).sum::<f64>() / tau;
        let mut total = 0.0;
        for k in 0..n {
            let denom: f64 = (0..n).filter(|&l| l != k).map(|l| sim(k, l).exp()).sum();
            total -= (sim(k, k ^ 1).exp() / denom).ln();
        }
        total / n as f64
    }

    #[test]
    fn nt_xent_unit_values() {
        assert_eq!(ntx(&[&[1.0, 2.0], &[-3.0, 0.5]], 0.2).unwrap(), 0.0);
        let same = [1.0, -2.0, 0.5];
        assert!((ntx(&[&same, &same, &same, &same], 0.2).unwrap() - 3f64.ln()).abs() < 1e-9);
        let (a, b) = ([1.0, 0.0], [0.0, 1.0]);
        let want = (1.0 + 2.0 * (-5f64).exp()).ln();
        assert!((ntx(&[&a, &a, &b, &b], 0.2).unwrap() - want).abs() < 1e-9);
        assert!((want - 0.013386).abs() < 1e-6);
    }

    #[test]
    fn nt_xent_errors() {
        assert!(matches!(ntx(&[&[1.0], &[1.0], &[1.0]], 0.2), Err(Error::Contract(_))));
        assert!(matches!(ntx(&[&[1.0, 0.0], &[0.0, 0.0]], 0.2), Err(Error::DegenerateEmbedding { row: 1 })));
    }

    #[test]
    fn huber_values() {
        let mut g = Graph::new();
        let p = g.input(vec![2, 2], vec![2.0, 0.5, 1.0, 7.0]).unwrap();
        let l = masked_huber(&mut g, p, vec![0.0, 0.0, 1.0, 0.0], vec![true, true, true, false], 1.0).unwrap();
        assert_eq!(g.value(l), &[0.75, 0.125]);
        let mut g = Graph::new();
        let p = g.input(vec![1, 1], vec![2.0]).unwrap();
        let l = masked_huber(&mut g, p, vec![0.0], vec![true], 1.0).unwrap();
        assert_eq!(g.value(l), &[1.5]);

        let mut g = Graph::new();
        let p = g.input(vec![2, 2], vec![3.0, -1.0, 4.0, 2.0]).unwrap();
        let l = masked_huber(&mut g, p, vec![0.0; 4], vec![false, true, false, true], 1.0).unwrap();
        let s = g.sum(l);
        let grads = g.backward(s).unwrap();
        let gp = grads.get(p).unwrap();
        assert_eq!((gp[0], gp[2]), (0.0, 0.0));
        let mut g = Graph::new();
        let p = g.input(vec![2, 1], vec![3.0, -1.0]).unwrap();
        let l = masked_huber(&mut g, p, vec![0.0; 2], vec![false; 2], 1.0).unwrap();
        assert_eq!(g.value(l), &[0.0]);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(p).unwrap().iter().all(|&v| v == 0.0));

        let mut g = Graph::new();
        let p = g.input(vec![1, 1], vec![0.0]).unwrap();
        assert!(matches!(masked_huber(&mut g, p, vec![f64::NAN], vec![true], 1.0), Err(Error::Validation(_))));
    }

    #[test]
    fn bce_values() {
        let mut g = Graph::new();
        let x = g.input(vec![2, 1], vec![0.0, 0.0]).unwrap();
        let l = bce(&mut g, x, vec![1.0, 0.0], vec![true, true]).unwrap();
        assert!((g.value(l)[0] - 2f64.ln()).abs() < 1e-15);
        let logit = (0.9f64 / 0.1).ln();
        let x = g.input(vec![1, 1], vec![logit]).unwrap();
        let l = bce(&mut g, x, vec![0.0], vec![true]).unwrap();
        assert!((g.value(l)[0] - 10f64.ln()).abs() < 1e-12);
        let x = g.input(vec![1, 1], vec![800.0]).unwrap();
        let l = bce(&mut g, x, vec![1.0], vec![true]).unwrap();
        assert_eq!(g.value(l)[0], 0.0);
    }

    fn sup(l_reg: &[f64], l_cls: &[f64], s: &[f64], r: &[f64]) -> f64 {
        let mut g = Graph::new();
        let lr = g.constant(vec![l_reg.len()], l_reg.to_vec()).unwrap();
        let lc = g.constant(vec![l_cls.len()], l_cls.to_vec()).unwrap();
        let sv = g.input(vec![s.len()], s.to_vec()).unwrap();
        let rv = g.input(vec![r.len()], r.to_vec()).unwrap();
        let out = weighted_supervised(&mut g, lr, lc, sv, rv).unwrap();
        g.scalar(out).unwrap()
    }

    #[test]
    fn weighted_supervised_values() {
        let (lr, lc) = ([0.3, 1.7, 0.01, 2.5], [0.69, 0.2]);
        assert!((sup(&lr, &lc, &[0.0; 4], &[0.0; 2]) - (lr.iter().sum::<f64>() + lc.iter().sum::<f64>())).abs() < 1e-12);
        let v = sup(&[1.0], &[0.0], &[2f64.ln()], &[0.0]);
        assert!((v - (0.5 + 2f64.ln())).abs() < 1e-12);
        assert!((v - 1.1931).abs() < 1e-4);
    }

    #[test]
    fn uncertainty_gradient_identity() {
        let l_reg = [0.4, 1.3, 2.2, 0.05];
        let s0 = [0.1, -0.3, 0.8, 2f64.ln()];
        let mut store = ParamStore::new();
        store.insert("s", Tensor::new(vec![4], s0.to_vec()).unwrap(), true);
        store.insert("r", Tensor::zeros(vec![2]), true);
        let mut g = Graph::new();
        let s = g.param(&store, "s").unwrap();
        let r = g.param(&store, "r").unwrap();
        let lr = g.constant(vec![4], l_reg.to_vec()).unwrap();
        let lc = g.constant(vec![2], vec![0.5, 0.5]).unwrap();
        let out = weighted_supervised(&mut g, lr, lc, s, r).unwrap();
        let grads = g.backward(out).unwrap();
        for k in 0..4 {
            let analytic = 1.0 - (-s0[k]).exp() * l_reg[k];
            assert!((grads.get(s).unwrap()[k] - analytic).abs() < 1e-12);
            let h = 1e-5;
            let mut sp = s0;
            sp[k] += h;
            let mut sm = s0;
            sm[k] -= h;
            let fd = (sup(&l_reg, &[0.5, 0.5], &sp, &[0.0; 2]) - sup(&l_reg, &[0.5, 0.5], &sm, &[0.0; 2])) / (2.0 * h);
            assert!((fd - analytic).abs() < 1e-6);
        }
        let stationary = sup(&[1.3], &[0.0], &[1.3f64.ln() + 1e-6], &[0.0]) - sup(&[1.3], &[0.0], &[1.3f64.ln() - 1e-6], &[0.0]);
        assert!(stationary.abs() < 1e-10);
        let report = grad_check(&mut store, GradCheckConfig::default(), |g, st| {
            let s = g.param(st, "s")?;
            let r = g.param(st, "r")?;
            let lr = g.constant(vec![4], l_reg.to_vec())?;
            let lc = g.constant(vec![2], vec![0.5, 0.9])?;
            weighted_supervised(g, lr, lc, s, r)
        })
        .unwrap();
        assert!(report.passed);
    }

    #[test]
    fn total_objective_values() {
        let mut g = Graph::new();
        let a = g.constant(vec![1], vec![0.1]).unwrap();
        let b = g.constant(vec![1], vec![1.0]).unwrap();
        let t = total_objective(&mut g, a, b, &ObjectiveWeights::default()).unwrap();
        assert_eq!(g.scalar(t).unwrap(), 10.0 * 0.1 + 0.2 * 1.0);
        let zero = g.constant(vec![1], vec![0.0]).unwrap();
        let t = total_objective(&mut g, zero, zero, &ObjectiveWeights::default()).unwrap();
        assert_eq!(g.scalar(t).unwrap(), 0.0);
        let t = total_objective(&mut g, a, b, &ObjectiveWeights { lambda_ssl: 10.0, lambda_sl: 0.0 }).unwrap();
        assert_eq!(g.scalar(t).unwrap(), 10.0 * 0.1);
    }

    fn rows_strategy() -> impl Strategy<Value = Vec<Vec<f64>>> {
        (1usize..5, 2usize..6).prop_flat_map(|(pairs, d)| {
            prop::collection::vec(prop::collection::vec(-2.0f64..2.0, d), 2 * pairs)
                .prop_filter("nonzero rows", |rows| rows.iter().all(|r| r.iter().map(|v| v * v).sum::<f64>() > 1e-3))
        })
    }

    fn ntx_vec(rows: &[Vec<f64>], tau: f64) -> f64 {
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        ntx(&refs, tau).unwrap()
    }

    proptest! {
        #[test]
        fn nt_xent_matches_oracle(rows in rows_strategy(), tau in 0.05f64..2.0) {
            let got = ntx_vec(&rows, tau);
            let want = ntx_oracle(&rows, tau);
            prop_assert!((got - want).abs() < 1e-9 * want.abs().max(1.0), "{got} vs {want}");
            prop_assert!(got >= -1e-12);
        }

        #[test]
        fn nt_xent_row_scale_invariant(rows in rows_strategy(), k in 0usize..8, c in 0.01f64..100.0) {
            let mut scaled = rows.clone();
            let k = k % rows.len();
            scaled[k].iter_mut().for_each(|v| *v *= c);
            prop_assert!((ntx_vec(&rows, 0.2) - ntx_vec(&scaled, 0.2)).abs() < 1e-9);
        }

        #[test]
        fn nt_xent_pair_permutation_invariant(rows in rows_strategy(), seed in any::<u64>()) {
            let pairs = rows.len() / 2;
            let a = (seed % pairs as u64) as usize;
            let b = ((seed >> 20) % pairs as u64) as usize;
            let mut p = rows.clone();
            p.swap(2 * a, 2 * b);
            p.swap(2 * a + 1, 2 * b + 1);
            prop_assert!((ntx_vec(&rows, 0.2) - ntx_vec(&p, 0.2)).abs() < 1e-9);
        }

        #[test]
        fn nt_xent_increases_with_negative_cosine(c1 in -0.9f64..0.85, dc in 0.01f64..0.1) {
            // Rows 0/1 positives; row 2's cosine to row 0 is varied, all else fixed.
            let at = |c: f64| {
                let s = (1.0 - c * c).sqrt();
                vec![vec![1.0, 0.0, 0.0], vec![1.0, 0.0, 0.0], vec![c, s, 0.0], vec![0.0, 0.0, 1.0]]
            };
            let (lo, hi) = (ntx_oracle(&at(c1), 0.2), ntx_oracle(&at(c1 + dc), 0.2));
            prop_assert!(ntx_vec(&at(c1 + dc), 0.2) > ntx_vec(&at(c1), 0.2));
            prop_assert!(hi > lo);
        }

        #[test]
        fn bce_masked_rows_get_zero_gradient(
            logits in prop::collection::vec(-5.0f64..5.0, 6),
            bits in prop::collection::vec(any::<bool>(), 6),
        ) {
            let mut g = Graph::new();
            let x = g.input(vec![3, 2], logits).unwrap();
            let labels = bits.iter().map(|&b| b as u8 as f64).collect();
            let mask: Vec<bool> = (0..6).map(|i| i % 4 != 1).collect();
            let l = bce(&mut g, x, labels, mask.clone()).unwrap();
            let s = g.sum(l);
            let grads = g.backward(s).unwrap();
            for (i, &m) in mask.iter().enumerate() {
                if !m {
                    prop_assert_eq!(grads.get(x).unwrap()[i], 0.0);
                }
            }
            prop_assert!(g.value(l).iter().all(|&v| v >= 0.0 && v.is_finite()));
            prop_assert!(math::abs(g.value(l)[0]) < 10.0);
        }
    }
}
