//! Central-difference gradient checking.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use super::graph::{Graph, Var};
use super::tensor::{ParamStore, Tensor};
use crate::math;
use crate::rng::{normal, rng_from};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    pub threshold: f64,
    /// Upper bound on the number of scalar entries probed.
    pub max_samples: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { step: 1e-5, threshold: 1e-4, max_samples: 2000, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Entries skipped because a perturbation moved a relu input across its kink.
    pub excluded: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub threshold: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn checked(&self) -> usize {
        self.params.iter().map(|p| p.checked).sum()
    }
}

/// `|a − n| / max(1, |a|, |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    math::abs(analytic - numeric) / 1f64.max(math::abs(analytic)).max(math::abs(numeric))
}

/// Compares analytic gradients of the scalar built by `forward` against
/// central differences over trainable entries of `store`.
///
/// `forward` must be deterministic (batchnorm in a fixed mode). Entries
/// whose ±h perturbation changes any relu's active set are excluded rather
/// than scored; this covers relu inputs sitting exactly at 0.
pub fn grad_check<F>(store: &mut ParamStore, cfg: GradCheckConfig, mut forward: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = forward(&mut g, store)?;
    let grads = g.backward(loss)?;
    let (base_sig, _) = g.relu_signature();

    let mut analytic: Vec<(String, Vec<f64>)> = Vec::new();
    for (name, v) in g.bound_params() {
        if let Some(gr) = grads.get(v) {
            analytic.push((String::from(name), gr.to_vec()));
        }
    }

    let mut entries: Vec<(usize, usize)> = analytic
        .iter()
        .enumerate()
        .flat_map(|(p, (_, gr))| (0..gr.len()).map(move |i| (p, i)))
        .collect();
    if entries.len() > cfg.max_samples {
        entries.shuffle(&mut rng_from(&[cfg.seed, 0x6772_6164]));
        entries.truncate(cfg.max_samples);
        entries.sort_unstable();
    }

    let mut params: Vec<ParamCheck> = analytic
        .iter()
        .map(|(name, _)| ParamCheck { name: name.clone(), max_rel_error: 0.0, checked: 0, excluded: 0 })
        .collect();

    for (p, i) in entries {
        let name = &analytic[p].0;
        let orig = store.tensor(name)?.data()[i];
        let mut eval = |store: &mut ParamStore, x: f64| -> Result<(f64, u64)> {
            store.tensor_mut(name)?.data_mut()[i] = x;
            let mut g = Graph::new();
            let l = forward(&mut g, store)?;
            Ok((g.scalar(l)?, g.relu_signature().0))
        };
        let plus = eval(store, orig + cfg.step);
        let minus = eval(store, orig - cfg.step);
        store.tensor_mut(name)?.data_mut()[i] = orig;
        let ((fp, sp), (fm, sm)) = (plus?, minus?);
        if sp != base_sig || sm != base_sig {
            params[p].excluded += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * cfg.step);
        let err = relative_error(analytic[p].1[i], numeric);
        let pc = &mut params[p];
        pc.checked += 1;
        pc.max_rel_error = pc.max_rel_error.max(err);
    }

    let max_rel_error = params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport { passed: max_rel_error < cfg.threshold, max_rel_error, threshold: cfg.threshold, params })
}

fn random_tensor(shape: Vec<usize>, seed: u64, tag: u64, offset: f64) -> Tensor {
    let mut rng = rng_from(&[seed, tag]);
    let n = shape.iter().product();
    let data = (0..n).map(|_| offset + normal(&mut rng)).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

/// Reduces `y` to a scalar through fixed random weights so that no
/// gradient is trivially constant.
fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let w = random_tensor(shape.clone(), seed, 0x7773, 0.0);
    let c = g.constant(shape, w.into_data())?;
    let p = g.mul(y, c)?;
    Ok(g.sum(p))
}

type Build = fn(&mut Graph, &ParamStore, u64) -> Result<Var>;

/// Central-difference checks of every graph primitive on small random
/// inputs, one report per primitive.
pub fn primitive_suite(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    fn two(g: &mut Graph, s: &ParamStore) -> Result<(Var, Var)> {
        Ok((g.param(s, "a")?, g.param(s, "b")?))
    }
    let cases: [(&'static str, Build); 21] = [
        ("add", |g, s, k| { let (a, b) = two(g, s)?; let y = g.add(a, b)?; weighted_sum(g, y, k) }),
        ("sub", |g, s, k| { let (a, b) = two(g, s)?; let y = g.sub(a, b)?; weighted_sum(g, y, k) }),
        ("mul", |g, s, k| { let (a, b) = two(g, s)?; let y = g.mul(a, b)?; weighted_sum(g, y, k) }),
        ("add_scalar", |g, s, k| { let a = g.param(s, "a")?; let y = g.add_scalar(a, 0.7); let y = g.mul(y, y)?; weighted_sum(g, y, k) }),
        ("scale", |g, s, k| { let a = g.param(s, "a")?; let y = g.scale(a, -1.3); weighted_sum(g, y, k) }),
        ("neg", |g, s, k| { let a = g.param(s, "a")?; let y = g.neg(a); weighted_sum(g, y, k) }),
        ("exp", |g, s, k| { let a = g.param(s, "a")?; let y = g.exp(a); weighted_sum(g, y, k) }),
        ("ln", |g, s, k| { let a = g.param(s, "pos")?; let y = g.ln(a)?; weighted_sum(g, y, k) }),
        ("relu", |g, s, k| { let a = g.param(s, "a")?; let y = g.relu(a); weighted_sum(g, y, k) }),
        ("sum", |g, s, _| { let a = g.param(s, "a")?; let y = g.mul(a, a)?; Ok(g.sum(y)) }),
        ("mean", |g, s, _| { let a = g.param(s, "a")?; let y = g.mul(a, a)?; Ok(g.mean(y)) }),
        ("matmul", |g, s, k| { let (a, b) = (g.param(s, "m")?, g.param(s, "n")?); let y = g.matmul(a, b)?; weighted_sum(g, y, k) }),
        ("dense", |g, s, k| {
            let (x, w, b) = (g.param(s, "x2")?, g.param(s, "w2")?, g.param(s, "b2")?);
            let y = g.dense(x, w, Some(b))?;
            weighted_sum(g, y, k)
        }),
        ("conv1d", |g, s, k| {
            let (x, w, b) = (g.param(s, "x3")?, g.param(s, "w3")?, g.param(s, "b3")?);
            let y = g.conv1d(x, w, Some(b), 2, 1)?;
            weighted_sum(g, y, k)
        }),
        ("batch_norm_train", |g, s, k| {
            let (x, ga, be) = (g.param(s, "x3")?, g.param(s, "gamma")?, g.param(s, "beta")?);
            let (y, _) = g.batch_norm_train(x, ga, be, 1e-5)?;
            weighted_sum(g, y, k)
        }),
        ("batch_norm_eval", |g, s, k| {
            let (x, ga, be) = (g.param(s, "x3")?, g.param(s, "gamma")?, g.param(s, "beta")?);
            let y = g.batch_norm_eval(x, ga, be, &[0.1, -0.2], &[1.5, 0.7], 1e-5)?;
            weighted_sum(g, y, k)
        }),
        ("global_avg_pool", |g, s, k| { let x = g.param(s, "x3")?; let y = g.global_avg_pool(x)?; weighted_sum(g, y, k) }),
        ("l2_normalize", |g, s, k| { let x = g.param(s, "z")?; let y = g.l2_normalize(x)?; weighted_sum(g, y, k) }),
        ("nt_xent", |g, s, _| { let x = g.param(s, "z")?; let y = g.l2_normalize(x)?; g.nt_xent(y, 0.2) }),
        ("masked_huber", |g, s, k| {
            let x = g.param(s, "z")?;
            let target = random_tensor(vec![12], k, 1, 0.0).into_data();
            let mask = (0..12).map(|i| i % 5 != 2).collect();
            let y = g.masked_huber(x, target, mask, 1.0)?;
            weighted_sum(g, y, k)
        }),
        ("bce_with_logits", |g, s, k| {
            let x = g.param(s, "z")?;
            let labels = (0..12).map(|i| (i % 3 == 0) as u8 as f64).collect();
            let mask = (0..12).map(|i| i != 7).collect();
            let y = g.bce_with_logits(x, labels, mask, vec![1.0, 2.5, 0.5])?;
            weighted_sum(g, y, k)
        }),
    ];
    let mut store = ParamStore::new();
    let shapes: [(&str, Vec<usize>, f64); 14] = [
        ("a", vec![2, 3], 0.0),
        ("b", vec![2, 3], 0.0),
        ("pos", vec![2, 3], 3.0),
        ("m", vec![3, 4], 0.0),
        ("n", vec![4, 2], 0.0),
        ("x2", vec![3, 4], 0.0),
        ("w2", vec![2, 4], 0.0),
        ("b2", vec![2], 0.0),
        ("x3", vec![3, 2, 9], 0.0),
        ("w3", vec![2, 2, 3], 0.0),
        ("b3", vec![2], 0.0),
        ("gamma", vec![2], 1.0),
        ("beta", vec![2], 0.0),
        ("z", vec![4, 3], 0.0),
    ];
    for (i, (name, shape, offset)) in shapes.into_iter().enumerate() {
        store.insert(name, random_tensor(shape, seed, i as u64 + 10, offset), true);
    }
    let cfg = GradCheckConfig { seed, ..GradCheckConfig::default() };
    cases
        .iter()
        .map(|&(name, build)| Ok((name, grad_check(&mut store, cfg, |g, s| build(g, s, seed))?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_squared_loss_passes() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::new(vec![2, 3], vec![0.1, -0.4, 0.3, 0.9, 0.2, -0.5]).unwrap(), true);
        store.insert("b", Tensor::new(vec![2], vec![0.05, -0.1]).unwrap(), true);
        let report = grad_check(&mut store, GradCheckConfig::default(), |g, s| {
            let x = g.constant(vec![2, 3], vec![1.0, 2.0, -1.0, 0.5, -0.3, 0.8])?;
            let (w, b) = (g.param(s, "w")?, g.param(s, "b")?);
            let y = g.dense(x, w, Some(b))?;
            let sq = g.mul(y, y)?;
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(report.passed, "{report:?}");
        assert_eq!(report.checked(), 8);
    }

    #[test]
    fn relu_kink_is_excluded() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::new(vec![2], vec![0.0, 1.0]).unwrap(), true);
        let report = grad_check(&mut store, GradCheckConfig::default(), |g, s| {
            let w = g.param(s, "w")?;
            let r = g.relu(w);
            Ok(g.sum(r))
        })
        .unwrap();
        assert_eq!(report.params[0].checked, 1);
        assert_eq!(report.params[0].excluded, 1);
        assert!(report.passed);
    }

    #[test]
    fn every_primitive_passes() {
        for seed in [0, 1, 2] {
            for (name, report) in primitive_suite(seed).unwrap() {
                assert!(report.passed, "{name}: {report:?}");
                assert!(report.checked() > 0, "{name}");
            }
        }
    }
}
