use std::collections::{BTreeMap, HashMap};

use crate::error::{Result, TensorError};
use crate::params::ParamSet;
use crate::scalar::Real;

/// SGD with heavy-ball momentum and L2 weight decay, with a learning rate per group.
#[derive(Clone, Debug)]
pub struct SgdMomentumState<T> {
    pub velocity: HashMap<String, Vec<T>>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_per_group: BTreeMap<String, f64>,
}

impl<T: Real> SgdMomentumState<T> {
    pub fn new(momentum: f64, weight_decay: f64, lr_per_group: BTreeMap<String, f64>) -> Self {
        SgdMomentumState {
            velocity: HashMap::new(),
            momentum,
            weight_decay,
            lr_per_group,
        }
    }
}

/// One update of every trainable tensor:
/// `v ← momentum·v + grad + weight_decay·param`, `param ← param − lr·v`.
///
/// All preconditions are checked before anything is modified. Gradients are
/// cleared afterwards.
pub fn sgd_step<T: Real>(params: &mut ParamSet<T>, state: &mut SgdMomentumState<T>) -> Result<()> {
    for e in params.entries() {
        if !params.is_trainable(e) {
            continue;
        }
        if !state.lr_per_group.contains_key(&e.group) {
            return Err(TensorError::Contract(format!(
                "no learning rate for group `{}`",
                e.group
            )));
        }
        match &e.tensor.grad {
            Some(g) if g.len() == e.tensor.numel() => {}
            Some(_) => {
                return Err(TensorError::Contract(format!(
                    "gradient of `{}` has the wrong length",
                    e.name
                )))
            }
            None => {
                return Err(TensorError::Contract(format!(
                    "missing gradient for trainable `{}`",
                    e.name
                )))
            }
        }
    }
    let mu = T::from_f64(state.momentum);
    let wd = T::from_f64(state.weight_decay);
    let trainable: Vec<bool> = params.entries().iter().map(|e| params.is_trainable(e)).collect();
    for (e, train) in params.entries_mut().iter_mut().zip(trainable) {
        if !train {
            continue;
        }
        let lr = T::from_f64(state.lr_per_group[&e.group]);
        let grad = e.tensor.grad.take().expect("checked above");
        let v = state
            .velocity
            .entry(e.name.clone())
            .or_insert_with(|| vec![T::zero(); grad.len()]);
        for ((p, vi), g) in e.tensor.data_mut().iter_mut().zip(v.iter_mut()).zip(grad) {
            *vi = mu * *vi + g + wd * *p;
            *p = *p - lr * *vi;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;
    use crate::tensor::Tensor;

    fn one_param(value: f64, grad: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        let mut t = Tensor::<f64>::scalar(value);
        t.grad = Some(vec![grad]);
        p.insert("w", "g", ParamKind::Trainable, t).unwrap();
        p
    }

    fn lr(v: f64) -> BTreeMap<String, f64> {
        [("g".to_string(), v)].into_iter().collect()
    }

    #[test]
    fn zero_everything_is_a_fixed_point() {
        let mut p = one_param(1.25, 0.0);
        let mut s = SgdMomentumState::new(0.9, 0.0, lr(0.1));
        sgd_step(&mut p, &mut s).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[1.25]);
        assert!(p.get("w").unwrap().grad.is_none());
    }

    #[test]
    fn vanilla_step() {
        let mut p = one_param(1.0, 0.5);
        let mut s = SgdMomentumState::new(0.0, 0.0, lr(0.1));
        sgd_step(&mut p, &mut s).unwrap();
        assert!((p.get("w").unwrap().data()[0] - (1.0 - 0.1 * 0.5)).abs() < 1e-15);
    }

    #[test]
    fn momentum_matches_unrolled_recurrence() {
        let (g, lr_v, mu) = (0.3, 0.05, 0.9);
        let mut p = one_param(2.0, g);
        let mut s = SgdMomentumState::new(mu, 0.0, lr(lr_v));
        sgd_step(&mut p, &mut s).unwrap();
        p.get_mut("w").unwrap().grad = Some(vec![g]);
        sgd_step(&mut p, &mut s).unwrap();
        // v1 = g, p1 = p0 - lr·g; v2 = mu·g + g, p2 = p1 - lr·v2
        let v1 = g;
        let p1 = 2.0 - lr_v * v1;
        let v2 = mu * v1 + g;
        let p2 = p1 - lr_v * v2;
        assert!((p.get("w").unwrap().data()[0] - p2).abs() < 1e-15);
    }

    #[test]
    fn missing_grad_is_a_contract_error() {
        let mut p = one_param(1.0, 0.0);
        p.get_mut("w").unwrap().grad = None;
        let mut s = SgdMomentumState::new(0.9, 0.0, lr(0.1));
        assert!(matches!(sgd_step(&mut p, &mut s), Err(TensorError::Contract(_))));
    }

    #[test]
    fn frozen_groups_are_skipped() {
        let mut p = one_param(1.0, 0.0);
        p.get_mut("w").unwrap().grad = None;
        p.freeze("g");
        let mut s = SgdMomentumState::new(0.9, 0.0, BTreeMap::new());
        sgd_step(&mut p, &mut s).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[1.0]);
    }
}
