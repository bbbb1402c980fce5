//! Named-parameter plumbing shared by the optimizer, checkpoints, and
//! gradient checks.

use std::collections::BTreeMap;

use ndarray::{ArrayD, ArrayViewD, ArrayViewMutD};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Persistent state that is not optimized (batch-norm running stats).
    Buffer,
}

/// Walks every named array of a model in a fixed, structure-defined order.
pub trait ParamVisit {
    fn visit_params(&self, f: &mut dyn FnMut(&str, ParamKind, ArrayViewD<'_, f64>));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, ArrayViewMutD<'_, f64>));

    fn num_trainable(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, kind, v| {
            if kind == ParamKind::Trainable {
                n += v.len();
            }
        });
        n
    }

    /// Names of all trainable arrays, in visit order.
    fn trainable_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_params(&mut |name, kind, _| {
            if kind == ParamKind::Trainable {
                names.push(name.to_string());
            }
        });
        names
    }
}

/// Accumulated gradients keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    map: BTreeMap<String, ArrayD<f64>>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    /// Add `delta` into the gradient for `name`.
    pub fn add(&mut self, name: &str, delta: ArrayViewD<'_, f64>) {
        match self.map.get_mut(name) {
            Some(g) => *g += &delta,
            None => {
                self.map.insert(name.to_string(), delta.to_owned());
            }
        }
    }

    /// Fold another gradient set into this one (deterministic key order).
    pub fn merge(&mut self, other: Gradients) {
        for (name, g) in other.map {
            match self.map.get_mut(&name) {
                Some(acc) => *acc += &g,
                None => {
                    self.map.insert(name, g);
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.map.values_mut() {
            *g *= s;
        }
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.map.get(name)
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.map.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(|g| g.iter().all(|v| v.is_finite()))
    }

    /// Global L2 norm across every array.
    pub fn l2_norm(&self) -> f64 {
        self.map
            .values()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn add_and_merge_accumulate() {
        let mut a = Gradients::new();
        a.add("w", arr1(&[1.0, 2.0]).into_dyn().view());
        a.add("w", arr1(&[0.5, 0.5]).into_dyn().view());
        let mut b = Gradients::new();
        b.add("w", arr1(&[1.0, 1.0]).into_dyn().view());
        b.add("b", arr1(&[3.0]).into_dyn().view());
        a.merge(b);
        assert_eq!(a.get("w").unwrap().as_slice().unwrap(), &[2.5, 3.5]);
        assert_eq!(a.get("b").unwrap().as_slice().unwrap(), &[3.0]);
        a.scale(2.0);
        assert_eq!(a.get("b").unwrap().as_slice().unwrap(), &[6.0]);
    }

    #[test]
    fn finiteness_check() {
        let mut g = Gradients::new();
        g.add("w", arr1(&[1.0, f64::NAN]).into_dyn().view());
        assert!(!g.all_finite());
    }
}
