use std::collections::BTreeMap;

use super::Tensor;

/// Named weights, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Store holding only the tensors whose names satisfy `keep`.
    pub fn filtered(&self, keep: impl Fn(&str) -> bool) -> ParamStore {
        ParamStore {
            tensors: self.tensors.iter().filter(|(k, _)| keep(k)).map(|(k, v)| (k.clone(), v.clone())).collect(),
        }
    }

    pub fn extend(&mut self, other: ParamStore) {
        self.tensors.extend(other.tensors);
    }
}

/// Adam with decoupled weight decay. Decay applies to matrices only
/// (rank >= 2); biases, norms and token vectors are not decayed.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update for every parameter that has a gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, grad) in grads {
            let Some(param) = params.get_mut(name) else { continue };
            let decay = param.rank() >= 2;
            let n = param.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            for (i, (w, &gr)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gr;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gr * gr;
                if decay {
                    *w -= lr * self.weight_decay * *w;
                }
                *w -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
            }
            *param = std::mem::replace(param, Tensor::scalar(0.0)).rounded();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adamw_moves_against_gradient() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::from_slice(&[2], &[1.0, -1.0]).unwrap());
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::from_slice(&[2], &[0.5, -0.5]).unwrap());
        let mut opt = AdamW::new(0.0);
        opt.step(&mut store, &grads, 0.1);
        let w = store.get("w").unwrap().data();
        assert!(w[0] < 1.0 && w[1] > -1.0);
    }

    #[test]
    fn decay_skips_vectors() {
        let mut store = ParamStore::new();
        store.insert("b", Tensor::from_slice(&[1], &[1.0]).unwrap());
        store.insert("w", Tensor::from_slice(&[1, 1], &[1.0]).unwrap());
        let mut grads = BTreeMap::new();
        grads.insert("b".to_string(), Tensor::scalar(0.0));
        grads.insert("w".to_string(), Tensor::from_slice(&[1, 1], &[0.0]).unwrap());
        let mut opt = AdamW::new(0.5);
        opt.step(&mut store, &grads, 0.1);
        assert_eq!(store.get("b").unwrap().item(), 1.0);
        assert!(store.get("w").unwrap().item() < 1.0);
    }
}
