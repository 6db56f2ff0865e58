//! Named parameter collections and their binding into a [`Graph`].

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::autograd::{Gradients, Graph, Var};
use crate::tensor::Tensor;

/// Ordered map from dot-separated parameter path to tensor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    /// Panicking accessor for names the model itself created.
    pub fn expect(&self, name: &str) -> &Tensor {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    /// Copy with every name prefixed by `prefix.`.
    pub fn prefixed(&self, prefix: &str) -> Self {
        Self {
            map: self
                .map
                .iter()
                .map(|(k, v)| (format!("{prefix}.{k}"), v.clone()))
                .collect(),
        }
    }

    pub fn extend(&mut self, other: Self) {
        self.map.extend(other.map);
    }

    /// SHA-256 over names, shapes and exact bit patterns.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.map {
            h.update(k.as_bytes());
            h.update((v.rows() as u64).to_le_bytes());
            h.update((v.cols() as u64).to_le_bytes());
            for x in v.data() {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Names whose tensors differ bitwise from `other` (or exist in only one).
    pub fn changed_names(&self, other: &Self) -> Vec<String> {
        let mut out = Vec::new();
        for (k, v) in &self.map {
            match other.map.get(k) {
                Some(o) if bitwise_eq(v, o) => {}
                _ => out.push(k.clone()),
            }
        }
        for k in other.map.keys() {
            if !self.map.contains_key(k) {
                out.push(k.clone());
            }
        }
        out.sort();
        out
    }
}

impl FromIterator<(String, Tensor)> for ParamStore {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        Self {
            map: iter.into_iter().collect(),
        }
    }
}

pub fn bitwise_eq(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape()
        && a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits())
}

pub fn gaussian(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("finite std");
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| normal.sample(rng)).collect())
}

/// Lazily lifts parameters of one store into a graph, once per name.
pub struct Binder<'a> {
    store: &'a ParamStore,
    trainable: bool,
    vars: HashMap<String, Var>,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore, trainable: bool) -> Self {
        Self {
            store,
            trainable,
            vars: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn var(&mut self, g: &mut Graph<'a>, name: &str) -> Var {
        if let Some(v) = self.vars.get(name) {
            return *v;
        }
        let v = g.leaf_ref(self.store.expect(name), self.trainable);
        self.vars.insert(name.to_owned(), v);
        v
    }

    /// Gradients for every bound parameter; unbound or unreached parameters
    /// get explicit zeros so the result always covers the whole store.
    pub fn grads(&self, grads: &Gradients) -> ParamStore {
        self.store
            .iter()
            .map(|(k, t)| {
                let g = self
                    .vars
                    .get(k)
                    .and_then(|v| grads.get(*v))
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols()));
                (k.clone(), g)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn changed_names_reports_bitwise_differences_only() {
        let mut a = ParamStore::new();
        a.insert("w", Tensor::full(1, 2, 1.0));
        a.insert("b", Tensor::full(1, 1, 0.0));
        let mut b = a.clone();
        assert!(a.changed_names(&b).is_empty());
        b.get_mut("b").unwrap().data_mut()[0] = -0.0;
        assert_eq!(a.changed_names(&b), vec!["b".to_owned()]);
        assert_ne!(a.content_hash(), b.content_hash());
    }

    #[test]
    fn binder_binds_each_name_once() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::full(1, 1, 3.0));
        let mut g = Graph::new();
        let mut b = Binder::new(&s, true);
        let v1 = b.var(&mut g, "w");
        let v2 = b.var(&mut g, "w");
        assert_eq!(v1, v2);
        let sq = g.sum_sq(v1);
        let grads = g.backward(sq);
        assert_eq!(b.grads(&grads).expect("w").item(), 6.0);
    }
}
