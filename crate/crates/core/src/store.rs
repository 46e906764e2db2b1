//! Named parameter storage and the per-forward binding of parameters to
//! graph leaves.
//!
//! Parameters live outside any graph as plain tensors. Each forward pass
//! leafs the parameters it touches into a fresh graph; after backward the
//! trainer pulls gradients back out by name. Untouched parameters (blocks
//! not on the sampled path) never enter the graph, so a step can only move
//! parameters the path used.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{checkpoint, Element, Graph, Mode, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Entry<T> {
    pub value: Tensor<T>,
    pub trainable: bool,
}

/// All parameters of a model, keyed by dotted path.
#[derive(Clone, Default)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, Entry<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) {
        self.entries.insert(name.into(), Entry { value, trainable });
    }

    pub fn get(&self, name: &str) -> Result<&Entry<T>> {
        self.entries.get(name).ok_or_else(|| Error::Load {
            name: name.to_string(),
            reason: "missing parameter".into(),
        })
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Entry<T>> {
        self.entries.get_mut(name).ok_or_else(|| Error::Load {
            name: name.to_string(),
            reason: "missing parameter".into(),
        })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Entry<T>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Entry<T>)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters (trainable entries only).
    pub fn num_trainable_scalars(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    /// Keep only entries whose name passes the filter.
    pub fn retain(&mut self, keep: impl Fn(&str) -> bool) {
        self.entries.retain(|k, _| keep(k));
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (k.clone(), Entry { value: e.value.cast::<U>(), trainable: e.trainable })
                })
                .collect(),
        }
    }
}

impl ParamStore<f32> {
    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save_tensors(path, self.entries.iter().map(|(k, e)| (k, &e.value)))
    }

    /// Fill values of an initialized store from a checkpoint, validating
    /// shapes. Unknown or missing names are load errors naming the offender.
    pub fn load_into(&mut self, path: &Path) -> Result<()> {
        let loaded = checkpoint::load_tensors(path)?;
        for (name, _) in loaded.iter() {
            if !self.entries.contains_key(name) {
                return Err(Error::Load {
                    name: name.clone(),
                    reason: "checkpoint parameter not present in model".into(),
                });
            }
        }
        for (name, entry) in self.entries.iter_mut() {
            let t = loaded.get(name).ok_or_else(|| Error::Load {
                name: name.clone(),
                reason: "parameter missing from checkpoint".into(),
            })?;
            if t.shape() != entry.value.shape() {
                return Err(Error::Load {
                    name: name.clone(),
                    reason: format!(
                        "shape mismatch: model {:?} vs checkpoint {:?}",
                        entry.value.shape(),
                        t.shape()
                    ),
                });
            }
            entry.value = t.clone();
        }
        Ok(())
    }
}

/// Queued running-statistics update from one train-mode batch norm.
pub struct BnUpdate<T> {
    pub prefix: String,
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
    pub count: usize,
}

/// One forward pass: a graph plus the parameter bindings it created.
pub struct Forward<'a, T: Element> {
    pub graph: Graph<T>,
    store: &'a ParamStore<T>,
    bound: BTreeMap<String, Var>,
    bn_updates: Vec<BnUpdate<T>>,
}

pub const BN_EPS: f64 = 1e-5;

impl<'a, T: Element> Forward<'a, T> {
    pub fn new(store: &'a ParamStore<T>, mode: Mode) -> Self {
        Self {
            graph: Graph::new(mode),
            store,
            bound: BTreeMap::new(),
            bn_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.graph.mode()
    }

    /// Bind a named parameter as a graph leaf (cached per forward).
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let entry = self.store.get(name)?;
        let requires = entry.trainable && self.graph.mode() == Mode::Train;
        let v = self.graph.leaf(entry.value.clone(), requires);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Read a named non-trainable tensor (running stats) without binding it.
    pub fn stat(&self, name: &str) -> Result<Tensor<T>> {
        Ok(self.store.get(name)?.value.clone())
    }

    /// Conv + batch norm + optional relu, the standard block building unit.
    /// Parameter layout under `prefix`: `conv.w`, `bn.gamma|beta|mean|var`.
    pub fn conv_bn(
        &mut self,
        x: Var,
        prefix: &str,
        stride: usize,
        pad: usize,
        groups: usize,
        relu: bool,
    ) -> Result<Var> {
        let w = self.param(&format!("{prefix}.conv.w"))?;
        let y = self.graph.conv2d(x, w, None, stride, pad, groups)?;
        let y = self.bn(y, prefix)?;
        Ok(if relu { self.graph.relu(y) } else { y })
    }

    /// Batch norm dispatching on graph mode; queues running-stat updates in
    /// train mode.
    pub fn bn(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}.bn.gamma"))?;
        let beta = self.param(&format!("{prefix}.bn.beta"))?;
        match self.graph.mode() {
            Mode::Train => {
                let (y, mean, var) = self.graph.batch_norm_train(x, gamma, beta, BN_EPS)?;
                let shape = self.graph.value(x).shape();
                let count = shape[0] * shape[2] * shape[3];
                self.bn_updates.push(BnUpdate {
                    prefix: prefix.to_string(),
                    mean,
                    var,
                    count,
                });
                Ok(y)
            }
            Mode::Eval => {
                let mean = self.stat(&format!("{prefix}.bn.mean"))?;
                let var = self.stat(&format!("{prefix}.bn.var"))?;
                self.graph.batch_norm_eval(x, gamma, beta, &mean, &var, BN_EPS)
            }
        }
    }

    /// Gradients of every parameter bound by this forward, keyed by name.
    pub fn collect_grads(&self) -> BTreeMap<String, Tensor<T>> {
        self.bound
            .iter()
            .filter_map(|(name, &v)| self.graph.grad(v).map(|g| (name.clone(), g.clone())))
            .collect()
    }

    pub fn bound_names(&self) -> impl Iterator<Item = &String> {
        self.bound.keys()
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate<T>> {
        std::mem::take(&mut self.bn_updates)
    }
}

/// Fold queued batch statistics into running stats with the given momentum.
pub fn apply_bn_updates<T: Element>(
    store: &mut ParamStore<T>,
    updates: Vec<BnUpdate<T>>,
    momentum: f64,
) -> Result<()> {
    let m = T::from_f64(momentum);
    let one_m = T::from_f64(1.0 - momentum);
    for u in updates {
        // unbiased variance for the running estimate
        let corr = if u.count > 1 {
            T::from_f64(u.count as f64 / (u.count as f64 - 1.0))
        } else {
            T::one()
        };
        let mean_name = format!("{}.bn.mean", u.prefix);
        let var_name = format!("{}.bn.var", u.prefix);
        {
            let e = store.get_mut(&mean_name)?;
            for (rv, &bv) in e.value.data_mut().iter_mut().zip(u.mean.data()) {
                *rv = one_m * *rv + m * bv;
            }
        }
        {
            let e = store.get_mut(&var_name)?;
            for (rv, &bv) in e.value.data_mut().iter_mut().zip(u.var.data()) {
                *rv = one_m * *rv + m * (bv * corr);
            }
        }
    }
    Ok(())
}

/// Register a conv+bn parameter set under `prefix`.
pub fn init_conv_bn<T: Element>(
    store: &mut ParamStore<T>,
    rng: &mut impl Rng,
    prefix: &str,
    c_out: usize,
    c_in_per_group: usize,
    k: usize,
) {
    let fan_in = (c_in_per_group * k * k) as f64;
    let std = (2.0 / fan_in).sqrt();
    let normal = Normal::new(0.0, std).unwrap();
    let w = Tensor::from_fn(&[c_out, c_in_per_group, k, k], |_| {
        T::from_f64(normal.sample(rng))
    });
    store.insert(format!("{prefix}.conv.w"), w, true);
    init_bn(store, prefix, c_out);
}

pub fn init_bn<T: Element>(store: &mut ParamStore<T>, prefix: &str, c: usize) {
    store.insert(format!("{prefix}.bn.gamma"), Tensor::ones(&[c]), true);
    store.insert(format!("{prefix}.bn.beta"), Tensor::zeros(&[c]), true);
    store.insert(format!("{prefix}.bn.mean"), Tensor::zeros(&[c]), false);
    store.insert(format!("{prefix}.bn.var"), Tensor::ones(&[c]), false);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn bound_params_receive_grads_by_name() {
        let mut store: ParamStore<f64> = ParamStore::new();
        store.insert("w", Tensor::new(vec![1], vec![3.0]).unwrap(), true);
        store.insert("frozen", Tensor::new(vec![1], vec![5.0]).unwrap(), false);
        let mut fwd = Forward::new(&store, Mode::Train);
        let w = fwd.param("w").unwrap();
        let f = fwd.param("frozen").unwrap();
        let p = fwd.graph.mul(w, f).unwrap();
        let loss = fwd.graph.sum_all(p);
        fwd.graph.backward(loss).unwrap();
        let grads = fwd.collect_grads();
        assert_eq!(grads["w"].data(), &[5.0]);
        assert!(!grads.contains_key("frozen"));
    }

    #[test]
    fn load_rejects_shape_mismatch_with_offender_name() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let mut a: ParamStore<f32> = ParamStore::new();
        a.insert("layer.w", Tensor::zeros(&[2, 2]), true);
        a.save(&path).unwrap();
        let mut b: ParamStore<f32> = ParamStore::new();
        b.insert("layer.w", Tensor::zeros(&[3, 2]), true);
        match b.load_into(&path) {
            Err(Error::Load { name, .. }) => assert_eq!(name, "layer.w"),
            other => panic!("expected load error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn bn_update_blends_running_stats() {
        let mut store: ParamStore<f64> = ParamStore::new();
        init_bn(&mut store, "x", 2);
        let updates = vec![BnUpdate {
            prefix: "x".into(),
            mean: Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(),
            var: Tensor::new(vec![2], vec![4.0, 4.0]).unwrap(),
            count: 2,
        }];
        apply_bn_updates(&mut store, updates, 0.1).unwrap();
        let m = &store.get("x.bn.mean").unwrap().value;
        assert_eq!(m.data(), &[0.1, 0.2]);
        let v = &store.get("x.bn.var").unwrap().value;
        // running var: 0.9*1 + 0.1*(4 * 2/1) = 1.7
        assert!((v.data()[0] - 1.7).abs() < 1e-12);
    }

    #[test]
    fn rng_seeded_init_is_reproducible() {
        let mut s1: ParamStore<f32> = ParamStore::new();
        let mut s2: ParamStore<f32> = ParamStore::new();
        let mut r1 = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut r2 = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        init_conv_bn(&mut s1, &mut r1, "c", 8, 4, 3);
        init_conv_bn(&mut s2, &mut r2, "c", 8, 4, 3);
        assert_eq!(
            s1.get("c.conv.w").unwrap().value.data(),
            s2.get("c.conv.w").unwrap().value.data()
        );
    }
}
