//! Named parameter storage and the per-forward binding context.

use std::collections::BTreeSet;

use rand::Rng;
use smag_tensor::{Graph, NormMode, Real, RunningStats, Tensor, TensorArchive, Var};

use crate::error::{data, Result};
use crate::rng::stream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct StatsId(pub usize);

/// Key under which a parameter is stored plus the key whose random stream
/// initializes it. The two differ only for cloned-at-init copies.
#[derive(Clone, Debug)]
pub struct Scope {
    pub key: String,
    pub init: String,
}

impl Scope {
    pub fn new(key: &str) -> Self {
        Self {
            key: key.to_string(),
            init: key.to_string(),
        }
    }

    /// A scope stored under `key` but initialized like `init`.
    pub fn cloned_from(key: &str, init: &str) -> Self {
        Self {
            key: key.to_string(),
            init: init.to_string(),
        }
    }

    pub fn child(&self, name: &str) -> Self {
        Self {
            key: format!("{}.{}", self.key, name),
            init: format!("{}.{}", self.init, name),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Real> {
    init_seed: u64,
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    stats_names: Vec<String>,
    stats: Vec<RunningStats<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new(init_seed: u64) -> Self {
        Self {
            init_seed,
            names: Vec::new(),
            values: Vec::new(),
            stats_names: Vec::new(),
            stats: Vec::new(),
        }
    }

    pub fn add(&mut self, key: String, value: Tensor<T>) -> ParamId {
        assert!(!self.names.contains(&key), "duplicate parameter key {key}");
        self.names.push(key);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Uniform weights in `±sqrt(6 / fan_in)` drawn from the scope's own stream.
    pub fn uniform(&mut self, scope: &Scope, shape: Vec<usize>, fan_in: usize) -> ParamId {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        let mut rng = stream(self.init_seed, &scope.init);
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::lit(rng.random_range(-bound..bound))).collect();
        self.add(scope.key.clone(), Tensor::new(shape, data).expect("init shape"))
    }

    pub fn constant(&mut self, scope: &Scope, shape: Vec<usize>, value: f64) -> ParamId {
        self.add(scope.key.clone(), Tensor::full(shape, T::lit(value)))
    }

    pub fn add_stats(&mut self, scope: &Scope, channels: usize) -> StatsId {
        self.stats_names.push(scope.key.clone());
        self.stats.push(RunningStats::new(channels));
        StatsId(self.stats.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn id(&self, key: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == key).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn stats(&self) -> &[RunningStats<T>] {
        &self.stats
    }

    pub fn set_stats(&mut self, stats: Vec<RunningStats<T>>) {
        assert_eq!(stats.len(), self.stats.len());
        self.stats = stats;
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Scalar count of the parameters whose key starts with `prefix`.
    pub fn scalar_count_with(&self, prefix: &str) -> usize {
        self.names
            .iter()
            .zip(&self.values)
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, v)| v.len())
            .sum()
    }

    pub fn write_into(&self, archive: &mut TensorArchive) {
        for (name, value) in self.names.iter().zip(&self.values) {
            archive.insert(format!("param.{name}"), value);
        }
        for (name, st) in self.stats_names.iter().zip(&self.stats) {
            let c = st.mean.len();
            archive.insert(format!("stats.{name}.mean"), &Tensor::new(vec![c], st.mean.clone()).expect("stats"));
            archive.insert(format!("stats.{name}.var"), &Tensor::new(vec![c], st.var.clone()).expect("stats"));
        }
    }

    /// Overwrites every parameter and running statistic from `archive`; keys
    /// and shapes must match this store exactly.
    pub fn read_from(&mut self, archive: &TensorArchive) -> Result<()> {
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            let key = format!("param.{name}");
            if !archive.contains(&key) {
                return Err(data(format!("checkpoint lacks parameter {name}")));
            }
            let loaded: Tensor<T> = archive.get(&key)?;
            if loaded.shape() != value.shape() {
                return Err(data(format!(
                    "checkpoint parameter {name} has shape {:?}, model expects {:?}",
                    loaded.shape(),
                    value.shape()
                )));
            }
            *value = loaded;
        }
        for (name, st) in self.stats_names.iter().zip(self.stats.iter_mut()) {
            for (suffix, dst) in [("mean", &mut st.mean), ("var", &mut st.var)] {
                let key = format!("stats.{name}.{suffix}");
                if !archive.contains(&key) {
                    return Err(data(format!("checkpoint lacks running statistic {name}.{suffix}")));
                }
                let loaded: Tensor<T> = archive.get(&key)?;
                if loaded.len() != dst.len() {
                    return Err(data(format!("checkpoint statistic {name}.{suffix} has the wrong length")));
                }
                *dst = loaded.into_data();
            }
        }
        let expected = self.names.len() + 2 * self.stats_names.len();
        let present = archive
            .keys()
            .filter(|k| k.starts_with("param.") || k.starts_with("stats."))
            .count();
        if present != expected {
            return Err(data(format!(
                "checkpoint holds {present} model tensors, model expects {expected}"
            )));
        }
        Ok(())
    }
}

/// Binds stored parameters into a fresh graph for one forward pass.
///
/// Running statistics are copied in; in `BatchStats` mode the updated copy
/// is written back by the caller once the step succeeds.
pub struct Ctx<'a, T: Real> {
    pub g: Graph<T>,
    store: &'a ParamStore<T>,
    bound: Vec<Option<Var>>,
    stats: Vec<RunningStats<T>>,
    mode: NormMode,
    trainable: bool,
    touched: BTreeSet<ParamId>,
}

impl<'a, T: Real> Ctx<'a, T> {
    /// `trainable` binds parameters as differentiable leaves; otherwise they
    /// are constants and no gradients are kept.
    pub fn new(store: &'a ParamStore<T>, mode: NormMode, trainable: bool) -> Self {
        Self {
            g: Graph::new(),
            store,
            bound: vec![None; store.len()],
            stats: store.stats.clone(),
            mode,
            trainable,
            touched: BTreeSet::new(),
        }
    }

    pub fn mode(&self) -> NormMode {
        self.mode
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.touched.insert(id);
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let value = self.store.value(id).clone();
        let v = if self.trainable {
            self.g.leaf(value)
        } else {
            self.g.constant(value)
        };
        self.bound[id.0] = Some(v);
        v
    }

    /// Normalization layer using (and in `BatchStats` mode updating) the
    /// running statistics `id`.
    pub fn norm(&mut self, x: Var, gamma: Var, beta: Var, id: StatsId) -> Result<Var> {
        Ok(self.g.norm_layer(x, gamma, beta, self.mode, &mut self.stats[id.0])?)
    }

    pub fn into_stats(self) -> Vec<RunningStats<T>> {
        self.stats
    }

    /// Parameters read since the last call.
    pub fn take_touched(&mut self) -> BTreeSet<ParamId> {
        std::mem::take(&mut self.touched)
    }

    /// Gradient of every stored parameter (zeros for parameters not reached).
    pub fn param_grads(&self) -> Vec<Tensor<T>> {
        self.bound
            .iter()
            .enumerate()
            .map(|(i, b)| match b {
                Some(v) => self.g.grad_or_zero(*v),
                None => Tensor::zeros(self.store.value(ParamId(i)).shape().to_vec()),
            })
            .collect()
    }
}
