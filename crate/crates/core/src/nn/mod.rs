//! Parameter storage and the per-pass forward context shared by the models.

use crate::data::rng::stream;
use crate::error::{Error, Result};
use crate::tensor::{AdamState, BatchStats, BnMode, Graph, RunningStats, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const BN_EPS: f32 = 1e-3;
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BnId(usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    /// Included in the L2 penalty.
    pub decay: bool,
    pub trainable: bool,
}

/// Batch-norm layer: affine parameters plus running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub name: String,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running: RunningStats,
}

/// Every tensor a model owns, in a fixed registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    norms: Vec<BatchNorm>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, decay: bool) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            tensor,
            decay,
            trainable: true,
        });
        ParamId(self.params.len() - 1)
    }

    /// He-uniform weights: `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`, drawn
    /// from a stream keyed by the parameter name.
    pub fn he_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, seed: u64) -> ParamId {
        let bound = (6.0 / fan_in as f64).sqrt() as f32;
        let mut rng = stream(seed, &format!("init/{name}"), 0);
        let t = Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-bound..=bound));
        self.add(name, t, true)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape.to_vec()), false)
    }

    pub fn batch_norm(&mut self, name: &str, channels: usize) -> BnId {
        let gamma = self.add(
            format!("{name}.gamma"),
            Tensor::full([channels], 1.0),
            false,
        );
        let beta = self.add(format!("{name}.beta"), Tensor::zeros([channels]), false);
        self.norms.push(BatchNorm {
            name: name.to_string(),
            gamma,
            beta,
            running: RunningStats::new(channels),
        });
        BnId(self.norms.len() - 1)
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn norms(&self) -> &[BatchNorm] {
        &self.norms
    }

    pub fn norm(&self, id: BnId) -> &BatchNorm {
        &self.norms[id.0]
    }

    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.numel())
            .sum()
    }

    /// Freezes every parameter whose name does not satisfy `keep`.
    pub fn freeze_except(&mut self, keep: impl Fn(&str) -> bool) {
        for p in &mut self.params {
            p.trainable = keep(&p.name);
        }
    }

    /// Every stored tensor by name: parameters, then running statistics as
    /// `<bn>.running_mean` / `<bn>.running_var`.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .params
            .iter()
            .map(|p| (p.name.clone(), p.tensor.clone()))
            .collect();
        for bn in &self.norms {
            let c = bn.running.mean.len();
            out.push((
                format!("{}.running_mean", bn.name),
                Tensor::from_fn([c], |i| bn.running.mean[i]),
            ));
            out.push((
                format!("{}.running_var", bn.name),
                Tensor::from_fn([c], |i| bn.running.var[i]),
            ));
        }
        out
    }

    /// Overwrites every stored tensor. Names and shapes must match exactly.
    pub fn load_named(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        let expected = self.params.len() + 2 * self.norms.len();
        if tensors.len() != expected {
            return Err(Error::DescriptorMismatch(format!(
                "expected {expected} tensors, found {}",
                tensors.len()
            )));
        }
        let mut it = tensors.iter();
        let mut next = |name: &str, shape: &[usize]| -> Result<Tensor> {
            let (n, t) = it.next().expect("length checked above");
            if n != name || t.shape() != shape {
                return Err(Error::DescriptorMismatch(format!(
                    "expected `{name}` {shape:?}, found `{n}` {:?}",
                    t.shape()
                )));
            }
            Ok(t.clone())
        };
        let mut params = Vec::with_capacity(self.params.len());
        for p in &self.params {
            params.push(next(&p.name, p.tensor.shape())?);
        }
        let mut stats = Vec::with_capacity(self.norms.len());
        for bn in &self.norms {
            let c = [bn.running.mean.len()];
            let mean = next(&format!("{}.running_mean", bn.name), &c)?;
            let var = next(&format!("{}.running_var", bn.name), &c)?;
            stats.push((mean, var));
        }
        for (p, t) in self.params.iter_mut().zip(params) {
            p.tensor = t;
        }
        for (bn, (mean, var)) in self.norms.iter_mut().zip(stats) {
            bn.running.mean = mean.into_data();
            bn.running.var = var.into_data();
        }
        Ok(())
    }

    /// Copies gradients from the graph into the trainable parameters.
    pub fn collect_grads(&mut self, pass: &Pass) -> Result<()> {
        for (p, &v) in self.params.iter_mut().zip(&pass.vars) {
            if p.trainable {
                pass.graph.write_grad(v, &mut p.tensor)?;
            }
        }
        Ok(())
    }

    /// Folds the batch statistics of a training pass into the running averages.
    pub fn apply_batch_stats(&mut self, updates: &[(BnId, BatchStats)]) {
        for (id, stats) in updates {
            self.norms[id.0].running.update(stats, BN_MOMENTUM);
        }
    }

    pub fn adam_step(&mut self, adam: &mut AdamState) -> Result<()> {
        adam.step(
            self.params
                .iter_mut()
                .filter(|p| p.trainable)
                .map(|p| &mut p.tensor),
        )
    }
}

/// A model that can be rebuilt from its serializable config.
pub trait Network: Sized {
    /// Architecture tag stored in checkpoints.
    const KIND: &'static str;
    type Config: Clone + std::fmt::Debug + serde::Serialize + serde::de::DeserializeOwned;

    fn build(config: &Self::Config, seed: u64) -> Result<Self>;
    fn config(&self) -> &Self::Config;
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    /// Records the forward pass of `x` on `pass`.
    fn forward(&self, pass: &mut Pass, x: Var) -> Result<Var>;

    /// Inference-mode forward of a whole batch.
    fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut pass = Pass::new(self.store(), Mode::Infer, false, 0);
        let input = pass.graph.constant(x.clone());
        let out = self.forward(&mut pass, input)?;
        Ok(pass.graph.value(out).clone())
    }
}

/// One forward pass: the graph, every parameter bound as a leaf, and the
/// batch statistics gathered by training-mode batch norm.
pub struct Pass {
    pub graph: Graph,
    vars: Vec<Var>,
    pub mode: Mode,
    pub bn_updates: Vec<(BnId, BatchStats)>,
    rng: ChaCha8Rng,
}

impl Pass {
    /// Binds the store's parameters. With `track_grads` false everything is
    /// bound as a constant (inference, or a frozen model inside another pass).
    pub fn new(store: &ParamStore, mode: Mode, track_grads: bool, dropout_seed: u64) -> Self {
        let mut graph = Graph::new();
        let vars = store
            .params
            .iter()
            .map(|p| {
                if track_grads && p.trainable {
                    graph.parameter(p.tensor.clone())
                } else {
                    graph.constant(p.tensor.clone())
                }
            })
            .collect();
        Pass {
            graph,
            vars,
            mode,
            bn_updates: Vec::new(),
            rng: stream(dropout_seed, "dropout", 0),
        }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn train(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn batch_norm(&mut self, store: &ParamStore, x: Var, id: BnId) -> Result<Var> {
        let bn = &store.norms[id.0];
        let (gamma, beta) = (self.vars[bn.gamma.0], self.vars[bn.beta.0]);
        let mode = match self.mode {
            Mode::Train => BnMode::Train,
            Mode::Infer => BnMode::Infer {
                mean: &bn.running.mean,
                var: &bn.running.var,
            },
        };
        let (y, stats) = self.graph.batch_norm_with(x, gamma, beta, mode, BN_EPS)?;
        if let Some(stats) = stats {
            self.bn_updates.push((id, stats));
        }
        Ok(y)
    }

    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        let train = self.train();
        self.graph.dropout(x, rate, train, &mut self.rng)
    }

    /// Vars of the parameters that take part in weight decay.
    pub fn decayed(&self, store: &ParamStore) -> Vec<Var> {
        store
            .params
            .iter()
            .zip(&self.vars)
            .filter(|(p, _)| p.decay && p.trainable)
            .map(|(_, &v)| v)
            .collect()
    }
}
