//! Streaming metrics arranged as a tree.
//!
//! A tree has one root that reads the running [`State`] each step and a
//! set of children that consume the root's per-step output, computing
//! aggregates such as the epoch mean, the population standard deviation,
//! or a sliding-window running mean. Trees for common keys ("loss",
//! "acc", "binary_acc") come from a string registry so a trial can be
//! configured with plain names.

use std::collections::HashMap;
use std::collections::VecDeque;
use std::sync::{LazyLock, Mutex};

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::state::{keys, State, StateKey, StateValue};

/// Default window for running means, in steps.
pub const DEFAULT_RUNNING_WINDOW: usize = 50;

/// What a node consumes each step: the shared state (roots) or the
/// upstream per-step value (children).
pub enum MetricInput<'a> {
    State(&'a State),
    Value(f64),
}

impl MetricInput<'_> {
    fn value(&self, name: &str) -> Result<f64> {
        match self {
            MetricInput::Value(v) => Ok(*v),
            MetricInput::State(_) => Err(Error::Config(format!(
                "aggregate metric '{name}' must be a child of a source metric"
            ))),
        }
    }
}

/// One streaming statistic. `process` runs once per training/validation
/// step, `process_final` once per epoch end; either may emit a value
/// under the node's name. `reset` returns the node to its initial
/// statistics.
pub trait MetricNode {
    fn name(&self) -> &str;
    fn process(&mut self, input: MetricInput<'_>) -> Result<Option<f64>>;
    fn process_final(&mut self) -> Option<f64>;
    fn reset(&mut self);
}

/// A root metric and the children its per-step output flows to.
pub struct MetricTree {
    root: Box<dyn MetricNode>,
    children: Vec<Box<dyn MetricNode>>,
}

impl std::fmt::Debug for MetricTree {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let children: Vec<&str> = self.children.iter().map(|c| c.name()).collect();
        write!(f, "MetricTree({} -> {children:?})", self.root.name())
    }
}

impl MetricTree {
    pub fn new(root: impl MetricNode + 'static) -> MetricTree {
        MetricTree {
            root: Box::new(root),
            children: Vec::new(),
        }
    }

    pub fn with_child(mut self, child: impl MetricNode + 'static) -> MetricTree {
        self.children.push(Box::new(child));
        self
    }

    pub fn root_name(&self) -> &str {
        self.root.name()
    }

    pub fn reset(&mut self) {
        self.root.reset();
        for c in &mut self.children {
            c.reset();
        }
    }

    /// Runs one step: the root reads `state`; when it produces a value,
    /// that value is forwarded to every child in order, exactly once.
    /// Returns the `(name, value)` pairs emitted this step.
    pub fn process(&mut self, state: &State) -> Result<Vec<(String, f64)>> {
        let mut out = Vec::new();
        if let Some(v) = self.root.process(MetricInput::State(state))? {
            out.push((self.root.name().to_string(), v));
            for c in &mut self.children {
                if let Some(cv) = c.process(MetricInput::Value(v))? {
                    out.push((c.name().to_string(), cv));
                }
            }
        }
        Ok(out)
    }

    /// Epoch-end emissions from the root and every child.
    pub fn process_final(&mut self) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        if let Some(v) = self.root.process_final() {
            out.push((self.root.name().to_string(), v));
        }
        for c in &mut self.children {
            if let Some(cv) = c.process_final() {
                out.push((c.name().to_string(), cv));
            }
        }
        out
    }
}

/// Anything that can stand at the base of a wrapper chain: an existing
/// tree, or a bare node that becomes a childless tree.
pub trait IntoMetricTree {
    fn into_tree(self) -> MetricTree;
}

impl IntoMetricTree for MetricTree {
    fn into_tree(self) -> MetricTree {
        self
    }
}

impl<M: MetricNode + 'static> IntoMetricTree for M {
    fn into_tree(self) -> MetricTree {
        MetricTree::new(self)
    }
}

/// Adds an epoch-mean child emitting under the root's own name.
pub fn wrap_mean(metric: impl IntoMetricTree) -> MetricTree {
    let tree = metric.into_tree();
    let name = tree.root_name().to_string();
    tree.with_child(MeanAggregate::new(name))
}

/// Adds a population standard deviation child named `<root>_std`.
pub fn wrap_std(metric: impl IntoMetricTree) -> MetricTree {
    let tree = metric.into_tree();
    let name = format!("{}_std", tree.root_name());
    tree.with_child(StdAggregate::new(name))
}

/// Adds a sliding-window mean child named `running_<root>`, emitting
/// every step. The window must hold at least one value.
pub fn wrap_running_mean(metric: impl IntoMetricTree, window: usize) -> Result<MetricTree> {
    if window == 0 {
        return Err(Error::Config(
            "running mean window must be at least 1".into(),
        ));
    }
    let tree = metric.into_tree();
    let name = format!("running_{}", tree.root_name());
    Ok(tree.with_child(RunningMeanAggregate::new(name, window)))
}

// ----- aggregates (children) -----

/// Numerically stable mean/variance accumulator.
#[derive(Debug, Clone, Default)]
pub struct Welford {
    count: u64,
    mean: f64,
    m2: f64,
}

impl Welford {
    pub fn add(&mut self, v: f64) {
        self.count += 1;
        let delta = v - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (v - self.mean);
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Population standard deviation (divide by n).
    pub fn population_std(&self) -> f64 {
        (self.m2 / self.count as f64).sqrt()
    }
}

/// Emits the arithmetic mean of the epoch's per-step values at epoch end.
pub struct MeanAggregate {
    name: String,
    stats: Welford,
}

impl MeanAggregate {
    pub fn new(name: impl Into<String>) -> MeanAggregate {
        MeanAggregate {
            name: name.into(),
            stats: Welford::default(),
        }
    }
}

impl MetricNode for MeanAggregate {
    fn name(&self) -> &str {
        &self.name
    }

    fn process(&mut self, input: MetricInput<'_>) -> Result<Option<f64>> {
        self.stats.add(input.value(&self.name)?);
        Ok(None)
    }

    fn process_final(&mut self) -> Option<f64> {
        (self.stats.count() > 0).then(|| self.stats.mean())
    }

    fn reset(&mut self) {
        self.stats = Welford::default();
    }
}

/// Emits the population standard deviation of the epoch's per-step
/// values at epoch end.
pub struct StdAggregate {
    name: String,
    stats: Welford,
}

impl StdAggregate {
    pub fn new(name: impl Into<String>) -> StdAggregate {
        StdAggregate {
            name: name.into(),
            stats: Welford::default(),
        }
    }
}

impl MetricNode for StdAggregate {
    fn name(&self) -> &str {
        &self.name
    }

    fn process(&mut self, input: MetricInput<'_>) -> Result<Option<f64>> {
        self.stats.add(input.value(&self.name)?);
        Ok(None)
    }

    fn process_final(&mut self) -> Option<f64> {
        (self.stats.count() > 0).then(|| self.stats.population_std())
    }

    fn reset(&mut self) {
        self.stats = Welford::default();
    }
}

/// Emits the unweighted mean of the most recent `window` values, every
/// step. Nothing is emitted at epoch end.
pub struct RunningMeanAggregate {
    name: String,
    window: usize,
    recent: VecDeque<f64>,
}

impl RunningMeanAggregate {
    pub fn new(name: impl Into<String>, window: usize) -> RunningMeanAggregate {
        RunningMeanAggregate {
            name: name.into(),
            window,
            recent: VecDeque::new(),
        }
    }
}

impl MetricNode for RunningMeanAggregate {
    fn name(&self) -> &str {
        &self.name
    }

    fn process(&mut self, input: MetricInput<'_>) -> Result<Option<f64>> {
        self.recent.push_back(input.value(&self.name)?);
        if self.recent.len() > self.window {
            self.recent.pop_front();
        }
        let mean = self.recent.iter().sum::<f64>() / self.recent.len() as f64;
        Ok(Some(mean))
    }

    fn process_final(&mut self) -> Option<f64> {
        None
    }

    fn reset(&mut self) {
        self.recent.clear();
    }
}

// ----- sources (roots) -----

/// Per-step value of the LOSS entry.
pub struct LossValue;

impl MetricNode for LossValue {
    fn name(&self) -> &str {
        "loss"
    }

    fn process(&mut self, input: MetricInput<'_>) -> Result<Option<f64>> {
        let MetricInput::State(state) = input else {
            return Err(Error::Config("loss metric must be a tree root".into()));
        };
        match state.get(&keys::LOSS)? {
            StateValue::Tensor(t) => Ok(Some(t.item())),
            StateValue::Float(v) => Ok(Some(*v)),
            other => Err(Error::KindMismatch {
                label: keys::LOSS.label().to_string(),
                expected: "Tensor",
                found: other.kind(),
            }),
        }
    }

    fn process_final(&mut self) -> Option<f64> {
        None
    }

    fn reset(&mut self) {}
}

/// Fraction of rows whose argmax prediction equals the true class index.
/// Expects Y_PRED of shape `[batch, classes]` and Y_TRUE holding one
/// class index per row.
pub struct CategoricalAccuracy;

impl MetricNode for CategoricalAccuracy {
    fn name(&self) -> &str {
        "acc"
    }

    fn process(&mut self, input: MetricInput<'_>) -> Result<Option<f64>> {
        let MetricInput::State(state) = input else {
            return Err(Error::Config("acc metric must be a tree root".into()));
        };
        let pred = state.get_tensor(&keys::Y_PRED)?;
        let truth = state.get_tensor(&keys::Y_TRUE)?;
        let shape = pred.shape();
        if shape.rank() != 2 {
            return Err(Error::Contract(format!(
                "categorical accuracy expects rank-2 predictions, got {shape}"
            )));
        }
        let (rows, classes) = (shape.dims()[0], shape.dims()[1]);
        let labels = truth.values();
        if labels.len() != rows {
            return Err(Error::Contract(format!(
                "{} labels for {} prediction rows",
                labels.len(),
                rows
            )));
        }
        if rows == 0 {
            return Ok(None);
        }
        let values = pred.values();
        let mut correct = 0usize;
        for r in 0..rows {
            let row = &values[r * classes..(r + 1) * classes];
            let mut best = 0usize;
            for (c, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = c;
                }
            }
            if best == labels[r].round() as usize {
                correct += 1;
            }
        }
        Ok(Some(correct as f64 / rows as f64))
    }

    fn process_final(&mut self) -> Option<f64> {
        None
    }

    fn reset(&mut self) {}
}

/// Fraction of elements where `Y_PRED > 0.5` agrees with a 0/1 Y_TRUE.
pub struct BinaryAccuracy;

impl MetricNode for BinaryAccuracy {
    fn name(&self) -> &str {
        "binary_acc"
    }

    fn process(&mut self, input: MetricInput<'_>) -> Result<Option<f64>> {
        let MetricInput::State(state) = input else {
            return Err(Error::Config(
                "binary_acc metric must be a tree root".into(),
            ));
        };
        let pred = state.get_tensor(&keys::Y_PRED)?.values();
        let truth = state.get_tensor(&keys::Y_TRUE)?.values();
        if pred.len() != truth.len() {
            return Err(Error::Contract(format!(
                "{} predictions for {} labels",
                pred.len(),
                truth.len()
            )));
        }
        if pred.is_empty() {
            return Ok(None);
        }
        let correct = pred
            .iter()
            .zip(truth.iter())
            .filter(|(p, t)| (**p > 0.5) == (**t > 0.5))
            .count();
        Ok(Some(correct as f64 / pred.len() as f64))
    }

    fn process_final(&mut self) -> Option<f64> {
        None
    }

    fn reset(&mut self) {}
}

/// Per-step value of an arbitrary numeric state entry; skips steps where
/// the key is absent. Useful for values a callback computes, such as the
/// generator/discriminator losses of an adversarial run.
pub struct StateFloat {
    key: StateKey,
    name: String,
}

impl StateFloat {
    pub fn new(name: impl Into<String>, key: StateKey) -> StateFloat {
        StateFloat {
            key,
            name: name.into(),
        }
    }
}

impl MetricNode for StateFloat {
    fn name(&self) -> &str {
        &self.name
    }

    fn process(&mut self, input: MetricInput<'_>) -> Result<Option<f64>> {
        let MetricInput::State(state) = input else {
            return Err(Error::Config(format!(
                "metric '{}' must be a tree root",
                self.name
            )));
        };
        if !state.contains(&self.key) {
            return Ok(None);
        }
        match state.get(&self.key)? {
            StateValue::Float(v) => Ok(Some(*v)),
            StateValue::Tensor(t) => Ok(Some(t.item())),
            other => Err(Error::KindMismatch {
                label: self.key.label().to_string(),
                expected: "Float",
                found: other.kind(),
            }),
        }
    }

    fn process_final(&mut self) -> Option<f64> {
        None
    }

    fn reset(&mut self) {}
}

// ----- default registry -----

type TreeBuilder = Box<dyn Fn() -> MetricTree + Send>;

static REGISTRY: LazyLock<Mutex<HashMap<String, TreeBuilder>>> = LazyLock::new(|| {
    let mut map: HashMap<String, TreeBuilder> = HashMap::new();
    map.insert("loss".into(), Box::new(|| standard_tree(LossValue)));
    map.insert("acc".into(), Box::new(|| standard_tree(CategoricalAccuracy)));
    map.insert(
        "binary_acc".into(),
        Box::new(|| standard_tree(BinaryAccuracy)),
    );
    Mutex::new(map)
});

/// The standard decoration: mean, std, and running mean children.
pub fn standard_tree(root: impl MetricNode + 'static) -> MetricTree {
    wrap_running_mean(wrap_std(wrap_mean(root)), DEFAULT_RUNNING_WINDOW)
        .expect("default window is nonzero")
}

/// Registers (or replaces) a tree builder for `key`. Every
/// [`build_default`] call invokes the builder afresh, so built instances
/// never share statistics.
pub fn register_default(key: &str, builder: impl Fn() -> MetricTree + Send + 'static) {
    REGISTRY
        .lock()
        .unwrap()
        .insert(key.to_string(), Box::new(builder));
}

/// Builds a fresh tree for a registered key.
pub fn build_default(key: &str) -> Result<MetricTree> {
    let registry = REGISTRY.lock().unwrap();
    match registry.get(key) {
        Some(builder) => Ok(builder()),
        None => {
            let mut known: Vec<&str> = registry.keys().map(String::as_str).collect();
            known.sort_unstable();
            Err(Error::Config(format!(
                "no default metric for key '{key}'; registered: {}",
                known.join(", ")
            )))
        }
    }
}

/// Merges one step's (or one epoch end's) emissions into a metric map.
/// A name may be overwritten across events, but two emissions of the
/// same name within one event are a configuration error.
pub fn merge_emissions(
    into: &mut IndexMap<String, f64>,
    event: &[(String, f64)],
) -> Result<()> {
    for (i, (name, value)) in event.iter().enumerate() {
        if event[..i].iter().any(|(n, _)| n == name) {
            return Err(Error::Config(format!(
                "metric name '{name}' emitted twice in one event"
            )));
        }
        into.insert(name.clone(), *value);
    }
    Ok(())
}

/// Runs a full epoch over pre-built per-batch states: reset, process per
/// batch, then the final pass, returning every emitted name/value pair.
pub fn epoch_cycle(tree: &mut MetricTree, states: &[State]) -> Result<IndexMap<String, f64>> {
    tree.reset();
    let mut out = IndexMap::new();
    for state in states {
        let event = tree.process(state)?;
        merge_emissions(&mut out, &event)?;
    }
    let event = tree.process_final();
    merge_emissions(&mut out, &event)?;
    Ok(out)
}
