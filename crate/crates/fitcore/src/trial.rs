//! The fitting engine: binds a model, an optimizer, an optional
//! criterion, metrics, callbacks, and data generators, and drives them
//! through the hook lifecycle.
//!
//! The training loop for `run` is, normatively:
//!
//! ```text
//! on_start
//! per epoch:
//!   on_start_epoch; on_start_training; reset metrics
//!   per train batch:
//!     on_sample (X, Y_TRUE in state)
//!     forward -> Y_PRED; LOSS = criterion or differentiable zero
//!     on_criterion; metrics.process
//!     zero_grad; backward(LOSS); on_backward
//!     optimizer.step; on_step_training
//!   on_end_training; metrics.process_final -> METRICS
//!   with a validation generator:
//!     on_start_validation
//!     per val batch (no gradients, no step):
//!       on_sample_validation; forward; criterion
//!       on_criterion_validation; metrics.process; on_step_validation
//!     on_end_validation; metrics.process_final -> METRICS (val_ prefix)
//!   on_end_epoch; pending checkpoints are written; stop if STOP_TRAINING
//! on_end
//! ```
//!
//! A non-finite LOSS aborts the run naming the epoch and batch. With no
//! criterion, the base loss per batch is a differentiable zero, so
//! callbacks can build the entire loss.

use indexmap::IndexMap;

use crate::autodiff::{zero_grad, Parameter, Shape, Tensor};
use crate::callbacks::{Callback, CallbackList, Hook};
use crate::error::{Error, Result};
use crate::metrics::{build_default, merge_emissions, MetricTree};
use crate::optim::{Sgd, SgdState};
use crate::persistence;
use crate::state::{keys, ModelHandle, OptimizerHandle, State, StateValue};

use std::cell::RefCell;
use std::rc::Rc;

/// A differentiable program under fit. `forward` receives the state only
/// when the trial was built with `pass_state`; models that do not write
/// intermediate results can ignore it.
pub trait Model {
    fn parameters(&self) -> Vec<Parameter>;
    fn forward(&mut self, input: &Tensor, state: Option<&mut State>) -> Result<Tensor>;
}

/// Built-in base loss functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Criterion {
    Mse,
    BinaryCrossEntropy,
    Hinge,
}

impl Criterion {
    pub fn name(&self) -> &'static str {
        match self {
            Criterion::Mse => "mse",
            Criterion::BinaryCrossEntropy => "binary_cross_entropy",
            Criterion::Hinge => "hinge",
        }
    }

    pub fn apply(&self, y_pred: &Tensor, y_true: &Tensor) -> Result<Tensor> {
        match self {
            Criterion::Mse => mse(y_pred, y_true),
            Criterion::BinaryCrossEntropy => binary_cross_entropy(y_pred, y_true),
            Criterion::Hinge => hinge(y_pred, y_true),
        }
    }
}

fn check_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    Ok(())
}

/// Mean squared error over all elements.
pub fn mse(y_pred: &Tensor, y_true: &Tensor) -> Result<Tensor> {
    check_same_shape("mse", y_pred, y_true)?;
    let diff = y_pred.sub(y_true)?;
    Ok(diff.mul(&diff)?.mean())
}

/// Probabilities are clamped into `[BCE_EPSILON, 1 - BCE_EPSILON]`, which
/// bounds the loss and keeps early, badly calibrated predictions from
/// producing infinities.
pub const BCE_EPSILON: f64 = 1e-7;

/// Binary cross-entropy between predicted probabilities and 0/1 targets,
/// averaged over all elements.
pub fn binary_cross_entropy(y_pred: &Tensor, y_true: &Tensor) -> Result<Tensor> {
    check_same_shape("binary_cross_entropy", y_pred, y_true)?;
    let p = y_pred.clamp(BCE_EPSILON, 1.0 - BCE_EPSILON);
    let ones = Tensor::ones(p.shape());
    let pos = y_true.mul(&p.log())?;
    let neg = ones.sub(y_true)?.mul(&ones.sub(&p)?.log())?;
    Ok(pos.add(&neg)?.mean().neg())
}

/// Hinge loss `mean(max(0, 1 - y * f(x)))` with labels in {-1, +1}.
pub fn hinge(y_pred: &Tensor, y_true: &Tensor) -> Result<Tensor> {
    check_same_shape("hinge", y_pred, y_true)?;
    let ones = Tensor::ones(y_pred.shape());
    Ok(ones.sub(&y_true.mul(y_pred)?)?.relu().mean())
}

/// One step of data: an input batch and an optional target batch.
#[derive(Clone)]
pub struct Batch {
    pub input: Tensor,
    pub target: Option<Tensor>,
}

impl Batch {
    pub fn supervised(input: Tensor, target: Tensor) -> Batch {
        Batch {
            input,
            target: Some(target),
        }
    }

    pub fn unsupervised(input: Tensor) -> Batch {
        Batch {
            input,
            target: None,
        }
    }
}

/// A finite, restartable sequence of batches. Restarting must yield the
/// same number of batches.
pub trait BatchGenerator {
    fn num_batches(&self) -> usize;
    fn restart(&mut self);
    fn next_batch(&mut self) -> Option<Batch>;
}

/// Batches held in memory, replayed identically every epoch.
pub struct VecGenerator {
    batches: Vec<Batch>,
    cursor: usize,
}

impl VecGenerator {
    pub fn new(batches: Vec<Batch>) -> VecGenerator {
        VecGenerator { batches, cursor: 0 }
    }
}

impl BatchGenerator for VecGenerator {
    fn num_batches(&self) -> usize {
        self.batches.len()
    }

    fn restart(&mut self) {
        self.cursor = 0;
    }

    fn next_batch(&mut self) -> Option<Batch> {
        let batch = self.batches.get(self.cursor).cloned();
        if batch.is_some() {
            self.cursor += 1;
        }
        batch
    }
}

/// Per-epoch metric history: one map per completed epoch, training and
/// validation merged with validation names under a `val_` prefix.
pub type History = Vec<IndexMap<String, f64>>;

/// Everything `state_dict` captures: model parameters by name, optimizer
/// state, per-callback payloads, and the completed-epoch counter.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialStateRecord {
    pub completed_epochs: u64,
    pub parameters: Vec<(String, Shape, Vec<f64>)>,
    pub optimizer: SgdState,
    pub callbacks: Vec<(String, Option<Vec<u8>>)>,
}

/// The fitting engine. See the module docs for the loop it runs.
pub struct Trial {
    model: ModelHandle,
    optimizer: OptimizerHandle,
    criterion: Option<Criterion>,
    metrics: Vec<MetricTree>,
    callbacks: CallbackList,
    pass_state: bool,
    train_gen: Option<Box<dyn BatchGenerator>>,
    val_gen: Option<Box<dyn BatchGenerator>>,
    completed_epochs: usize,
}

impl Trial {
    pub fn new(model: impl Model + 'static, optimizer: Sgd) -> Trial {
        Trial::new_shared(Rc::new(RefCell::new(model)), optimizer)
    }

    /// Builds a trial over an externally shared model handle, letting the
    /// caller keep typed access to the model during and after the fit.
    pub fn new_shared(model: ModelHandle, optimizer: Sgd) -> Trial {
        Trial {
            model,
            optimizer: Rc::new(RefCell::new(optimizer)),
            criterion: None,
            metrics: Vec::new(),
            callbacks: CallbackList::new(),
            pass_state: false,
            train_gen: None,
            val_gen: None,
            completed_epochs: 0,
        }
    }

    pub fn with_criterion(mut self, criterion: Criterion) -> Trial {
        self.criterion = Some(criterion);
        self
    }

    /// Adds the registered default metric tree for `key`.
    pub fn with_metric_key(mut self, key: &str) -> Result<Trial> {
        self.metrics.push(build_default(key)?);
        Ok(self)
    }

    pub fn with_metric_tree(mut self, tree: MetricTree) -> Trial {
        self.metrics.push(tree);
        self
    }

    pub fn with_callback(mut self, callback: impl Callback + 'static) -> Trial {
        self.callbacks.push(callback);
        self
    }

    /// When set, `forward` receives the mutable state as its second
    /// argument; models must opt in to see it.
    pub fn with_pass_state(mut self, pass_state: bool) -> Trial {
        self.pass_state = pass_state;
        self
    }

    /// Attaches (or replaces) the training data source.
    pub fn with_train_generator(mut self, gen: impl BatchGenerator + 'static) -> Trial {
        self.train_gen = Some(Box::new(gen));
        self
    }

    /// Attaches (or replaces) the validation data source.
    pub fn with_val_generator(mut self, gen: impl BatchGenerator + 'static) -> Trial {
        self.val_gen = Some(Box::new(gen));
        self
    }

    pub fn model(&self) -> ModelHandle {
        self.model.clone()
    }

    pub fn optimizer(&self) -> OptimizerHandle {
        self.optimizer.clone()
    }

    /// Number of epochs completed over the trial's lifetime, including
    /// epochs restored via [`Trial::load_state_dict`].
    pub fn completed_epochs(&self) -> usize {
        self.completed_epochs
    }

    fn fresh_state(&self, max_epochs: usize) -> State {
        let mut state = State::new();
        state.put(&keys::MODEL, StateValue::Model(self.model.clone()));
        state.put(&keys::OPTIMIZER, StateValue::Optimizer(self.optimizer.clone()));
        if let Some(criterion) = &self.criterion {
            state.put(&keys::CRITERION, StateValue::Text(criterion.name().into()));
        }
        state.put(&keys::EPOCH, StateValue::Count(self.completed_epochs));
        state.put(&keys::MAX_EPOCHS, StateValue::Count(max_epochs));
        state.put(&keys::BATCH, StateValue::Count(0));
        state.put(&keys::TRAIN_STEPS, StateValue::Count(0));
        state.put(&keys::METRICS, StateValue::Metrics(IndexMap::new()));
        state.put(&keys::STOP_TRAINING, StateValue::Bool(false));
        state.put(&keys::DATA_PHASE, StateValue::Text("train".into()));
        state
    }

    fn load_batch(state: &mut State, batch: &Batch, index: usize) {
        state.put(&keys::BATCH, StateValue::Count(index));
        state.put(&keys::X, StateValue::Tensor(batch.input.clone()));
        match &batch.target {
            Some(t) => state.put(&keys::Y_TRUE, StateValue::Tensor(t.clone())),
            None => state.discard(&keys::Y_TRUE),
        }
    }

    /// Forward pass plus base loss; Y_PRED and LOSS end up in state.
    fn forward_and_loss(&self, state: &mut State) -> Result<()> {
        let x = state.get_tensor(&keys::X)?;
        let y_pred = {
            let mut model = self.model.borrow_mut();
            let state_arg = if self.pass_state { Some(&mut *state) } else { None };
            model.forward(&x, state_arg)?
        };
        state.put(&keys::Y_PRED, StateValue::Tensor(y_pred.clone()));
        let loss = match &self.criterion {
            Some(criterion) => {
                let y_true = state.get_tensor(&keys::Y_TRUE)?;
                criterion.apply(&y_pred, &y_true)?
            }
            None => Tensor::scalar(0.0),
        };
        state.put(&keys::LOSS, StateValue::Tensor(loss));
        Ok(())
    }

    fn check_finite(state: &State, epoch: usize, batch: usize) -> Result<Tensor> {
        let loss = state.get_tensor(&keys::LOSS)?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                batch,
                value,
            });
        }
        Ok(loss)
    }

    fn metrics_step(
        trees: &mut [MetricTree],
        state: &mut State,
        prefix: Option<&str>,
    ) -> Result<()> {
        let mut event = Vec::new();
        for tree in trees.iter_mut() {
            event.extend(tree.process(state)?);
        }
        apply_prefix(&mut event, prefix);
        merge_emissions(state.metrics_mut()?, &event)
    }

    fn metrics_final(
        trees: &mut [MetricTree],
        state: &mut State,
        prefix: Option<&str>,
    ) -> Result<()> {
        let mut event = Vec::new();
        for tree in trees.iter_mut() {
            event.extend(tree.process_final());
        }
        apply_prefix(&mut event, prefix);
        merge_emissions(state.metrics_mut()?, &event)
    }

    /// Fits for up to `epochs` total epochs, continuing from the
    /// completed-epoch counter (which a loaded checkpoint restores).
    /// Returns one history record per epoch completed by this call.
    pub fn run(&mut self, epochs: usize) -> Result<History> {
        let mut train = self.train_gen.take().ok_or_else(|| {
            Error::Config("run requires a train generator".into())
        })?;
        let mut val = self.val_gen.take();
        let result = self.run_inner(train.as_mut(), val.as_deref_mut(), epochs);
        self.train_gen = Some(train);
        self.val_gen = val;
        result
    }

    fn run_inner(
        &mut self,
        train: &mut (dyn BatchGenerator + 'static),
        mut val: Option<&mut (dyn BatchGenerator + 'static)>,
        epochs: usize,
    ) -> Result<History> {
        let mut state = self.fresh_state(epochs);
        let mut history = History::new();

        self.callbacks.fire(Hook::OnStart, &mut state)?;
        for epoch in self.completed_epochs..epochs {
            state.put(&keys::EPOCH, StateValue::Count(epoch));
            state.put(&keys::DATA_PHASE, StateValue::Text("train".into()));
            self.callbacks.fire(Hook::OnStartEpoch, &mut state)?;
            self.callbacks.fire(Hook::OnStartTraining, &mut state)?;
            for tree in &mut self.metrics {
                tree.reset();
            }
            state.metrics_mut()?.clear();

            train.restart();
            let mut batch_index = 0;
            while let Some(batch) = train.next_batch() {
                Self::load_batch(&mut state, &batch, batch_index);
                self.callbacks.fire(Hook::OnSample, &mut state)?;
                self.forward_and_loss(&mut state)?;
                self.callbacks.fire(Hook::OnCriterion, &mut state)?;
                let loss = Self::check_finite(&state, epoch, batch_index)?;
                Self::metrics_step(&mut self.metrics, &mut state, None)?;
                zero_grad(&self.model.borrow().parameters());
                loss.backward()?;
                self.callbacks.fire(Hook::OnBackward, &mut state)?;
                self.optimizer.borrow_mut().step()?;
                self.callbacks.fire(Hook::OnStepTraining, &mut state)?;
                batch_index += 1;
            }
            state.put(&keys::TRAIN_STEPS, StateValue::Count(batch_index));
            self.callbacks.fire(Hook::OnEndTraining, &mut state)?;
            Self::metrics_final(&mut self.metrics, &mut state, None)?;

            if let Some(val_gen) = val.as_deref_mut() {
                state.put(&keys::DATA_PHASE, StateValue::Text("validation".into()));
                self.callbacks.fire(Hook::OnStartValidation, &mut state)?;
                for tree in &mut self.metrics {
                    tree.reset();
                }
                val_gen.restart();
                let mut val_index = 0;
                while let Some(batch) = val_gen.next_batch() {
                    Self::load_batch(&mut state, &batch, val_index);
                    self.callbacks.fire(Hook::OnSampleValidation, &mut state)?;
                    self.forward_and_loss(&mut state)?;
                    self.callbacks
                        .fire(Hook::OnCriterionValidation, &mut state)?;
                    Self::check_finite(&state, epoch, val_index)?;
                    Self::metrics_step(&mut self.metrics, &mut state, Some("val_"))?;
                    self.callbacks.fire(Hook::OnStepValidation, &mut state)?;
                    val_index += 1;
                }
                self.callbacks.fire(Hook::OnEndValidation, &mut state)?;
                Self::metrics_final(&mut self.metrics, &mut state, Some("val_"))?;
            }

            self.callbacks.fire(Hook::OnEndEpoch, &mut state)?;
            self.completed_epochs = epoch + 1;
            self.write_pending_checkpoints(&mut state)?;
            history.push(state.metrics()?.clone());
            if state.get_bool(&keys::STOP_TRAINING)? {
                break;
            }
        }
        self.callbacks.fire(Hook::OnEnd, &mut state)?;
        Ok(history)
    }

    fn write_pending_checkpoints(&mut self, state: &mut State) -> Result<()> {
        let requests = state.take_checkpoint_requests();
        for path in requests {
            self.callbacks.fire(Hook::OnCheckpointSave, state)?;
            let record = self.state_dict();
            persistence::save(&record, &path)?;
        }
        Ok(())
    }

    /// One pass over the validation generator firing only the
    /// validation-phase hooks: no gradients, no parameter updates.
    /// Returns the epoch-end metrics (under their `val_` names).
    pub fn evaluate(&mut self) -> Result<IndexMap<String, f64>> {
        let mut val = self.val_gen.take().ok_or_else(|| {
            Error::Config("evaluate requires a validation generator".into())
        })?;
        let result = self.evaluate_inner(val.as_mut());
        self.val_gen = Some(val);
        result
    }

    fn evaluate_inner(
        &mut self,
        gen: &mut dyn BatchGenerator,
    ) -> Result<IndexMap<String, f64>> {
        let mut state = self.fresh_state(self.completed_epochs);
        state.put(&keys::DATA_PHASE, StateValue::Text("validation".into()));
        self.callbacks.fire(Hook::OnStartValidation, &mut state)?;
        for tree in &mut self.metrics {
            tree.reset();
        }
        gen.restart();
        let mut index = 0;
        while let Some(batch) = gen.next_batch() {
            Self::load_batch(&mut state, &batch, index);
            self.callbacks.fire(Hook::OnSampleValidation, &mut state)?;
            self.forward_and_loss(&mut state)?;
            self.callbacks.fire(Hook::OnCriterionValidation, &mut state)?;
            Self::check_finite(&state, self.completed_epochs, index)?;
            Self::metrics_step(&mut self.metrics, &mut state, Some("val_"))?;
            self.callbacks.fire(Hook::OnStepValidation, &mut state)?;
            index += 1;
        }
        self.callbacks.fire(Hook::OnEndValidation, &mut state)?;
        Self::metrics_final(&mut self.metrics, &mut state, Some("val_"))?;
        Ok(state.metrics()?.clone())
    }

    /// Forward passes over the validation generator, in batch order,
    /// firing no hooks and touching no parameter. Outputs are detached.
    pub fn predict(&mut self) -> Result<Vec<Tensor>> {
        let mut val = self.val_gen.take().ok_or_else(|| {
            Error::Config("predict requires a validation generator".into())
        })?;
        let result = self.predict_inner(val.as_mut());
        self.val_gen = Some(val);
        result
    }

    fn predict_inner(&mut self, gen: &mut dyn BatchGenerator) -> Result<Vec<Tensor>> {
        let mut state = self.fresh_state(self.completed_epochs);
        state.put(&keys::DATA_PHASE, StateValue::Text("inference".into()));
        gen.restart();
        let mut outputs = Vec::new();
        let mut index = 0;
        while let Some(batch) = gen.next_batch() {
            Self::load_batch(&mut state, &batch, index);
            let x = state.get_tensor(&keys::X)?;
            let y_pred = {
                let mut model = self.model.borrow_mut();
                let state_arg = if self.pass_state { Some(&mut state) } else { None };
                model.forward(&x, state_arg)?
            };
            outputs.push(y_pred.detach());
            index += 1;
        }
        Ok(outputs)
    }

    /// Captures model parameters, optimizer state, callback payloads, and
    /// the completed-epoch counter.
    pub fn state_dict(&self) -> TrialStateRecord {
        let parameters = self
            .model
            .borrow()
            .parameters()
            .iter()
            .map(|p| (p.name().to_string(), p.tensor().shape(), p.tensor().values()))
            .collect();
        TrialStateRecord {
            completed_epochs: self.completed_epochs as u64,
            parameters,
            optimizer: self.optimizer.borrow().state(),
            callbacks: self.callbacks.snapshot_payloads(),
        }
    }

    /// Restores a record captured from a compatible trial: same parameter
    /// names and shapes, same callback count and kinds. Restoration is
    /// bit-exact, and a following `run` resumes from the restored epoch
    /// counter.
    pub fn load_state_dict(&mut self, record: &TrialStateRecord) -> Result<()> {
        let params = self.model.borrow().parameters();
        let mut staged: Vec<(&Parameter, &Vec<f64>)> = Vec::with_capacity(params.len());
        for param in &params {
            let (_, shape, values) = record
                .parameters
                .iter()
                .find(|(name, _, _)| name == param.name())
                .ok_or_else(|| {
                    Error::LoadMismatch(format!(
                        "parameter '{}' not in record",
                        param.name()
                    ))
                })?;
            if *shape != param.tensor().shape() {
                return Err(Error::LoadMismatch(format!(
                    "parameter '{}' has shape {} in record, {} in model",
                    param.name(),
                    shape,
                    param.tensor().shape()
                )));
            }
            staged.push((param, values));
        }
        if record.parameters.len() != params.len() {
            let extra = record
                .parameters
                .iter()
                .find(|(name, _, _)| !params.iter().any(|p| p.name() == name))
                .map(|(name, _, _)| name.clone())
                .unwrap_or_default();
            return Err(Error::LoadMismatch(format!(
                "record parameter '{extra}' not in model"
            )));
        }
        self.optimizer.borrow_mut().load_state(&record.optimizer)?;
        self.callbacks.restore_payloads(&record.callbacks)?;
        for (param, values) in staged {
            param.tensor().set_values(values.clone());
            param.tensor().clear_grad();
        }
        self.completed_epochs = record.completed_epochs as usize;
        let mut state = self.fresh_state(self.completed_epochs);
        self.callbacks.fire(Hook::OnCheckpointLoad, &mut state)?;
        Ok(())
    }
}

fn apply_prefix(event: &mut [(String, f64)], prefix: Option<&str>) {
    if let Some(prefix) = prefix {
        for (name, _) in event.iter_mut() {
            *name = format!("{prefix}{name}");
        }
    }
}
