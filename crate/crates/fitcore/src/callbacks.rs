//! Lifecycle hooks and the built-in callback set.
//!
//! A [`Callback`] receives every hook the fitting loop fires together
//! with the mutable [`State`], and may alter the run by mutating entries
//! such as LOSS or STOP_TRAINING. Hook-bound closures ([`bind`],
//! [`add_to_loss`]) cover the common case of a single-purpose function;
//! the structs below cover persistence, early stopping, learning rate
//! decay, and logging.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use indexmap::IndexMap;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::state::{keys, State, StateValue};

/// Every point in the fitting lifecycle at which callbacks run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Hook {
    OnStart,
    OnStartEpoch,
    OnStartTraining,
    OnSample,
    OnForward,
    OnCriterion,
    OnBackward,
    OnStepTraining,
    OnEndTraining,
    OnStartValidation,
    OnSampleValidation,
    OnForwardValidation,
    OnCriterionValidation,
    OnStepValidation,
    OnEndValidation,
    OnEndEpoch,
    OnEnd,
    OnCheckpointSave,
    OnCheckpointLoad,
}

impl Hook {
    pub const ALL: [Hook; 19] = [
        Hook::OnStart,
        Hook::OnStartEpoch,
        Hook::OnStartTraining,
        Hook::OnSample,
        Hook::OnForward,
        Hook::OnCriterion,
        Hook::OnBackward,
        Hook::OnStepTraining,
        Hook::OnEndTraining,
        Hook::OnStartValidation,
        Hook::OnSampleValidation,
        Hook::OnForwardValidation,
        Hook::OnCriterionValidation,
        Hook::OnStepValidation,
        Hook::OnEndValidation,
        Hook::OnEndEpoch,
        Hook::OnEnd,
        Hook::OnCheckpointSave,
        Hook::OnCheckpointLoad,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Hook::OnStart => "on_start",
            Hook::OnStartEpoch => "on_start_epoch",
            Hook::OnStartTraining => "on_start_training",
            Hook::OnSample => "on_sample",
            Hook::OnForward => "on_forward",
            Hook::OnCriterion => "on_criterion",
            Hook::OnBackward => "on_backward",
            Hook::OnStepTraining => "on_step_training",
            Hook::OnEndTraining => "on_end_training",
            Hook::OnStartValidation => "on_start_validation",
            Hook::OnSampleValidation => "on_sample_validation",
            Hook::OnForwardValidation => "on_forward_validation",
            Hook::OnCriterionValidation => "on_criterion_validation",
            Hook::OnStepValidation => "on_step_validation",
            Hook::OnEndValidation => "on_end_validation",
            Hook::OnEndEpoch => "on_end_epoch",
            Hook::OnEnd => "on_end",
            Hook::OnCheckpointSave => "on_checkpoint_save",
            Hook::OnCheckpointLoad => "on_checkpoint_load",
        }
    }
}

impl std::fmt::Display for Hook {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A set of lifecycle hook handlers. `handle` is called for every hook
/// the loop fires; implementations match on the hooks they care about
/// and ignore the rest. `state_payload` is the callback's serializable
/// private state, persisted inside the trial checkpoint.
pub trait Callback {
    /// Stable identifier used to match persisted callback payloads.
    fn kind(&self) -> &'static str {
        "callback"
    }

    fn handle(&mut self, hook: Hook, state: &mut State) -> Result<()>;

    fn state_payload(&self) -> Option<Vec<u8>> {
        None
    }

    fn load_state_payload(&mut self, _payload: &[u8]) -> Result<()> {
        Ok(())
    }
}

/// Callbacks in insertion order; dispatch preserves that order for every
/// hook. An error from any callback aborts the dispatch immediately,
/// identifying the hook and the callback.
#[derive(Default)]
pub struct CallbackList {
    items: Vec<Box<dyn Callback>>,
}

impl CallbackList {
    pub fn new() -> CallbackList {
        CallbackList::default()
    }

    pub fn push(&mut self, callback: impl Callback + 'static) {
        self.items.push(Box::new(callback));
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn fire(&mut self, hook: Hook, state: &mut State) -> Result<()> {
        for (index, cb) in self.items.iter_mut().enumerate() {
            cb.handle(hook, state).map_err(|e| Error::Callback {
                hook,
                callback: format!("{}[{index}]", cb.kind()),
                source: Box::new(e),
            })?;
        }
        Ok(())
    }

    pub(crate) fn snapshot_payloads(&self) -> Vec<(String, Option<Vec<u8>>)> {
        self.items
            .iter()
            .map(|cb| (cb.kind().to_string(), cb.state_payload()))
            .collect()
    }

    pub(crate) fn restore_payloads(
        &mut self,
        records: &[(String, Option<Vec<u8>>)],
    ) -> Result<()> {
        if records.len() != self.items.len() {
            return Err(Error::LoadMismatch(format!(
                "record has {} callbacks, trial has {}",
                records.len(),
                self.items.len()
            )));
        }
        for (cb, (kind, _)) in self.items.iter().zip(records) {
            if cb.kind() != kind {
                return Err(Error::LoadMismatch(format!(
                    "callback kind '{}' in record, '{}' in trial",
                    kind,
                    cb.kind()
                )));
            }
        }
        for (cb, (_, payload)) in self.items.iter_mut().zip(records) {
            if let Some(bytes) = payload {
                cb.load_state_payload(bytes)?;
            }
        }
        Ok(())
    }
}

// ----- hook-bound functions -----

/// A callback that runs `f` at exactly one hook and nothing else — the
/// single-function style of callback definition.
pub struct BoundFn<F> {
    hook: Hook,
    f: F,
}

/// Binds a function of state to one hook.
pub fn bind<F>(hook: Hook, f: F) -> BoundFn<F>
where
    F: FnMut(&mut State) -> Result<()>,
{
    BoundFn { hook, f }
}

impl<F> Callback for BoundFn<F>
where
    F: FnMut(&mut State) -> Result<()>,
{
    fn kind(&self) -> &'static str {
        "bound_fn"
    }

    fn handle(&mut self, hook: Hook, state: &mut State) -> Result<()> {
        if hook == self.hook {
            (self.f)(state)
        } else {
            Ok(())
        }
    }
}

/// Adds the L2 norm of every model parameter to LOSS. Bind to
/// [`Hook::OnCriterion`] to regularize a fit:
///
/// the added term is `sum over parameters W of ||W||_2` (the norm, not
/// its square), and gradient flows through it into the parameters.
pub fn l2_weight_decay(state: &mut State) -> Result<()> {
    let model = state.get_model(&keys::MODEL)?;
    let mut loss = state.get_tensor(&keys::LOSS)?;
    for param in model.borrow().parameters() {
        loss = loss.add(&param.tensor().norm2())?;
    }
    state.put(&keys::LOSS, StateValue::Tensor(loss));
    Ok(())
}

/// A callback that adds the scalar returned by `f` to LOSS at
/// `on_criterion`, keeping the addition differentiable.
pub struct AddToLoss<F> {
    f: F,
}

pub fn add_to_loss<F>(f: F) -> AddToLoss<F>
where
    F: FnMut(&mut State) -> Result<Tensor>,
{
    AddToLoss { f }
}

impl<F> Callback for AddToLoss<F>
where
    F: FnMut(&mut State) -> Result<Tensor>,
{
    fn kind(&self) -> &'static str {
        "add_to_loss"
    }

    fn handle(&mut self, hook: Hook, state: &mut State) -> Result<()> {
        if hook != Hook::OnCriterion {
            return Ok(());
        }
        let term = (self.f)(state)?;
        if term.element_count() != 1 {
            return Err(Error::Contract(format!(
                "add_to_loss term must be scalar, got shape {}",
                term.shape()
            )));
        }
        let loss = state.get_tensor(&keys::LOSS)?;
        state.put(&keys::LOSS, StateValue::Tensor(loss.add(&term)?));
        Ok(())
    }
}

// ----- persistence -----

/// Whether the checkpointer saves unconditionally or tracks a monitored
/// metric.
#[derive(Debug, Clone)]
pub enum SaveMode {
    EveryEpoch,
    Best {
        monitor: String,
        direction: Direction,
    },
}

/// Improvement direction for monitored metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Min,
    Max,
}

impl Direction {
    fn improved(self, candidate: f64, incumbent: f64) -> bool {
        match self {
            Direction::Min => candidate < incumbent,
            Direction::Max => candidate > incumbent,
        }
    }
}

/// Requests a trial checkpoint at the end of each epoch, always or on
/// strict improvement of a monitored metric. `{epoch}` in the template
/// expands to the completed-epoch count.
pub struct Checkpointer {
    template: String,
    mode: SaveMode,
    best: Option<f64>,
}

pub fn checkpointer(path_template: impl Into<String>, mode: SaveMode) -> Checkpointer {
    Checkpointer {
        template: path_template.into(),
        mode,
        best: None,
    }
}

impl Callback for Checkpointer {
    fn kind(&self) -> &'static str {
        "checkpointer"
    }

    fn handle(&mut self, hook: Hook, state: &mut State) -> Result<()> {
        if hook != Hook::OnEndEpoch {
            return Ok(());
        }
        let epoch = state.get_count(&keys::EPOCH)?;
        let path = self.template.replace("{epoch}", &(epoch + 1).to_string());
        match &self.mode {
            SaveMode::EveryEpoch => state.request_checkpoint(path),
            SaveMode::Best { monitor, direction } => {
                let value = state.metrics()?.get(monitor).copied().ok_or_else(|| {
                    Error::Config(format!(
                        "checkpointer monitors '{monitor}', which is not in METRICS"
                    ))
                })?;
                let improved = self
                    .best
                    .is_none_or(|incumbent| direction.improved(value, incumbent));
                if improved {
                    self.best = Some(value);
                    state.request_checkpoint(path);
                }
            }
        }
        Ok(())
    }

    fn state_payload(&self) -> Option<Vec<u8>> {
        match self.mode {
            SaveMode::EveryEpoch => None,
            SaveMode::Best { .. } => Some(encode_opt_f64(self.best)),
        }
    }

    fn load_state_payload(&mut self, payload: &[u8]) -> Result<()> {
        self.best = decode_opt_f64(payload)?;
        Ok(())
    }
}

// ----- early stopping -----

/// Sets STOP_TRAINING after `patience` consecutive epochs without strict
/// improvement of the monitored metric (a patience of 0 stops at the
/// first non-improving epoch).
pub struct EarlyStopping {
    monitor: String,
    patience: usize,
    direction: Direction,
    best: Option<f64>,
    stale_epochs: usize,
}

pub fn early_stopping(
    monitor: impl Into<String>,
    patience: usize,
    direction: Direction,
) -> EarlyStopping {
    EarlyStopping {
        monitor: monitor.into(),
        patience,
        direction,
        best: None,
        stale_epochs: 0,
    }
}

impl Callback for EarlyStopping {
    fn kind(&self) -> &'static str {
        "early_stopping"
    }

    fn handle(&mut self, hook: Hook, state: &mut State) -> Result<()> {
        if hook != Hook::OnEndEpoch {
            return Ok(());
        }
        let value = state.metrics()?.get(&self.monitor).copied().ok_or_else(|| {
            Error::Config(format!(
                "early_stopping monitors '{}', which is not in METRICS",
                self.monitor
            ))
        })?;
        let improved = self
            .best
            .is_none_or(|incumbent| self.direction.improved(value, incumbent));
        if improved {
            self.best = Some(value);
            self.stale_epochs = 0;
        } else {
            self.stale_epochs += 1;
            if self.stale_epochs >= self.patience.max(1) {
                state.put(&keys::STOP_TRAINING, StateValue::Bool(true));
            }
        }
        Ok(())
    }

    fn state_payload(&self) -> Option<Vec<u8>> {
        let mut bytes = encode_opt_f64(self.best);
        bytes.extend_from_slice(&(self.stale_epochs as u64).to_le_bytes());
        Some(bytes)
    }

    fn load_state_payload(&mut self, payload: &[u8]) -> Result<()> {
        if payload.len() != 17 {
            return Err(Error::LoadMismatch(
                "early_stopping payload has wrong length".into(),
            ));
        }
        self.best = decode_opt_f64(&payload[..9])?;
        self.stale_epochs =
            u64::from_le_bytes(payload[9..17].try_into().unwrap()) as usize;
        Ok(())
    }
}

// ----- learning rate decay -----

/// Multiplies the optimizer learning rate by `factor` after every
/// `every` epochs.
pub struct LrDecay {
    factor: f64,
    every: usize,
}

pub fn lr_decay(factor: f64, every: usize) -> Result<LrDecay> {
    if factor <= 0.0 || factor.is_nan() {
        return Err(Error::Config(format!(
            "lr decay factor must be positive, got {factor}"
        )));
    }
    if every == 0 {
        return Err(Error::Config("lr decay interval must be at least 1".into()));
    }
    Ok(LrDecay { factor, every })
}

impl Callback for LrDecay {
    fn kind(&self) -> &'static str {
        "lr_decay"
    }

    fn handle(&mut self, hook: Hook, state: &mut State) -> Result<()> {
        if hook != Hook::OnEndEpoch {
            return Ok(());
        }
        let epoch = state.get_count(&keys::EPOCH)?;
        if (epoch + 1) % self.every == 0 {
            let optimizer = state.get_optimizer(&keys::OPTIMIZER)?;
            let mut opt = optimizer.borrow_mut();
            let lr = opt.learning_rate();
            opt.set_learning_rate(lr * self.factor);
        }
        Ok(())
    }
}

// ----- loggers -----

/// Writes metric rows to a CSV file: header `epoch,batch,<metric names
/// in METRICS insertion order>`, `\n` line endings, floats rendered
/// shortest-round-trip. One row per epoch end, or per training batch
/// when `per_batch` is set.
pub struct CsvLogger {
    path: PathBuf,
    per_batch: bool,
    writer: Option<BufWriter<File>>,
    columns: Option<Vec<String>>,
}

pub fn csv_logger(path: impl Into<PathBuf>, per_batch: bool) -> CsvLogger {
    CsvLogger {
        path: path.into(),
        per_batch,
        writer: None,
        columns: None,
    }
}

impl CsvLogger {
    fn open(&mut self) -> Result<()> {
        let file = File::create(&self.path).map_err(|source| Error::Io {
            path: self.path.clone(),
            source,
        })?;
        self.writer = Some(BufWriter::new(file));
        self.columns = None;
        Ok(())
    }

    fn write_row(
        &mut self,
        epoch: usize,
        batch: usize,
        metrics: &IndexMap<String, f64>,
    ) -> Result<()> {
        if self.writer.is_none() {
            self.open()?;
        }
        let io_err = |path: &PathBuf| {
            let path = path.clone();
            move |source| Error::Io { path, source }
        };
        if self.columns.is_none() {
            self.columns = Some(metrics.keys().cloned().collect());
            let writer = self.writer.as_mut().unwrap();
            let mut header = String::from("epoch,batch");
            for name in self.columns.as_ref().unwrap() {
                header.push(',');
                header.push_str(name);
            }
            header.push('\n');
            writer
                .write_all(header.as_bytes())
                .map_err(io_err(&self.path))?;
        }
        let mut row = format!("{epoch},{batch}");
        for name in self.columns.as_ref().unwrap() {
            row.push(',');
            if let Some(v) = metrics.get(name) {
                row.push_str(&v.to_string());
            }
        }
        row.push('\n');
        let writer = self.writer.as_mut().unwrap();
        writer.write_all(row.as_bytes()).map_err(io_err(&self.path))?;
        writer.flush().map_err(io_err(&self.path))?;
        Ok(())
    }
}

impl Callback for CsvLogger {
    fn kind(&self) -> &'static str {
        "csv_logger"
    }

    fn handle(&mut self, hook: Hook, state: &mut State) -> Result<()> {
        match hook {
            Hook::OnStart => self.open(),
            Hook::OnStepTraining if self.per_batch => {
                let epoch = state.get_count(&keys::EPOCH)? + 1;
                let batch = state.get_count(&keys::BATCH)?;
                let metrics = state.metrics()?.clone();
                self.write_row(epoch, batch, &metrics)
            }
            Hook::OnEndEpoch if !self.per_batch => {
                let epoch = state.get_count(&keys::EPOCH)? + 1;
                let batch = state.get_count(&keys::TRAIN_STEPS)?.saturating_sub(1);
                let metrics = state.metrics()?.clone();
                self.write_row(epoch, batch, &metrics)
            }
            _ => Ok(()),
        }
    }
}

/// Prints one line per epoch: `epoch {e}/{E} {name}:{value} ...` with
/// values at 4 significant digits.
#[derive(Default)]
pub struct ConsoleLogger;

pub fn console_logger() -> ConsoleLogger {
    ConsoleLogger
}

impl Callback for ConsoleLogger {
    fn kind(&self) -> &'static str {
        "console_logger"
    }

    fn handle(&mut self, hook: Hook, state: &mut State) -> Result<()> {
        if hook != Hook::OnEndEpoch {
            return Ok(());
        }
        let epoch = state.get_count(&keys::EPOCH)? + 1;
        let max_epochs = state.get_count(&keys::MAX_EPOCHS)?;
        let mut line = format!("epoch {epoch}/{max_epochs}");
        for (name, value) in state.metrics()? {
            line.push_str(&format!(" {name}:{}", format_sig(*value, 4)));
        }
        println!("{line}");
        Ok(())
    }
}

/// Rounds to `digits` significant digits and prints the shortest form.
pub(crate) fn format_sig(v: f64, digits: u32) -> String {
    if v == 0.0 || !v.is_finite() {
        return v.to_string();
    }
    let magnitude = v.abs().log10().floor() as i32;
    let factor = 10f64.powi(digits as i32 - 1 - magnitude);
    ((v * factor).round() / factor).to_string()
}

fn encode_opt_f64(v: Option<f64>) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(9);
    match v {
        Some(x) => {
            bytes.push(1);
            bytes.extend_from_slice(&x.to_bits().to_le_bytes());
        }
        None => {
            bytes.push(0);
            bytes.extend_from_slice(&[0; 8]);
        }
    }
    bytes
}

fn decode_opt_f64(bytes: &[u8]) -> Result<Option<f64>> {
    if bytes.len() < 9 {
        return Err(Error::LoadMismatch("payload too short".into()));
    }
    let bits = u64::from_le_bytes(bytes[1..9].try_into().unwrap());
    Ok(match bytes[0] {
        0 => None,
        _ => Some(f64::from_bits(bits)),
    })
}
