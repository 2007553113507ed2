//! The mutable state map threaded through every callback and metric.
//!
//! Keys are generated, never looked up by label: two keys made from the
//! same label are distinct, so independently written extensions cannot
//! collide. The reserved keys used by the fitting loop live in [`keys`].

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::path::PathBuf;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use indexmap::IndexMap;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::optim::Sgd;
use crate::trial::Model;

static NEXT_KEY_ID: AtomicU64 = AtomicU64::new(0);

/// A collision-free state identifier. Equality and hashing use the
/// generated id only; the label exists for error messages and logs.
#[derive(Clone, Debug)]
pub struct StateKey {
    id: u64,
    label: Arc<str>,
}

impl StateKey {
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn label(&self) -> &str {
        &self.label
    }
}

impl PartialEq for StateKey {
    fn eq(&self, other: &Self) -> bool {
        self.id == other.id
    }
}

impl Eq for StateKey {}

impl std::hash::Hash for StateKey {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.id.hash(state);
    }
}

impl fmt::Display for StateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.label, self.id)
    }
}

/// Returns a fresh key, never equal to any previously returned key, even
/// for an identical (or empty) label.
pub fn state_key(label: &str) -> StateKey {
    StateKey {
        id: NEXT_KEY_ID.fetch_add(1, Ordering::Relaxed),
        label: Arc::from(label),
    }
}

/// Shared handle onto the model being fitted.
pub type ModelHandle = Rc<RefCell<dyn Model>>;

/// Shared handle onto the optimizer driving the fit.
pub type OptimizerHandle = Rc<RefCell<Sgd>>;

/// The closed set of kinds a state entry can hold. Callback-private data
/// goes into `Payload` as opaque bytes.
#[derive(Clone)]
pub enum StateValue {
    Tensor(Tensor),
    Float(f64),
    Count(usize),
    Bool(bool),
    Text(String),
    Model(ModelHandle),
    Optimizer(OptimizerHandle),
    Metrics(IndexMap<String, f64>),
    Payload(Vec<u8>),
}

impl StateValue {
    pub fn kind(&self) -> &'static str {
        match self {
            StateValue::Tensor(_) => "tensor",
            StateValue::Float(_) => "float",
            StateValue::Count(_) => "count",
            StateValue::Bool(_) => "bool",
            StateValue::Text(_) => "text",
            StateValue::Model(_) => "model",
            StateValue::Optimizer(_) => "optimizer",
            StateValue::Metrics(_) => "metrics",
            StateValue::Payload(_) => "payload",
        }
    }
}

impl fmt::Debug for StateValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StateValue::Tensor(t) => write!(f, "Tensor({t:?})"),
            StateValue::Float(v) => write!(f, "Float({v})"),
            StateValue::Count(v) => write!(f, "Count({v})"),
            StateValue::Bool(v) => write!(f, "Bool({v})"),
            StateValue::Text(v) => write!(f, "Text({v:?})"),
            StateValue::Model(_) => write!(f, "Model(..)"),
            StateValue::Optimizer(_) => write!(f, "Optimizer(..)"),
            StateValue::Metrics(m) => write!(f, "Metrics({m:?})"),
            StateValue::Payload(p) => write!(f, "Payload({} bytes)", p.len()),
        }
    }
}

macro_rules! typed_get {
    ($fn_name:ident, $variant:ident, $ty:ty, $conv:expr) => {
        pub fn $fn_name(&self, key: &StateKey) -> Result<$ty> {
            match self.get(key)? {
                StateValue::$variant(v) => Ok($conv(v)),
                other => Err(Error::KindMismatch {
                    label: key.label().to_string(),
                    expected: stringify!($variant),
                    found: other.kind(),
                }),
            }
        }
    };
}

/// The heterogeneous store the fitting loop hands to callbacks and
/// metrics. One `State` lives for one `run`/`evaluate`/`predict`
/// invocation and is confined to the fitting thread.
#[derive(Default)]
pub struct State {
    entries: HashMap<u64, StateValue>,
    checkpoint_requests: Vec<PathBuf>,
}

impl State {
    pub fn new() -> State {
        State::default()
    }

    /// Inserts or overwrites the entry under `key`.
    pub fn put(&mut self, key: &StateKey, value: StateValue) {
        self.entries.insert(key.id(), value);
    }

    pub fn contains(&self, key: &StateKey) -> bool {
        self.entries.contains_key(&key.id())
    }

    pub fn get(&self, key: &StateKey) -> Result<&StateValue> {
        self.entries.get(&key.id()).ok_or_else(|| Error::MissingKey {
            label: key.label().to_string(),
        })
    }

    pub fn get_mut(&mut self, key: &StateKey) -> Result<&mut StateValue> {
        self.entries
            .get_mut(&key.id())
            .ok_or_else(|| Error::MissingKey {
                label: key.label().to_string(),
            })
    }

    pub fn remove(&mut self, key: &StateKey) -> Result<StateValue> {
        self.entries.remove(&key.id()).ok_or_else(|| Error::MissingKey {
            label: key.label().to_string(),
        })
    }

    /// Removes the entry if present; silently ignores absence.
    pub fn discard(&mut self, key: &StateKey) {
        self.entries.remove(&key.id());
    }

    typed_get!(get_tensor, Tensor, Tensor, |v: &Tensor| v.clone());
    typed_get!(get_float, Float, f64, |v: &f64| *v);
    typed_get!(get_count, Count, usize, |v: &usize| *v);
    typed_get!(get_bool, Bool, bool, |v: &bool| *v);
    typed_get!(get_text, Text, String, |v: &String| v.clone());
    typed_get!(get_model, Model, ModelHandle, |v: &ModelHandle| v.clone());
    typed_get!(get_optimizer, Optimizer, OptimizerHandle, |v: &OptimizerHandle| v
        .clone());
    typed_get!(get_payload, Payload, Vec<u8>, |v: &Vec<u8>| v.clone());

    pub fn metrics(&self) -> Result<&IndexMap<String, f64>> {
        match self.get(&keys::METRICS)? {
            StateValue::Metrics(m) => Ok(m),
            other => Err(Error::KindMismatch {
                label: keys::METRICS.label().to_string(),
                expected: "Metrics",
                found: other.kind(),
            }),
        }
    }

    pub fn metrics_mut(&mut self) -> Result<&mut IndexMap<String, f64>> {
        match self.get_mut(&keys::METRICS)? {
            StateValue::Metrics(m) => Ok(m),
            other => Err(Error::KindMismatch {
                label: keys::METRICS.label().to_string(),
                expected: "Metrics",
                found: other.kind(),
            }),
        }
    }

    /// Asks the trial to write a checkpoint at this path once the current
    /// hook dispatch finishes. Used by the checkpointer callback.
    pub fn request_checkpoint(&mut self, path: impl Into<PathBuf>) {
        self.checkpoint_requests.push(path.into());
    }

    /// Drains pending checkpoint requests in arrival order.
    pub fn take_checkpoint_requests(&mut self) -> Vec<PathBuf> {
        std::mem::take(&mut self.checkpoint_requests)
    }
}

/// The reserved key catalogue, created once per process.
pub mod keys {
    use std::sync::LazyLock;

    use super::{state_key, StateKey};

    macro_rules! reserved {
        ($($name:ident => $label:literal),* $(,)?) => {
            $(pub static $name: LazyLock<StateKey> =
                LazyLock::new(|| state_key($label));)*
        };
    }

    reserved! {
        MODEL => "model",
        OPTIMIZER => "optimizer",
        CRITERION => "criterion",
        LOSS => "loss",
        X => "x",
        Y_TRUE => "y_true",
        Y_PRED => "y_pred",
        EPOCH => "epoch",
        MAX_EPOCHS => "max_epochs",
        BATCH => "batch",
        TRAIN_STEPS => "train_steps",
        METRICS => "metrics",
        STOP_TRAINING => "stop_training",
        DATA_PHASE => "data_phase",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn same_label_yields_distinct_keys() {
        let a = state_key("g_loss");
        let b = state_key("g_loss");
        assert_ne!(a, b);
        assert_eq!(a.label(), b.label());
    }

    #[test]
    fn empty_label_is_fine() {
        let k = state_key("");
        assert_eq!(k.label(), "");
    }

    #[test]
    fn ten_thousand_keys_are_pairwise_distinct() {
        let ids: HashSet<u64> = (0..10_000).map(|_| state_key("k").id()).collect();
        assert_eq!(ids.len(), 10_000);
    }

    #[test]
    fn put_get_roundtrip() {
        let key = state_key("loss");
        let mut state = State::new();
        state.put(&key, StateValue::Float(0.0));
        assert_eq!(state.get_float(&key).unwrap(), 0.0);
    }

    #[test]
    fn get_of_absent_key_names_the_label() {
        let state = State::new();
        let msg = state.get(&state_key("warmup")).unwrap_err().to_string();
        assert!(msg.contains("warmup"), "{msg}");
    }

    #[test]
    fn colliding_labels_stay_isolated() {
        let a = state_key("shared");
        let b = state_key("shared");
        let mut state = State::new();
        state.put(&a, StateValue::Count(7));
        assert!(matches!(state.get(&b), Err(Error::MissingKey { .. })));
        state.put(&b, StateValue::Count(9));
        assert_eq!(state.get_count(&a).unwrap(), 7);
        state.remove(&a).unwrap();
        assert_eq!(state.get_count(&b).unwrap(), 9);
    }

    #[test]
    fn kind_mismatch_names_both_kinds() {
        let key = state_key("flag");
        let mut state = State::new();
        state.put(&key, StateValue::Bool(true));
        let msg = state.get_float(&key).unwrap_err().to_string();
        assert!(msg.contains("Float") && msg.contains("bool"), "{msg}");
    }

    #[test]
    fn read_modify_write_composes() {
        let mut state = State::new();
        state.put(&keys::LOSS, StateValue::Float(0.0));
        for _ in 0..100 {
            let v = state.get_float(&keys::LOSS).unwrap();
            state.put(&keys::LOSS, StateValue::Float(v + 1.0));
        }
        assert_eq!(state.get_float(&keys::LOSS).unwrap(), 100.0);
    }

    #[test]
    fn reserved_keys_are_singletons() {
        assert_eq!(keys::MODEL.id(), keys::MODEL.id());
        assert_ne!(*keys::MODEL, *keys::LOSS);
    }

    #[test]
    fn checkpoint_requests_drain_in_order() {
        let mut state = State::new();
        state.request_checkpoint("a.ckpt");
        state.request_checkpoint("b.ckpt");
        let drained = state.take_checkpoint_requests();
        assert_eq!(drained, vec![PathBuf::from("a.ckpt"), PathBuf::from("b.ckpt")]);
        assert!(state.take_checkpoint_requests().is_empty());
    }
}
