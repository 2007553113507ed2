//! End-to-end behavior of the fitting engine: hook order, resume,
//! validation purity, and the zero-base-loss contract.

use std::cell::RefCell;
use std::rc::Rc;

use fitcore::prelude::*;

/// y = x*w + b over column vectors.
struct Affine {
    w: Parameter,
    b: Parameter,
}

impl Affine {
    fn new(w0: f64, b0: f64) -> Affine {
        Affine {
            w: Parameter::new("w", Tensor::from_vec(vec![w0], [1, 1], true).unwrap())
                .unwrap(),
            b: Parameter::new("b", Tensor::from_vec(vec![b0], [1, 1], true).unwrap())
                .unwrap(),
        }
    }
}

impl Model for Affine {
    fn parameters(&self) -> Vec<Parameter> {
        vec![self.w.clone(), self.b.clone()]
    }

    fn forward(&mut self, x: &Tensor, _: Option<&mut State>) -> Result<Tensor> {
        let rows = x.shape().dims()[0];
        let bias = Tensor::ones([rows, 1]).matmul(self.b.tensor())?;
        x.matmul(self.w.tensor())?.add(&bias)
    }
}

struct Identity;

impl Model for Identity {
    fn parameters(&self) -> Vec<Parameter> {
        vec![Parameter::new("unused", Tensor::from_vec(vec![0.0], [1], true).unwrap())
            .unwrap()]
    }

    fn forward(&mut self, x: &Tensor, _: Option<&mut State>) -> Result<Tensor> {
        // keep the parameter in the graph with zero influence
        Ok(x.clone())
    }
}

fn col(values: &[f64]) -> Tensor {
    Tensor::from_vec(values.to_vec(), [values.len(), 1], false).unwrap()
}

fn batches(pairs: &[(&[f64], &[f64])]) -> VecGenerator {
    VecGenerator::new(
        pairs
            .iter()
            .map(|(x, y)| Batch::supervised(col(x), col(y)))
            .collect(),
    )
}

fn line_data(n_batches: usize) -> VecGenerator {
    // y = 2x + 1, exactly
    let pairs: Vec<Batch> = (0..n_batches)
        .map(|b| {
            let xs: Vec<f64> = (0..4).map(|i| (b * 4 + i) as f64 / 8.0 - 0.5).collect();
            let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x + 1.0).collect();
            Batch::supervised(col(&xs), col(&ys))
        })
        .collect();
    VecGenerator::new(pairs)
}

fn tracer(log: Rc<RefCell<Vec<&'static str>>>) -> impl Callback {
    struct Tracer(Rc<RefCell<Vec<&'static str>>>);
    impl Callback for Tracer {
        fn kind(&self) -> &'static str {
            "tracer"
        }
        fn handle(&mut self, hook: Hook, _: &mut State) -> Result<()> {
            self.0.borrow_mut().push(hook.name());
            Ok(())
        }
    }
    Tracer(log)
}

fn trial_on_line(model: Affine, lr: f64) -> Trial {
    let opt = Sgd::new(model.parameters(), lr, 0.0).unwrap();
    Trial::new(model, opt).with_criterion(Criterion::Mse)
}

#[test]
fn zero_epochs_fire_start_and_end_only() {
    let log = Rc::new(RefCell::new(Vec::new()));
    let mut trial = trial_on_line(Affine::new(0.0, 0.0), 0.1)
        .with_callback(tracer(log.clone()))
        .with_train_generator(line_data(2));
    let history = trial.run(0).unwrap();
    assert!(history.is_empty());
    assert_eq!(*log.borrow(), vec!["on_start", "on_end"]);
}

#[test]
fn single_batch_trace_matches_the_normative_order() {
    let log = Rc::new(RefCell::new(Vec::new()));
    let mut trial = trial_on_line(Affine::new(0.0, 0.0), 0.1)
        .with_callback(tracer(log.clone()))
        .with_train_generator(line_data(1));
    trial.run(1).unwrap();
    assert_eq!(
        *log.borrow(),
        vec![
            "on_start",
            "on_start_epoch",
            "on_start_training",
            "on_sample",
            "on_criterion",
            "on_backward",
            "on_step_training",
            "on_end_training",
            "on_end_epoch",
            "on_end",
        ]
    );
}

#[test]
fn run_without_train_generator_is_a_configuration_error() {
    let mut trial = trial_on_line(Affine::new(0.0, 0.0), 0.1);
    let msg = trial.run(1).unwrap_err().to_string();
    assert!(msg.contains("train generator"), "{msg}");
}

#[test]
fn reattaching_a_generator_replaces_the_previous_one() {
    let mut trial = trial_on_line(Affine::new(0.0, 0.0), 0.1)
        .with_metric_key("loss")
        .unwrap()
        .with_train_generator(line_data(5))
        .with_train_generator(line_data(2));
    trial.run(1).unwrap();
    // TRAIN_STEPS surfaced through the per-epoch history row count is not
    // visible here; consume the generator again and count batches.
    let history = trial.run(2).unwrap();
    assert_eq!(history.len(), 1);
}

#[test]
fn train_steps_equals_generator_batch_count() {
    let seen = Rc::new(RefCell::new(0usize));
    let seen2 = seen.clone();
    let probe = bind(Hook::OnEndEpoch, move |state: &mut State| {
        *seen2.borrow_mut() = state.get_count(&keys::TRAIN_STEPS)?;
        Ok(())
    });
    let mut trial = trial_on_line(Affine::new(0.0, 0.0), 0.1)
        .with_callback(probe)
        .with_train_generator(line_data(3));
    trial.run(1).unwrap();
    assert_eq!(*seen.borrow(), 3);
}

#[test]
fn early_stopping_cuts_a_ten_epoch_request_to_two() {
    // scripted non-improvement: loss is fed from a counter that rises
    let epoch = Rc::new(RefCell::new(0.0f64));
    let epoch2 = epoch.clone();
    let script = bind(Hook::OnEndEpoch, move |state: &mut State| {
        let mut v = epoch2.borrow_mut();
        *v += 1.0;
        state.metrics_mut()?.insert("probe".into(), *v);
        Ok(())
    });
    let mut trial = trial_on_line(Affine::new(0.0, 0.0), 0.1)
        .with_callback(script)
        .with_callback(early_stopping("probe", 0, Direction::Min))
        .with_train_generator(line_data(1));
    let history = trial.run(10).unwrap();
    assert_eq!(history.len(), 2);
}

#[test]
fn stop_training_prevents_further_epoch_starts() {
    let log = Rc::new(RefCell::new(Vec::new()));
    let stopper = bind(Hook::OnEndEpoch, |state: &mut State| {
        state.put(&keys::STOP_TRAINING, StateValue::Bool(true));
        Ok(())
    });
    let mut trial = trial_on_line(Affine::new(0.0, 0.0), 0.1)
        .with_callback(stopper)
        .with_callback(tracer(log.clone()))
        .with_train_generator(line_data(1));
    trial.run(5).unwrap();
    let starts = log.borrow().iter().filter(|h| **h == "on_start_epoch").count();
    assert_eq!(starts, 1);
}

#[test]
fn evaluate_fires_only_validation_hooks_and_is_repeatable() {
    let log = Rc::new(RefCell::new(Vec::new()));
    let mut trial = trial_on_line(Affine::new(0.5, 0.5), 0.1)
        .with_metric_key("loss")
        .unwrap()
        .with_callback(tracer(log.clone()))
        .with_train_generator(line_data(1))
        .with_val_generator(line_data(2));
    let first = trial.evaluate().unwrap();
    assert_eq!(
        *log.borrow(),
        vec![
            "on_start_validation",
            "on_sample_validation",
            "on_criterion_validation",
            "on_step_validation",
            "on_sample_validation",
            "on_criterion_validation",
            "on_step_validation",
            "on_end_validation",
        ]
    );
    assert!(first.contains_key("val_loss"));
    let second = trial.evaluate().unwrap();
    assert_eq!(first, second);
}

#[test]
fn evaluate_with_zero_batches_yields_empty_metrics() {
    let mut trial = trial_on_line(Affine::new(0.0, 0.0), 0.1)
        .with_metric_key("loss")
        .unwrap()
        .with_val_generator(VecGenerator::new(vec![]));
    assert!(trial.evaluate().unwrap().is_empty());
}

#[test]
fn predict_returns_inputs_for_the_identity_model() {
    let opt = Sgd::new(Identity.parameters(), 0.1, 0.0).unwrap();
    let mut trial = Trial::new(Identity, opt)
        .with_val_generator(batches(&[(&[1.0, 2.0], &[0.0, 0.0]), (&[3.0], &[0.0])]));
    let outputs = trial.predict().unwrap();
    assert_eq!(outputs.len(), 2);
    assert_eq!(outputs[0].values(), vec![1.0, 2.0]);
    assert_eq!(outputs[1].values(), vec![3.0]);
}

#[test]
fn predict_leaves_parameters_bit_identical() {
    let model = Affine::new(0.123456789, -0.987654321);
    let before: Vec<u64> = model
        .parameters()
        .iter()
        .flat_map(|p| p.tensor().values())
        .map(f64::to_bits)
        .collect();
    let opt = Sgd::new(model.parameters(), 0.1, 0.0).unwrap();
    let mut trial = Trial::new(model, opt).with_val_generator(line_data(3));
    trial.predict().unwrap();
    let model = trial.model();
    let after: Vec<u64> = model
        .borrow()
        .parameters()
        .iter()
        .flat_map(|p| p.tensor().values())
        .map(f64::to_bits)
        .collect();
    assert_eq!(before, after);
}

#[test]
fn zero_base_loss_leaves_parameters_unchanged() {
    let model = Affine::new(0.7, -0.3);
    let before: Vec<u64> = model
        .parameters()
        .iter()
        .flat_map(|p| p.tensor().values())
        .map(f64::to_bits)
        .collect();
    let opt = Sgd::new(model.parameters(), 0.5, 0.9).unwrap();
    // no criterion, no loss-touching callbacks
    let mut trial = Trial::new(model, opt).with_train_generator(line_data(4));
    trial.run(1).unwrap();
    let model = trial.model();
    let after: Vec<u64> = model
        .borrow()
        .parameters()
        .iter()
        .flat_map(|p| p.tensor().values())
        .map(f64::to_bits)
        .collect();
    assert_eq!(before, after);
}

#[test]
fn non_finite_loss_aborts_with_epoch_and_batch() {
    let poison = add_to_loss(|_: &mut State| Ok(Tensor::scalar(f64::NAN)));
    let mut trial = trial_on_line(Affine::new(0.0, 0.0), 0.1)
        .with_callback(poison)
        .with_train_generator(line_data(2));
    let msg = trial.run(1).unwrap_err().to_string();
    assert!(msg.contains("non-finite"), "{msg}");
    assert!(msg.contains("epoch 0") && msg.contains("batch 0"), "{msg}");
}

#[test]
fn state_dict_roundtrip_restores_predictions_bit_exactly() {
    let mut source = trial_on_line(Affine::new(0.0, 0.0), 0.1)
        .with_train_generator(line_data(3))
        .with_val_generator(line_data(1));
    source.run(5).unwrap();
    let record = source.state_dict();
    let expected: Vec<Vec<u64>> = source
        .predict()
        .unwrap()
        .iter()
        .map(|t| t.values().iter().map(|v| v.to_bits()).collect())
        .collect();

    let mut target = trial_on_line(Affine::new(9.0, 9.0), 0.1)
        .with_train_generator(line_data(3))
        .with_val_generator(line_data(1));
    target.load_state_dict(&record).unwrap();
    assert_eq!(target.completed_epochs(), 5);
    let got: Vec<Vec<u64>> = target
        .predict()
        .unwrap()
        .iter()
        .map(|t| t.values().iter().map(|v| v.to_bits()).collect())
        .collect();
    assert_eq!(expected, got);
}

#[test]
fn interrupted_run_resumes_bit_exactly() {
    let full = {
        let mut trial = trial_on_line(Affine::new(0.0, 0.0), 0.1)
            .with_train_generator(line_data(4));
        trial.run(6).unwrap();
        trial.state_dict()
    };

    let split = {
        let mut first = trial_on_line(Affine::new(0.0, 0.0), 0.1)
            .with_train_generator(line_data(4));
        first.run(3).unwrap();
        let middle = first.state_dict();

        let mut second = trial_on_line(Affine::new(5.0, 5.0), 0.1)
            .with_train_generator(line_data(4));
        second.load_state_dict(&middle).unwrap();
        second.run(6).unwrap();
        second.state_dict()
    };

    assert_eq!(
        fitcore::persistence::to_bytes(&full),
        fitcore::persistence::to_bytes(&split)
    );
}

#[test]
fn load_with_renamed_parameter_names_the_mismatch() {
    let mut source = trial_on_line(Affine::new(0.0, 0.0), 0.1)
        .with_train_generator(line_data(1));
    source.run(1).unwrap();
    let mut record = source.state_dict();
    for entry in &mut record.parameters {
        if entry.0 == "w" {
            entry.0 = "weights".into();
        }
    }
    for entry in &mut record.optimizer.velocity {
        if entry.0 == "w" {
            entry.0 = "weights".into();
        }
    }
    let mut target = trial_on_line(Affine::new(0.0, 0.0), 0.1);
    let msg = target.load_state_dict(&record).unwrap_err().to_string();
    assert!(msg.contains("'w'"), "{msg}");
}

#[test]
fn two_identical_runs_produce_identical_history() {
    let run = || {
        let mut trial = trial_on_line(Affine::new(0.25, -0.5), 0.05)
            .with_metric_key("loss")
            .unwrap()
            .with_train_generator(line_data(4))
            .with_val_generator(line_data(2));
        trial.run(4).unwrap()
    };
    let a = run();
    let b = run();
    assert_eq!(a.len(), b.len());
    for (ra, rb) in a.iter().zip(b.iter()) {
        for ((ka, va), (kb, vb)) in ra.iter().zip(rb.iter()) {
            assert_eq!(ka, kb);
            assert_eq!(va.to_bits(), vb.to_bits());
        }
    }
}

#[test]
fn linear_regression_converges_within_two_hundred_epochs() {
    let mut trial = trial_on_line(Affine::new(0.0, 0.0), 0.1)
        .with_metric_key("loss")
        .unwrap()
        .with_train_generator(line_data(4));
    let history = trial.run(200).unwrap();
    let final_loss = history.last().unwrap()["loss"];
    assert!(final_loss < 1e-3, "loss {final_loss}");
}

#[test]
fn validation_metrics_carry_the_val_prefix() {
    let mut trial = trial_on_line(Affine::new(0.0, 0.0), 0.1)
        .with_metric_key("loss")
        .unwrap()
        .with_train_generator(line_data(2))
        .with_val_generator(line_data(2));
    let history = trial.run(1).unwrap();
    let row = &history[0];
    assert!(row.contains_key("loss"));
    assert!(row.contains_key("loss_std"));
    assert!(row.contains_key("val_loss"));
    assert!(row.contains_key("val_loss_std"));
}
