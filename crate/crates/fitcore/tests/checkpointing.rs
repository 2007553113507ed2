//! Checkpoint callbacks driving real saves through a running trial.

use std::cell::RefCell;
use std::rc::Rc;

use fitcore::prelude::*;

struct Line {
    w: Parameter,
}

impl Line {
    fn new(w0: f64) -> Line {
        Line {
            w: Parameter::new("w", Tensor::from_vec(vec![w0], [1, 1], true).unwrap())
                .unwrap(),
        }
    }
}

impl Model for Line {
    fn parameters(&self) -> Vec<Parameter> {
        vec![self.w.clone()]
    }

    fn forward(&mut self, x: &Tensor, _: Option<&mut State>) -> Result<Tensor> {
        x.matmul(self.w.tensor())
    }
}

fn data() -> VecGenerator {
    let x = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], [4, 1], false).unwrap();
    let y = Tensor::from_vec(vec![3.0, 6.0, 9.0, 12.0], [4, 1], false).unwrap();
    VecGenerator::new(vec![Batch::supervised(x, y)])
}

fn line_trial(lr: f64) -> Trial {
    let model = Line::new(0.0);
    let opt = Sgd::new(model.parameters(), lr, 0.0).unwrap();
    Trial::new(model, opt).with_criterion(Criterion::Mse)
}

#[test]
fn every_epoch_mode_writes_one_file_per_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let template = dir.path().join("epoch_{epoch}.ckpt");
    let mut trial = line_trial(0.01)
        .with_callback(checkpointer(template.to_str().unwrap(), SaveMode::EveryEpoch))
        .with_train_generator(data());
    trial.run(3).unwrap();
    for epoch in 1..=3 {
        let path = dir.path().join(format!("epoch_{epoch}.ckpt"));
        assert!(path.exists(), "missing {}", path.display());
    }
    let record = fitcore::persistence::load(dir.path().join("epoch_3.ckpt")).unwrap();
    assert_eq!(record.completed_epochs, 3);
}

#[test]
fn best_mode_keeps_the_epoch_two_weights() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("best.ckpt");

    // scripted accuracies 0.5, 0.9, 0.7 fed in ahead of the checkpointer
    let script = [0.5, 0.9, 0.7];
    let feeder = bind(Hook::OnEndEpoch, move |state: &mut State| {
        let epoch = state.get_count(&keys::EPOCH)?;
        state.metrics_mut()?.insert("acc".into(), script[epoch]);
        Ok(())
    });

    // snapshot the weights visible at each epoch end
    let snapshots: Rc<RefCell<Vec<Vec<u64>>>> = Rc::new(RefCell::new(Vec::new()));
    let snapshots2 = snapshots.clone();
    let snapper = bind(Hook::OnEndEpoch, move |state: &mut State| {
        let model = state.get_model(&keys::MODEL)?;
        let bits = model.borrow().parameters()[0]
            .tensor()
            .values()
            .iter()
            .map(|v| v.to_bits())
            .collect();
        snapshots2.borrow_mut().push(bits);
        Ok(())
    });

    let mut trial = line_trial(0.01)
        .with_callback(feeder)
        .with_callback(snapper)
        .with_callback(checkpointer(
            path.to_str().unwrap(),
            SaveMode::Best {
                monitor: "acc".into(),
                direction: Direction::Max,
            },
        ))
        .with_train_generator(data());
    trial.run(3).unwrap();

    let record = fitcore::persistence::load(&path).unwrap();
    assert_eq!(record.completed_epochs, 2);
    let stored: Vec<u64> = record.parameters[0].2.iter().map(|v| v.to_bits()).collect();
    assert_eq!(stored, snapshots.borrow()[1]);

    // reload into a trial with a matching callback roster and compare
    // predictions against the epoch-2 weights
    let mut restored = line_trial(0.01)
        .with_callback(bind(Hook::OnEndEpoch, |_: &mut State| Ok(())))
        .with_callback(bind(Hook::OnEndEpoch, |_: &mut State| Ok(())))
        .with_callback(checkpointer(
            path.to_str().unwrap(),
            SaveMode::Best {
                monitor: "acc".into(),
                direction: Direction::Max,
            },
        ))
        .with_val_generator(data());
    restored.load_state_dict(&record).unwrap();
    let prediction = restored.predict().unwrap()[0].values();
    let w2 = f64::from_bits(snapshots.borrow()[1][0]);
    for (p, x) in prediction.iter().zip([1.0, 2.0, 3.0, 4.0]) {
        assert_eq!(p.to_bits(), (w2 * x).to_bits());
    }
}

#[test]
fn checkpoint_hooks_fire_once_per_save() {
    let dir = tempfile::tempdir().unwrap();
    let template = dir.path().join("e{epoch}.ckpt");
    let saves = Rc::new(RefCell::new(0usize));
    let saves2 = saves.clone();
    let counter = bind(Hook::OnCheckpointSave, move |_: &mut State| {
        *saves2.borrow_mut() += 1;
        Ok(())
    });
    let mut trial = line_trial(0.01)
        .with_callback(counter)
        .with_callback(checkpointer(template.to_str().unwrap(), SaveMode::EveryEpoch))
        .with_train_generator(data());
    trial.run(4).unwrap();
    assert_eq!(*saves.borrow(), 4);
}

#[test]
fn unwritable_checkpoint_path_aborts_the_run() {
    let mut trial = line_trial(0.01)
        .with_callback(checkpointer("/nonexistent-dir/x.ckpt", SaveMode::EveryEpoch))
        .with_train_generator(data());
    let msg = trial.run(1).unwrap_err().to_string();
    assert!(msg.contains("i/o error"), "{msg}");
}

#[test]
fn best_mode_value_never_worsens_across_saves() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("best.ckpt");
    let script = [5.0, 3.0, 4.0, 2.0, 2.5, 1.0];
    let feeder = bind(Hook::OnEndEpoch, move |state: &mut State| {
        let epoch = state.get_count(&keys::EPOCH)?;
        state.metrics_mut()?.insert("probe".into(), script[epoch]);
        Ok(())
    });
    let monitored: Rc<RefCell<Vec<f64>>> = Rc::new(RefCell::new(Vec::new()));
    let monitored2 = monitored.clone();
    let path2 = path.clone();
    let audit = bind(Hook::OnStartEpoch, move |_: &mut State| {
        if path2.exists() {
            // decode the stored best from the checkpointer payload
            let record = fitcore::persistence::load(&path2)?;
            let payload = record.callbacks.iter().find_map(|(k, p)| {
                (k == "checkpointer").then(|| p.clone().unwrap())
            });
            let bytes = payload.unwrap();
            let bits = u64::from_le_bytes(bytes[1..9].try_into().unwrap());
            monitored2.borrow_mut().push(f64::from_bits(bits));
        }
        Ok(())
    });
    let mut trial = line_trial(0.01)
        .with_callback(feeder)
        .with_callback(audit)
        .with_callback(checkpointer(
            path.to_str().unwrap(),
            SaveMode::Best {
                monitor: "probe".into(),
                direction: Direction::Min,
            },
        ))
        .with_train_generator(data());
    trial.run(6).unwrap();
    let seen = monitored.borrow();
    assert!(!seen.is_empty());
    for pair in seen.windows(2) {
        assert!(pair[1] <= pair[0], "monitored value worsened: {seen:?}");
    }
}
