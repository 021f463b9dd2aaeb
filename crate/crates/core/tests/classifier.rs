use adhd_eeg::classifier::{ClassifierError, ModelConfig, ResNet, TrainConfig};
use adhd_eeg::eeg_io::Label;
use adhd_eeg::pipeline::{Pipeline, PipelineConfig};
use adhd_eeg::scalogram::Scalogram;
use adhd_eeg::synth::{synth_dataset, SynthConfig};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::SplitMix64;

fn quarter() -> ModelConfig {
    ModelConfig::default().with_width_factor(0.25)
}

/// Gaussian noise planes; ADHD samples get a raised block on four channels.
fn separable_set(n: usize, seed: u64) -> Vec<Scalogram> {
    let mut rng = SplitMix64::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let label = if i % 2 == 0 { Label::Adhd } else { Label::Control };
            let mut values = Array3::from_shape_simple_fn((19, 64, 100), || rng.sample::<f32, _>(StandardNormal));
            if label == Label::Adhd {
                for c in 0..4 {
                    values.slice_mut(ndarray::s![c, 20..36, ..]).mapv_inplace(|v| v + 1.0);
                }
            }
            Scalogram {
                subject_id: format!("s{i:02}"),
                label: Some(label),
                segment_index: 0,
                values,
                freqs_hz: vec![0.0; 64],
            }
        })
        .collect()
}

/// Plain logistic regression by gradient descent on the flattened tensors;
/// returns its training accuracy.
fn logistic_regression_accuracy(set: &[Scalogram], iterations: usize) -> f64 {
    let x: Vec<Vec<f64>> = set.iter().map(|s| s.values.iter().map(|&v| v as f64).collect()).collect();
    let y: Vec<f64> = set.iter().map(|s| s.label.unwrap().as_index() as f64).collect();
    let d = x[0].len();
    let (mut w, mut b) = (vec![0.0; d], 0.0);
    let lr = 1e-3;
    for _ in 0..iterations {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for (xi, &yi) in x.iter().zip(&y) {
            let z: f64 = xi.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + b;
            let err = 1.0 / (1.0 + (-z).exp()) - yi;
            for (g, &v) in gw.iter_mut().zip(xi) {
                *g += err * v;
            }
            gb += err;
        }
        for (wj, g) in w.iter_mut().zip(&gw) {
            *wj -= lr * g;
        }
        b -= lr * gb;
    }
    let correct = x
        .iter()
        .zip(&y)
        .filter(|(xi, &yi)| {
            let z: f64 = xi.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + b;
            (z > 0.0) == (yi == 1.0)
        })
        .count();
    correct as f64 / x.len() as f64
}

#[test]
fn separable_set_is_fit_within_ten_epochs() {
    let set = separable_set(64, 17);
    assert_eq!(logistic_regression_accuracy(&set, 50), 1.0, "oracle says the set is not separable");
    let mut net = ResNet::new(quarter(), 0).unwrap();
    let log = net.train(&set, &TrainConfig::default()).unwrap();
    assert_eq!(log.len(), 10);
    assert!(log.iter().any(|r| r.train_acc == 1.0), "{log:?}");
}

#[test]
fn same_seed_same_loss_curve() {
    let set = separable_set(16, 3);
    let cfg = TrainConfig { epochs: 2, batch_size: 8, ..TrainConfig::default() };
    let run = || {
        let mut net = ResNet::new(quarter(), 5).unwrap();
        let log = net.train(&set, &cfg).unwrap();
        (log, net.to_wgts())
    };
    let (a, wa) = run();
    let (b, wb) = run();
    assert_eq!(a, b);
    assert_eq!(wa, wb);
}

#[test]
fn degenerate_training_sets_are_rejected() {
    let mut net = ResNet::new(quarter(), 0).unwrap();
    let cfg = TrainConfig::default();
    assert!(matches!(net.train(&[], &cfg), Err(ClassifierError::EmptyDataset)));
    let mut one_class = separable_set(4, 1);
    for s in &mut one_class {
        s.label = Some(Label::Adhd);
    }
    assert!(matches!(net.train(&one_class, &cfg), Err(ClassifierError::SingleClassDataset)));
    let mut unlabelled = separable_set(4, 1);
    unlabelled[2].label = None;
    assert!(matches!(net.train(&unlabelled, &cfg), Err(ClassifierError::Unlabelled(_))));
}

#[test]
fn loss_falls_over_first_epochs_on_planted_data() {
    let recs = synth_dataset(&SynthConfig::default().with_subjects(8)).unwrap();
    let set = Pipeline::new(PipelineConfig::default()).unwrap().dataset(&recs).unwrap();
    assert_eq!(set.len(), 64);
    let mut net = ResNet::new(quarter(), 0).unwrap();
    let log = net.train(&set, &TrainConfig { epochs: 3, ..TrainConfig::default() }).unwrap();
    assert!(log[1].mean_loss < log[0].mean_loss && log[2].mean_loss < log[1].mean_loss, "{log:?}");
}

#[test]
fn saved_weights_reload_identically() {
    let set = separable_set(8, 9);
    let mut net = ResNet::new(quarter(), 2).unwrap();
    net.train(&set, &TrainConfig { epochs: 1, ..TrainConfig::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.wgts");
    net.save_wgts(&path).unwrap();
    let back = ResNet::load_wgts(quarter(), &path).unwrap();
    let views: Vec<_> = set.iter().map(|s| s.values.view()).collect();
    assert_eq!(back.predict_proba(&views).unwrap(), net.predict_proba(&views).unwrap());
}
