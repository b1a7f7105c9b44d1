use statetrace::eval::score_sequences;
use statetrace::nn::{fine_tune, train, tiny_config, FineTuneOptions, LayerSelector, ConvSpec, ModelConfig, Variant};
use statetrace::simgen::{generate_dataset, GenConfig};
use statetrace::trace::{pad_and_mask, Dataset};
use statetrace::Checkpoint32;

fn flights(count: usize, seed: u64) -> Dataset {
    generate_dataset(&GenConfig {
        count,
        seed,
        ..GenConfig::default()
    })
    .unwrap()
}

fn small(epochs: usize) -> ModelConfig {
    ModelConfig {
        n_states: 11,
        max_epochs: epochs,
        batch_size: 4,
        learning_rate: 3e-3,
        ..tiny_config(Variant::Hybrid)
    }
}

fn accuracy(ck: &Checkpoint32, ds: &Dataset) -> f64 {
    let pred = ck.predict_dataset(ds).unwrap();
    let (mut hit, mut total) = (0usize, 0usize);
    for (f, p) in ds.flights().iter().zip(&pred) {
        let truth = f.labels();
        for (a, b) in truth.valid_labels().iter().zip(p.labels()) {
            hit += usize::from(a == b);
            total += 1;
        }
    }
    hit as f64 / total as f64
}

#[test]
fn overfits_ten_flights() {
    let ds = flights(10, 11);
    // full-batch steps keep every class in each loss evaluation
    let ck = train::<f32>(
        &ModelConfig {
            conv_stack: [3, 5, 10].map(|kernel| ConvSpec { filters: 32, kernel }).to_vec(),
            gru_stack: vec![64],
            dense_hidden: 64,
            learning_rate: 5e-3,
            batch_size: 10,
            max_epochs: 150,
            ..ModelConfig::desk()
        },
        &ds,
        None,
    )
    .unwrap();
    let acc = accuracy(&ck, &ds);
    assert!(acc >= 0.99, "training accuracy {acc}");
}

#[test]
fn first_epoch_lowers_the_loss() {
    let ck = train::<f32>(&small(1), &flights(8, 2), None).unwrap();
    let h = &ck.history;
    assert!(h.epochs[0].train_loss < h.initial_train_loss, "{h:?}");
}

#[test]
fn same_seed_same_first_epoch_loss() {
    let ds = flights(6, 4);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let run = || pool.install(|| train::<f32>(&small(1), &ds, None).unwrap().history.epochs[0].train_loss);
    assert_eq!(run().to_bits(), run().to_bits());
}

#[test]
fn fine_tune_leaves_frozen_layers_alone() {
    let src = train::<f32>(&small(1), &flights(6, 5), None).unwrap();
    let target = generate_dataset(&GenConfig {
        count: 5,
        ..GenConfig::variant_b()
    })
    .unwrap();
    let names = src.model.layer_names().to_vec();
    let tuned = fine_tune(
        &src,
        &target,
        None,
        &FineTuneOptions {
            epochs: 3,
            ..FineTuneOptions::default()
        },
    )
    .unwrap();
    for ((info, a), b) in src.model.tensor_info().iter().zip(src.model.tensors()).zip(tuned.model.tensors()) {
        let same = a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
        let trainable = info.layer.starts_with("dense");
        assert_eq!(same, !trainable, "{} in {names:?}", info.layer);
    }

    let frozen = fine_tune(
        &src,
        &target,
        None,
        &FineTuneOptions {
            selector: LayerSelector::FreezeAll,
            epochs: 2,
            ..FineTuneOptions::default()
        },
    )
    .unwrap();
    assert_eq!(frozen.model, src.model);
}

#[test]
fn padding_changes_neither_predictions_nor_scores() {
    let ds = flights(3, 6);
    let ck = train::<f32>(&small(1), &ds, None).unwrap();
    let mut truth = Vec::new();
    let mut plain = Vec::new();
    let mut padded = Vec::new();
    let mut padded_truth = Vec::new();
    for (i, f) in ds.flights().iter().enumerate() {
        let p = ck.predict_states(&f.trace).unwrap();
        let (tr, seq) = pad_and_mask(&f.trace, &f.labels(), f.trace.len() + 37 * (i + 1), ds.catalog()).unwrap();
        let q = ck.predict_masked(&tr, seq.mask()).unwrap();
        assert_eq!(&q.labels()[..f.trace.len()], p.labels());
        truth.push(f.labels());
        plain.push(p);
        padded_truth.push(seq.clone());
        padded.push(statetrace::trace::LabelSequence::new(q.labels().to_vec(), seq.mask().to_vec()).unwrap());
    }
    let a = score_sequences(&truth, &plain, 11, ds.sample_period(), &[1.0, 5.0]).unwrap();
    let b = score_sequences(&padded_truth, &padded, 11, ds.sample_period(), &[1.0, 5.0]).unwrap();
    assert_eq!(a, b);
}
