use ambienc_core::array::QuantizedGeometry;
use ambienc_nn::checkpoint;
use ambienc_nn::{train_loop, BatchProvider, InMemory, Network, NetworkConfig, NnError, Tensor, TrainConfig, TrainExample};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_config() -> NetworkConfig {
    NetworkConfig {
        mics: 2,
        order: 0,
        fft: 14,
        hop: 7,
        enc_channels: vec![2, 3],
        bottleneck_channels: 4,
        dec_channels: vec![3, 2],
        geom_channels: 3,
        padded_shape: (8, 8),
        ..NetworkConfig::default()
    }
}

fn examples<T: ambienc_nn::Real>(n: usize, seed: u64) -> Vec<TrainExample<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| TrainExample {
            id: format!("ex{i}"),
            x: Tensor::randn(&[4, 8, 6], 1.0, &mut rng),
            geometry: QuantizedGeometry {
                indices: vec![[i as u8, 3, 4], [20, 21, (i * 2) as u8]],
            },
            target: Tensor::randn(&[2, 8, 6], 1.0, &mut rng),
        })
        .collect()
}

fn hyper(lr: f64, steps: usize) -> TrainConfig {
    TrainConfig {
        lr,
        batch: 3,
        steps,
        seed: 4,
        log_every: 0,
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let mut net: Network<f32> = Network::new(tiny_config(), 1).unwrap();
    let before = net.params().clone();
    let mut provider = InMemory::new(examples(5, 1), 2).unwrap();
    let trace = train_loop(&mut net, &mut provider, &hyper(0.0, 6), |_, _| {}).unwrap();
    assert_eq!(trace.losses.len(), 6);
    for id in before.ids() {
        assert_eq!(net.params().value(id), before.value(id), "{}", before.name(id));
    }
}

#[test]
fn training_is_deterministic_given_the_seed() {
    let run = || {
        let mut net: Network<f32> = Network::new(tiny_config(), 3).unwrap();
        let mut provider = InMemory::new(examples(5, 7), 2).unwrap();
        let trace = train_loop(&mut net, &mut provider, &hyper(1e-2, 8), |_, _| {}).unwrap();
        (net.into_params(), trace)
    };
    let (p1, t1) = run();
    let (p2, t2) = run();
    assert_eq!(t1, t2);
    assert_eq!(p1, p2);
}

#[test]
fn training_reduces_the_loss_on_a_tiny_problem() {
    let mut net: Network<f64> = Network::new(
        NetworkConfig {
            dropout_enc: 0.0,
            dropout_dec: 0.0,
            ..tiny_config()
        },
        3,
    )
    .unwrap();
    let data = examples(2, 9);
    let before: f64 = data.iter().map(|e| net.loss(&e.x, &e.geometry, &e.target).unwrap()).sum();
    let mut provider = InMemory::new(data.clone(), 1).unwrap();
    let cfg = TrainConfig {
        batch: 2,
        ..hyper(1e-2, 150)
    };
    train_loop(&mut net, &mut provider, &cfg, |_, _| {}).unwrap();
    let after: f64 = data.iter().map(|e| net.loss(&e.x, &e.geometry, &e.target).unwrap()).sum();
    assert!(after < 0.8 * before, "{before} -> {after}");
}

#[test]
fn non_finite_loss_aborts_with_the_step() {
    let mut data = examples::<f32>(2, 1);
    data[1].target.data[5] = f32::NAN;
    let mut net: Network<f32> = Network::new(tiny_config(), 1).unwrap();
    let mut provider = InMemory::new(data, 0).unwrap();
    let cfg = TrainConfig {
        batch: 1,
        ..hyper(1e-3, 10)
    };
    let mut seen = Vec::new();
    let err = train_loop(&mut net, &mut provider, &cfg, |s, _| seen.push(s)).unwrap_err();
    let NnError::NonFiniteLoss { step } = err else {
        panic!("unexpected error {err}");
    };
    assert_eq!(seen.len(), step);
    assert!(step < 2);
}

#[test]
fn invalid_hyperparameters_are_rejected() {
    let mut net: Network<f32> = Network::new(tiny_config(), 1).unwrap();
    let mut provider = InMemory::new(examples(2, 1), 0).unwrap();
    let cfg = TrainConfig {
        batch: 0,
        ..hyper(1e-3, 1)
    };
    assert!(matches!(train_loop(&mut net, &mut provider, &cfg, |_, _| {}), Err(NnError::Config(_))));
    assert!(InMemory::<f32>::new(Vec::new(), 0).is_err());
}

#[test]
fn in_memory_batches_visit_every_example_once_per_epoch() {
    let mut p = InMemory::new(examples::<f32>(7, 1), 5).unwrap();
    let mut ids: Vec<String> = Vec::new();
    for step in 0..7 {
        ids.extend(p.batch(step, 2).unwrap().iter().map(|e| e.id.clone()));
    }
    for epoch in ids.chunks(7) {
        let mut e = epoch.to_vec();
        e.sort();
        e.dedup();
        assert_eq!(e.len(), 7);
    }
    let mut q = InMemory::new(examples::<f32>(7, 1), 5).unwrap();
    let again: Vec<String> = (0..7).flat_map(|s| q.batch(s, 2).unwrap()).map(|e| e.id.clone()).collect();
    assert_eq!(ids, again);
}

#[test]
fn loss_trace_csv() {
    let trace = ambienc_nn::LossTrace {
        losses: vec![0.5, 0.25],
    };
    assert_eq!(trace.to_csv(), "step,loss\n1,0.5\n2,0.25\n");
    assert_eq!(trace.start_end(1), Some((0.5, 0.25)));
}

#[test]
fn checkpoint_round_trip() {
    let mut net: Network<f32> = Network::new(tiny_config(), 2).unwrap();
    let mut provider = InMemory::new(examples(3, 2), 1).unwrap();
    train_loop(&mut net, &mut provider, &hyper(1e-3, 2), |_, _| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let extra = serde_json::json!({"run": "unit", "steps": 2});
    checkpoint::save(&path, &net, &extra).unwrap();
    let (loaded, meta) = checkpoint::load::<f32>(&path).unwrap();
    assert_eq!(meta, extra);
    assert_eq!(loaded.config(), net.config());
    assert_eq!(loaded.params(), net.params());
    assert_eq!(loaded.params().step(), 2);

    let (wide, _) = checkpoint::load::<f64>(&path).unwrap();
    for id in net.params().ids() {
        let a = &net.params().value(id).data;
        let b = &wide.params().value(id).data;
        assert!(a.iter().zip(b).all(|(&x, &y)| x as f64 == y));
    }
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let net: Network<f64> = Network::new(tiny_config(), 2).unwrap();
    let bytes = checkpoint::to_bytes(&net, &serde_json::Value::Null).unwrap();
    let path = std::path::Path::new("mem");
    assert!(checkpoint::from_bytes::<f64>(&bytes, path).is_ok());
    let mut wrong_magic = bytes.clone();
    wrong_magic[0] = b'X';
    assert!(matches!(checkpoint::from_bytes::<f64>(&wrong_magic, path), Err(NnError::Checkpoint { .. })));
    assert!(matches!(
        checkpoint::from_bytes::<f64>(&bytes[..bytes.len() - 3], path),
        Err(NnError::Checkpoint { .. })
    ));
    let mut extended = bytes.clone();
    extended.push(0);
    assert!(matches!(checkpoint::from_bytes::<f64>(&extended, path), Err(NnError::Checkpoint { .. })));
}

#[test]
fn overfit_preset_halves_the_loss() {
    use ambienc_core::dataset::{
        build_dataset, ingest_sources, BatchLoader, DatasetConfig, LoaderOptions, Split, SplitPlan, Variant,
    };
    use std::sync::Arc;

    let dir = tempfile::tempdir().unwrap();
    let mut dcfg = DatasetConfig::desk(4);
    dcfg.train = SplitPlan {
        scenes: 4,
        arrays_per_scene: 2,
        source_counts: vec![1],
    };
    dcfg.val = SplitPlan {
        scenes: 1,
        arrays_per_scene: 1,
        source_counts: vec![1],
    };
    dcfg.eval = dcfg.val.clone();
    dcfg.train_array_pool = 8;
    dcfg.variants = vec![Variant::Dry];
    let sources = ingest_sources(None, dcfg.sample_rate, dcfg.seed, &dcfg.synthetic).unwrap();
    let (manifest, _) = build_dataset(&dcfg, &sources, dir.path()).unwrap();
    let mut opts = LoaderOptions::new(Split::Train, 4);
    opts.variants = vec![Variant::Dry];
    opts.shuffle = false;
    let mut loader = BatchLoader::new(dir.path(), Arc::new(manifest), opts).unwrap();
    let mut data = Vec::new();
    while let Some(batch) = loader.next_batch(4).unwrap() {
        data.extend(batch.iter().map(TrainExample::<f32>::from_example));
    }
    assert_eq!(data.len(), 8);

    let mut net: Network<f32> = Network::new(NetworkConfig::desk(), 4).unwrap();
    assert_eq!(net.config().enc_channels, vec![8, 16, 32, 64]);
    let mean_loss = |net: &Network<f32>| {
        data.iter().map(|e| net.loss(&e.x, &e.geometry, &e.target).unwrap()).sum::<f64>() / data.len() as f64
    };
    let before = mean_loss(&net);
    let mut provider = InMemory::new(data.clone(), 4).unwrap();
    let cfg = TrainConfig {
        lr: 1e-3,
        batch: 1,
        steps: 500,
        seed: 4,
        log_every: 0,
    };
    let trace = train_loop(&mut net, &mut provider, &cfg, |_, _| {}).unwrap();
    let after = mean_loss(&net);
    println!("loss {before:.5} -> {after:.5}, trace {:?}", trace.start_end(8));
    assert!(after <= 0.5 * before, "{before} -> {after}");
}
