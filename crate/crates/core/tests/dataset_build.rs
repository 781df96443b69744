use std::collections::BTreeSet;
use std::fs;
use std::sync::Arc;

use ambienc_core::dataset::{
    array_audio_path, build_dataset, ingest_sources, reference_path, BatchLoader, DatasetConfig,
    DatasetManifest, LoaderOptions, Split, SplitPlan, SyntheticConfig, Variant, MANIFEST_FILE,
};
use ambienc_core::dsp::read_wav;
use ambienc_core::scene::Simulator;

fn small_config(seed: u64) -> DatasetConfig {
    let mut cfg = DatasetConfig::desk(seed);
    cfg.train = SplitPlan { scenes: 2, arrays_per_scene: 2, source_counts: vec![1] };
    cfg.val = SplitPlan { scenes: 1, arrays_per_scene: 1, source_counts: vec![1] };
    cfg.eval = SplitPlan { scenes: 2, arrays_per_scene: 2, source_counts: vec![1, 2] };
    cfg.train_array_pool = 3;
    cfg.synthetic = SyntheticConfig { clips: 20, seconds: 3.0 };
    cfg
}

#[test]
fn build_serve_and_rebuild() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = small_config(7);
    let sources = ingest_sources(None, cfg.sample_rate, cfg.seed, &cfg.synthetic).unwrap();
    let t0 = std::time::Instant::now();
    let (manifest, stats) = build_dataset(&cfg, &sources, root).unwrap();
    println!("built in {:?}: {stats:?}", t0.elapsed());

    // counts and splits
    assert_eq!(manifest.pairings_in(Split::Train).count(), 4);
    assert_eq!(manifest.pairings_in(Split::Eval).count(), 4);
    assert_eq!(stats.rendered, 2 * (5 + 9));
    let train: BTreeSet<&String> = manifest.pairings_in(Split::Train).map(|p| &p.array_id).collect();
    let held: BTreeSet<&String> = manifest
        .pairings
        .iter()
        .filter(|p| p.split != Split::Train)
        .map(|p| &p.array_id)
        .collect();
    assert!(train.is_disjoint(&held));
    manifest.check().unwrap();
    let eval_sources: Vec<usize> = manifest
        .scenes
        .iter()
        .filter(|s| s.split == Split::Eval)
        .map(|s| s.clips.len())
        .collect();
    assert_eq!(eval_sources, vec![1, 2]);

    // manifest round trip
    let text = fs::read_to_string(root.join(MANIFEST_FILE)).unwrap();
    assert_eq!(DatasetManifest::from_json(&text).unwrap(), manifest);

    // rendered reference is independent of the array, and one file per scene
    let sim = Simulator::default();
    let scene = manifest.scenes[0].record.scene().to_dry();
    let reference = sim.reference_ambisonic_rirs(&scene, 1).unwrap();
    let again = sim.reference_ambisonic_rirs(&scene, 1).unwrap();
    assert_eq!(reference, again);
    assert!(reference_path(root, &manifest.scenes[0].record.id, Variant::Wet).exists());

    // rebuild reuses everything and reproduces the manifest bytes
    let (_, stats2) = build_dataset(&cfg, &sources, root).unwrap();
    assert_eq!(stats2.rendered, 0);
    assert_eq!(fs::read_to_string(root.join(MANIFEST_FILE)).unwrap(), text);

    // a second root with the same seed produces the same manifest and audio
    let dir2 = tempfile::tempdir().unwrap();
    build_dataset(&cfg, &sources, dir2.path()).unwrap();
    assert_eq!(fs::read_to_string(dir2.path().join(MANIFEST_FILE)).unwrap(), text);
    let p = &manifest.pairings[0];
    let a = array_audio_path(root, &p.scene_id, Variant::Wet, &p.array_id);
    let b = array_audio_path(dir2.path(), &p.scene_id, Variant::Wet, &p.array_id);
    assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());

    let manifest = Arc::new(manifest);

    // batch shapes
    let mut opts = LoaderOptions::new(Split::Eval, 1);
    opts.variants = vec![Variant::Dry];
    let mut eval = BatchLoader::new(root, Arc::clone(&manifest), opts).unwrap();
    assert_eq!(eval.len(), 4);
    let batch = eval.next_batch(1).unwrap().unwrap();
    let ex = &batch[0];
    assert_eq!((ex.x.channels, ex.x.bins, ex.x.frames), (5, 513, 94));
    assert_eq!((ex.reference.channels, ex.reference.bins, ex.reference.frames), (4, 513, 94));
    assert_eq!(ex.quantized.len(), 5);
    assert!(ex.quantized.indices.iter().flatten().all(|&i| i <= 24));
    let rest = eval.next_batch(10).unwrap().unwrap();
    assert_eq!(rest.len(), 3);
    assert!(eval.next_batch(1).unwrap().is_none());

    // evaluation is epoch-stable
    eval.start_epoch(5);
    let later = eval.next_batch(1).unwrap().unwrap();
    assert_eq!(later[0].x, ex.x);

    // training with fresh sources draws new material every epoch
    let mut opts = LoaderOptions::new(Split::Train, 3);
    opts.fresh_sources = true;
    let mut train = BatchLoader::new(root, Arc::clone(&manifest), opts).unwrap();
    let e0 = train.example(0, 0).unwrap();
    let e0b = train.example(0, 0).unwrap();
    let e1 = train.example(0, 1).unwrap();
    assert_eq!(e0.x, e0b.x);
    assert_ne!(e0.x, e1.x);
    assert_eq!(e0.scene_id, e1.scene_id);

    // fresh rendering from stored responses agrees with the stored render
    let ms = manifest.scene(&e0.scene_id).unwrap();
    let stored = read_wav(&reference_path(root, &ms.record.id, e0.variant)).unwrap();
    assert_eq!(stored.channels.len(), 4);
}
