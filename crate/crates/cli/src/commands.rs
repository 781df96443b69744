use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use ambienc_core::array::{dequantize_geometry, quantize_geometry, sample_geometry, QUANT_STEPS, SPEED_OF_SOUND};
use ambienc_core::baseline::{apply_static_encoder, design_for_stft, StaticEncoder};
use ambienc_core::dataset::{
    build_dataset, ingest_sources, BatchLoader, DatasetManifest, Example, LoaderOptions, Split, Variant,
};
use ambienc_core::dsp::{Spectrogram, Stft};
use ambienc_core::metrics::{
    aggregate_report, coherence, curves_csv, magnitude_spectrum_error, si_snr, Acoustics, MetricCurve, RunMetrics,
    MAGNITUDE_FLOOR,
};
use ambienc_core::sh::{channel_count, sh_eval, uniform_grid, DirectionGrid, Direction, Normalization};
use ambienc_nn::train::FromLoader;
use ambienc_nn::{checkpoint, gradcheck, train_loop, Adam, BatchProvider, Graph, InMemory, Network, NetworkConfig};
use ambienc_nn::{ParameterStore, Tensor, TrainExample};
use anyhow::{bail, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::plot;
use crate::UsageError;

pub const DATA_DIR: &str = "data";
pub const BASELINE_METHOD: &str = "ls_baseline";
pub const NETWORK_METHOD: &str = "neural";
/// Above this many bytes of spectra, training streams from disk.
const IN_MEMORY_LIMIT: usize = 2 << 30;

fn load_manifest(root: &Path) -> Result<(std::path::PathBuf, DatasetManifest)> {
    let dir = root.join(DATA_DIR);
    if !dir.join(ambienc_core::dataset::MANIFEST_FILE).exists() {
        bail!(UsageError(format!(
            "no dataset at {}; run gen-data first",
            dir.display()
        )));
    }
    let manifest = DatasetManifest::load(&dir).with_context(|| format!("reading the manifest in {}", dir.display()))?;
    manifest.check()?;
    Ok((dir, manifest))
}

fn check_compatible(cfg: &RunConfig, manifest: &DatasetManifest) -> Result<()> {
    let mics = manifest.arrays.first().map_or(cfg.network.mics, |a| a.coords.len());
    if manifest.order != cfg.network.order || manifest.sample_rate != cfg.network.sample_rate || mics != cfg.network.mics {
        bail!(UsageError(format!(
            "dataset (order {}, {} Hz, {mics} mics) does not match the network configuration (order {}, {} Hz, {} mics)",
            manifest.order, manifest.sample_rate, cfg.network.order, cfg.network.sample_rate, cfg.network.mics
        )));
    }
    Ok(())
}

pub fn gen_data(root: &Path, cfg: &RunConfig) -> Result<()> {
    let dir = root.join(DATA_DIR);
    let d = &cfg.dataset;
    if let Some(src) = &d.source_dir {
        if !src.is_dir() {
            bail!(UsageError(format!("source directory {} does not exist", src.display())));
        }
    }
    let t = Instant::now();
    let sources = ingest_sources(d.source_dir.as_deref(), d.sample_rate, d.seed, &d.synthetic)?;
    log::info!(
        "{} source clips ({})",
        sources.clips.len(),
        if sources.synthetic { "synthetic" } else { "recorded" }
    );
    let (manifest, stats) = build_dataset(d, &sources, &dir)?;
    cfg.echo(&dir)?;
    println!(
        "dataset in {}: {} scenes, {} arrays, {} pairings; rendered {}, reused {} ({:.1} s)",
        dir.display(),
        manifest.scenes.len(),
        manifest.arrays.len(),
        manifest.pairings.len(),
        stats.rendered,
        stats.reused,
        t.elapsed().as_secs_f64()
    );
    Ok(())
}

fn design(cfg: &RunConfig, grid: &DirectionGrid, geometry: &ambienc_core::array::ArrayGeometry) -> Result<StaticEncoder> {
    Ok(design_for_stft(
        geometry,
        cfg.network.order,
        cfg.baseline.beta,
        grid,
        cfg.network.sample_rate,
        cfg.network.fft,
        SPEED_OF_SOUND,
    )?)
}

pub fn design_baseline(root: &Path, cfg: &RunConfig, split: Option<Split>, out: &Path) -> Result<()> {
    let (_, manifest) = load_manifest(root)?;
    check_compatible(cfg, &manifest)?;
    let wanted: Vec<&str> = match split {
        Some(s) => {
            let mut ids: Vec<&str> = manifest.pairings_in(s).map(|p| p.array_id.as_str()).collect();
            ids.sort_unstable();
            ids.dedup();
            ids
        }
        None => manifest.arrays.iter().map(|a| a.id.as_str()).collect(),
    };
    let grid = uniform_grid(cfg.baseline.grid_points)?;
    fs::create_dir_all(out)?;
    let mut summary = csv::Writer::from_path(out.join("summary.csv"))?;
    summary.write_record(["array_id", "bins", "fallback_bins", "mean_frobenius"])?;
    for id in &wanted {
        let rec = manifest.array(id).context("pairing refers to a missing array")?;
        let enc = design(cfg, &grid, &rec.geometry())?;
        let file = fs::File::create(out.join(format!("{id}.enc")))?;
        enc.write_to(std::io::BufWriter::new(file))?;
        let mean_frob = (0..enc.bins()).map(|b| enc.frobenius(b)).sum::<f64>() / enc.bins() as f64;
        summary.write_record([
            id.to_string(),
            enc.bins().to_string(),
            enc.fallback_bins().len().to_string(),
            format!("{mean_frob:.6}"),
        ])?;
    }
    summary.flush()?;
    cfg.echo(out)?;
    println!("designed {} encoders (beta {}) into {}", wanted.len(), cfg.baseline.beta, out.display());
    Ok(())
}

fn loader(dir: &Path, manifest: Arc<DatasetManifest>, cfg: &RunConfig, split: Split, variants: &[Variant], fresh: bool) -> Result<BatchLoader> {
    let mut opts = LoaderOptions::new(split, cfg.seed);
    opts.variants = variants.to_vec();
    opts.fresh_sources = fresh;
    opts.shuffle = split == Split::Train;
    opts.fft = cfg.network.fft;
    opts.hop = cfg.network.hop;
    Ok(BatchLoader::new(dir, manifest, opts)?)
}

fn drain(mut loader: BatchLoader, limit: usize) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    while let Some(batch) = loader.next_batch(8)? {
        out.extend(batch);
        if limit > 0 && out.len() >= limit {
            out.truncate(limit);
            break;
        }
    }
    Ok(out)
}

pub fn train(root: &Path, cfg: &RunConfig, out: &Path) -> Result<()> {
    let (dir, manifest) = load_manifest(root)?;
    check_compatible(cfg, &manifest)?;
    for v in &cfg.train.variants {
        if !manifest.variants.contains(v) {
            bail!(UsageError(format!("the dataset has no {v} renders")));
        }
    }
    let manifest = Arc::new(manifest);
    let hyper = cfg.train_config();
    let loader = loader(&dir, manifest.clone(), cfg, Split::Train, &cfg.train.variants, cfg.train.fresh_sources)?;
    let n = loader.len();
    if n == 0 {
        bail!(UsageError("the training split is empty".into()));
    }
    let bytes_per = 4 * 2 * (cfg.network.mics + channel_count(cfg.network.order)) * cfg.network.bins() * cfg.network.padded_shape.0;
    let mut provider: Box<dyn BatchProvider<f32>> = if !cfg.train.fresh_sources && n * bytes_per <= IN_MEMORY_LIMIT {
        let examples: Vec<TrainExample<f32>> = drain(loader, 0)?.iter().map(TrainExample::from_example).collect();
        Box::new(InMemory::new(examples, cfg.seed)?)
    } else {
        Box::new(FromLoader::new(loader)?)
    };
    fs::create_dir_all(out)?;
    cfg.echo(out)?;
    let mut net: Network<f32> = Network::new(cfg.network.clone(), cfg.seed)?;
    log::info!(
        "training {} parameters on {n} examples for {} steps of {}",
        net.params().num_scalars(),
        hyper.steps,
        hyper.batch
    );
    let t = Instant::now();
    let trace = train_loop(&mut net, provider.as_mut(), &hyper, |_, _| {})?;
    trace.write_csv(&out.join("loss.csv"))?;
    let meta = serde_json::to_value(cfg)?;
    checkpoint::save(&out.join("checkpoint.bin"), &net, &meta)?;
    if let Some((a, b)) = trace.start_end((hyper.steps / 4).clamp(1, 10)) {
        println!(
            "trained {} steps in {:.0} s: loss {a:.5} -> {b:.5}; checkpoint in {}",
            hyper.steps,
            t.elapsed().as_secs_f64(),
            out.display()
        );
    }
    Ok(())
}

fn acoustics(v: Variant) -> Acoustics {
    match v {
        Variant::Dry => Acoustics::Dry,
        Variant::Wet => Acoustics::Wet,
    }
}

fn metrics_for(method: &str, ex: &Example, estimate: &Spectrogram, stft: &Stft) -> Result<RunMetrics> {
    let len = ex.reference_time.first().map_or(0, |c| c.len());
    let time = stft.synthesize(estimate, len)?;
    Ok(RunMetrics {
        method: method.to_string(),
        acoustics: acoustics(ex.variant),
        sources: ex.sources,
        si_snr: si_snr(&ex.reference_time, &time)?.mean,
        coherence: coherence(&ex.reference, estimate)?,
        magnitude_error: magnitude_spectrum_error(&ex.reference, estimate, MAGNITUDE_FLOOR)?,
    })
}

fn mean_curve(curves: &[&MetricCurve]) -> MetricCurve {
    let n = curves.len() as f64;
    let mut values = vec![0.0; curves[0].values.len()];
    for c in curves {
        for (v, x) in values.iter_mut().zip(&c.values) {
            *v += x / n;
        }
    }
    MetricCurve {
        bins: curves[0].bins.clone(),
        values,
    }
}

/// Evaluates both encoders and writes `curves.csv`, `aggregate.csv` and
/// `examples.csv` into `out`.
pub fn eval(root: &Path, cfg: &RunConfig, ckpt: &Path, out: &Path, split: Split, plot_svg: bool) -> Result<()> {
    if !ckpt.is_file() {
        bail!(UsageError(format!("checkpoint {} not found", ckpt.display())));
    }
    let (dir, manifest) = load_manifest(root)?;
    let (net, _) = checkpoint::load::<f32>(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let ncfg: &NetworkConfig = net.config();
    if manifest.order != ncfg.order || manifest.sample_rate != ncfg.sample_rate {
        bail!(UsageError("the checkpoint does not match the dataset's order or sample rate".into()));
    }
    let variants: Vec<Variant> = cfg.eval.variants.iter().copied().filter(|v| manifest.variants.contains(v)).collect();
    let manifest = Arc::new(manifest);
    let examples = drain(loader(&dir, manifest.clone(), cfg, split, &variants, false)?, cfg.eval.max_examples)?;
    if examples.is_empty() {
        bail!(UsageError(format!("the {split} split has no examples")));
    }
    let grid = uniform_grid(cfg.baseline.grid_points)?;
    let stft = Stft::new(ncfg.fft, ncfg.hop)?;
    let mut encoders: HashMap<String, StaticEncoder> = HashMap::new();
    let mut runs = Vec::new();
    let mut per_example = csv::Writer::from_writer(Vec::new());
    per_example.write_record([
        "scene_id", "array_id", "variant", "sources", "method", "si_snr_db", "coherence", "magnitude_error_db",
    ])?;
    let t = Instant::now();
    for ex in &examples {
        if !encoders.contains_key(&ex.array_id) {
            encoders.insert(ex.array_id.clone(), design(cfg, &grid, &ex.geometry)?);
        }
        let base = apply_static_encoder(&encoders[&ex.array_id], &ex.x)?;
        let neural = net.encode(&ex.x, &ex.quantized)?;
        for (method, est) in [(BASELINE_METHOD, &base), (NETWORK_METHOD, &neural)] {
            let m = metrics_for(method, ex, est, &stft)?;
            per_example.write_record([
                ex.scene_id.clone(),
                ex.array_id.clone(),
                ex.variant.to_string(),
                ex.sources.to_string(),
                method.to_string(),
                format!("{:.4}", m.si_snr),
                format!("{:.6}", m.coherence.mean()),
                format!("{:.4}", m.magnitude_error.mean()),
            ])?;
            runs.push(m);
        }
    }
    let table = aggregate_report(&runs)?;
    let mut curves = Vec::new();
    for method in [BASELINE_METHOD, NETWORK_METHOD] {
        for v in &variants {
            let sel: Vec<&RunMetrics> = runs.iter().filter(|r| r.method == method && r.acoustics == acoustics(*v)).collect();
            if sel.is_empty() {
                continue;
            }
            let coh: Vec<&MetricCurve> = sel.iter().map(|r| &r.coherence).collect();
            let mag: Vec<&MetricCurve> = sel.iter().map(|r| &r.magnitude_error).collect();
            curves.push((format!("{method}_{v}_coherence"), mean_curve(&coh)));
            curves.push((format!("{method}_{v}_magnitude_error_db"), mean_curve(&mag)));
        }
    }
    fs::create_dir_all(out)?;
    cfg.echo(out)?;
    fs::write(out.join("curves.csv"), curves_csv(&curves)?)?;
    fs::write(out.join("aggregate.csv"), table.to_csv())?;
    fs::write(out.join("examples.csv"), per_example.into_inner()?)?;
    if plot_svg {
        let pick = |suffix: &str| -> Vec<(String, MetricCurve)> {
            curves.iter().filter(|(n, _)| n.ends_with(suffix)).cloned().collect()
        };
        fs::write(out.join("coherence.svg"), plot::line_chart("Magnitude-squared coherence", "coherence", &pick("_coherence")))?;
        fs::write(
            out.join("magnitude_error.svg"),
            plot::line_chart("Magnitude spectrum error", "dB", &pick("_magnitude_error_db")),
        )?;
    }
    print!("{}", table.to_csv());
    println!(
        "evaluated {} examples in {:.0} s; results in {}",
        examples.len(),
        t.elapsed().as_secs_f64(),
        out.display()
    );
    Ok(())
}

pub fn gradcheck(seed: u64, op: Option<&str>) -> Result<()> {
    let reports = match op {
        Some(name) => {
            if !gradcheck::OPS.contains(&name) {
                bail!(UsageError(format!(
                    "unknown op {name}; registered: {}",
                    gradcheck::OPS.join(", ")
                )));
            }
            vec![gradcheck::check_op(name, seed)?]
        }
        None => gradcheck::suite(seed)?,
    };
    let failed = reports.iter().filter(|r| !r.passed()).count();
    for r in &reports {
        println!("{r}");
    }
    if failed > 0 {
        bail!("{failed} of {} gradient checks failed", reports.len());
    }
    Ok(())
}

type Check = fn(u64) -> Result<String>;

fn check_stft(seed: u64) -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..48_000).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let stft = Stft::new(1024, 512)?;
    let spec = stft.analyze(std::slice::from_ref(&x), 24_000)?;
    if (spec.bins, spec.frames) != (513, 94) {
        bail!("expected 513 bins × 94 frames, got {} × {}", spec.bins, spec.frames);
    }
    let y = stft.synthesize(&spec, x.len())?;
    let err: f64 = x.iter().zip(&y[0]).map(|(a, b)| (a - b).powi(2)).sum();
    let sig: f64 = x.iter().map(|a| a * a).sum();
    let snr = 10.0 * (sig / err.max(f64::MIN_POSITIVE)).log10();
    if snr < 100.0 {
        bail!("round-trip SNR {snr:.1} dB");
    }
    Ok(format!("513×94, round trip {snr:.0} dB"))
}

fn check_sh(_: u64) -> Result<String> {
    let grid = uniform_grid(1008)?;
    let order = 2;
    let n = channel_count(order);
    let mut gram = vec![0.0; n * n];
    for d in grid.directions.iter() {
        let y = sh_eval(*d, order, Normalization::N3d)?;
        for i in 0..n {
            for j in 0..n {
                gram[i * n + j] += y.values[i] * y.values[j] / grid.len() as f64;
            }
        }
    }
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            let want = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((gram[i * n + j] - want).abs());
        }
    }
    if worst > 0.05 {
        bail!("N3D Gram matrix deviates from identity by {worst:.3}");
    }
    let w = sh_eval(Direction::new(0.3, -0.2), 1, Normalization::Sn3d)?;
    if (w.values[0] - 1.0).abs() > 1e-12 {
        bail!("SN3D omni component is {}", w.values[0]);
    }
    Ok(format!("grid quadrature within {worst:.1e}"))
}

fn check_quantization(seed: u64) -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let g = sample_geometry(&mut rng, 5, 0.02, 0.18)?;
        let back = dequantize_geometry(&quantize_geometry(&g, 0.18)?, 0.18);
        for (a, b) in g.coords.iter().zip(&back.coords) {
            for k in 0..3 {
                worst = worst.max((a[k] - b[k]).abs());
            }
        }
    }
    let half_step = 0.18 / f64::from(QUANT_STEPS) / 2.0;
    if worst > half_step + 1e-12 {
        bail!("dequantization error {worst:.4} m exceeds half a step");
    }
    Ok(format!("max error {worst:.4} m"))
}

fn check_metrics(seed: u64) -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Spectrogram::zeros(4, 33, 20, 24_000, 64, 32);
    for z in &mut b.data {
        *z = num_complex::Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    }
    let s = magnitude_spectrum_error(&b, &b, MAGNITUDE_FLOOR)?;
    let c = coherence(&b, &b)?;
    let mut half = b.clone();
    half.data.iter_mut().for_each(|z| *z /= 2.0);
    let s2 = magnitude_spectrum_error(&b, &half, MAGNITUDE_FLOOR)?;
    if s.values.iter().any(|&v| v != 0.0) {
        bail!("identical inputs give nonzero magnitude error");
    }
    if c.values.iter().any(|&v| (v - 1.0).abs() > 1e-12) {
        bail!("identical inputs give coherence below one");
    }
    if s2.values.iter().any(|&v| (v - 6.0206).abs() > 1e-4) {
        bail!("halving does not give 6.0206 dB");
    }
    Ok("S=0, C=1, halving 6.0206 dB".into())
}

fn check_gradients(seed: u64) -> Result<String> {
    let reports = gradcheck::suite(seed)?;
    if let Some(bad) = reports.iter().find(|r| !r.passed()) {
        bail!("{bad}");
    }
    let worst = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    Ok(format!("{} ops, worst relative error {worst:.1e}", reports.len()))
}

fn check_network(seed: u64) -> Result<String> {
    let cfg = NetworkConfig {
        fft: 62,
        hop: 31,
        enc_channels: vec![2, 2, 2, 2],
        bottleneck_channels: 2,
        dec_channels: vec![2, 2, 2, 2],
        geom_channels: 2,
        padded_shape: (16, 32),
        ..NetworkConfig::default()
    };
    let net: Network<f64> = Network::new(cfg, seed)?;
    let x = Spectrogram::zeros(5, 32, 10, 24_000, 62, 31);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let qg = ambienc_core::array::QuantizedGeometry {
        indices: (0..5).map(|_| [rng.gen_range(0..25), rng.gen_range(0..25), rng.gen_range(0..25)]).collect(),
    };
    let e = net.predict(&x, &qg)?;
    if (e.channels, e.mics, e.bins, e.frames) != (4, 5, 32, 10) || !e.is_finite() {
        bail!("unexpected mixing field [{}][{}][{}][{}]", e.channels, e.mics, e.bins, e.frames);
    }
    if net.predict(&x, &qg)? != e {
        bail!("eval mode is not deterministic");
    }
    let mut g = Graph::<f64>::new(false, ChaCha8Rng::seed_from_u64(0));
    let v = g.input(Tensor::filled(&[1, 2, 2], 3.0));
    if g.dropout(v, 0.5)? != v {
        bail!("dropout is active in eval mode");
    }
    Ok("shapes, finiteness, eval determinism".into())
}

fn check_adam(_: u64) -> Result<String> {
    let mut store = ParameterStore::<f64>::new();
    store.add("w", Tensor::filled(&[1], 1.0))?;
    Adam::new(2e-4).step(&mut store, &[Some(Tensor::filled(&[1], 1.0))])?;
    let moved = store.value(store.ids().next().expect("one parameter")).data[0] - 1.0;
    if (moved + 2e-4).abs() > 1e-10 {
        bail!("first step moved by {moved}");
    }
    Ok("first step equals -lr".into())
}

pub fn selftest(seed: u64) -> Result<()> {
    let checks: [(&str, Check); 7] = [
        ("stft", check_stft),
        ("spherical_harmonics", check_sh),
        ("quantization", check_quantization),
        ("metrics", check_metrics),
        ("gradients", check_gradients),
        ("network", check_network),
        ("adam", check_adam),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        match check(seed) {
            Ok(detail) => println!("ok   {name:<20} {detail}"),
            Err(e) => {
                failed += 1;
                println!("FAIL {name:<20} {e:#}");
            }
        }
    }
    if failed > 0 {
        bail!("{failed} self checks failed");
    }
    Ok(())
}
