//! The invariant suite behind the `selftest` subcommand.
//!
//! Every check is small enough for one laptop core; the whole suite runs in
//! well under five minutes. Checks that need a backbone use an untrained one:
//! they test contracts, not learned behaviour.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::backbone::{
    add_noise, generative_step_to_timestep, make_schedule, name_embedding, pretrain_backbone, Backbone, BackboneSpec, CondMode, Condition,
    PretrainConfig,
};
use crate::classifier::{
    classifier_forward, cosine_lr, focal_loss, focal_loss_graph, forward_graph, mixup_with, pad_batch, predict, predict_batch,
    train_classifier, ClassifierConfig, ClassifierModel, HeadType, LossKind, TrainConfig,
};
use crate::datagen::{
    make_protocol, multi_label_variant, render_clip, Action, Context, ProtocolSpec, SceneSpec, Species, VideoClip, Viewpoint,
};
use crate::experiments::{
    default_sweep_protocols, grid_search, layer_sweep, localize, prepare, run_ablations, run_protocol, uniform_clip, AblationAxes,
    AblationConfig, GridAxes, GridConfig, HeadConfig, Prepared, RunSpec, SweepConfig,
};
use crate::extraction::{
    cache_key, clip_digest, extract_video, extract_window, pool_spatial, window_bounds, ExtractionConfig, ExtractionError, Extractor,
    FeatureCache,
};
use crate::metrics::{
    acc_vs_freqcorr, accuracy, average_precision, freq_baseline, gains, mean_average_precision, pearson, species_matrix, FrequencyProfile,
};
use crate::numerics::gradcheck::op_suite;
use crate::numerics::{grad_check, nn, with_precision, Graph, NumericsError, ParamStore, Precision, Rng, Tensor};
use crate::TaskMode;

pub type BoxError = Box<dyn std::error::Error + Send + Sync>;
type Outcome = std::result::Result<(), BoxError>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Outcome {
    if ok {
        Ok(())
    } else {
        Err(msg().into())
    }
}

fn close(a: f64, b: f64, tol: f64, what: &str) -> Outcome {
    ensure((a - b).abs() <= tol, || format!("{what}: {a} vs {b} (tol {tol})"))
}

/// One named check of the suite.
pub struct Check {
    pub name: &'static str,
    pub run: fn() -> Outcome,
}

/// All checks, in execution order.
pub fn checks() -> Vec<Check> {
    macro_rules! c {
        ($($f:ident),* $(,)?) => { vec![$(Check { name: stringify!($f), run: $f }),*] };
    }
    c![
        numerics_examples,
        numerics_grad_checks,
        focal_transformer_grad_check,
        schedule_examples,
        forward_process_identity,
        step_mapping,
        encoder_examples,
        condition_examples,
        denoiser_shapes,
        gate_equivalence_denoiser,
        image_mode_copies,
        zero_step_pretrain,
        pooling_examples,
        window_examples,
        gate_equivalence_extraction,
        image_mode_window_locality,
        cache_examples,
        classifier_examples,
        loss_examples,
        loss_identity,
        mixup_examples,
        cosine_examples,
        training_examples,
        relabeling_symmetry,
        metric_examples,
        average_precision_oracle,
        map_monotone_invariance,
        matrix_examples,
        datagen_examples,
        protocol_determinism,
        grid_examples,
        ablation_examples,
        sweep_examples,
        localization_examples,
        cli_examples,
    ]
}

/// Run one check by name; `None` if there is no such check.
pub fn run_named(name: &str) -> Option<Result<(), String>> {
    checks().into_iter().find(|c| c.name == name).map(|c| (c.run)().map_err(|e| e.to_string()))
}

/// Run every check, printing one `PASS`/`FAIL` line each and a summary.
/// True when all pass.
pub fn run_selftest(out: &mut dyn Write) -> bool {
    let start = Instant::now();
    let mut failed = 0;
    let all = checks();
    for c in &all {
        let t = Instant::now();
        let res = std::panic::catch_unwind(c.run).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()).into())
        });
        let ms = t.elapsed().as_millis();
        match res {
            Ok(()) => {
                let _ = writeln!(out, "PASS {} ({ms} ms)", c.name);
            }
            Err(e) => {
                failed += 1;
                let _ = writeln!(out, "FAIL {} ({ms} ms): {e}", c.name);
            }
        }
    }
    let _ = writeln!(out, "selftest: {}/{} passed in {:.1} s", all.len() - failed, all.len(), start.elapsed().as_secs_f64());
    failed == 0
}

/// A scratch directory under the system temp dir, removed on drop.
struct Scratch(PathBuf);

impl Scratch {
    fn new(tag: &str) -> std::io::Result<Scratch> {
        static NEXT: std::sync::atomic::AtomicU64 = std::sync::atomic::AtomicU64::new(0);
        let n = NEXT.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        let dir = std::env::temp_dir().join(format!("actiondiff-selftest-{}-{tag}-{n}", std::process::id()));
        if dir.exists() {
            std::fs::remove_dir_all(&dir)?;
        }
        std::fs::create_dir_all(&dir)?;
        Ok(Scratch(dir))
    }

    fn path(&self) -> &Path {
        &self.0
    }
}

impl Drop for Scratch {
    fn drop(&mut self) {
        let _ = std::fs::remove_dir_all(&self.0);
    }
}

fn untrained() -> Result<Backbone, BoxError> {
    Ok(Backbone::new(BackboneSpec::default())?)
}

/// Clip of uniform random pixels.
pub fn noise_clip(id: &str, frames: usize, rng: &mut Rng) -> VideoClip {
    let mut c = uniform_clip(id, frames, 0.0);
    c.frames = rng.uniform_tensor(c.frames.shape(), 0.0, 1.0);
    c
}

fn tiny_head() -> HeadConfig {
    HeadConfig { model_dim: 16, depth: 1, heads: 2, ff_mult: 2, ..HeadConfig::small() }
}

fn tiny_train() -> TrainConfig {
    TrainConfig { epochs: 2, batch_size: 4, ..TrainConfig::default() }
}

fn tiny_run(protocol: ProtocolSpec) -> RunSpec {
    RunSpec::new(protocol).with_head(tiny_head()).with_train(tiny_train()).with_extraction(ExtractionConfig::default().with_layer(3))
}

fn tiny_context() -> ProtocolSpec {
    ProtocolSpec::cross_context(&[Context::Plain, Context::Gradient], &[Context::Textured]).with_counts(3, 2)
}

// ---- numerics

fn numerics_examples() -> Outcome {
    with_precision(Precision::F64, numerics_examples_f64)
}

fn numerics_examples_f64() -> Outcome {
    let mut g = Graph::inference();
    let x = g.constant(Tensor::zeros(&[3]));
    let s = g.softmax(x, 0)?;
    for v in g.value(s).data() {
        close(*v, 1.0 / 3.0, 1e-12, "softmax of zeros")?;
    }
    let c = g.constant(Tensor::full(&[4, 3], 2.5));
    let m = g.mean(c, &[0])?;
    ensure(g.value(m).data().iter().all(|&v| (v - 2.5).abs() < 1e-12), || "mean of a constant".into())?;
    let q = g.constant(Tensor::from_slice(&[1, 1, 2], &[0.3, -0.1])?);
    let k = g.constant(Tensor::from_slice(&[1, 1, 2], &[1.0, 2.0])?);
    let v = g.constant(Tensor::from_slice(&[1, 1, 3], &[4.0, 5.0, 6.0])?);
    let a = nn::attention(&mut g, q, k, v, None)?;
    ensure(g.value(a).data() == [4.0, 5.0, 6.0], || format!("single-key attention gave {:?}", g.value(a).data()))?;
    let err = with_precision(Precision::F64, || {
        grad_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                g.sum_all(sq)
            },
            &Tensor::from_slice(&[3], &[1.0, 2.0, 3.0]).unwrap(),
            1e-5,
        )
    })?;
    ensure(err < 1e-6, || format!("sum of squares grad error {err}"))
}

fn numerics_grad_checks() -> Outcome {
    let results = with_precision(Precision::F64, || op_suite(0))?;
    for (name, err) in results {
        ensure(err < 1e-5, || format!("{name}: relative error {err}"))?;
    }
    Ok(())
}

/// Max relative error of the focal loss through a one-block class-token
/// transformer, over all of its parameters, in 64-bit.
pub fn focal_transformer_grad_error() -> Result<(f64, usize), BoxError> {
    with_precision(Precision::F64, || {
        let mut cfg = ClassifierConfig::new(3, 3, TaskMode::SingleLabel);
        cfg.model_dim = 8;
        cfg.depth = 1;
        cfg.heads = 2;
        cfg.ff_mult = 2;
        cfg.max_len = 3;
        cfg.seed = 11;
        let model = ClassifierModel::new(cfg.clone())?;
        let mut r = Rng::new(5).split("focal-transformer");
        let x = r.normal_tensor(&[2, 3, 3], 1.0);
        let masks = vec![vec![true, true, true], vec![true, true, false]];
        let targets = Tensor::from_slice(&[2, 3], &[0.0, 1.0, 0.0, 0.2, 0.0, 0.8])?;
        // the key bias only shifts each query's scores uniformly, so its
        // gradient is exactly zero and it stays out of the probe
        let fixed = model.weights.filtered(|n| n.ends_with("att.k.b"));
        let probed = model.weights.filtered(|n| !n.ends_with("att.k.b"));
        let f = |g: &mut Graph, p: &ParamStore| -> Result<_, NumericsError> {
            let mut all = p.clone();
            all.extend(fixed.clone());
            let inv = |e: crate::classifier::ClassifierError| NumericsError::Invalid(e.to_string());
            let probs = forward_graph(g, &cfg, &all, &x, &masks).map_err(inv)?;
            focal_loss_graph(g, probs, &targets, 0.25, 2.0, TaskMode::SingleLabel).map_err(inv)
        };
        let err = crate::numerics::grad_check_params(f, &probed, 1e-5)?;
        Ok((err, model.num_params()))
    })
}

fn focal_transformer_grad_check() -> Outcome {
    let (err, n) = focal_transformer_grad_error()?;
    ensure(n <= 1000, || format!("{n} parameters"))?;
    ensure(err < 1e-5, || format!("relative error {err}"))
}

// ---- backbone

fn schedule_examples() -> Outcome {
    // two steps from 0.1 to 0.2 are exactly the betas [0.1, 0.2]
    let s = make_schedule(2, 0.1, 0.2)?;
    close(s.alpha_bars[0], 0.9, 1e-12, "alpha_bar 0")?;
    close(s.alpha_bars[1], 0.72, 1e-12, "alpha_bar 1")?;
    ensure(make_schedule(10, 0.2, 0.1).is_err() && make_schedule(10, 0.1, 0.1).is_err(), || "beta_start >= beta_end accepted".into())?;
    let d = make_schedule(1000, 1e-4, 0.02)?;
    ensure(d.alpha_bars.windows(2).all(|w| w[1] < w[0]), || "alpha_bars not decreasing".into())
}

fn forward_process_identity() -> Outcome {
    with_precision(Precision::F64, forward_process_f64)
}

fn forward_process_f64() -> Outcome {
    let s = make_schedule(1000, 1e-4, 0.02)?;
    let mut r = Rng::new(1).split("add-noise");
    for _ in 0..100 {
        let z0 = r.normal_tensor(&[2, 3, 4], 1.0);
        let eps = r.normal_tensor(&[2, 3, 4], 1.0);
        let t = r.below(1000);
        let zt = add_noise(&s, &z0, t, &eps)?;
        let ab = s.alpha_bars[t];
        // recover z0 from zt and eps
        for ((zt, z0), e) in zt.data().iter().zip(z0.data()).zip(eps.data()) {
            let back = (zt - (1.0 - ab).sqrt() * e) / ab.sqrt();
            close(back, *z0, 1e-5, "reconstruction")?;
        }
    }
    let z0 = r.normal_tensor(&[5], 1.0);
    let eps = r.normal_tensor(&[5], 1.0);
    let clean = crate::backbone::NoiseSchedule { betas: vec![0.0, 1.0], alpha_bars: vec![1.0, 0.0] };
    ensure(add_noise(&clean, &z0, 0, &eps)?.max_abs_diff(&z0) == 0.0, || "alpha_bar = 1 is not the identity".into())?;
    ensure(add_noise(&clean, &z0, 1, &eps)?.max_abs_diff(&eps) == 0.0, || "alpha_bar = 0 is not pure noise".into())?;
    // the ends of the real schedule sit within their own noise level of the limits
    let amax = |t: &Tensor| t.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let (first, last) = (s.alpha_bars[0], s.alpha_bars[999]);
    let near = add_noise(&s, &z0, 0, &eps)?.max_abs_diff(&z0);
    ensure(near <= (1.0 - first).sqrt() * amax(&eps) + (1.0 - first.sqrt()) * amax(&z0) + 1e-12, || format!("t = 0 is {near} from z0"))?;
    let far = add_noise(&s, &z0, 999, &eps)?.max_abs_diff(&eps);
    ensure(far <= last.sqrt() * amax(&z0) + (1.0 - (1.0 - last).sqrt()) * amax(&eps) + 1e-12, || format!("t = T-1 is {far} from eps"))?;
    ensure(first > 0.9999 - 1e-12 && last < 1e-4, || format!("schedule ends {first}, {last}"))?;
    let zero = add_noise(&s, &Tensor::zeros(&[5]), 321, &eps)?;
    let scale = (1.0 - s.alpha_bars[321]).sqrt();
    for (a, e) in zero.data().iter().zip(eps.data()) {
        close(*a, scale * e, 1e-12, "zero latent")?;
    }
    Ok(())
}

fn step_mapping() -> Outcome {
    let s = make_schedule(1000, 1e-4, 0.02)?;
    ensure(generative_step_to_timestep(30, 30, &s)? == 0, || "s = S must map to t = 0".into())?;
    ensure(generative_step_to_timestep(20, 30, &s)? == 333, || "20 of 30".into())?;
    ensure(generative_step_to_timestep(0, 30, &s).is_err() && generative_step_to_timestep(31, 30, &s).is_err(), || "bounds".into())
}

fn encoder_examples() -> Outcome {
    let b = untrained()?;
    let frame = Rng::new(2).uniform_tensor(&[1, 32, 32, 1], 0.0, 1.0);
    let two = Tensor::concat_leading(&[frame.clone(), frame])?;
    let z = b.encode_frames(&two)?;
    ensure(z.shape() == [2, 8, 8, 4], || format!("latent shape {:?}", z.shape()))?;
    ensure(z.slice_leading(0, 1)? == z.slice_leading(1, 2)?, || "identical frames, different latents".into())?;
    let zero = Tensor::zeros(&[1, 8, 8, 4]);
    let d1 = b.decode_latents(&zero)?;
    ensure(d1.shape() == [1, 32, 32, 1] && d1 == b.decode_latents(&zero)?, || "decode of zero latent".into())
}

fn condition_examples() -> Outcome {
    let b = untrained()?;
    let none = b.encode_condition(&Condition::None)?;
    ensure(none.shape() == [1, 32] && none.data().iter().all(|&v| v == 0.0), || "none is not a zero vector".into())?;
    let f = Rng::new(3).uniform_tensor(&[32, 32, 1], 0.0, 1.0);
    ensure(b.encode_condition(&Condition::Frame(f.clone()))? == b.encode_condition(&Condition::Frame(f))?, || "frame tokens differ".into())?;
    let one = b.encode_condition(&Condition::ActionText(vec!["walk".into()]))?;
    ensure(one.data() == name_embedding(b.spec(), "walk").data(), || "single name is not its embedding".into())
}

fn denoiser_shapes() -> Outcome {
    let b = untrained()?;
    let z = Rng::new(4).normal_tensor(&[3, 8, 8, 4], 1.0);
    let cond = b.encode_condition(&Condition::None)?;
    for l in 1..=BackboneSpec::NUM_LAYERS {
        let out = b.denoise_forward(&z, 100, &cond, Some(l))?;
        ensure(out.eps.shape() == z.shape(), || "eps shape".into())?;
        let [h, w, c] = b.spec().layer_extents(l)?;
        let tapped = out.tapped.ok_or("no tap")?;
        ensure(tapped.shape() == [3, h, w, c], || format!("layer {l} tap {:?}", tapped.shape()))?;
    }
    Ok(())
}

fn gate_equivalence_denoiser() -> Outcome {
    let b = untrained()?.set_image_mode();
    let z = Rng::new(5).normal_tensor(&[4, 8, 8, 4], 1.0);
    let cond = b.encode_condition(&Condition::ActionText(vec!["run".into()]))?;
    let joint = b.denoise_forward(&z, 400, &cond, None)?.eps;
    for m in 0..4 {
        let alone = b.denoise_forward(&z.slice_leading(m, m + 1)?, 400, &cond, None)?.eps;
        let dev = alone.max_abs_diff(&joint.slice_leading(m, m + 1)?);
        ensure(dev <= 1e-5, || format!("frame {m}: deviation {dev}"))?;
    }
    Ok(())
}

fn image_mode_copies() -> Outcome {
    let b = untrained()?;
    let img = b.set_image_mode();
    ensure(img.set_image_mode() == img, || "not idempotent".into())?;
    ensure(b.spec().alphas.iter().all(|&a| a == 0.5) && !b.is_image_mode(), || "original modified".into())
}

fn zero_step_pretrain() -> Outcome {
    let b = untrained()?;
    let clip = render_clip("p", &SceneSpec::new(Action::Translate, Species::Circle, Viewpoint::ThirdPerson, Context::Plain, 8, 1))?;
    let (after, log) = pretrain_backbone(&b, &[clip], &PretrainConfig { steps: 0, ..PretrainConfig::default() })?;
    ensure(after == b && after.fingerprint() == b.fingerprint() && log.losses.is_empty(), || "weights changed".into())
}

// ---- extraction

fn pooling_examples() -> Outcome {
    let c = Tensor::from_slice(&[1, 2, 2, 3], &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0, 1.0, 2.0, 3.0, 1.0, 2.0, 3.0])?;
    ensure(pool_spatial(&c)?.data() == [1.0, 2.0, 3.0], || "constant channels".into())?;
    let t = Tensor::from_slice(&[1, 2, 2, 1], &[1.0, 3.0, 5.0, 7.0])?;
    ensure(pool_spatial(&t)?.data() == [4.0], || "2x2 mean".into())
}

fn window_examples() -> Outcome {
    let sizes = |n, w, m| window_bounds(n, w, m).iter().map(|(a, b)| b - a).collect::<Vec<usize>>();
    ensure(sizes(60, 25, 25) == [25, 25, 10], || "60 frames, w=25".into())?;
    ensure(sizes(25, 25, 25) == [25], || "25 frames, w=25".into())?;
    ensure(sizes(16, 8, 8) == [8, 8], || "16 frames, w=8".into())
}

/// Max abs deviation between windowed and per-frame extraction with every
/// gate at 1, over `n` random clips. Action-text conditioning keeps the
/// condition identical across the two window lengths.
pub fn gate_equivalence_deviation(backbone: &Backbone, n: usize, seed: u64) -> Result<f64, BoxError> {
    let img = backbone.set_image_mode();
    let mut r = Rng::new(seed).split("gate-equivalence");
    let base = ExtractionConfig::default().with_cond(CondMode::ActionText);
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let frames = 8 + r.below(9);
        let clip = noise_clip(&format!("g{i}"), frames, &mut r);
        let layer = 1 + r.below(BackboneSpec::NUM_LAYERS);
        let cfg = base.clone().with_layer(layer);
        let joint = extract_video(&clip, &cfg, &img)?;
        let single = extract_video(&clip, &cfg.with_window(1), &img)?;
        worst = worst.max(joint.features.max_abs_diff(&single.features));
    }
    Ok(worst)
}

fn gate_equivalence_extraction() -> Outcome {
    let dev = gate_equivalence_deviation(&untrained()?, 4, 0)?;
    ensure(dev <= 1e-5, || format!("deviation {dev}"))
}

fn image_mode_window_locality() -> Outcome {
    let b = untrained()?.set_image_mode();
    let mut r = Rng::new(6).split("locality");
    let frames = r.uniform_tensor(&[6, 32, 32, 1], 0.0, 1.0);
    let mut other = r.uniform_tensor(&[6, 32, 32, 1], 0.0, 1.0);
    let m = 2;
    let fl = 32 * 32;
    other.data_mut()[m * fl..(m + 1) * fl].copy_from_slice(&frames.data()[m * fl..(m + 1) * fl]);
    let cfg = ExtractionConfig::default().with_cond(CondMode::None);
    let a = extract_window(&frames, &cfg, &b)?;
    let c = extract_window(&other, &cfg, &b)?;
    let dev = a.slice_leading(m, m + 1)?.max_abs_diff(&c.slice_leading(m, m + 1)?);
    ensure(dev <= 1e-5, || format!("frame {m} moved by {dev}"))
}

fn cache_examples() -> Outcome {
    let dir = Scratch::new("cache")?;
    let cache = FeatureCache::new(dir.path());
    let b = untrained()?;
    let clip = noise_clip("c0", 8, &mut Rng::new(7));
    let cfg = ExtractionConfig::default().with_layer(2);
    let d = clip_digest(&clip);
    let key = cache_key(&cfg, b.fingerprint(), &clip.id, &d);
    ensure(key == cache_key(&cfg, b.fingerprint(), &clip.id, &d), || "keys differ".into())?;
    ensure(cache.get(&key)?.is_none(), || "empty cache hit".into())?;
    let seq = extract_video(&clip, &cfg, &b)?;
    cache.put(&key, &seq)?;
    let back = cache.get(&key)?.ok_or("miss after put")?;
    ensure(back.features.data().iter().zip(seq.features.data()).all(|(a, b)| a.to_bits() == b.to_bits()), || "payload changed".into())?;
    ensure(back == seq, || "provenance changed".into())?;
    let path = cache.path_for(&key);
    let bytes = std::fs::read(&path)?;
    std::fs::write(&path, &bytes[..bytes.len() / 2])?;
    ensure(matches!(cache.get(&key), Err(ExtractionError::Corrupted { .. })), || "truncated file not reported".into())?;
    let ex = Extractor::new(&b).with_cache(FeatureCache::new(dir.path().join("ex")));
    let first = ex.extract(&clip, &cfg)?;
    let second = ex.extract(&clip, &cfg)?;
    let c = ex.cache().ok_or("no cache")?;
    ensure(first == second && c.hits() == 1 && c.misses() == 1, || format!("hits {} misses {}", c.hits(), c.misses()))
}

// ---- classifier

fn tiny_classifier(pos_emb: bool, head: HeadType, mode: TaskMode, seed: u64) -> Result<ClassifierModel, BoxError> {
    let mut cfg = ClassifierConfig::new(6, 4, mode);
    cfg.model_dim = 8;
    cfg.depth = 2;
    cfg.heads = 2;
    cfg.ff_mult = 2;
    cfg.pos_emb = pos_emb;
    cfg.head = head;
    cfg.max_len = 12;
    cfg.seed = seed;
    Ok(ClassifierModel::new(cfg)?)
}

fn classifier_examples() -> Outcome {
    let mut r = Rng::new(8).split("classifier");
    let m = tiny_classifier(true, HeadType::Transformer, TaskMode::SingleLabel, 1)?;
    let x = r.normal_tensor(&[5, 6], 1.0);
    let p = classifier_forward(&m, &x, None)?;
    close(p.iter().sum(), 1.0, 1e-6, "single-label sum")?;
    ensure(p == predict(&m, &x)?, || "predict differs from classifier_forward".into())?;
    let seqs: Vec<Tensor> = (0..5).map(|i| r.normal_tensor(&[3 + i, 6], 1.0)).collect();
    let batched = predict_batch(&m, &seqs)?;
    for (s, b) in seqs.iter().zip(&batched) {
        let single = predict(&m, s)?;
        let dev = single.iter().zip(b).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        ensure(dev < 1e-9, || format!("batch vs single {dev}"))?;
    }
    let np = tiny_classifier(false, HeadType::Transformer, TaskMode::MultiLabel, 2)?;
    let base = predict(&np, &x)?;
    let mut perm: Vec<usize> = (0..5).collect();
    for _ in 0..5 {
        r.shuffle(&mut perm);
        let rows: Vec<Tensor> = perm.iter().map(|&i| x.slice_leading(i, i + 1)).collect::<Result<_, _>>()?;
        let px = Tensor::concat_leading(&rows)?;
        let pp = predict(&np, &px)?;
        let dev = pp.iter().zip(&base).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        ensure(dev < 1e-9, || format!("permutation moved output by {dev}"))?;
    }
    Ok(())
}

fn loss_examples() -> Outcome {
    let l = focal_loss(&[0.5], &[1.0], 0.25, 2.0, TaskMode::SingleLabel)?;
    close(l, 0.043_321_698_784_996_58, 1e-5, "closed-form point")?;
    let mut prev = f64::INFINITY;
    for p in [0.5, 0.7, 0.9, 0.99, 0.999] {
        let l = focal_loss(&[p], &[1.0], 0.25, 2.0, TaskMode::MultiLabel)?;
        ensure(l < prev, || format!("loss not decreasing at p = {p}"))?;
        prev = l;
    }
    ensure(prev < 1e-6, || format!("loss at 0.999 is {prev}"))
}

/// Largest `|focal(gamma=0, alpha=1) - cross-entropy|` over `n` random
/// single- and multi-label cases.
pub fn focal_ce_max_deviation(n: usize, seed: u64) -> Result<f64, BoxError> {
    let mut r = Rng::new(seed).split("focal-ce");
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let k = 1 + r.below(6);
        if i % 2 == 0 {
            let p: Vec<f64> = (0..k).map(|_| r.uniform_range(0.01, 0.99)).collect();
            let y: Vec<f64> = (0..k).map(|_| if r.uniform() < 0.5 { 1.0 } else { 0.0 }).collect();
            let bce = p.iter().zip(&y).map(|(p, y)| -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())).sum::<f64>() / k as f64;
            worst = worst.max((focal_loss(&p, &y, 1.0, 0.0, TaskMode::MultiLabel)? - bce).abs());
        } else {
            let logits: Vec<f64> = (0..k).map(|_| 2.0 * r.normal()).collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            let p: Vec<f64> = logits.iter().map(|l| l.exp() / z).collect();
            let mut y = vec![0.0; k];
            y[r.below(k)] = 1.0;
            let ce = -p.iter().zip(&y).map(|(p, y)| y * p.max(1e-7).ln()).sum::<f64>();
            worst = worst.max((focal_loss(&p, &y, 1.0, 0.0, TaskMode::SingleLabel)? - ce).abs());
        }
    }
    Ok(worst)
}

fn loss_identity() -> Outcome {
    let dev = focal_ce_max_deviation(1000, 0)?;
    ensure(dev <= 1e-6, || format!("deviation {dev}"))
}

fn mixup_examples() -> Outcome {
    with_precision(Precision::F64, mixup_f64)
}

fn mixup_f64() -> Outcome {
    let mut r = Rng::new(9).split("mixup");
    let seqs: Vec<Tensor> = (0..3).map(|i| r.normal_tensor(&[2 + i, 4], 1.0)).collect();
    let refs: Vec<&Tensor> = seqs.iter().collect();
    let targets = vec![vec![1.0, 0.0, 1.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
    let batch = pad_batch(&refs, &targets)?;
    let partners = [1, 2, 0];
    let one = mixup_with(&batch, 1.0, &partners);
    ensure(one.x == batch.x && one.targets == batch.targets, || "lambda = 1 changed item a".into())?;
    let zero = mixup_with(&batch, 0.0, &partners);
    for (i, &j) in partners.iter().enumerate() {
        let row = |t: &Tensor, k: usize| t.slice_leading(k, k + 1);
        ensure(row(&zero.x, i)? == row(&batch.x, j)? && row(&zero.targets, i)? == row(&batch.targets, j)?, || "lambda = 0 is not item b".into())?;
    }
    let lam = 0.3;
    let mixed = mixup_with(&batch, lam, &partners);
    for (i, &j) in partners.iter().enumerate() {
        let sum = |t: &Tensor, k: usize| t.data()[k * 3..(k + 1) * 3].iter().sum::<f64>();
        close(sum(&mixed.targets, i), lam * sum(&batch.targets, i) + (1.0 - lam) * sum(&batch.targets, j), 1e-12, "label total")?;
    }
    Ok(())
}

fn cosine_examples() -> Outcome {
    close(cosine_lr(0, 100, 3e-5), 3e-5, 1e-18, "step 0")?;
    close(cosine_lr(100, 100, 3e-5), 0.0, 1e-18, "step total")?;
    close(cosine_lr(50, 100, 3e-5), 1.5e-5, 1e-18, "midpoint")
}

fn toy_data(r: &mut Rng, n: usize) -> (Vec<Tensor>, Vec<Vec<usize>>) {
    let data = (0..n).map(|i| r.normal_tensor(&[3 + i % 3, 6], 1.0)).collect();
    let labels = (0..n).map(|i| vec![i % 4]).collect();
    (data, labels)
}

fn training_examples() -> Outcome {
    let m = tiny_classifier(true, HeadType::Transformer, TaskMode::SingleLabel, 3)?;
    let (data, labels) = toy_data(&mut Rng::new(10), 12);
    let cfg = TrainConfig { epochs: 0, batch_size: 4, ..TrainConfig::default() };
    let (same, _) = train_classifier(&m, &data, &labels, &cfg)?;
    ensure(same.weights == m.weights, || "0 epochs changed the weights".into())?;
    let cfg = TrainConfig { epochs: 2, ..cfg };
    let (a, _) = train_classifier(&m, &data, &labels, &cfg)?;
    let (b, _) = train_classifier(&m, &data, &labels, &cfg)?;
    let bits = |m: &ClassifierModel| m.weights.iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect::<Vec<_>>();
    ensure(bits(&a) == bits(&b), || "same seed, different weights".into())?;
    ensure(a.weights != m.weights, || "training did not move the weights".into())
}

fn relabeling_symmetry() -> Outcome {
    let m = tiny_classifier(true, HeadType::Transformer, TaskMode::SingleLabel, 4)?;
    let perm = [2usize, 0, 3, 1];
    let mut pm = m.clone();
    let (w, b) = (m.weights.get("head.w").ok_or("head.w")?, m.weights.get("head.b").ok_or("head.b")?);
    let dm = w.shape()[0];
    let mut nw = w.clone();
    let mut nb = b.clone();
    for (old, &new) in perm.iter().enumerate() {
        for i in 0..dm {
            nw.data_mut()[i * 4 + new] = w.data()[i * 4 + old];
        }
        nb.data_mut()[new] = b.data()[old];
    }
    pm.weights.insert("head.w", nw);
    pm.weights.insert("head.b", nb);
    let mut r = Rng::new(11);
    for _ in 0..10 {
        let x = r.normal_tensor(&[4, 6], 1.0);
        let a = crate::metrics::argmax(&predict(&m, &x)?);
        let b = crate::metrics::argmax(&predict(&pm, &x)?);
        ensure(perm[a] == b, || format!("class {a} became {b}, expected {}", perm[a]))?;
    }
    Ok(())
}

// ---- metrics

fn metric_examples() -> Outcome {
    close(average_precision(&[0.9, 0.8, 0.1, 0.2], &[true, true, false, false])?, 1.0, 0.0, "perfect ranking")?;
    close(average_precision(&[0.3], &[true])?, 1.0, 0.0, "single positive")?;
    let s = [0.2, 0.9, 0.4, 0.6];
    let l = [false, true, true, false];
    let single = mean_average_precision(&s.iter().map(|&v| vec![v]).collect::<Vec<_>>(), &l.iter().map(|&v| vec![v]).collect::<Vec<_>>())?;
    close(single.map, average_precision(&s, &l)?, 0.0, "K = 1")?;
    let perfect = mean_average_precision(&[vec![0.9, 0.1], vec![0.2, 0.8]], &[vec![true, false], vec![false, true]])?;
    close(perfect.map, 1.0, 0.0, "perfect mAP")?;
    close(accuracy(&[1, 2], &[1, 2])?, 1.0, 0.0, "all correct")?;
    close(accuracy(&[0, 0], &[1, 2])?, 0.0, 0.0, "none correct")?;
    close(accuracy(&[1, 0], &[1, 2])?, 0.5, 0.0, "half correct")?;
    close(pearson(&[1.0, 2.0, 4.0], &[1.0, 2.0, 4.0])?, 1.0, 1e-12, "y = x")?;
    close(pearson(&[1.0, 2.0, 4.0], &[-1.0, -2.0, -4.0])?, -1.0, 1e-12, "y = -x")
}

/// AP by enumerating every ranking position directly: precision at each
/// positive's rank (ties broken by index), averaged.
pub fn brute_force_ap(scores: &[f64], labels: &[bool]) -> f64 {
    let n = scores.len();
    let above = |i: usize, j: usize| scores[j] > scores[i] || (scores[j] == scores[i] && j < i);
    let positives: Vec<usize> = (0..n).filter(|&i| labels[i]).collect();
    positives
        .iter()
        .map(|&i| {
            let rank = 1 + (0..n).filter(|&j| j != i && above(i, j)).count();
            let hits = 1 + positives.iter().filter(|&&j| j != i && above(i, j)).count();
            hits as f64 / rank as f64
        })
        .sum::<f64>()
        / positives.len() as f64
}

/// Largest AP deviation over every label pattern of length `1..=max_n` with
/// at least one positive, `trials` random score vectors each (some with ties).
pub fn ap_oracle_deviation(max_n: usize, trials: usize, seed: u64) -> Result<(f64, usize), BoxError> {
    let mut r = Rng::new(seed).split("ap-oracle");
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for n in 1..=max_n {
        for pattern in 1u32..(1 << n) {
            let labels: Vec<bool> = (0..n).map(|i| pattern >> i & 1 == 1).collect();
            for t in 0..trials {
                let scores: Vec<f64> =
                    if t % 5 == 4 { (0..n).map(|_| r.below(3) as f64 / 2.0).collect() } else { (0..n).map(|_| r.uniform()).collect() };
                worst = worst.max((average_precision(&scores, &labels)? - brute_force_ap(&scores, &labels)).abs());
                cases += 1;
            }
        }
    }
    Ok((worst, cases))
}

fn average_precision_oracle() -> Outcome {
    let (dev, cases) = ap_oracle_deviation(8, 50, 0)?;
    ensure(dev <= 1e-12, || format!("deviation {dev} over {cases} cases"))
}

/// Largest mAP change under a random strictly increasing transform of each
/// class's scores, over `n` random instances.
pub fn map_invariance_deviation(n: usize, seed: u64) -> Result<f64, BoxError> {
    let mut r = Rng::new(seed).split("map-monotone");
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let (items, k) = (3 + r.below(20), 1 + r.below(5));
        let scores: Vec<Vec<f64>> = (0..items).map(|_| (0..k).map(|_| r.uniform()).collect()).collect();
        let mut labels: Vec<Vec<bool>> = (0..items).map(|_| (0..k).map(|_| r.uniform() < 0.4).collect()).collect();
        labels[0] = vec![true; k];
        let (a, b) = (r.uniform_range(0.5, 3.0), r.uniform_range(-1.0, 1.0));
        let f = |v: f64| (a * v + b).exp() + v.powi(3);
        let moved: Vec<Vec<f64>> = scores.iter().map(|row| row.iter().map(|&v| f(v)).collect()).collect();
        let x = mean_average_precision(&scores, &labels)?.map;
        let y = mean_average_precision(&moved, &labels)?.map;
        worst = worst.max((x - y).abs());
    }
    Ok(worst)
}

fn map_monotone_invariance() -> Outcome {
    let dev = map_invariance_deviation(100, 0)?;
    ensure(dev <= 1e-12, || format!("deviation {dev}"))
}

fn matrix_examples() -> Outcome {
    let m = species_matrix(1, |_, _| Ok(0.75))?;
    ensure(m == vec![vec![0.75]], || "1 domain".into())?;
    let run = || species_matrix(3, |i, j| Ok(((i * 7 + j * 3) % 5) as f64 / 5.0));
    let (a, b) = (run()?, run()?);
    ensure(a.len() == 3 && a.iter().all(|r| r.len() == 3) && a == b, || "3x3 rerun".into())?;
    let still = Action::Still.index();
    let labels = [still, still, still, 0, 1, 2];
    let base = freq_baseline(&labels, 5)?;
    ensure(base.class == still, || "50% still".into())?;
    let test = [still, 0, still, 3, 3];
    close(base.accuracy(&test)?, 2.0 / 5.0, 1e-12, "baseline accuracy is the class frequency")?;
    let g = gains(&[vec![0.5, 0.7]], &[vec![0.2, 0.1]])?;
    ensure((g[0][0] - 0.3).abs() < 1e-12 && (g[0][1] - 0.6).abs() < 1e-12, || "gains".into())?;
    let p = FrequencyProfile::from_counts(&[1, 2, 3])?;
    let fc = acc_vs_freqcorr(&[vec![0.9, 0.4], vec![0.3, 0.8]], &[p.clone(), p])?;
    ensure(fc.pairs.len() == 2 && fc.pairs.iter().all(|q| q.2 == 1.0), || "identical profiles".into())
}

// ---- datagen

fn datagen_examples() -> Outcome {
    let spec = SceneSpec::new(Action::Still, Species::Star, Viewpoint::ThirdPerson, Context::Textured, 12, 5);
    let c = render_clip("s", &spec)?;
    ensure((1..c.len()).all(|i| c.frame(i) == c.frame(0)), || "still clip moves".into())?;
    ensure(render_clip("s", &spec)? == c, || "same spec, different clip".into())?;
    let p = ProtocolSpec::cross_species(&[Species::Circle, Species::Square], &[Species::Triangle]).with_counts(4, 3);
    let s = make_protocol(&p)?;
    ensure(!s.train.species().contains(&Species::Triangle), || "triangle in train".into())?;
    ensure(s.train.len() + s.test.len() + s.test_in_domain.len() == p.total_clips() && s.train.len() == 8, || "clip counts".into())?;
    ensure(multi_label_variant(&s.train, 0.0, 1)? == s.train, || "rate 0 changed the manifest".into())?;
    let all = multi_label_variant(&s.train, 1.0, 1)?;
    for e in &all.entries {
        let partner = e.scene.partner.ok_or("rate 1 left a clip single")?;
        let want = if partner == e.scene.action { 1 } else { 2 };
        ensure(e.labels.len() == want, || format!("{}: {} labels", e.id, e.labels.len()))?;
    }
    let some = multi_label_variant(&s.train, 0.5, 2)?;
    ensure(some.entries.iter().all(|e| !e.labels.is_empty()), || "empty label vector".into())?;
    let diag = ProtocolSpec::in_domain(&[Species::Triangle]);
    ensure(diag.train_domains == diag.test_domains, || "in-domain is not the diagonal".into())
}

fn protocol_determinism() -> Outcome {
    let b = untrained()?;
    let run = tiny_run(ProtocolSpec::in_domain(&[Species::Circle, Species::Star]).with_counts(4, 2));
    let p = prepare(&run.protocol, None)?;
    let ex = Extractor::new(&b);
    let (a, _) = run_protocol(&p, &run, &ex)?;
    let (c, _) = run_protocol(&p, &run, &ex)?;
    ensure(serde_json::to_string(&a)? == serde_json::to_string(&c)?, || "reports differ".into())
}

// ---- experiments

fn tiny_grid(b: &Backbone, p: &Prepared, root: &Path) -> Result<(crate::experiments::GridResult, crate::experiments::GridResult), BoxError> {
    let cfg = GridConfig { base: tiny_run(tiny_context()), axes: GridAxes::default() };
    let ex = Extractor::new(b).with_cache(FeatureCache::new(root));
    let first = grid_search(&cfg, p, &ex)?;
    let again = Extractor::new(b).with_cache(FeatureCache::new(root));
    let second = grid_search(&cfg, p, &again)?;
    Ok((first, second))
}

fn grid_examples() -> Outcome {
    let dir = Scratch::new("grid")?;
    let b = untrained()?;
    let p = prepare(&tiny_context(), None)?;
    let (first, second) = tiny_grid(&b, &p, dir.path())?;
    ensure(first.rows.len() == 12, || format!("{} rows", first.rows.len()))?;
    ensure(serde_json::to_string(&first)? == serde_json::to_string(&second)?, || "rerun differs".into())?;
    ensure(second.cache_hit_rate() == Some(1.0), || format!("rerun hit rate {:?}", second.cache_hit_rate()))?;
    let cfg = GridConfig { base: tiny_run(tiny_context()), axes: GridAxes::default() };
    let uncached = grid_search(&cfg, &p, &Extractor::new(&b))?;
    let metrics = |r: &crate::experiments::GridResult| r.rows.iter().map(|x| (x.layer, x.step, x.in_domain, x.out_of_domain)).collect::<Vec<_>>();
    ensure(metrics(&uncached) == metrics(&first), || "cache changes results".into())
}

fn ablation_examples() -> Outcome {
    let b = untrained()?;
    let p = prepare(&tiny_context(), None)?;
    let cfg = AblationConfig { base: tiny_run(tiny_context()), axes: AblationAxes::default() };
    let rows = run_ablations(&cfg, &p, &b, None)?;
    ensure(rows.len() == 11, || format!("{} rows", rows.len()))?;
    ensure(rows.iter().filter(|r| r.axis == "head").count() == 3, || "head rows".into())?;
    for r in &rows {
        ensure(r.changed.iter().all(|c| c.starts_with(&format!("{}.", field_of(&r.axis)))), || format!("{}: changed {:?}", r.axis, r.changed))?;
        if r.config.extraction.cond == CondMode::None {
            ensure(r.frame_condition_encodes == 0, || "cond none read frames".into())?;
        }
    }
    let loss_rows: Vec<_> = rows.iter().filter(|r| r.axis == "loss").collect();
    let (bce, focal) = (
        loss_rows.iter().find(|r| r.config.train.loss == LossKind::Bce).ok_or("no bce row")?,
        loss_rows.iter().find(|r| r.config.train.loss == LossKind::Focal).ok_or("no focal row")?,
    );
    let diff = crate::experiments::config_diff(&serde_json::to_value(&bce.config)?, &serde_json::to_value(&focal.config)?);
    ensure(diff == ["train.loss"], || format!("focal vs bce differ in {diff:?}"))
}

fn field_of(axis: &str) -> &str {
    match axis {
        "head" => "head",
        "window" | "cond" => "extraction",
        _ => "train",
    }
}

fn sweep_examples() -> Outcome {
    let b = untrained()?;
    let mut cfg = SweepConfig::new(default_sweep_protocols(2, 1));
    cfg.head = tiny_head();
    cfg.train = tiny_train();
    let ex = Extractor::new(&b);
    let cells = layer_sweep(&cfg, &ex)?;
    ensure(cells.len() == 12, || format!("{} cells", cells.len()))?;
    ensure(layer_sweep(&cfg, &ex)? == cells, || "rerun differs".into())
}

fn localization_examples() -> Outcome {
    let b = untrained()?;
    let ex = Extractor::new(&b);
    let hc = tiny_head();
    let model = ClassifierModel::new(hc.classifier(b.spec().feature_dim(3)?, TaskMode::SingleLabel, 0))?;
    let cfg = ExtractionConfig::default().with_layer(3);
    let clip = uniform_clip("u", 8, 0.3);
    let map = localize(&clip, &model, &cfg, 1, 2, &ex)?;
    let spread = map.scores.iter().cloned().fold(f64::MIN, f64::max) - map.scores.iter().cloned().fold(f64::MAX, f64::min);
    ensure(spread <= 1e-5, || format!("uniform clip spread {spread}"))?;
    let moving = render_clip("m", &SceneSpec::new(Action::Translate, Species::Cross, Viewpoint::ThirdPerson, Context::Plain, 8, 2))?;
    ensure(localize(&moving, &model, &cfg, 0, 3, &ex)?.scores.len() == 9, || "G = 3".into())
}

fn cli_examples() -> Outcome {
    let run = |args: &[&str]| {
        let (mut o, mut e) = (Vec::new(), Vec::new());
        let argv: Vec<std::ffi::OsString> = std::iter::once("actiondiff").chain(args.iter().copied()).map(Into::into).collect();
        let code = crate::cli::parse_and_dispatch(argv, &mut o, &mut e);
        (code, String::from_utf8_lossy(&e).into_owned())
    };
    let (code, err) = run(&["eval"]);
    ensure(code == 1 && err.contains("--classifier"), || format!("missing flag: exit {code}, {err}"))?;
    let (code, _) = run(&["no-such-command"]);
    ensure(code == 1, || format!("unknown subcommand exit {code}"))?;
    let dir = Scratch::new("cli")?;
    let file = dir.path().join("a.json");
    std::fs::write(&file, r#"{"seed": 3}"#)?;
    let c = crate::cli::config::resolve_file(Some(&file), &[("seed".into(), serde_json::json!(7))])?;
    ensure(c.seed == 7, || "flag did not win".into())?;
    ensure(crate::cli::config::resolve(Some(""), &[])?.train == TrainConfig::default(), || "empty file".into())?;
    let e = crate::cli::config::resolve(Some(r#"{"foo": 1}"#), &[]).err().ok_or("unknown key accepted")?;
    ensure(e.to_string().contains("foo"), || e.to_string())?;
    let snap = serde_json::to_string(&c)?;
    ensure(crate::cli::config::resolve(Some(&snap), &[])? == c, || "snapshot is not a fixed point".into())
}
