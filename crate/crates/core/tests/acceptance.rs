//! Acceptance suite. Each test prints one `criterion N ... PASS|FAIL` line
//! to the real stdout, so the verdicts show up even when output is captured.
//! Criteria run one at a time so the runtime budgets are measured without
//! contention.

mod common;

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use confaug::backbone::{BackboneConfig, Denoiser};
use confaug::classifiers::{DownstreamModel, DownstreamModelSpec, Family, GuidanceClassifier};
use confaug::dataset::{fuse_datasets, LabeledImages, Split};
use confaug::filtering::{filter_batch, filter_scored, FilterOptions};
use confaug::glyphs::make_toy_glyph_dataset;
use confaug::metrics::{classification_report, fid_between_sets, frechet_distance, FrechetStats};
use confaug::nn::{Graph, Tensor};
use confaug::sampler::{
    apply_guidance, ddpm_step, generate, write_sample_images, SampleConfidence, SamplerConfig, StepModels,
    SyntheticSampleRecord,
};
use confaug::schedule::{make_schedule, posterior_params, q_sample, ScheduleKind};
use confaug::training::{train_denoiser_on, train_downstream_on, train_guidance_on, TrainConfig, TrainHooks};
use confaug::PixelTensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

static SERIAL: Mutex<()> = Mutex::new(());

/// Runs one criterion, prints its verdict line and fails the test unless
/// the body passed within `budget`.
fn criterion(n: usize, name: &str, budget: Duration, body: impl FnOnce() -> String) {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(body));
    let elapsed = start.elapsed();
    let (passed, detail) = match &outcome {
        Ok(d) => (elapsed <= budget, d.clone()),
        Err(p) => (
            false,
            p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default(),
        ),
    };
    let verdict = if passed { "PASS" } else { "FAIL" };
    let line = format!(
        "criterion {n:>2} {name}: {verdict} [{detail}] ({:.2}s, budget {}s)\n",
        elapsed.as_secs_f64(),
        budget.as_secs()
    );
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
    assert!(passed, "{}", line.trim_end());
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

#[test]
fn c01_schedule_identities() {
    criterion(1, "schedule identities", secs(1), || {
        let mut worst: f64 = 0.0;
        for t in [1, 10, 200, 1000] {
            for (kind, betas) in
                [(ScheduleKind::Linear, common::linear_betas(t, 1e-4, 0.02)), (ScheduleKind::Cosine, common::cosine_betas(t))]
            {
                let s = make_schedule(kind, t, 1e-4, 0.02).unwrap();
                for (a, b) in s.alpha_bars.iter().zip(common::cumprod(&betas)) {
                    worst = worst.max((a - b).abs() / b.abs());
                }
                for i in 1..t {
                    assert!(s.alpha_bars[i] < s.alpha_bars[i - 1], "{kind} T={t}: ᾱ not decreasing at {i}");
                    assert!(s.snr(i) < s.snr(i - 1), "{kind} T={t}: SNR not decreasing at {i}");
                }
            }
        }
        assert!(worst <= 1e-10, "max relative error {worst:e}");
        format!("max relative error {worst:.1e}")
    });
}

#[test]
fn c02_forward_composition() {
    criterion(2, "forward-process composition", secs(10), || {
        let big_t = 200;
        let s = make_schedule(ScheduleKind::Linear, big_t, 1e-4, 0.02).unwrap();
        let (x0, n) = (0.7, 100_000);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut worst: f64 = 0.0;
        for t in [1, big_t / 2, big_t - 1] {
            let (mut sum, mut sq) = (0.0, 0.0);
            for _ in 0..n {
                let e: f64 = StandardNormal.sample(&mut rng);
                let mut x = s.alpha_bars[0].sqrt() * x0 + (1.0 - s.alpha_bars[0]).sqrt() * e;
                for u in 1..=t {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    x = s.alphas[u].sqrt() * x + s.betas[u].sqrt() * e;
                }
                sum += x;
                sq += x * x;
            }
            let mean = sum / n as f64;
            let var = sq / n as f64 - mean * mean;
            let want_var = 1.0 - s.alpha_bars[t];
            let z_mean = (mean - s.alpha_bars[t].sqrt() * x0).abs() / (want_var / n as f64).sqrt();
            let z_var = (var - want_var).abs() / (want_var * (2.0 / (n - 1) as f64).sqrt());
            assert!(z_mean < 3.0 && z_var < 3.0, "t={t}: mean z {z_mean:.2}, variance z {z_var:.2}");
            worst = worst.max(z_mean).max(z_var);
        }
        format!("largest deviation {worst:.2} standard errors")
    });
}

#[test]
fn c03_posterior_identity() {
    criterion(3, "posterior identity", secs(1), || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut worst: f64 = 0.0;
        for (kind, betas) in
            [(ScheduleKind::Linear, common::linear_betas(1000, 1e-4, 0.02)), (ScheduleKind::Cosine, common::cosine_betas(1000))]
        {
            let s = make_schedule(kind, 1000, 1e-4, 0.02).unwrap();
            let ab = common::cumprod(&betas);
            for t in [1, 500, 999] {
                let x0: Vec<f64> = (0..16).map(|_| StandardNormal.sample(&mut rng)).collect();
                let eps: Vec<f64> = (0..16).map(|_| StandardNormal.sample(&mut rng)).collect();
                let eps_t = Tensor::<f64>::from_f64(&[1, 4, 4], &eps).unwrap();
                let xt = q_sample(&Tensor::<f64>::from_f64(&[1, 4, 4], &x0).unwrap(), t, &eps_t, &s).unwrap();
                let (mean, _) = posterior_params(&xt, &eps_t, t, &s).unwrap();
                let (abt, abp) = (ab[t], ab[t - 1]);
                let beta = 1.0 - abt / abp;
                for i in 0..16 {
                    let alt = (abp.sqrt() * beta * x0[i] + (1.0 - beta).sqrt() * (1.0 - abp) * xt.data()[i]) / (1.0 - abt);
                    worst = worst.max((mean.data()[i] - alt).abs());
                }
            }
        }
        assert!(worst <= 1e-8, "max difference {worst:e}");
        format!("max difference {worst:.1e}")
    });
}

fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Largest relative error over 10 sampled parameter coordinates.
fn param_grad_error<M: Clone>(
    model: &M,
    store: fn(&mut M) -> &mut confaug::nn::ParamStore<f64>,
    loss: &dyn Fn(&M) -> f64,
    grads: Vec<Option<Tensor<f64>>>,
    h: f64,
    rng: &mut impl Rng,
) -> f64 {
    let mut m = model.clone();
    let ids: Vec<_> = store(&mut m).ids().collect();
    let total: usize = ids.iter().map(|&id| store(&mut m).get(id).numel()).sum();
    let mut worst: f64 = 0.0;
    let mut seen = Vec::new();
    while seen.len() < 10 {
        let mut k = rng.random_range(0..total);
        let mut pick = None;
        for &id in &ids {
            let n = store(&mut m).get(id).numel();
            if k < n {
                pick = Some((id, k));
                break;
            }
            k -= n;
        }
        let (id, i) = pick.unwrap();
        if seen.contains(&(id, i)) {
            continue;
        }
        seen.push((id, i));
        let a = grads[id.index()].as_ref().map_or(0.0, |g| g.data()[i]);
        let orig = store(&mut m).get(id).data()[i];
        store(&mut m).get_mut(id).data_mut()[i] = orig + h;
        let up = loss(&m);
        store(&mut m).get_mut(id).data_mut()[i] = orig - h;
        let down = loss(&m);
        store(&mut m).get_mut(id).data_mut()[i] = orig;
        let num = (up - down) / (2.0 * h);
        assert!(common::rel_close(a, num, 1e-4), "{}[{i}]: analytic {a} vs numeric {num}", store(&mut m).name(id));
        worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(1e-300));
    }
    worst
}

fn log_softmax_at(row: &[f64], y: usize) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    row[y] - m - row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

#[test]
fn c04_gradient_checks() {
    criterion(4, "gradient checks", secs(30), || {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut d = Denoiser::<f64>::new(common::tiny_backbone(3), 20, 1).unwrap();
        common::randomize(&mut d.params, "conv_out", 0.3, &mut rng);
        let x = random_tensor(&[2, 1, 8, 8], &mut rng);
        let (ts, ys) = ([3, 17], [Some(1), None]);
        let loss = |m: &Denoiser<f64>| m.predict(&x, &ts, &ys).unwrap().data().iter().map(|v| v * v).sum::<f64>();
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let out = d.forward(&mut g, xv, &ts, &ys, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let l = g.sum_squares(out).unwrap();
        let grads = g.backward(l).unwrap().for_params(&d.params);
        let den = param_grad_error(&d, |m| &mut m.params, &loss, grads, 1e-3, &mut rng);

        let mut c = GuidanceClassifier::<f64>::new(common::tiny_backbone(4), 20, 5).unwrap();
        common::randomize(&mut c.params, "head", 0.5, &mut rng);
        let x = random_tensor(&[3, 1, 8, 8], &mut rng);
        let (ts, ys) = ([0, 7, 19], [1, 3, 0]);
        let loss = |m: &GuidanceClassifier<f64>| {
            let l = m.logits(&x, &ts).unwrap();
            l.data().chunks(4).zip(ys).map(|(r, y)| log_softmax_at(r, y)).sum::<f64>()
        };
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let out = c.forward(&mut g, xv, &ts, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let l = g.log_prob_sum(out, &ys).unwrap();
        let grads = g.backward(l).unwrap().for_params(&c.params);
        let cls = param_grad_error(&c, |m| &mut m.params, &loss, grads, 1e-4, &mut rng);

        let grad = c.log_prob_grad(&x, &ts, &ys).unwrap();
        let mut inp: f64 = 0.0;
        for _ in 0..10 {
            let i = rng.random_range(0..x.numel());
            let n = common::central_diff(&|x: &Tensor<f64>| loss_at(&c, x, &ts, &ys), &x, i, 1e-4);
            let a = grad.data()[i];
            assert!(common::rel_close(a, n, 1e-4), "input {i}: analytic {a} vs numeric {n}");
            inp = inp.max((a - n).abs() / a.abs().max(n.abs()).max(1e-300));
        }
        format!("max relative error: denoiser {den:.1e}, classifier weights {cls:.1e}, classifier input {inp:.1e}")
    });
}

fn loss_at(c: &GuidanceClassifier<f64>, x: &Tensor<f64>, ts: &[usize], ys: &[usize]) -> f64 {
    let l = c.logits(x, ts).unwrap();
    l.data().chunks(4).zip(ys).map(|(r, &y)| log_softmax_at(r, y)).sum()
}

#[test]
fn c05_guidance_algebra() {
    criterion(5, "guidance algebra", secs(5), || {
        let s = make_schedule(ScheduleKind::Linear, 20, 1e-4, 0.02).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut d = Denoiser::<f64>::new(common::tiny_backbone(3), 20, 1).unwrap();
        common::randomize(&mut d.params, "conv_out", 0.3, &mut rng);
        let mut g = GuidanceClassifier::<f64>::new(common::tiny_backbone(3), 20, 2).unwrap();
        common::randomize(&mut g.params, "head", 0.5, &mut rng);
        let x = random_tensor(&[2, 1, 8, 8], &mut rng);
        let z = random_tensor(&[2, 1, 8, 8], &mut rng);
        for t in [0, 7, 19] {
            let noise = (t > 0).then_some(&z);
            let zero = ddpm_step(&x, t, &[0, 2], &StepModels::guided(&d, &g, 0.0), &s, noise).unwrap();
            let plain = ddpm_step(&x, t, &[0, 2], &StepModels::unguided(&d), &s, noise).unwrap();
            assert_eq!(zero, plain, "s = 0 differs from the unguided step at t={t}");
        }
        // dyadic values keep every product exact
        let mean = Tensor::<f64>::from_f64(&[1, 1, 2, 2], &[0.25, -0.5, 1.125, 0.0]).unwrap();
        let grad = Tensor::<f64>::from_f64(&[1, 1, 2, 2], &[1.0, -0.75, 0.5, 2.0]).unwrap();
        let shift = |sc: f64| apply_guidance(&mean, 0.0625, &grad, sc).unwrap().sub(&mean).unwrap();
        assert_eq!(shift(2.0), shift(1.0).scale(2.0), "shift not linear in s");
        assert_eq!(shift(3.0), shift(1.0).scale(3.0), "shift not linear in s");
        let flat = GuidanceClassifier::<f64>::new(common::tiny_backbone(3), 20, 3).unwrap();
        let grad = flat.log_prob_grad(&x, &[4, 9], &[1, 2]).unwrap();
        assert!(grad.data().iter().all(|&v| v == 0.0), "constant classifier has a nonzero gradient");
        "s=0 bit-exact at t ∈ {0, 7, 19}; linearity exact; constant-classifier gradient 0".into()
    });
}

#[test]
fn c06_sampler_determinism() {
    criterion(6, "sampler determinism", secs(30), || {
        let s = make_schedule(ScheduleKind::Linear, 20, 1e-4, 0.02).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut d = Denoiser::<f32>::new(common::tiny_backbone(3), 20, 1).unwrap();
        common::randomize(&mut d.params, "conv_out", 0.3, &mut rng);
        let mut g = GuidanceClassifier::<f32>::new(common::tiny_backbone(3), 20, 2).unwrap();
        common::randomize(&mut g.params, "head", 0.5, &mut rng);
        let labels = [0, 1, 2, 2, 1, 0, 1];
        let bytes = |bs: usize| {
            let cfg = SamplerConfig { steps: 10, guidance_scale: 3.0, batch_size: bs, ..Default::default() };
            generate(&labels, &cfg, &d, Some(&g), &s, 8, 42)
                .unwrap()
                .iter()
                .flat_map(|r| r.image.values().data().iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<_>>())
                .collect::<Vec<u8>>()
        };
        let reference = bytes(7);
        assert_eq!(reference, bytes(7), "two runs differ");
        for bs in [1, 2, 3] {
            assert_eq!(reference, bytes(bs), "batch size {bs} differs");
        }
        format!("{} bytes identical across 2 runs and batch sizes {{1, 2, 3, 7}}", reference.len())
    });
}

fn stats(mean: Vec<f64>, covariance: Vec<Vec<f64>>) -> FrechetStats {
    FrechetStats { mean, covariance, count: 100, extractor_id: "oracle".into() }
}

#[test]
fn c07_frechet_oracle() {
    criterion(7, "Fréchet oracle", secs(5), || {
        let one = |a: f64, va: f64, b: f64, vb: f64| {
            frechet_distance(&stats(vec![a], vec![vec![va]]), &stats(vec![b], vec![vec![vb]])).unwrap()
        };
        let (s1, s2) = (one(0.0, 1.0, 1.0, 1.0), one(0.0, 4.0, 0.0, 1.0));
        assert!(s1 == 1.0 && s2 == 1.0, "scalar cases {s1}, {s2}");
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (c1, c2) = (common::random_spd(8, &mut rng), common::random_spd(8, &mut rng));
        let m1: Vec<f64> = (0..8).map(|_| StandardNormal.sample(&mut rng)).collect();
        let m2: Vec<f64> = (0..8).map(|_| StandardNormal.sample(&mut rng)).collect();
        let (a, b) = (stats(m1.clone(), c1.clone()), stats(m2.clone(), c2.clone()));
        let got = frechet_distance(&a, &b).unwrap();
        let want = common::frechet_oracle(&m1, &c1, &m2, &c2);
        let rel = (got - want).abs() / want.abs();
        assert!(rel <= 1e-6, "D=8: {got} vs oracle {want}");
        let own = frechet_distance(&a, &a).unwrap();
        assert!(own.abs() <= 1e-6, "self distance {own}");
        let asym = (got - frechet_distance(&b, &a).unwrap()).abs();
        assert!(asym <= 1e-8, "asymmetry {asym}");
        format!("scalar cases exactly 1.0; D=8 relative error {rel:.1e}; self {own:.1e}; asymmetry {asym:.1e}")
    });
}

fn synthetic_record(i: usize, class: usize) -> SyntheticSampleRecord<f64> {
    SyntheticSampleRecord {
        image: PixelTensor::new(Tensor::zeros(&[1, 2, 2])).unwrap(),
        intended_class: class,
        guidance_scale: 1.0,
        steps: 1,
        seed: 0,
        sample_index: i as u64,
        path: None,
        confidences: Default::default(),
    }
}

#[test]
fn c08_filter_semantics() {
    criterion(8, "filter semantics", secs(5), || {
        let score = |p: f64| SampleConfidence { predicted_class: 0, confidence: p.max(1.0 - p), intended_probability: p };
        let recs: Vec<_> = (0..3).map(|i| synthetic_record(i, 0)).collect();
        let scores: Vec<_> = [0.95, 0.90, 0.8999].into_iter().map(score).collect();
        let (kept, _) = filter_scored(&recs, &scores, "m", &FilterOptions::with_threshold(0.90)).unwrap();
        let ids: Vec<u64> = kept.iter().map(|r| r.sample_index).collect();
        assert_eq!(ids, vec![0, 1], "boundary");

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let recs: Vec<_> = (0..1000).map(|i| synthetic_record(i, rng.random_range(0..5))).collect();
        let scores: Vec<_> = (0..1000).map(|_| score(rng.random_range(0.0..=1.0))).collect();
        let mut prev: Option<Vec<u64>> = None;
        let mut thresholds: Vec<f64> = (0..50).map(|_| rng.random_range(0.0..=1.0)).collect();
        thresholds.extend([0.0, 0.9, 1.0]);
        thresholds.sort_by(f64::total_cmp);
        for &th in &thresholds {
            let (kept, r) = filter_scored(&recs, &scores, "m", &FilterOptions::with_threshold(th)).unwrap();
            let ids: Vec<u64> = kept.iter().map(|r| r.sample_index).collect();
            if let Some(p) = &prev {
                assert!(ids.iter().all(|i| p.contains(i)), "threshold {th} keeps a record a lower one dropped");
            }
            assert_eq!(r.total_retained, kept.len());
            assert_eq!(r.total_in, 1000);
            assert_eq!(r.per_class.values().map(|c| c.input).sum::<usize>(), r.total_in);
            assert_eq!(r.per_class.values().map(|c| c.retained).sum::<usize>(), r.total_retained);
            let kept_sum: f64 = kept.iter().map(|r| r.confidences["m"].intended_probability).sum();
            if let Some(m) = r.mean_confidence_retained {
                assert!((m * kept.len() as f64 - kept_sum).abs() < 1e-9);
            }
            prev = Some(ids);
        }
        format!("boundary [0.95, 0.90, 0.8999] → [kept, kept, dropped]; {} nested thresholds over 1000 records", thresholds.len())
    });
}

#[test]
fn c09_metrics_oracle() {
    criterion(9, "metrics oracle", secs(5), || {
        let r = classification_report(&[0, 1, 1, 1], &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(r.confusion, vec![vec![1, 1], vec![0, 2]]);
        assert_eq!(r.accuracy, 0.75);
        assert!((r.precision_macro - 5.0 / 6.0).abs() < 1e-15 && (r.recall_macro - 0.75).abs() < 1e-15);
        let r = classification_report(&[0, 0, 0], &[0, 1, 2], 3).unwrap();
        assert_eq!(r.confusion, vec![vec![1, 0, 0], vec![1, 0, 0], vec![1, 0, 0]]);
        assert!((r.precision_macro - 1.0 / 9.0).abs() < 1e-15 && (r.recall_macro - 1.0 / 3.0).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let k = rng.random_range(2..8);
            let n = rng.random_range(1..100);
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            let preds: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            let r = classification_report(&preds, &labels, k).unwrap();
            for c in 0..k {
                assert_eq!(r.confusion[c].iter().sum::<usize>(), labels.iter().filter(|&&l| l == c).count());
            }
        }
        "K=2 and K=3 examples exact; row sums hold on 200 fuzzed cases".into()
    });
}

fn glyph_backbone() -> BackboneConfig {
    BackboneConfig {
        base_channels: 16,
        channel_multipliers: vec![1, 2],
        blocks_per_level: 1,
        embedding_dim: 64,
        se_reduction: 4,
        attention_heads: 2,
        class_count: 5,
        dropout: 0.0,
        norm_groups: 4,
        linear_attention_levels: vec![1],
        ..Default::default()
    }
}

fn downstream_config(seed: u64) -> TrainConfig {
    TrainConfig { learning_rate: 1e-3, batch_size: 32, max_epochs: 30, early_stop_patience: 8, seed, ..Default::default() }
}

fn train_residual(train: &LabeledImages<f32>, val: &LabeledImages<f32>, test: &LabeledImages<f32>, seed: u64) -> (DownstreamModel<f32>, f64) {
    let mut m = DownstreamModel::<f32>::new(DownstreamModelSpec::desk(Family::Residual, 5), seed).unwrap();
    let (_, r) = train_downstream_on(&mut m, train, val, test, &downstream_config(seed), TrainHooks::default()).unwrap();
    (m, r.accuracy)
}

fn pixels(images: &LabeledImages<f32>) -> Vec<PixelTensor<f32>> {
    images.images.iter().map(|t| PixelTensor::new(t.clone()).unwrap()).collect()
}

#[test]
fn c10_desk_scale_end_to_end() {
    criterion(10, "desk-scale end to end", secs(3 * 3600), || {
        let dir = tempfile::tempdir().unwrap();
        let full = make_toy_glyph_dataset(&dir.path().join("data"), 5, 200, 1).unwrap();
        let small = full.subsample_train(40, 1);
        let train = small.load_split::<f32>(Split::Train).unwrap();
        let val = small.load_split::<f32>(Split::Val).unwrap();
        let test = small.load_split::<f32>(Split::Test).unwrap();
        assert_eq!(train.labels.len(), 200);

        let sched = make_schedule(ScheduleKind::Linear, 200, 1e-4, 0.02).unwrap();
        let mut den = Denoiser::<f32>::new(glyph_backbone(), 200, 0).unwrap();
        let tc = TrainConfig {
            learning_rate: 2e-3,
            batch_size: 16,
            max_epochs: 50,
            early_stop_patience: 50,
            cosine_lr: true,
            ema_decay: Some(0.995),
            ..Default::default()
        };
        train_denoiser_on(&mut den, &train, &val, &sched, &tc, TrainHooks::default()).unwrap();
        let mut gc = GuidanceClassifier::<f32>::new(glyph_backbone(), 200, 0).unwrap();
        let tc = TrainConfig { max_epochs: 30, early_stop_patience: 30, ema_decay: None, ..tc };
        train_guidance_on(&mut gc, &train, &val, &sched, &tc, TrainHooks::default()).unwrap();

        // Pinned extractor: the desk residual classifier trained on the
        // full real training split.
        let real = full.load_split::<f32>(Split::Train).unwrap();
        let (extractor, _) = train_residual(&real, &val, &test, 99);

        let baselines: Vec<(DownstreamModel<f32>, f64)> = (0..3).map(|seed| train_residual(&train, &val, &test, seed)).collect();
        let filter_model = &baselines[0].0;

        let labels: Vec<usize> = (0..5 * 200).map(|i| i % 5).collect();
        let sc = SamplerConfig { steps: 50, guidance_scale: 10.0, batch_size: 50, ..Default::default() };
        let mut pool = generate(&labels, &sc, &den, Some(&gc), &sched, 32, 7).unwrap();
        write_sample_images(&mut pool, &dir.path().join("samples")).unwrap();
        let (kept, report) = filter_batch(&pool, filter_model, &FilterOptions::with_threshold(0.90)).unwrap();
        let (kept_mean, rejected_mean) = (report.mean_confidence_retained, report.mean_confidence_rejected);
        assert!(report.total_retained > 0, "(a) nothing retained");
        if let (Some(k), Some(r)) = (kept_mean, rejected_mean) {
            assert!(k > r, "(a) retained mean {k} <= rejected mean {r}");
        }

        let real_px = pixels(&real);
        let real_refs: Vec<_> = real_px.iter().collect();
        let all: Vec<_> = pool.iter().map(|r| &r.image).collect();
        let retained: Vec<_> = kept.iter().map(|r| &r.image).collect();
        let fid_all = fid_between_sets(&real_refs, &all, &extractor, "penultimate").unwrap().fid;
        let fid_kept = fid_between_sets(&real_refs, &retained, &extractor, "penultimate").unwrap().fid;
        assert!(fid_kept <= fid_all, "(b) filtered FID {fid_kept} > unfiltered {fid_all}");

        let fused = fuse_datasets(&small, &kept).unwrap();
        let fused_train = fused.load_split::<f32>(Split::Train).unwrap();
        let mut gains = Vec::new();
        for (seed, (_, base)) in baselines.iter().enumerate() {
            let (_, acc) = train_residual(&fused_train, &val, &test, seed as u64);
            assert!(acc >= base - 0.005, "(c) seed {seed}: fused {acc} < baseline {base} - 0.005");
            gains.push(acc - base);
        }
        let mean_gain = gains.iter().sum::<f64>() / gains.len() as f64;
        assert!(mean_gain >= 0.0, "(c) mean change {mean_gain}");
        format!(
            "retained {}/{} (confidence {:.3} vs {:.3}); FID {fid_all:.2} -> {fid_kept:.2}; accuracy baseline {:?} fused gains {:?}",
            report.total_retained,
            report.total_in,
            kept_mean.unwrap_or(f64::NAN),
            rejected_mean.unwrap_or(f64::NAN),
            baselines.iter().map(|b| b.1).collect::<Vec<_>>(),
            gains
        )
    });
}

#[test]
fn c11_classifier_capacity() {
    criterion(11, "classifier capacity", secs(600), || {
        let dir = tempfile::tempdir().unwrap();
        let m = make_toy_glyph_dataset(dir.path(), 5, 200, 1).unwrap();
        let train = m.load_split::<f32>(Split::Train).unwrap();
        let val = m.load_split::<f32>(Split::Val).unwrap();
        let test = m.load_split::<f32>(Split::Test).unwrap();
        let mut accs = Vec::new();
        for family in Family::ALL {
            let spec = DownstreamModelSpec::desk(family, 5);
            let id = spec.id();
            let mut model = DownstreamModel::<f32>::new(spec, 0).unwrap();
            let tc = TrainConfig { max_epochs: 12, ..downstream_config(0) };
            let (_, r) = train_downstream_on(&mut model, &train, &val, &test, &tc, TrainHooks::default()).unwrap();
            accs.push(format!("{id} {:.3}", r.accuracy));
            assert!(r.accuracy >= 0.95, "{id}: test accuracy {}", r.accuracy);
        }
        accs.join(", ")
    });
}
