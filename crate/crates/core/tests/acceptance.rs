//! Acceptance suite: one PASS/FAIL line per criterion. Runs as a plain binary
//! (`harness = false`) so the lines are always visible under `cargo test`.

mod common;

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor, Var};
use ndarray::{Array2, Array3};
use partigen::data::synth::toy_pairs;
use partigen::data::{ConditioningParams, PairTensors};
use partigen::geometry::{
    body_shape_index, build_region_masks, heatmaps_from_landmarks, Joint, LandmarkSet, Point, NUM_LANDMARKS, NUM_PARTS,
};
use partigen::image::{ImagePlane, Mask};
use partigen::metrics::{
    frechet_distance, image_inception_score, mask_inception_score, SyntheticBackend, UniformBackend,
};
use partigen::partition::refine_part_masks;
use partigen::training::{
    cgan_loss, checkpoint_name, gan_loss, l1_loss, scalar, Batch, MemorySink, Model, ModelSpec, RunDirSink, StepKind,
    TrainConfig, Trainer, LOSS_LOG,
};
use partigen::transform::{fit_affine, squared_residual, warp_and_merge_features, Affine2, PartAffineSet};
use partigen::wnet::{Discriminator, DiscriminatorSpec, Generator, GeneratorSpec, SkipWarp};
use partigen::RegionMaskSet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_s: f64) -> Result<(), String> {
    ensure(elapsed.as_secs_f64() < limit_s, || {
        format!("took {:.1}s, limit {limit_s}s", elapsed.as_secs_f64())
    })
}

// 1 -------------------------------------------------------------------------

fn geometry_exactness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (h, w) = (128usize, 64usize);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let j = rng.gen_range(0..NUM_LANDMARKS);
        let p = (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64));
        let (r, c) = (rng.gen_range(0..h), rng.gen_range(0..w));
        let sigma = rng.gen_range(0.5..12.0);
        let mut pts = [None; NUM_LANDMARKS];
        pts[j] = Some(Point::new(p.0, p.1));
        let maps = heatmaps_from_landmarks(&LandmarkSet::new(pts, h, w).unwrap(), sigma).unwrap();
        let dist = ((r as f64 - p.0).powi(2) + (c as f64 - p.1).powi(2)).sqrt();
        let expected = (-dist / (sigma * sigma)).exp();
        worst = worst.max((maps.data()[[j, r, c]] as f64 - expected).abs());
    }
    ensure(worst <= 1e-6, || format!("heat-map error {worst:e}"))?;

    let mut worst_ds: f64 = 0.0;
    for _ in 0..100 {
        let lm = common::random_landmarks(&mut rng, h, w, 0.0, 0.0);
        let g = |j: Joint| lm.get(j).unwrap();
        let d = |a: Point, b: Point| ((a.row - b.row).powi(2) + (a.col - b.col).powi(2)).sqrt();
        let expected =
            0.5 * (d(g(Joint::RightShoulder), g(Joint::RightHip)) + d(g(Joint::LeftShoulder), g(Joint::LeftHip)));
        worst_ds = worst_ds.max((body_shape_index(&lm).unwrap() - expected).abs());
    }
    ensure(worst_ds <= 1e-9, || format!("body-shape index error {worst_ds:e}"))?;
    within(start.elapsed(), 5.0)?;
    Ok(format!(
        "max heat-map err {worst:.1e}, max D_s err {worst_ds:.1e}, {:.2}s",
        start.elapsed().as_secs_f64()
    ))
}

// 2 -------------------------------------------------------------------------

fn mask_algebra() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (h, w) = (128, 64);
    let mut violations = 0usize;
    for _ in 0..200 {
        let lm = common::random_landmarks(&mut rng, h, w, 0.15, 0.0);
        let body = common::random_blob(&mut rng, h, w);
        let regions = build_region_masks(&lm, rng.gen_range(5.0..40.0), h, w).unwrap();
        let refined = refine_part_masks(&body, &regions).unwrap();
        for r in 0..h {
            for c in 0..w {
                let in_body = body.get(r, c);
                let hits: Vec<bool> = refined.iter().map(|m| m.get(r, c)).collect();
                if hits.iter().any(|&x| x) != in_body {
                    violations += 1;
                }
                if hits[0] && hits[1..].iter().any(|&x| x) {
                    violations += 1;
                }
                if !in_body && hits.iter().any(|&x| x) {
                    violations += 1;
                }
            }
        }
    }
    ensure(violations == 0, || format!("{violations} pixel violations"))?;
    within(start.elapsed(), 10.0)?;
    Ok(format!(
        "200 instances, 0 violations, {:.2}s",
        start.elapsed().as_secs_f64()
    ))
}

// 3 -------------------------------------------------------------------------

fn random_corners(rng: &mut impl Rng) -> Vec<Point> {
    loop {
        let pts: Vec<Point> = (0..4)
            .map(|_| Point::new(rng.gen_range(0.0..128.0), rng.gen_range(0.0..64.0)))
            .collect();
        let (a, b, c) = (pts[0], pts[1], pts[2]);
        let area = ((b.row - a.row) * (c.col - a.col) - (b.col - a.col) * (c.row - a.row)).abs();
        if area > 20.0 {
            return pts;
        }
    }
}

fn random_affine(rng: &mut impl Rng) -> Affine2 {
    loop {
        let a = Affine2::new([
            [
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-60.0..60.0),
            ],
            [
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-60.0..60.0),
            ],
        ]);
        if a.det().abs() > 0.05 {
            return a;
        }
    }
}

fn affine_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_exact: f64 = 0.0;
    for _ in 0..500 {
        let a = random_affine(&mut rng);
        let src = random_corners(&mut rng);
        let dst: Vec<Point> = src.iter().map(|p| a.apply(*p)).collect();
        let fit = fit_affine(&src, &dst).ok_or("exact fit reported degenerate")?;
        let max_err = src
            .iter()
            .zip(&dst)
            .map(|(s, d)| fit.apply(*s).dist(*d))
            .fold(0.0, f64::max);
        worst_exact = worst_exact.max(max_err);
    }
    ensure(worst_exact <= 1e-6, || format!("exact residual {worst_exact:e}"))?;

    let noise = Normal::new(0.0, 2.0).unwrap();
    let mut beaten = 0usize;
    for _ in 0..500 {
        let a = random_affine(&mut rng);
        let src = random_corners(&mut rng);
        let dst: Vec<Point> = src
            .iter()
            .map(|p| {
                let q = a.apply(*p);
                Point::new(q.row + noise.sample(&mut rng), q.col + noise.sample(&mut rng))
            })
            .collect();
        let fit = fit_affine(&src, &dst).ok_or("noisy fit reported degenerate")?;
        let base = squared_residual(&fit, &src, &dst);
        let p0 = fit.params();
        for _ in 0..1000 {
            let mut p = p0;
            for (k, v) in p.iter_mut().enumerate() {
                let scale = if k % 3 == 2 { 1e-1 } else { 1e-3 };
                *v += rng.gen_range(-scale..scale);
            }
            if squared_residual(&Affine2::from_params(p), &src, &dst) < base {
                beaten += 1;
            }
        }
    }
    ensure(beaten == 0, || format!("{beaten} perturbations beat the fit"))?;
    within(start.elapsed(), 30.0)?;
    Ok(format!(
        "max exact residual {worst_exact:.1e}, 500k perturbations never better, {:.2}s",
        start.elapsed().as_secs_f64()
    ))
}

// 4 -------------------------------------------------------------------------

/// Brute force: for every output cell and part, invert the full-resolution affine at
/// the cell's centre, round to the nearest source cell, and add it if the source cell
/// holds any pixel of the part.
fn warp_oracle(features: &Array3<f32>, masks: &[Mask], affines: &PartAffineSet, full: (usize, usize)) -> Array3<f32> {
    let (h, w, ch) = features.dim();
    let (fr, fc) = ((full.0 / h) as f64, (full.1 / w) as f64);
    let mut out = Array3::<f32>::zeros((h, w, ch));
    for (part, mask) in masks.iter().enumerate() {
        let covers = |sr: usize, sc: usize| {
            let (r0, c0) = (sr * full.0 / h, sc * full.1 / w);
            (r0..r0 + full.0 / h).any(|r| (c0..c0 + full.1 / w).any(|c| mask.get(r, c)))
        };
        let m = affines.transforms[part].m;
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        for r in 0..h {
            for c in 0..w {
                let y = (
                    r as f64 * fr + (fr - 1.0) / 2.0 - m[0][2],
                    c as f64 * fc + (fc - 1.0) / 2.0 - m[1][2],
                );
                let x = (
                    (m[1][1] * y.0 - m[0][1] * y.1) / det,
                    (-m[1][0] * y.0 + m[0][0] * y.1) / det,
                );
                let sr = ((x.0 - (fr - 1.0) / 2.0) / fr + 0.5).floor();
                let sc = ((x.1 - (fc - 1.0) / 2.0) / fc + 0.5).floor();
                if sr < 0.0 || sc < 0.0 || sr >= h as f64 || sc >= w as f64 {
                    continue;
                }
                let (sr, sc) = (sr as usize, sc as usize);
                if !covers(sr, sc) {
                    continue;
                }
                for k in 0..ch {
                    out[[r, c, k]] += features[[sr, sc, k]];
                }
            }
        }
    }
    out
}

fn warp_oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let full = (32, 16);
    let mut mismatches = 0usize;
    let mut nonzero = 0usize;
    for _ in 0..100 {
        let body = common::random_blob(&mut rng, full.0, full.1);
        let regions = RegionMaskSet::new(
            (0..NUM_PARTS)
                .map(|_| common::random_blob(&mut rng, full.0, full.1))
                .collect(),
        )
        .unwrap();
        let masks = refine_part_masks(&body, &regions).unwrap();
        let mut affines = PartAffineSet::identity();
        for (i, t) in affines.transforms.iter_mut().enumerate() {
            if i % 4 == 3 {
                continue;
            }
            let th: f64 = rng.gen_range(-0.6..0.6);
            let s: f64 = rng.gen_range(0.6..1.5);
            *t = Affine2::new([
                [s * th.cos(), -s * th.sin(), rng.gen_range(-8.0..8.0)],
                [s * th.sin(), s * th.cos(), rng.gen_range(-5.0..5.0)],
            ]);
        }
        let features = Array3::from_shape_fn((8, 4, 4), |_| rng.gen_range(-1.0f32..1.0));
        let got = warp_and_merge_features(&features, &masks, &affines, full.0, full.1).unwrap();
        let want = warp_oracle(&features, &masks, &affines, full);
        mismatches += got
            .iter()
            .zip(want.iter())
            .filter(|(a, b)| a.to_bits() != b.to_bits())
            .count();
        nonzero += want.iter().filter(|v| **v != 0.0).count();
    }
    ensure(mismatches == 0, || format!("{mismatches} cells differ from oracle"))?;
    ensure(nonzero > 0, || "oracle produced only zeros".into())?;
    Ok(format!("100 grids bitwise equal ({nonzero} non-zero cells)"))
}

// 5 -------------------------------------------------------------------------

fn dims(t: &Tensor) -> Vec<usize> {
    t.dims().to_vec()
}

fn architecture_conformance() -> Outcome {
    let spec = GeneratorSpec::market();
    let g = Generator::new(spec.clone(), DType::F32, 5).map_err(|e| e.to_string())?;
    let x = Tensor::zeros((1, 21, 128, 64), DType::F32, &Device::Cpu).unwrap();
    let (e1, e2) = g.encoder_features(&x, &x).map_err(|e| e.to_string())?;
    let encoder_ladder = [
        [1, 64, 128, 64],
        [1, 128, 64, 32],
        [1, 256, 32, 16],
        [1, 512, 16, 8],
        [1, 512, 8, 4],
        [1, 512, 4, 2],
    ];
    ensure(e1.len() == 6 && e2.len() == 6, || "encoder depth is not 6".into())?;
    for (l, want) in encoder_ladder.iter().enumerate() {
        ensure(dims(&e1[l]) == want && dims(&e2[l]) == want, || {
            format!(
                "encoder level {l}: {:?} / {:?}, want {want:?}",
                e1[l].dims(),
                e2[l].dims()
            )
        })?;
    }
    let warps: Vec<SkipWarp> = (0..4)
        .map(|l| SkipWarp::identity(1, 128 >> l, 64 >> l, &Device::Cpu).unwrap())
        .collect();
    let mut trace = Vec::new();
    g.forward_traced(&x, &x, &warps, None, &mut trace)
        .map_err(|e| e.to_string())?;
    let decoder_ladder = [
        [1, 512, 8, 4],
        [1, 512, 16, 8],
        [1, 512, 32, 16],
        [1, 256, 64, 32],
        [1, 128, 128, 64],
        [1, 3, 128, 64],
    ];
    ensure(trace.len() == decoder_ladder.len(), || {
        format!("{} decoder blocks", trace.len())
    })?;
    for (j, want) in decoder_ladder.iter().enumerate() {
        ensure(dims(&trace[j]) == want, || {
            format!("decoder block {j}: {:?}, want {want:?}", trace[j].dims())
        })?;
    }

    let disc_ladder = [
        [1, 64, 64, 32],
        [1, 128, 32, 16],
        [1, 256, 16, 8],
        [1, 512, 8, 4],
        [1, 1, 4, 2],
    ];
    for (name, dspec, cin) in [("D1", DiscriminatorSpec::d1(), 42), ("D2", DiscriminatorSpec::d2(), 3)] {
        let d = Discriminator::new(dspec, DType::F32, 5).map_err(|e| e.to_string())?;
        let input = Tensor::zeros((1, cin, 128, 64), DType::F32, &Device::Cpu).unwrap();
        let t = d.trace(&input).map_err(|e| e.to_string())?;
        ensure(t.len() == disc_ladder.len(), || format!("{name}: {} blocks", t.len()))?;
        for (i, want) in disc_ladder.iter().enumerate() {
            ensure(dims(&t[i]) == want, || {
                format!("{name} block {i}: {:?}, want {want:?}", t[i].dims())
            })?;
        }
    }

    let e1_names: Vec<&String> = g
        .params()
        .iter()
        .map(|(n, _)| n)
        .filter(|n| n.starts_with("e1."))
        .collect();
    let e2_ids: Vec<_> = g
        .params()
        .iter()
        .filter(|(n, _)| n.starts_with("e2."))
        .map(|(_, v)| v.as_tensor().id())
        .collect();
    ensure(!e1_names.is_empty() && e1_names.len() == e2_ids.len(), || {
        "encoder parameter counts differ".into()
    })?;
    for n in &e1_names {
        let id = g.params().get(n).unwrap().as_tensor().id();
        ensure(!e2_ids.contains(&id), || format!("{n} shared with E2"))?;
    }
    Ok("6-block 128x64 -> 4x2 bottleneck -> 128x64; D 128x64 -> 4x2; E1/E2 disjoint".into())
}

// 6 -------------------------------------------------------------------------

fn micro_spec() -> ModelSpec {
    ModelSpec::scaled(GeneratorSpec::with_depth(6, 64, 32), 32)
}

fn pair_tensors(spec: &GeneratorSpec, n: usize, seed: u64) -> Vec<PairTensors> {
    toy_pairs(n, seed, spec.height, spec.width)
        .iter()
        .map(|p| PairTensors::build(p, &spec.skip_shapes(), &ConditioningParams::default()).unwrap())
        .collect()
}

fn read_elem(var: &Var, k: usize) -> f64 {
    var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap()[k]
}

fn write_elem(var: &Var, k: usize, value: f64) {
    let mut v = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
    v[k] = value;
    var.set(&Tensor::from_vec(v, var.shape(), &Device::Cpu).unwrap())
        .unwrap();
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let spec = micro_spec();
    let data = pair_tensors(&spec.generator, 2, 6);
    let batch = Batch::from_pairs(&data.iter().collect::<Vec<_>>(), DType::F64).unwrap();
    let model = Model::new(spec, DType::F64, 6).unwrap();

    type LossFn = fn(&Model, &Batch) -> Tensor;
    let cgan: LossFn = |m, b| {
        let fake = m.generate(b, None).unwrap();
        let s = m.score(b, fake).unwrap();
        cgan_loss(&s.d1_real, &s.d1_fake).unwrap()
    };
    let gan: LossFn = |m, b| {
        let fake = m.generate(b, None).unwrap();
        let s = m.score(b, fake).unwrap();
        gan_loss(&s.d2_real, &s.d2_fake).unwrap()
    };
    let l1: LossFn = |m, b| l1_loss(&m.generate(b, None).unwrap(), &b.tgt_image).unwrap();
    let losses: [(&str, LossFn, Vec<&str>); 3] = [
        ("L_cGAN", cgan, vec!["g", "d1"]),
        ("L_GAN", gan, vec!["g", "d2"]),
        ("L1", l1, vec!["g"]),
    ];

    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let mut report = Vec::new();
    for (name, loss, groups) in losses {
        let grads = loss(&model, &batch).backward().unwrap();
        let mut vars: Vec<(String, Var)> = Vec::new();
        for group in groups {
            let store = match group {
                "g" => model.generator.params(),
                "d1" => model.d1.params(),
                _ => model.d2.params(),
            };
            vars.extend(store.iter().map(|(n, v)| (format!("{group}.{n}"), v.clone())));
        }
        let (mut checked, mut attempts, mut worst) = (0usize, 0usize, 0f64);
        while checked < 24 {
            attempts += 1;
            ensure(attempts < 2000, || {
                format!("{name}: too few parameters with measurable gradient")
            })?;
            let (pname, var) = &vars[rng.gen_range(0..vars.len())];
            let k = rng.gen_range(0..var.elem_count());
            let analytic = grads
                .get(var.as_tensor())
                .ok_or_else(|| format!("{name}: no gradient for {pname}"))?
                .flatten_all()
                .unwrap()
                .to_vec1::<f64>()
                .unwrap()[k];
            let orig = read_elem(var, k);
            let step = 1e-7;
            write_elem(var, k, orig + step);
            let plus = scalar(&loss(&model, &batch)).unwrap();
            write_elem(var, k, orig - step);
            let minus = scalar(&loss(&model, &batch)).unwrap();
            write_elem(var, k, orig);
            let numeric = (plus - minus) / (2.0 * step);
            let scale = analytic.abs().max(numeric.abs());
            if scale < 1e-6 {
                continue;
            }
            let rel = (analytic - numeric).abs() / scale;
            ensure(rel <= 1e-3, || {
                format!("{name}: {pname}[{k}] analytic {analytic:e} numeric {numeric:e} rel {rel:e}")
            })?;
            worst = worst.max(rel);
            checked += 1;
        }
        report.push(format!("{name} {checked} params max rel {worst:.1e}"));
    }
    within(start.elapsed(), 120.0)?;
    Ok(format!("{}; {:.1}s", report.join(", "), start.elapsed().as_secs_f64()))
}

// 7 -------------------------------------------------------------------------

fn schedule_run(dir: &Path, data: &[PairTensors]) -> Result<(Trainer, MemorySink), String> {
    let config = TrainConfig {
        epochs: 2,
        iterations_per_epoch: 5,
        batch_size: 2,
        seed: 77,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(config, micro_spec(), DType::F32).map_err(|e| e.to_string())?;
    let mut files = RunDirSink::open(dir, 0).map_err(|e| e.to_string())?;
    let mut mem = MemorySink::default();
    let mut both = Tee(&mut files, &mut mem);
    trainer.run(data, &mut both).map_err(|e| e.to_string())?;
    Ok((trainer, mem))
}

struct Tee<'a>(
    &'a mut dyn partigen::training::TrainSink,
    &'a mut dyn partigen::training::TrainSink,
);

impl partigen::training::TrainSink for Tee<'_> {
    fn record(&mut self, r: &partigen::training::LogRecord) -> partigen::Result<()> {
        self.0.record(r)?;
        self.1.record(r)
    }

    fn epoch_end(&mut self, epoch: usize, t: &Trainer) -> partigen::Result<()> {
        self.0.epoch_end(epoch, t)?;
        self.1.epoch_end(epoch, t)
    }
}

fn schedule_bookkeeping() -> Outcome {
    let data = pair_tensors(&micro_spec().generator, 4, 7);
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let (trainer, mem) = schedule_run(&a, &data)?;
    schedule_run(&b, &data)?;
    let d_events = mem.records.iter().filter(|r| r.kind == StepKind::D).count();
    let g_events = mem.records.iter().filter(|r| r.kind == StepKind::G).count();
    let counts = trainer.update_counts();
    ensure(d_events == 20 && counts.discriminator == 20, || {
        format!("{d_events} D events, {} D updates", counts.discriminator)
    })?;
    ensure(g_events == 10 && counts.generator == 10, || {
        format!("{g_events} G events, {} G updates", counts.generator)
    })?;
    let ckpts: Vec<_> = std::fs::read_dir(&a)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().ends_with(".safetensors"))
        .collect();
    ensure(ckpts.len() == 2, || format!("{} checkpoints", ckpts.len()))?;
    for n in [1, 2] {
        ensure(a.join(checkpoint_name(n)).exists(), || {
            format!("missing {}", checkpoint_name(n))
        })?;
    }
    let log_a = std::fs::read(a.join(LOSS_LOG)).unwrap();
    let log_b = std::fs::read(b.join(LOSS_LOG)).unwrap();
    ensure(log_a == log_b, || "loss logs of identical runs differ".into())?;
    ensure(log_a.iter().filter(|&&c| c == b'\n').count() == 31, || {
        "log does not hold 30 rows".into()
    })?;
    Ok("20 D / 10 G events, 2 checkpoints, identical logs".into())
}

// 8 -------------------------------------------------------------------------

const OVERFIT_SEED: u64 = 2024;

fn overfit_smoke() -> Outcome {
    let start = Instant::now();
    let spec = ModelSpec::scaled(GeneratorSpec::market(), 16);
    let data: Vec<PairTensors> = toy_pairs(4, OVERFIT_SEED, 128, 64)
        .iter()
        .map(|p| PairTensors::build(p, &spec.generator.skip_shapes(), &ConditioningParams::default()).unwrap())
        .collect();
    let config = TrainConfig {
        epochs: 10,
        iterations_per_epoch: 30,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(config, spec, DType::F32).map_err(|e| e.to_string())?;
    let mut sink = MemorySink::default();
    trainer.run(&data, &mut sink).map_err(|e| e.to_string())?;
    let epoch_l1 = |e: usize| {
        let v: Vec<f64> = sink
            .records
            .iter()
            .filter(|r| r.epoch == e && r.kind == StepKind::G)
            .map(|r| r.losses.l1)
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let (first, last) = (epoch_l1(1), epoch_l1(10));
    let ratio = last / first;
    let detail = format!(
        "first-epoch L1 {first:.4}, final-epoch L1 {last:.4} (ratio {ratio:.3}), {:.0}s",
        start.elapsed().as_secs_f64()
    );
    ensure(ratio <= 0.5, || detail.clone())?;
    within(start.elapsed(), 900.0)?;
    Ok(detail)
}

// 9 -------------------------------------------------------------------------

fn metrics_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Array2::from_shape_fn((64, 8), |_| rng.gen_range(-2.0..2.0));
    let self_fid = frechet_distance(&x, &x).map_err(|e| e.to_string())?;
    ensure(self_fid <= 1e-6, || format!("FID(X,X) = {self_fid:e}"))?;

    let h = std::f64::consts::FRAC_1_SQRT_2;
    let a = Array2::from_shape_vec((2, 1), vec![-h, h]).unwrap();
    let b = Array2::from_shape_vec((2, 1), vec![3.0 - h, 3.0 + h]).unwrap();
    let fid = frechet_distance(&a, &b).map_err(|e| e.to_string())?;
    ensure((fid - 9.0).abs() <= 1e-6, || format!("1-D FID {fid}"))?;

    let images: Vec<ImagePlane> = (0..20)
        .map(|_| ImagePlane::new(Array3::from_shape_fn((32, 16, 3), |_| rng.gen_range(-1.0f32..1.0))).unwrap())
        .collect();
    let (uniform_is, _) =
        image_inception_score(&images, &UniformBackend { classes: 10 }, 10).map_err(|e| e.to_string())?;
    ensure((uniform_is - 1.0).abs() <= 1e-9, || format!("uniform IS {uniform_is}"))?;

    let backend = SyntheticBackend::new();
    let ones: Vec<Mask> = images.iter().map(|_| Mask::ones(32, 16)).collect();
    let plain = image_inception_score(&images, &backend, 5).map_err(|e| e.to_string())?;
    let masked = mask_inception_score(&images, &ones, &backend, 5).map_err(|e| e.to_string())?;
    ensure(plain == masked, || format!("mask-IS {masked:?} vs IS {plain:?}"))?;
    Ok(format!(
        "FID(X,X) {self_fid:.1e}, 1-D FID {fid:.9}, uniform IS {uniform_is}, mask-IS == IS ({:.4})",
        plain.0
    ))
}

// 10 ------------------------------------------------------------------------

fn bits(t: &Tensor) -> Vec<u32> {
    t.flatten_all()
        .unwrap()
        .to_vec1::<f32>()
        .unwrap()
        .iter()
        .map(|v| v.to_bits())
        .collect()
}

fn tensors_equal(a: &HashMap<String, Tensor>, b: &HashMap<String, Tensor>) -> bool {
    a.len() == b.len() && a.iter().all(|(k, v)| b.get(k).is_some_and(|w| bits(v) == bits(w)))
}

fn checkpoint_round_trip() -> Outcome {
    let spec = micro_spec();
    let data = pair_tensors(&spec.generator, 3, 10);
    let batch = Batch::from_pairs(&data.iter().collect::<Vec<_>>(), DType::F32).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let config = TrainConfig {
        epochs: 3,
        iterations_per_epoch: 2,
        batch_size: 2,
        seed: 10,
        ..TrainConfig::default()
    };

    let mut trainer = Trainer::new(config.clone(), spec.clone(), DType::F32).map_err(|e| e.to_string())?;
    trainer
        .run_until(&data, 1, &mut MemorySink::default())
        .map_err(|e| e.to_string())?;
    let before = trainer.model().generate(&batch, None).unwrap();
    let path = tmp.path().join("rt.safetensors");
    trainer.save_checkpoint(&path).map_err(|e| e.to_string())?;
    let loaded = Trainer::load_checkpoint(&path, None).map_err(|e| e.to_string())?;
    let after = loaded.model().generate(&batch, None).unwrap();
    ensure(bits(&before) == bits(&after), || "forward differs after reload".into())?;

    let full_dir = tmp.path().join("full");
    let mut full = Trainer::new(config.clone(), spec, DType::F32).map_err(|e| e.to_string())?;
    full.run(&data, &mut RunDirSink::open(&full_dir, 0).unwrap())
        .map_err(|e| e.to_string())?;

    let split_dir = tmp.path().join("split");
    let mut first = Trainer::new(config, micro_spec(), DType::F32).map_err(|e| e.to_string())?;
    first
        .run_until(&data, 2, &mut RunDirSink::open(&split_dir, 0).unwrap())
        .map_err(|e| e.to_string())?;
    drop(first);
    // a later, never-checkpointed epoch leaves rows behind that resume must discard
    std::fs::OpenOptions::new()
        .append(true)
        .open(split_dir.join(LOSS_LOG))
        .and_then(|mut f| std::io::Write::write_all(&mut f, b"3,1,1,d,0,0,0,0,0,0\n"))
        .unwrap();
    let mut resumed = Trainer::load_checkpoint(&split_dir.join(checkpoint_name(2)), None).map_err(|e| e.to_string())?;
    resumed
        .run(&data, &mut RunDirSink::open(&split_dir, 2).unwrap())
        .map_err(|e| e.to_string())?;

    ensure(tensors_equal(&full.model().export(), &resumed.model().export()), || {
        "resumed parameters differ".into()
    })?;
    let (la, lb) = (
        std::fs::read(full_dir.join(LOSS_LOG)).unwrap(),
        std::fs::read(split_dir.join(LOSS_LOG)).unwrap(),
    );
    ensure(la == lb, || "resumed loss log differs".into())?;
    Ok("reload forward bitwise equal; resumed run matches uninterrupted run".into())
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("geometry exactness", geometry_exactness),
        ("mask algebra", mask_algebra),
        ("affine oracle equivalence", affine_oracle),
        ("warp oracle equivalence", warp_oracle_equivalence),
        ("architecture conformance", architecture_conformance),
        ("gradient check", gradient_check),
        ("schedule bookkeeping", schedule_bookkeeping),
        ("overfit smoke test", overfit_smoke),
        ("metrics", metrics_checks),
        ("checkpoint round-trip", checkpoint_round_trip),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let outcome = match catch_unwind(AssertUnwindSafe(check)) {
            Ok(r) => r,
            Err(p) => Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into())),
        };
        match outcome {
            Ok(detail) => println!("PASS [{n:>2}] {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL [{n:>2}] {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
