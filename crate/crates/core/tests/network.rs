use candle_core::{DType, Device, Tensor};
use partigen::data::synth::toy_pairs;
use partigen::data::{ConditioningParams, PairTensors};
use partigen::training::{Batch, MemorySink, Model, ModelSpec, StepKind, TrainConfig, Trainer};
use partigen::wnet::{Discriminator, DiscriminatorSpec, Generator, GeneratorSpec, SkipWarp};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn micro_spec() -> ModelSpec {
    ModelSpec::scaled(GeneratorSpec::with_depth(6, 64, 32), 32)
}

fn pairs(spec: &GeneratorSpec, n: usize, seed: u64) -> Vec<PairTensors> {
    toy_pairs(n, seed, spec.height, spec.width)
        .iter()
        .map(|p| PairTensors::build(p, &spec.skip_shapes(), &ConditioningParams::default()).unwrap())
        .collect()
}

fn batch(spec: &GeneratorSpec, dtype: DType) -> Batch {
    let data = pairs(spec, 2, 5);
    Batch::from_pairs(&data.iter().collect::<Vec<_>>(), dtype).unwrap()
}

#[test]
fn seven_block_ladder() {
    let spec = GeneratorSpec::deepfashion().with_channel_divisor(16);
    assert_eq!((spec.depth, spec.height, spec.width), (7, 256, 256));
    let g = Generator::new(spec.clone(), DType::F32, 0).unwrap();
    let x = Tensor::zeros((1, 21, 256, 256), DType::F32, &Device::Cpu).unwrap();
    let (e1, e2) = g.encoder_features(&x, &x).unwrap();
    for (l, (a, b)) in e1.iter().zip(&e2).enumerate() {
        let side = 256 >> l;
        assert_eq!(a.dims(), &[1, spec.encoder[l], side, side]);
        assert_eq!(a.dims(), b.dims());
    }
    assert_eq!(e1.last().unwrap().dims()[2..], [4, 4]);
    let warps: Vec<SkipWarp> = (0..4)
        .map(|l| SkipWarp::identity(1, 256 >> l, 256 >> l, &Device::Cpu).unwrap())
        .collect();
    let mut trace = Vec::new();
    let out = g.forward_traced(&x, &x, &warps, None, &mut trace).unwrap();
    for (j, t) in trace.iter().take(spec.depth - 1).enumerate() {
        let side = 8 << j;
        assert_eq!(t.dims(), &[1, spec.decoder[j], side, side]);
    }
    assert_eq!(out.dims(), &[1, 3, 256, 256]);
}

#[test]
fn encoders_share_no_parameters() {
    let g = Generator::new(micro_spec().generator, DType::F32, 1).unwrap();
    let names: Vec<&String> = g.params().iter().map(|(n, _)| n).collect();
    let e1: Vec<_> = names.iter().filter(|n| n.starts_with("e1.")).collect();
    let e2: Vec<_> = names.iter().filter(|n| n.starts_with("e2.")).collect();
    assert_eq!(e1.len(), e2.len());
    assert!(!e1.is_empty());
    for n in &e1 {
        let a = g.params().get(n).unwrap();
        let b = g.params().get(&n.replacen("e1.", "e2.", 1)).unwrap();
        assert_ne!(a.as_tensor().id(), b.as_tensor().id(), "{n} is shared");
        let diff = (a.as_tensor() - b.as_tensor())
            .unwrap()
            .abs()
            .unwrap()
            .sum_all()
            .unwrap();
        if n.ends_with(".weight") {
            assert!(diff.to_scalar::<f32>().unwrap() > 0.0, "{n} equal at init");
        }
    }
}

#[test]
fn inference_forward_is_deterministic() {
    let spec = micro_spec();
    let b = batch(&spec.generator, DType::F32);
    let g = Generator::new(spec.generator, DType::F32, 2).unwrap();
    let y1 = g.forward(&b.src_in, &b.tgt_in, &b.warps, None).unwrap();
    let y2 = g.forward(&b.src_in, &b.tgt_in, &b.warps, None).unwrap();
    let (v1, v2) = (
        y1.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
        y2.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
    );
    assert!(v1.iter().zip(&v2).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn every_parameter_receives_gradient() {
    let spec = micro_spec();
    let b = batch(&spec.generator, DType::F64);
    let model = Model::new(spec, DType::F64, 3).unwrap();
    let objective = TrainConfig::default().objective();
    let grads = model.total_objective(&b, &objective).unwrap().backward().unwrap();
    let groups = [
        ("generator", model.generator.params()),
        ("d1", model.d1.params()),
        ("d2", model.d2.params()),
    ];
    for (group, store) in groups {
        for (name, var) in store.iter() {
            let g = grads
                .get(var.as_tensor())
                .unwrap_or_else(|| panic!("{group}.{name}: no gradient"));
            let v = g.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            assert!(v.iter().all(|x| x.is_finite()), "{group}.{name}: non-finite gradient");
            assert!(v.iter().any(|x| *x != 0.0), "{group}.{name}: zero gradient");
        }
    }
}

#[test]
fn discriminator_rejects_wrong_inputs() {
    let d = Discriminator::new(DiscriminatorSpec::d2().with_channel_divisor(16), DType::F32, 0).unwrap();
    let bad_channels = Tensor::zeros((1, 4, 64, 32), DType::F32, &Device::Cpu).unwrap();
    assert!(d.forward(&bad_channels).is_err());
    let bad_size = Tensor::zeros((1, 3, 60, 32), DType::F32, &Device::Cpu).unwrap();
    assert!(d.forward(&bad_size).is_err());
}

#[test]
fn discriminator_updates_are_twice_generator_updates() {
    let spec = micro_spec();
    let data = pairs(&spec.generator, 2, 9);
    for (epochs, iters) in [(1, 1), (1, 3), (3, 2)] {
        let config = TrainConfig {
            epochs,
            iterations_per_epoch: iters,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(config, spec.clone(), DType::F32).unwrap();
        let mut sink = MemorySink::default();
        t.run(&data, &mut sink).unwrap();
        let counts = t.update_counts();
        assert_eq!(counts.generator, (epochs * iters) as u64);
        assert_eq!(counts.discriminator, 2 * counts.generator);
        let d_rows = sink.records.iter().filter(|r| r.kind == StepKind::D).count() as u64;
        assert_eq!(d_rows, counts.discriminator);
        assert_eq!(sink.epochs, (1..=epochs).collect::<Vec<_>>());
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 8, ..ProptestConfig::default() })]

    #[test]
    fn generator_output_is_bounded(seed in any::<u64>(), scale in 0.1f64..1000.0) {
        let spec = micro_spec();
        let b = batch(&spec.generator, DType::F32);
        let g = Generator::new(spec.generator, DType::F32, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut noisy = |t: &Tensor| {
            let v: Vec<f32> = (0..t.elem_count()).map(|_| (rng.sample::<f64, _>(StandardNormal) * scale) as f32).collect();
            (Tensor::from_vec(v, t.shape(), &Device::Cpu).unwrap() + t).unwrap()
        };
        let y = g.forward(&noisy(&b.src_in), &noisy(&b.tgt_in), &b.warps, None).unwrap();
        let v = y.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        prop_assert!(v.iter().all(|x| x.is_finite() && (-1.0..=1.0).contains(x)));
    }
}
