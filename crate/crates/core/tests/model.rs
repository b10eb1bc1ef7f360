use lvqa_core::config::{DecodeStrategy, GenerationConfig, InputMode, ModelConfig};
use lvqa_core::model::param_count;
use lvqa_core::seq2seq::{self, position_losses, shift_targets};
use lvqa_core::train::optim::collect_grads;
use lvqa_core::train::{AdamW, AdamWConfig};
use lvqa_core::vision::ImageTensor;
use lvqa_core::{Example, Model};
use lvqa_tensor::Graph;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn image(size: usize, seed: u64) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageTensor::new(size, 1, (0..size * size).map(|_| rng.random::<f32>()).collect()).unwrap()
}

fn no_dropout(mut cfg: ModelConfig) -> ModelConfig {
    cfg.dropout = 0.0;
    cfg.stochastic_depth = 0.0;
    cfg
}

#[test]
fn fused_lengths_follow_mode() {
    let model = Model::<f64>::new(ModelConfig::tiny(32), 1).unwrap();
    let (a, b) = (image(32, 1), image(32, 2));
    let instr = [1, 5, 6, 2];
    let batch = [
        Example { past: Some(&a), current: &b, instruction: &instr },
        Example { past: None, current: &a, instruction: &instr[..2] },
    ];
    let mut g = Graph::no_grad();
    let (x, pack) = model.fused_input(&mut g, &batch).unwrap();
    assert_eq!(pack.lengths, vec![2 * 4 + 4, 2 * 4 + 2]);
    assert_eq!(g.shape(x), &[22, 16]);

    let single = Model::<f64>::new(ModelConfig::tiny(32).with_mode(InputMode::Single), 1).unwrap();
    let mut g = Graph::no_grad();
    let (x, pack) = single.fused_input(&mut g, &batch).unwrap();
    assert_eq!(pack.lengths, vec![4 + 4, 4 + 2]);
    assert_eq!(g.shape(x), &[14, 16]);
}

#[test]
fn batched_and_single_forward_agree() {
    let model = Model::<f64>::new(no_dropout(ModelConfig::tiny(32)), 2).unwrap();
    let (a, b, c) = (image(32, 1), image(32, 2), image(32, 3));
    let (i1, i2) = ([1, 7, 2], [1, 9, 9, 2]);
    let (t1, t2) = ([1, 4, 5, 2], [1, 6, 2]);
    let batch = [
        Example { past: Some(&a), current: &b, instruction: &i1 },
        Example { past: None, current: &c, instruction: &i2 },
    ];
    let mut g = Graph::no_grad();
    let both = model.loss(&mut g, &batch, &[&t1, &t2], None).unwrap();
    let both = g.value(both).item();
    let mut g = Graph::no_grad();
    let first = model.loss(&mut g, &batch[..1], &[&t1], None).unwrap();
    let first = g.value(first).item();
    let mut g = Graph::no_grad();
    let second = model.loss(&mut g, &batch[1..], &[&t2], None).unwrap();
    let second = g.value(second).item();
    // token-weighted mean over 3 + 2 positions
    assert!((both - (3.0 * first + 2.0 * second) / 5.0).abs() < 1e-10);
}

#[test]
fn initial_loss_is_near_uniform() {
    let v = 300;
    let model = Model::<f32>::new(ModelConfig::desk(v), 3).unwrap();
    let (a, b) = (image(64, 1), image(64, 2));
    let instr = [1, 10, 11, 12, 2];
    let target = [1, 20, 21, 22, 23, 24, 2];
    let mut g = Graph::no_grad();
    let batch = [Example { past: Some(&a), current: &b, instruction: &instr }];
    let loss = model.loss(&mut g, &batch, &[&target], None).unwrap();
    let loss = g.value(loss).item();
    let uniform = (v as f32).ln();
    assert!((loss - uniform).abs() < 0.2 * uniform, "loss {loss} vs {uniform}");
}

#[test]
fn decoder_is_causal() {
    let model = Model::<f64>::new(no_dropout(ModelConfig::tiny(32)), 4).unwrap();
    let (a, b) = (image(32, 1), image(32, 2));
    let instr = [1, 8, 2];
    let batch = [Example { past: Some(&a), current: &b, instruction: &instr }];
    let losses = |target: &[usize]| {
        let mut g = Graph::no_grad();
        let (m, pack) = model.memory(&mut g, &batch, None).unwrap();
        let (inputs, labels) = shift_targets(&[target]).unwrap();
        let logits = seq2seq::decode(&mut g, &model.params, &model.config, m, &pack, &[&inputs[0]], None).unwrap();
        position_losses(g.value(logits), &labels)
    };
    let x = losses(&[1, 4, 5, 6, 7, 2]);
    let y = losses(&[1, 4, 5, 9, 7, 2]);
    // label j scores token j + 1; only terms for tokens 1 and 2 precede the change
    for j in 0..2 {
        assert_eq!(x[j].to_bits(), y[j].to_bits(), "position {j}");
    }
    assert_ne!(x[2], y[2]);
    assert_ne!(x[3], y[3]);
}

#[test]
fn every_parameter_group_gets_gradient() {
    let model = Model::<f64>::new(no_dropout(ModelConfig::tiny(32)), 5).unwrap();
    let (a, b, c) = (image(32, 1), image(32, 2), image(32, 3));
    let (i1, t1) = ([1, 7, 8, 2], [1, 4, 5, 2]);
    let batch = [
        Example { past: Some(&a), current: &b, instruction: &i1 },
        Example { past: None, current: &c, instruction: &i1 },
    ];
    let mut g = Graph::new();
    let loss = model.loss(&mut g, &batch, &[&t1, &t1], None).unwrap();
    g.backward(loss).unwrap();
    let grads = collect_grads(&g);
    assert_eq!(grads.len(), model.params.len());
    for (name, grad) in &grads {
        assert!(grad.iter().any(|&x| x != 0.0), "{name} has zero gradient");
    }
}

#[test]
fn image_encoder_is_shared_across_branches() {
    let model = Model::<f64>::new(no_dropout(ModelConfig::tiny(32)), 6).unwrap();
    let (a, b) = (image(32, 1), image(32, 2));
    let instr = [1, 7, 2];
    let batch = [Example { past: Some(&a), current: &b, instruction: &instr }];
    let mut g = Graph::new();
    let loss = model.loss(&mut g, &batch, &[&[1, 3, 2]], None).unwrap();
    g.backward(loss).unwrap();
    let stem: Vec<_> = g.params().filter(|(n, _)| *n == "vision.stem.w").collect();
    assert_eq!(stem.len(), 1);
    assert!(g.grad(stem[0].1).unwrap().iter().any(|&x| x != 0.0));
}

#[test]
fn param_count_matches_allocation() {
    for cfg in [ModelConfig::tiny(32), ModelConfig::desk(500)] {
        let model = Model::<f32>::new(cfg.clone(), 0).unwrap();
        assert_eq!(param_count(&cfg), model.params.num_scalars());
        let single = cfg.with_mode(InputMode::Single);
        let model = Model::<f32>::new(single.clone(), 0).unwrap();
        assert_eq!(param_count(&single), model.params.num_scalars());
    }
    let full = param_count(&ModelConfig::full(1024));
    assert_eq!(full, param_count(&ModelConfig::full(1024)));
    assert!(full > 50_000_000, "{full}");
}

#[test]
fn overfits_one_sample_and_reproduces_it() {
    let cfg = no_dropout(ModelConfig::tiny(32));
    let mut model = Model::<f32>::new(cfg, 7).unwrap();
    let (a, b) = (image(32, 1), image(32, 2));
    let instr = [1, 9, 10, 2];
    let target = [1, 20, 5, 17, 5, 2];
    let mut opt = AdamW::new(AdamWConfig {
        lr: 3e-3,
        weight_decay: 0.0,
        ..Default::default()
    });
    let mut losses = Vec::new();
    for _ in 0..200 {
        let batch = [Example { past: Some(&a), current: &b, instruction: &instr }];
        let mut g = Graph::new();
        let loss = model.loss(&mut g, &batch, &[&target], None).unwrap();
        losses.push(g.value(loss).item());
        g.backward(loss).unwrap();
        let grads = collect_grads(&g);
        drop(g);
        opt.step(&mut model.params, &grads).unwrap();
    }
    let early: f32 = losses[..50].iter().sum::<f32>() / 50.0;
    let late: f32 = losses[150..].iter().sum::<f32>() / 50.0;
    assert!(late < 0.1 * early, "{early} -> {late}");
    let batch = [Example { past: Some(&a), current: &b, instruction: &instr }];
    let greedy = model.generate(&batch, &GenerationConfig::default()).unwrap();
    assert_eq!(greedy[0], target);
    let beam1 = GenerationConfig {
        strategy: DecodeStrategy::Beam { width: 1 },
        ..Default::default()
    };
    assert_eq!(model.generate(&batch, &beam1).unwrap(), greedy);
    let beam3 = GenerationConfig {
        strategy: DecodeStrategy::Beam { width: 3 },
        ..Default::default()
    };
    assert_eq!(model.generate(&batch, &beam3).unwrap(), greedy);
    let one = GenerationConfig {
        max_len: 1,
        ..Default::default()
    };
    let short = model.generate(&batch, &one).unwrap();
    assert_eq!(short[0], vec![1, 20]);
}

#[test]
fn beam_one_matches_greedy_untrained() {
    let model = Model::<f64>::new(ModelConfig::tiny(32), 8).unwrap();
    let imgs: Vec<ImageTensor> = (0..6).map(|s| image(32, s)).collect();
    let instr = [1, 12, 2];
    let batch: Vec<Example> = (0..3)
        .map(|i| Example { past: Some(&imgs[2 * i]), current: &imgs[2 * i + 1], instruction: &instr })
        .collect();
    let gen = GenerationConfig {
        max_len: 12,
        ..Default::default()
    };
    let greedy = model.generate(&batch, &gen).unwrap();
    let beam = model
        .generate(&batch, &GenerationConfig { strategy: DecodeStrategy::Beam { width: 1 }, ..gen })
        .unwrap();
    assert_eq!(greedy, beam);
    for s in &greedy {
        assert_eq!(s[0], 1);
        assert!(s.len() <= 13);
    }
}

#[test]
fn encoder_stays_finite_on_large_inputs() {
    let model = Model::<f64>::new(no_dropout(ModelConfig::tiny(32)), 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let rows = 12;
    let data: Vec<f64> = (0..rows * 16).map(|_| rng.random_range(-100.0..100.0)).collect();
    let mut g = Graph::no_grad();
    let x = g.constant(lvqa_tensor::Tensor::new(vec![rows, 16], data).unwrap());
    let pack = seq2seq::Packing::new(vec![rows]);
    let y = seq2seq::encode(&mut g, &model.params, &model.config, x, &pack, None).unwrap();
    assert_eq!(g.shape(y), &[rows, 16]);
    assert!(g.value(y).all_finite());
    let y2 = seq2seq::encode(&mut g, &model.params, &model.config, x, &pack, None).unwrap();
    assert_eq!(g.value(y).data(), g.value(y2).data());
}
