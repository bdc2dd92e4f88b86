use adacomp::codec::BinConfig;
use adacomp::data::{synth_gaussians, Dataset};
use adacomp::nn::{LayerSpec, Model, Tensor};
use adacomp::optim::{OptimizerKind, OptimizerState};
use adacomp::sim::{codecs_by_kind, evaluate, shard, Cluster, ClusterConfig, CodecSpec};

fn mlp(dim: usize, classes: usize, seed: u64) -> Model {
    Model::new(
        &[dim],
        &[
            LayerSpec::FullyConnected {
                inputs: dim,
                outputs: 24,
            },
            LayerSpec::Relu,
            LayerSpec::FullyConnected {
                inputs: 24,
                outputs: classes,
            },
            LayerSpec::SoftmaxXent { classes },
        ],
        seed,
    )
    .unwrap()
}

fn config(
    learners: usize,
    global_batch: usize,
    codecs: Vec<CodecSpec>,
    threads: Option<usize>,
) -> ClusterConfig {
    ClusterConfig {
        learners,
        global_batch,
        codecs,
        optimizer: OptimizerKind::sgd(0.05),
        seed: 3,
        threads,
        verify_ranks: false,
        track_percentiles: false,
    }
}

/// Runs `steps` sync steps of epoch 0's shard streams.
fn train(cluster: &mut Cluster, data: &Dataset, steps: usize) -> Vec<f32> {
    let cfg = cluster.config().clone();
    let streams = shard(data.len(), cfg.learners, cfg.global_batch, cfg.seed, 0).unwrap();
    let local = cfg.local_batch();
    let mut losses = Vec::new();
    for s in 0..steps {
        let shards: Vec<&[usize]> = streams
            .iter()
            .map(|st| &st[s * local..(s + 1) * local])
            .collect();
        losses.push(cluster.sync_step(data, &shards).unwrap().loss);
    }
    losses
}

fn weight_bits(model: &Model) -> Vec<Vec<u32>> {
    model
        .params()
        .iter()
        .map(|p| p.iter().map(|v| v.to_bits()).collect())
        .collect()
}

#[test]
fn single_identity_learner_is_a_plain_training_loop() {
    let data = synth_gaussians(4, 12, 400, 3.0, 1).unwrap();
    let model = mlp(12, 4, 8);
    let mut cluster = Cluster::new(
        config(1, 20, vec![CodecSpec::Identity; 2], Some(1)),
        model.clone(),
    )
    .unwrap();
    train(&mut cluster, &data, 15);

    let mut plain = model;
    let mut opt = OptimizerState::new(OptimizerKind::sgd(0.05), &plain.param_lens()).unwrap();
    let stream = &shard(400, 1, 20, 3, 0).unwrap()[0];
    for s in 0..15 {
        let (x, y) = data.batch(&stream[s * 20..(s + 1) * 20]);
        let pass = plain.forward(&x, &y).unwrap();
        let g = plain.backward(&pass.activations, &y).unwrap();
        let grads: Vec<&[f32]> = g.layers.iter().map(|v| v.values()).collect();
        opt.update(&mut plain.params_mut(), &grads).unwrap();
    }
    assert_eq!(weight_bits(cluster.model()), weight_bits(&plain));
}

#[test]
fn two_identity_learners_average_to_the_full_batch_gradient() {
    let data = synth_gaussians(4, 12, 400, 3.0, 2).unwrap();
    let model = mlp(12, 4, 9);
    let streams = shard(400, 2, 40, 3, 0).unwrap();
    let (a, b) = (&streams[0][..20], &streams[1][..20]);
    let union: Vec<usize> = a.iter().chain(b).copied().collect();
    let grads = |idx: &[usize]| {
        let (x, y) = data.batch(idx);
        let pass = model.forward(&x, &y).unwrap();
        model.backward(&pass.activations, &y).unwrap()
    };
    let (ga, gb, gu) = (grads(a), grads(b), grads(&union));
    for layer in 0..gu.layers.len() {
        let full = gu.layers[layer].values();
        let avg: Vec<f64> = ga.layers[layer]
            .values()
            .iter()
            .zip(gb.layers[layer].values())
            .map(|(x, y)| (*x as f64 + *y as f64) / 2.0)
            .collect();
        let norm: f64 = full.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        let diff: f64 = full
            .iter()
            .zip(&avg)
            .map(|(f, m)| (*f as f64 - m).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(diff <= 1e-6 * norm, "layer {layer}: {diff} vs {norm}");
    }

    // the clusters apply the same step up to weight rounding
    let mut one = Cluster::new(
        config(1, 40, vec![CodecSpec::Identity; 2], None),
        model.clone(),
    )
    .unwrap();
    let mut two = Cluster::new(
        config(2, 40, vec![CodecSpec::Identity; 2], None),
        model.clone(),
    )
    .unwrap();
    train(&mut one, &data, 1);
    train(&mut two, &data, 1);
    for (p1, p2) in one.model().params().iter().zip(two.model().params()) {
        for (w1, w2) in p1.iter().zip(p2.iter()) {
            assert!(
                (w1 - w2).abs() <= 4.0 * f32::EPSILON * w1.abs().max(1e-3),
                "{w1} vs {w2}"
            );
        }
    }
}

fn small_cnn_data(seed: u64) -> Dataset {
    let flat = synth_gaussians(4, 64, 1600, 3.0, seed).unwrap();
    let n = flat.len();
    Dataset::new(
        Tensor::new(vec![n, 1, 8, 8], flat.features.into_data()).unwrap(),
        flat.labels,
        flat.classes,
        flat.split,
    )
    .unwrap()
}

fn small_cnn(seed: u64) -> Model {
    Model::new(
        &[1, 8, 8],
        &[
            LayerSpec::Conv5x5 {
                in_maps: 1,
                out_maps: 3,
                stride: 1,
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool2x2,
            LayerSpec::FullyConnected {
                inputs: 12,
                outputs: 4,
            },
            LayerSpec::SoftmaxXent { classes: 4 },
        ],
        seed,
    )
    .unwrap()
}

#[test]
fn four_adacomp_learners_stay_bitwise_identical() {
    let data = small_cnn_data(3);
    let model = small_cnn(4);
    let codecs = codecs_by_kind(
        &model.param_kinds(),
        CodecSpec::AdaComp(BinConfig::new(20).unwrap()),
        CodecSpec::AdaComp(BinConfig::new(10).unwrap()),
    );
    let mut cluster = Cluster::new(config(4, 16, codecs, None), model).unwrap();
    let streams = shard(data.len(), 4, 16, 3, 0).unwrap();
    for s in 0..100 {
        let shards: Vec<&[usize]> = streams.iter().map(|st| &st[s * 4..(s + 1) * 4]).collect();
        cluster.sync_step(&data, &shards).unwrap();
        assert_eq!(cluster.first_rank_mismatch(), None, "after step {}", s + 1);
    }
    // residues are per learner and differ, weights do not
    assert_ne!(cluster.residue(0, 0), cluster.residue(1, 0));
}

#[test]
fn thread_count_does_not_change_the_bits() {
    let data = small_cnn_data(5);
    let run = |threads| {
        let model = small_cnn(6);
        let codecs = codecs_by_kind(
            &model.param_kinds(),
            CodecSpec::LocalSelection { bin_len: 8 },
            CodecSpec::TopPercent { fraction: 0.1 },
        );
        let mut cluster = Cluster::new(config(4, 16, codecs, Some(threads)), model).unwrap();
        let losses = train(&mut cluster, &data, 20);
        (losses, weight_bits(cluster.model()))
    };
    assert_eq!(run(1), run(3));
}

#[test]
fn verify_ranks_flag_checks_every_step() {
    let data = synth_gaussians(4, 12, 400, 3.0, 2).unwrap();
    let mut cfg = config(2, 20, vec![CodecSpec::OneBit; 2], None);
    cfg.verify_ranks = true;
    let mut cluster = Cluster::new(cfg, mlp(12, 4, 1)).unwrap();
    train(&mut cluster, &data, 10);
    assert_eq!(cluster.step_count(), 10);
}

#[test]
fn loss_decreases_over_fifty_steps() {
    let data = synth_gaussians(4, 12, 2000, 3.0, 4).unwrap();
    let mut cluster = Cluster::new(
        config(1, 40, vec![CodecSpec::Identity; 2], None),
        mlp(12, 4, 2),
    )
    .unwrap();
    let losses = train(&mut cluster, &data, 50);
    let first: f32 = losses[..5].iter().sum::<f32>() / 5.0;
    let last: f32 = losses[45..].iter().sum::<f32>() / 5.0;
    assert!(last < 0.5 * first, "{first} -> {last}");
}

#[test]
fn linear_model_separates_gaussians() {
    let data = synth_gaussians(3, 8, 3000, 4.0, 7).unwrap();
    let model = Model::new(
        &[8],
        &[
            LayerSpec::FullyConnected {
                inputs: 8,
                outputs: 3,
            },
            LayerSpec::SoftmaxXent { classes: 3 },
        ],
        1,
    )
    .unwrap();
    let mut cluster = Cluster::new(config(1, 50, vec![CodecSpec::Identity], None), model).unwrap();
    for epoch in 0..3 {
        let stream = &shard(data.len(), 1, 50, 3, epoch).unwrap()[0];
        for s in 0..stream.len() / 50 {
            cluster
                .sync_step(&data, &[&stream[s * 50..(s + 1) * 50]])
                .unwrap();
        }
    }
    let train_error = evaluate(cluster.model(), &data).unwrap();
    assert!(train_error <= 0.01, "train error {train_error}");
}

#[test]
fn nan_loss_is_reported_as_divergence() {
    let data = synth_gaussians(4, 12, 400, 3.0, 2).unwrap();
    let mut model = mlp(12, 4, 1);
    model.params_mut()[1][0] = f32::NAN;
    let mut cluster =
        Cluster::new(config(2, 20, vec![CodecSpec::Identity; 2], None), model).unwrap();
    let streams = shard(400, 2, 20, 3, 0).unwrap();
    let err = cluster
        .sync_step(&data, &[&streams[0][..10], &streams[1][..10]])
        .unwrap_err();
    assert!(
        matches!(err, adacomp::Error::Diverged { step: 1, .. }),
        "{err}"
    );
}
