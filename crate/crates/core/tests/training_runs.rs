use seqvi::autodiff::{Graph, Tensor};
use seqvi::data::{gen_lorenz, Batch, LorenzConfig, SequenceDataset};
use seqvi::generative::LorenzTheta;
use seqvi::model::{ModelBundle, ModelSpec};
use seqvi::objectives::{dkf_bound, draw_eps, iwdkf_loss, BoundConfig, WeightForm};
use seqvi::rng::substream;
use seqvi::training::{fit, resume, Checkpoint, TrainConfig, TrainState, UpdateMode};

fn lorenz_data(train: usize, len: usize, seed: u64) -> (SequenceDataset, SequenceDataset) {
    let cfg = LorenzConfig {
        len,
        train,
        val: 2,
        test: 1,
        seed,
        ..LorenzConfig::default()
    };
    let s = gen_lorenz(&cfg).unwrap();
    (s.train, s.val)
}

fn start(seed: u64, cfg: &TrainConfig) -> TrainState {
    let theta = LorenzTheta::default().perturbed(&mut substream(seed, "theta", 0), 0.2);
    let bundle = ModelBundle::init(ModelSpec::lorenz(8), seed, Some(theta)).unwrap();
    TrainState::new(bundle, cfg.adam.clone())
}

#[test]
fn resuming_from_a_saved_checkpoint_is_bit_exact() {
    let (train, val) = lorenz_data(5, 15, 2);
    let cfg = TrainConfig {
        bound: BoundConfig::iwdkf(3),
        batch_size: 2,
        max_epochs: 3,
        seed: 4,
        ..TrainConfig::default()
    };
    let straight = fit(&train, &val, start(4, &cfg), &cfg, |_| {}).unwrap();

    let first = TrainConfig { max_epochs: 1, ..cfg.clone() };
    let part = fit(&train, &val, start(4, &cfg), &first, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    part.last.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.params, part.last.params);
    let rest = resume(&train, &val, loaded.state(), &cfg, loaded.progress.clone(), |_| {}).unwrap();

    assert_eq!(rest.last.params, straight.last.params);
    assert_eq!(rest.last.adam, straight.last.adam);
    let mut joined = part.history.clone();
    joined.extend(rest.history);
    assert_eq!(joined, straight.history);
}

#[test]
fn lorenz_smoke_run_improves_the_training_bound() {
    let (train, val) = lorenz_data(5, 100, 0);
    let cfg = TrainConfig {
        max_epochs: 20,
        batch_size: 5,
        seed: 0,
        ..TrainConfig::default()
    };
    let out = fit(&train, &val, start(0, &cfg), &cfg, |_| {}).unwrap();
    assert_eq!(out.history.len(), 20);
    let first = out.history[0].train_bound;
    let last = out.history[19].train_bound;
    assert!(last > first, "bound went from {first} to {last}");
    let best = out.history.iter().map(|r| r.val_ll).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(out.best.val_ll, Some(best));
}

#[test]
fn minibatch_updates_also_learn() {
    let (train, val) = lorenz_data(6, 40, 1);
    let cfg = TrainConfig {
        max_epochs: 15,
        batch_size: 2,
        update_mode: UpdateMode::Minibatch,
        seed: 1,
        ..TrainConfig::default()
    };
    let out = fit(&train, &val, start(1, &cfg), &cfg, |_| {}).unwrap();
    assert!(out.history[14].train_bound > out.history[0].train_bound);
}

/// Per-sequence bounds of a padded batch equal the bounds of each sequence
/// evaluated alone with the same noise rows.
#[test]
fn padded_batch_bound_is_the_sum_of_sequence_bounds() {
    let bundle = ModelBundle::init(ModelSpec::gated_bernoulli(4, 3, 5, 6), 8, None).unwrap();
    let mut rng = substream(8, "pad", 0);
    let lens = [5usize, 2, 4];
    let seqs: Vec<Tensor> = lens
        .iter()
        .map(|&t| {
            let v = seqvi::rng::standard_normals(&mut rng, t * 4);
            Tensor::matrix(t, 4, v.into_iter().map(|x| (x > 0.0) as u8 as f64).collect()).unwrap()
        })
        .collect();
    let refs: Vec<&Tensor> = seqs.iter().collect();
    let batch = Batch::from_sequences(&refs, vec![0, 1, 2]).unwrap();
    let k = 3;
    let b = lens.len();
    let eps = draw_eps(&mut rng, batch.steps(), k * b, 3);

    let g = Graph::new();
    let model = bundle.bind_frozen(&g).unwrap();
    let joint = iwdkf_loss(&g, &model, &batch, &eps, k, 0.7, WeightForm::Sampled).unwrap();
    let joint_dkf = dkf_bound(&g, &model, &batch, &eps.iter().map(|e| first_rows(e, b)).collect::<Vec<_>>(), 0.7).unwrap();

    for (i, seq) in seqs.iter().enumerate() {
        let single = Batch::from_sequences(&[seq], vec![i]).unwrap();
        let own: Vec<Tensor> = eps[..lens[i]]
            .iter()
            .map(|e| pick_rows(e, &(0..k).map(|s| s * b + i).collect::<Vec<_>>()))
            .collect();
        let g1 = Graph::new();
        let m1 = bundle.bind_frozen(&g1).unwrap();
        let alone = iwdkf_loss(&g1, &m1, &single, &own, k, 0.7, WeightForm::Sampled).unwrap();
        assert!((alone.bound[0] - joint.bound[i]).abs() < 1e-12);
        let one: Vec<Tensor> = own.iter().map(|e| first_rows(e, 1)).collect();
        let alone_dkf = dkf_bound(&g1, &m1, &single, &one, 0.7).unwrap();
        assert!((alone_dkf.bound[0] - joint_dkf.bound[i]).abs() < 1e-12);
    }
    let total: f64 = joint_dkf.bound.iter().sum();
    assert!((total - joint_dkf.surrogate.item()).abs() < 1e-10);
}

fn pick_rows(t: &Tensor, rows: &[usize]) -> Tensor {
    let w = t.shape()[1];
    let data = rows.iter().flat_map(|&r| t.row(r).to_vec()).collect();
    Tensor::matrix(rows.len(), w, data).unwrap()
}

fn first_rows(t: &Tensor, n: usize) -> Tensor {
    pick_rows(t, &(0..n).collect::<Vec<_>>())
}
