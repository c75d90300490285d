use super::*;
use crate::autoenc::{Activation, Layer, LayerSpec};
use crate::kmeans::assign_all;
use crate::synth::{generate, GeneratorKind, GeneratorSpec};

fn small_data(seed: u64, per_cluster: usize) -> Dataset {
    let spec = GeneratorSpec {
        per_cluster,
        ambient_dim: 12,
        hidden_dim: 6,
        ..GeneratorSpec::new(GeneratorKind::SigSig, seed)
    };
    generate(&spec).unwrap().dataset
}

fn small_cfg() -> ExperimentConfig {
    ExperimentConfig {
        widths: vec![8, 2],
        k: 4,
        lambda: 0.5,
        t_p: 2,
        t_l: 3,
        batch_size: Some(10),
        lloyd_restarts: 2,
        record_timing: false,
        seed: 11,
        ..ExperimentConfig::default()
    }
}

#[test]
fn modes_parse_and_print() {
    for m in TrainMode::ALL {
        assert_eq!(m.name().parse::<TrainMode>().unwrap(), m);
    }
    assert!("sae".parse::<TrainMode>().is_err());
}

#[test]
fn zero_learning_epochs_return_pretraining_and_initial_kmeans() {
    let data = small_data(1, 20);
    let cfg = ExperimentConfig { t_l: 0, ..small_cfg() };
    let out = train(&data, &cfg).unwrap();
    let params = pretrain(&data, &cfg).unwrap();
    let state = initial_clustering(&params, &data, &cfg).unwrap();
    assert_eq!(out.params, params);
    assert_eq!(out.state, state);
    assert_eq!(out.initial_state, state);
    assert_eq!(out.reports.len(), 1);
    assert_eq!(out.reports[0].epoch, 0);
    assert_eq!(out.reports[0].scores, out.final_scores);
}

#[derive(Debug, PartialEq)]
enum Event {
    Step(Vec<usize>),
    Assign(usize),
    Update(usize),
    EpochEnd(usize),
}

#[derive(Default)]
struct Log(Vec<Event>);

impl Observer for Log {
    fn network_step(&mut self, _epoch: usize, batch: &[usize], _loss: &LossParts) {
        self.0.push(Event::Step(batch.to_vec()));
    }
    fn assigned(&mut self, sample: usize, _cluster: usize, _latent: &[f64], _centroids: &Matrix) {
        self.0.push(Event::Assign(sample));
    }
    fn centroid_updated(&mut self, sample: usize, _cluster: usize, _centroids: &Matrix) {
        self.0.push(Event::Update(sample));
    }
    fn epoch_end(&mut self, report: &EpochReport) {
        self.0.push(Event::EpochEnd(report.epoch));
    }
}

#[test]
fn one_epoch_interleaves_steps_assignments_and_updates() {
    let x = Matrix::from_rows(&[
        vec![0.0, 0.1, 1.0],
        vec![0.2, 0.0, 0.9],
        vec![1.0, 0.8, 0.0],
        vec![0.9, 1.0, 0.1],
    ])
    .unwrap();
    let data = Dataset::new(x, Some(vec![0, 0, 1, 1]), "four").unwrap();
    let cfg = ExperimentConfig {
        widths: vec![3, 2],
        k: 2,
        t_p: 1,
        t_l: 1,
        batch_size: Some(2),
        record_timing: false,
        ..ExperimentConfig::default()
    };
    let mut log = Log::default();
    train_observed(&data, &cfg, &mut log).unwrap();
    let plan = make_batches(4, 2, epoch_batch_seed(cfg.seed, 0)).unwrap();
    let p = plan.permutation();
    let expected = vec![
        Event::EpochEnd(0),
        Event::Step(vec![p[0], p[1]]),
        Event::Assign(p[0]),
        Event::Update(p[0]),
        Event::Assign(p[1]),
        Event::Update(p[1]),
        Event::Step(vec![p[2], p[3]]),
        Event::Assign(p[2]),
        Event::Update(p[2]),
        Event::Assign(p[3]),
        Event::Update(p[3]),
        Event::EpochEnd(1),
    ];
    assert_eq!(log.0, expected);
}

#[test]
fn zero_lambda_follows_plain_autoencoder_training_exactly() {
    let data = small_data(2, 15);
    let cfg = ExperimentConfig {
        lambda: 0.0,
        ..small_cfg()
    };
    let out = train(&data, &cfg).unwrap();

    let mut params = pretrain(&data, &cfg).unwrap();
    let mut sgd = SgdState::new(&params, learn_sgd_config(&cfg)).unwrap();
    for epoch in 0..cfg.t_l {
        sgd.set_epoch(epoch);
        let plan = make_batches(data.len(), 10, epoch_batch_seed(cfg.seed, epoch)).unwrap();
        for idx in plan.batches_at_least(2) {
            let xb = data.features.select_rows(idx);
            params
                .train_step(&mut sgd, &xb, None, Objective::reconstruction_only())
                .unwrap();
        }
    }
    assert_eq!(out.params, params);
    for (a, b) in out.params.layers().zip(params.layers()) {
        assert_eq!(a.weight.as_slice(), b.weight.as_slice());
        assert_eq!(a.running_var, b.running_var);
    }
}

struct ArgminCheck {
    checked: usize,
}

impl Observer for ArgminCheck {
    fn assigned(&mut self, _sample: usize, cluster: usize, latent: &[f64], centroids: &Matrix) {
        let d = sq_dist(latent, centroids.row(cluster));
        for (j, m) in centroids.row_iter().enumerate() {
            let dj = sq_dist(latent, m);
            assert!(d < dj || (d == dj && cluster <= j), "sample not at its nearest centroid");
        }
        self.checked += 1;
    }
}

#[test]
fn every_assignment_is_a_nearest_centroid() {
    let data = small_data(3, 20);
    let cfg = small_cfg();
    let mut check = ArgminCheck { checked: 0 };
    let out = train_observed(&data, &cfg, &mut check).unwrap();
    assert_eq!(check.checked, cfg.t_l * data.len());
    assert!(out.state.counts.iter().sum::<u64>() >= data.len() as u64);
}

#[test]
fn fixed_seed_reproduces_every_report() {
    let data = small_data(4, 20);
    for mode in TrainMode::ALL {
        let cfg = ExperimentConfig { mode, ..small_cfg() };
        let a = train(&data, &cfg).unwrap();
        let b = train(&data, &cfg).unwrap();
        assert_eq!(a.reports, b.reports, "{mode}");
        assert_eq!(a.params, b.params);
        assert_eq!(a.state, b.state);
        assert_eq!(a.reports.len(), cfg.t_l + 1);
        for r in &a.reports {
            assert!(r.total_loss >= 0.0 && r.recon_loss >= 0.0 && r.clust_loss >= 0.0);
            let s = r.scores.unwrap();
            assert!((0.0..=1.0).contains(&s.nmi) && (-1.0..=1.0).contains(&s.ari));
            assert!((0.0..=1.0).contains(&s.acc));
        }
    }
}

#[test]
fn different_seeds_differ() {
    let data = small_data(4, 20);
    let a = train(&data, &small_cfg()).unwrap();
    let b = train(&data, &ExperimentConfig { seed: 12, ..small_cfg() }).unwrap();
    assert_ne!(a.params, b.params);
}

#[test]
fn seed_sweep_matches_individual_runs() {
    let data = small_data(5, 10);
    let cfg = ExperimentConfig { t_l: 1, ..small_cfg() };
    let sweep = train_seeds(&data, &cfg, &[3, 9]);
    for (s, r) in [3, 9].into_iter().zip(sweep) {
        let single = train(&data, &ExperimentConfig { seed: s, ..cfg.clone() }).unwrap();
        assert_eq!(r.unwrap().reports, single.reports);
    }
}

#[test]
fn two_stage_ends_with_kmeans_on_the_embedding() {
    let data = small_data(6, 20);
    let cfg = ExperimentConfig {
        mode: TrainMode::TwoStage,
        ..small_cfg()
    };
    let out = train(&data, &cfg).unwrap();
    let h = embed(&out.params, &data).unwrap();
    assert_eq!(assign_all(&h, &out.state.centroids).unwrap(), out.state.assignments);
    // the network never saw the clustering term
    let plain = train(&data, &ExperimentConfig { lambda: 0.0, ..cfg.clone() }).unwrap();
    assert_eq!(out.params, plain.params);
}

#[test]
fn no_reconstruction_leaves_the_decoder_untouched() {
    let data = small_data(7, 20);
    let cfg = ExperimentConfig {
        mode: TrainMode::NoReconstruction,
        ..small_cfg()
    };
    let out = train(&data, &cfg).unwrap();
    let pre = pretrain(&data, &cfg).unwrap();
    // trainable decoder arrays never move; running statistics still track
    for (a, b) in out.params.decoder.iter().zip(&pre.decoder) {
        assert_eq!((&a.weight, &a.bias, &a.gamma, &a.beta), (&b.weight, &b.bias, &b.gamma, &b.beta));
    }
    assert_ne!(out.params.encoder, pre.encoder);
    let last = out.reports.last().unwrap();
    assert_eq!(last.total_loss, 0.5 * cfg.lambda * last.clust_loss);
}

#[test]
fn rejects_bad_inputs() {
    let data = small_data(8, 1);
    let cfg = ExperimentConfig { k: 5, ..small_cfg() };
    assert!(matches!(train(&data, &cfg), Err(Error::InvalidArgument(_))));
    let mut x = data.features.clone();
    x.set(0, 0, f64::NAN);
    let bad = Dataset::new(x, None, "nan").unwrap();
    assert!(matches!(train(&bad, &small_cfg()), Err(Error::InvalidArgument(_))));
    let wrong_dim = Dataset::new(Matrix::zeros(4, 3), None, "w").unwrap();
    let params = pretrain(&data, &small_cfg()).unwrap();
    assert!(embed(&params, &wrong_dim).is_err());
}

#[test]
fn exploding_steps_abort_with_the_last_finite_checkpoint() {
    let data = small_data(9, 20);
    let x = Matrix::from_fn(data.len(), data.dim(), |i, j| data.features.get(i, j) * 1e3);
    let data = Dataset::new(x, data.labels.clone(), "scaled").unwrap();
    let cfg = ExperimentConfig {
        widths: vec![2],
        t_p: 0,
        alpha_l: 10.0,
        ..small_cfg()
    };
    match train(&data, &cfg) {
        Err(Error::Diverged { checkpoint: Some(cp), .. }) => {
            assert!(cp.params.layers().all(|l| l.weight.is_finite()));
            assert_eq!(cp.state.assignments.len(), data.len());
        }
        other => panic!("expected divergence, got {:?}", other.map(|o| o.reports)),
    }
}

fn identity_net(dim: usize) -> AutoencoderParams {
    let spec = LayerSpec::new(dim, dim, Activation::Linear, false);
    let mut e = Layer::zeros(spec);
    e.weight = Matrix::identity(dim);
    let mut d = Layer::zeros(spec);
    d.weight = Matrix::identity(dim);
    AutoencoderParams::new(vec![e], vec![d]).unwrap()
}

#[test]
fn embed_examples() {
    let x = Matrix::from_rows(&[vec![1.0, -2.0], vec![3.5, 0.0]]).unwrap();
    let data = Dataset::new(x.clone(), None, "id").unwrap();
    assert_eq!(embed(&identity_net(2), &data).unwrap(), x);

    let data = small_data(10, 10);
    let out = train(&data, &ExperimentConfig { t_l: 1, ..small_cfg() }).unwrap();
    let a = embed(&out.params, &data).unwrap();
    let b = embed(&out.params, &data).unwrap();
    assert_eq!(a.shape(), (data.len(), 2));
    assert_eq!(a.as_slice(), b.as_slice());
}

#[test]
fn collapse_indicator_examples() {
    let h = Matrix::filled(5, 3, 2.5);
    let state = ClusterState::from_assignments(Matrix::filled(2, 3, 2.5), vec![0, 0, 1, 1, 0]).unwrap();
    assert_eq!(collapse_indicator(&h, &state).unwrap(), 0.0);

    // two clusters with equal spread 1 around -3 and 3: within 4, total 40
    let h = Matrix::from_rows(&[vec![-4.0], vec![-2.0], vec![2.0], vec![4.0]]).unwrap();
    let m = Matrix::from_rows(&[vec![-3.0], vec![3.0]]).unwrap();
    let state = ClusterState::from_assignments(m, vec![0, 0, 1, 1]).unwrap();
    assert!((collapse_indicator(&h, &state).unwrap() - 0.1).abs() < 1e-15);

    let bad = ClusterState::from_assignments(Matrix::zeros(2, 1), vec![0]).unwrap();
    assert!(collapse_indicator(&h, &bad).is_err());
}
