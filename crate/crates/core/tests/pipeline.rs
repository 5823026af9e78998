use consol_core::config::RunConfig;
use consol_core::datasets::{self, gen_syn};
use consol_core::icnn::{Icnn, IcnnConfig, IcnnTrainConfig, Sample};
use consol_core::local::{extract_equation, fit, Indicator, LocalStructure, TrainConfig};
use consol_core::metrics::e_c;
use consol_core::probe::segment_convexity_test;
use consol_core::qlearn::{run_search, Searcher};
use consol_core::symbols::SymbolLibrary;
use consol_core::Mode;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn dataset_survives_csv_round_trip() {
    let (train, _) = gen_syn(1, 50, 10, 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.csv");
    std::fs::write(&path, datasets::to_csv(&train).unwrap()).unwrap();
    std::fs::write(datasets::meta_path(&path), serde_json::to_string(&train.meta).unwrap()).unwrap();
    let back = datasets::load(&path).unwrap();
    assert_eq!(back.x, train.x);
    assert_eq!(back.y, train.y);
    assert_eq!(back.meta.truth, train.meta.truth);
}

#[test]
fn true_syn1_structure_fits_to_its_equation() {
    let (train, _) = gen_syn(1, 400, 10, 0).unwrap();
    let lib = SymbolLibrary::from_names(&["id", "square", "cos"]).unwrap();
    // rows: x1, x1², cos x1, x2, x2², cos x2, x3, x3², cos x3
    let z1 = Indicator::from_fn(9, 3, |r, j| matches!((r, j), (1, 0) | (5, 0) | (0, 1) | (6, 1) | (7, 2)));
    let s = LocalStructure::standard(3, lib, 3, 3)
        .unwrap()
        .with_indicator(1, z1)
        .unwrap()
        .with_indicator(2, Indicator::from_fn(3, 3, |i, j| i == j))
        .unwrap();
    let cfg = TrainConfig { epochs: 300, ..Default::default() };
    let w = fit(&s, &cfg, &train.x, &train.y, Mode::default()).unwrap().weights;
    let eq = extract_equation(&s, &w, 0.01);
    let rep = e_c(train.meta.truth.as_ref().unwrap(), &eq).unwrap();
    assert!(rep.e_c_percent < 0.01, "{}", eq.render(4));
    assert!(rep.spurious.is_empty());
}

#[test]
fn search_is_identical_across_modes() {
    let mut cfg = RunConfig::from_json(
        r#"{"version": 1, "dataset": {"name": "syn1", "n_train": 120, "n_test": 20},
            "qlearn": {"max_episodes": 5, "minibatch_size": 4, "q_epochs": 3, "r_epochs": 3}}"#,
    )
    .unwrap();
    cfg.seeds.search = 11;
    let (train, _) = cfg.datasets().unwrap();
    let run = |mode| {
        let space = cfg.search_space(3, 3).unwrap();
        run_search(space, cfg.qlearn.clone(), cfg.train.clone(), cfg.constraints.clone(), &train.x, &train.y, 11, mode, &mut |_| {})
            .unwrap()
    };
    let (a, b) = (run(Mode::Sequential), run(Mode::Parallel));
    let bits = |r: &consol_core::qlearn::SearchResult| r.episodes.iter().map(|l| (l.action_bits(), l.reward.to_bits())).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(a.qnet.to_bytes(), b.qnet.to_bytes());
}

#[test]
fn greedy_decoding_does_not_disturb_the_search() {
    let cfg = RunConfig::from_json(
        r#"{"version": 1, "dataset": {"name": "syn1", "n_train": 100, "n_test": 20},
            "qlearn": {"max_episodes": 4, "minibatch_size": 4, "q_epochs": 2, "r_epochs": 2}}"#,
    )
    .unwrap();
    let (train, _) = cfg.datasets().unwrap();
    let new = || {
        let space = cfg.search_space(3, 3).unwrap();
        Searcher::new(space, cfg.qlearn.clone(), cfg.train.clone(), cfg.constraints.clone(), &train.x, &train.y, 5, Mode::default())
            .unwrap()
    };
    let (mut plain, mut probed) = (new(), new());
    for _ in 0..4 {
        plain.step().unwrap();
        probed.step().unwrap();
        let _ = probed.decode_greedy();
    }
    let bits = |s: &Searcher| s.logs().iter().map(|l| l.action_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&plain), bits(&probed));
}

#[test]
fn trained_icnn_stays_convex_and_round_trips() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let net = Icnn::new(3, &IcnnConfig::default(), &mut rng).unwrap();
    // a nonconvex target; the fit must remain convex regardless
    let samples: Vec<Sample> = (0..200)
        .map(|_| {
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            Sample { target: (2.0 * x[0]).sin() * x[1] - x[2].abs(), input: x }
        })
        .collect();
    let (trained, _) = net.fit(&samples, &IcnnTrainConfig { epochs: 20, ..Default::default() }, &mut rng).unwrap();
    assert!(trained.min_passthrough() >= 0.0);
    let f = |z: &[f64]| trained.forward(z).unwrap();
    assert_eq!(segment_convexity_test(&f, &[-3.0; 3], &[3.0; 3], 5000, 1e-9, 1, Mode::default()), 0);
    let back = Icnn::from_bytes(&trained.to_bytes()).unwrap();
    assert_eq!(back, trained);
}
