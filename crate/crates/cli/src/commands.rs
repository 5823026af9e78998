use std::path::Path;

use anyhow::{Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use consol_core::config::{DatasetConfig, RunConfig, CONFIG_VERSION};
use consol_core::datasets::Dataset;
use consol_core::icnn::Icnn;
use consol_core::local::{extract_equation, fit_from, predict, LocalStructure, LocalWeights, ParamSlot, TrainConfig};
use consol_core::metrics::{e_c, nrmse_multi, MetricReport};
use consol_core::probe::{self, RegionEstimate};
use consol_core::qlearn::{output_sigmas, run_search, SearchResult};
use consol_core::Mode;

use crate::io::{self, ModelFile, SearchReport};
use crate::{Columns, Command, DatasetName, ProbeKind, TrainArgs};

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { dataset, config, seed, snr, n, out } => gen_data(dataset, config.as_deref(), seed, snr, n, &out),
        Command::Search { config, seed, snr, out } => search(&config, seed, snr, out.as_deref()),
        Command::Fit { structure, data, columns, train, out } => fit(&structure, &data, &columns, &train, &out),
        Command::Probe { kind } => probe(kind),
        Command::Eval { model, data, columns, out } => eval(&model, &data, &columns, &out),
    }
}

fn with_seed(mut cfg: RunConfig, seed: Option<u64>, snr: Option<f64>) -> RunConfig {
    if let Some(s) = seed {
        cfg.seeds.data = s;
        cfg.seeds.search = s;
        cfg.seeds.probe = s;
    }
    if snr.is_some() {
        cfg.snr_db = snr;
    }
    cfg
}

fn gen_data(
    name: Option<DatasetName>,
    config: Option<&Path>,
    seed: Option<u64>,
    snr: Option<f64>,
    n: Option<usize>,
    out: &Path,
) -> Result<()> {
    let mut cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(name) = name {
        let label = match name {
            DatasetName::Syn1 => "syn1",
            DatasetName::Syn2 => "syn2",
            DatasetName::Pow => "pow",
            DatasetName::Mas => "mas",
        };
        if config.is_none() || cfg.dataset.name() != label {
            cfg.dataset = DatasetConfig::named(label)?;
        }
    }
    if let Some(n) = n {
        match &mut cfg.dataset {
            DatasetConfig::Syn1(p) | DatasetConfig::Syn2(p) => (p.n_train, p.n_test) = (n, n),
            DatasetConfig::Pow(p) => (p.n_train, p.n_test) = (n, n),
            DatasetConfig::Mas(p) => p.steps = 2 * n,
            DatasetConfig::Files(_) => anyhow::bail!(consol_core::Error::Config("--n needs a generator".into())),
        }
    }
    let cfg = with_seed(cfg, seed, snr);
    cfg.validate()?;
    let (train, test) = cfg.datasets()?;
    io::write_dataset(&out.join("train.csv"), &train)?;
    if let Some(test) = &test {
        io::write_dataset(&out.join("test.csv"), test)?;
    }
    println!(
        "{}: {} training and {} test rows in {}",
        cfg.dataset.name(),
        train.len(),
        test.as_ref().map_or(0, Dataset::len),
        out.display()
    );
    Ok(())
}

fn search(config: &Path, seed: Option<u64>, snr: Option<f64>, out: Option<&Path>) -> Result<()> {
    let cfg = with_seed(RunConfig::load(config)?, seed, snr);
    cfg.validate()?;
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.output_dir.clone());
    let (train, test) = cfg.datasets()?;
    let space = cfg.search_space(train.n_inputs(), train.n_outputs())?;
    let res = run_search(
        space,
        cfg.qlearn.clone(),
        cfg.train.clone(),
        cfg.constraints.clone(),
        &train.x,
        &train.y,
        cfg.seeds.search,
        Mode::Parallel,
        &mut |snap| {
            if snap.log.episode % 10 == 0 {
                log::info!("episode {}: R = {:.6}, best {:.6}", snap.log.episode, snap.log.reward, snap.best_reward);
            }
        },
    )?;
    let report = search_report(&cfg, &res, &train, test.as_ref())?;

    io::write_json(&out.join("config.json"), &cfg)?;
    io::write_atomic(&out.join("episodes.csv"), io::episodes_csv(&res.episodes).as_bytes())?;
    io::write_atomic(&out.join("equations.txt"), (report.equations.join("\n") + "\n").as_bytes())?;
    io::write_json(&out.join("model.json"), &ModelFile { structure: res.structure.clone(), weights: Some(res.weights.clone()) })?;
    io::write_atomic(&out.join("qnet.bin"), &res.qnet.to_bytes())?;
    io::write_atomic(&out.join("rnet.bin"), &res.rnet.to_bytes())?;
    io::write_json(&out.join("report.json"), &report)?;
    println!("{}", report.equations.join("\n"));
    if let Some(ec) = report.e_c_percent {
        println!("E_c = {ec:.4}%");
    }
    Ok(())
}

fn search_report(cfg: &RunConfig, res: &SearchResult, train: &Dataset, test: Option<&Dataset>) -> Result<SearchReport> {
    let nrmse_test = match test {
        Some(t) => Some(nrmse_multi(&predict(&res.structure, &res.weights, &t.x, Mode::Parallel)?, &t.y, &output_sigmas(&t.y)?)?),
        None => None,
    };
    let coefficients = train.meta.truth.as_ref().map(|t| e_c(t, &res.equation)).transpose()?;
    Ok(SearchReport {
        version: CONFIG_VERSION,
        dataset: cfg.dataset.name().to_string(),
        seeds: cfg.seeds,
        snr_db: cfg.snr_db,
        equations: io::equation_lines(&res.equation),
        terms: res.equation.clone(),
        nrmse_train: res.nrmse_train,
        nrmse_test,
        e_c_percent: coefficients.as_ref().map(|c| c.e_c_percent),
        coefficients,
        best_reward: res.best_reward,
        best_episode: res.best_episode,
        episodes: res.episodes.len(),
        stopped_early: res.stopped_early,
    })
}

fn train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut t = match &args.config {
        Some(p) => RunConfig::load(p)?.train,
        None => TrainConfig::default(),
    };
    if let Some(v) = args.init {
        t.init_value = v;
    }
    if let Some(v) = args.epochs {
        t.epochs = v;
    }
    if let Some(v) = args.lr {
        t.learning_rate = v;
    }
    if let Some(v) = args.batch {
        t.batch_size = v;
    }
    t.validate()?;
    Ok(t)
}

fn load_data(path: &Path, columns: &Columns) -> Result<Dataset> {
    io::select(io::load_dataset(path)?, columns.inputs.as_deref(), columns.outputs.as_deref())
}

fn check_fits(s: &LocalStructure, ds: &Dataset) -> Result<()> {
    if s.n_inputs() != ds.n_inputs() || s.n_outputs() != ds.n_outputs() {
        anyhow::bail!(consol_core::Error::Config(format!(
            "structure maps {} inputs to {} outputs but the data has {} and {}; select columns with --inputs/--outputs",
            s.n_inputs(),
            s.n_outputs(),
            ds.n_inputs(),
            ds.n_outputs()
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct FitReport {
    equations: Vec<String>,
    terms: consol_core::local::CanonicalEquation,
    initial_loss: f64,
    final_loss: f64,
    converged: bool,
    /// Weights whose gradient was zero at the start and never moved.
    stuck: Vec<ParamSlot>,
    halvings: usize,
    error: Option<String>,
}

/// Loss below which a fit counts as converged.
const CONVERGED_LOSS: f64 = 1e-6;

fn fit(structure: &Path, data: &Path, columns: &Columns, train: &TrainArgs, out: &Path) -> Result<()> {
    let model = ModelFile::load(structure)?;
    let ds = load_data(data, columns)?;
    check_fits(&model.structure, &ds)?;
    let cfg = train_config(train)?;
    let start = LocalWeights::filled(&model.structure, cfg.init_value);
    let (weights, report) = match fit_from(&model.structure, start, &cfg, &ds.x, &ds.y, Mode::Parallel) {
        Ok(r) => {
            let eq = extract_equation(&model.structure, &r.weights, 0.0);
            let report = FitReport {
                equations: io::equation_lines(&eq),
                terms: eq,
                initial_loss: r.initial_loss,
                final_loss: r.final_loss,
                converged: r.final_loss < CONVERGED_LOSS,
                stuck: r.stuck.clone(),
                halvings: r.halvings,
                error: None,
            };
            (r.weights, report)
        }
        Err(e) => {
            let eq = extract_equation(&model.structure, &e.last_weights, 0.0);
            let report = FitReport {
                equations: io::equation_lines(&eq),
                terms: eq,
                initial_loss: f64::NAN,
                final_loss: e.last_loss,
                converged: false,
                stuck: Vec::new(),
                halvings: 0,
                error: Some(e.to_string()),
            };
            (e.last_weights, report)
        }
    };
    io::write_json(&out.join("model.json"), &ModelFile { structure: model.structure, weights: Some(weights) })?;
    io::write_json(&out.join("fit.json"), &report)?;
    println!("{}", report.equations.join("\n"));
    println!("loss {:e} -> {:e}", report.initial_loss, report.final_loss);
    if !report.converged {
        eprintln!("did not converge (loss {:e})", report.final_loss);
    }
    if !report.stuck.is_empty() {
        eprintln!("zero gradient at the start for {} weight(s); they never moved: {:?}", report.stuck.len(), report.stuck);
    }
    if let Some(e) = &report.error {
        eprintln!("{e}");
    }
    Ok(())
}

fn probe(kind: ProbeKind) -> Result<()> {
    match kind {
        ProbeKind::Sweep { structure, data, grid, columns, train, out } => {
            let model = ModelFile::load(&structure)?;
            let ds = load_data(&data, &columns)?;
            check_fits(&model.structure, &ds)?;
            let cfg = train_config(&train)?;
            let rows = probe::init_sweep(&model.structure, &ds.x, &ds.y, &grid, &cfg, Mode::Parallel)?;
            io::write_atomic(&out.join("sweep.csv"), probe::sweep_csv(&rows).as_bytes())?;
            for r in &rows {
                println!("{:>8} {:e}", r.w0, r.final_loss);
            }
        }
        ProbeKind::Segment { target, n, seed, tol, lo, hi, out } => {
            let bytes = std::fs::read(&target).with_context(|| format!("reading {}", target.display()))?;
            let net = Icnn::from_bytes(&bytes)?;
            if !(lo < hi) {
                anyhow::bail!(consol_core::Error::Config("--lo must be below --hi".into()));
            }
            let d = net.input_dim();
            let f = |v: &[f64]| net.forward(v).unwrap_or(f64::NAN);
            let violations = probe::segment_convexity_test(&f, &vec![lo; d], &vec![hi; d], n, tol, seed, Mode::Parallel);
            #[derive(Serialize)]
            struct Segment {
                target: String,
                triples: usize,
                tol: f64,
                violations: usize,
            }
            io::write_json(
                &out.join("segment.json"),
                &Segment { target: target.display().to_string(), triples: n, tol, violations },
            )?;
            println!("violations: {violations}");
        }
        ProbeKind::Region { model, data, at_optimum, n, seed, columns, train, out } => {
            let model = ModelFile::load(&model)?;
            let ds = load_data(&data, &columns)?;
            check_fits(&model.structure, &ds)?;
            let cfg = train_config(&train)?;
            let mut weights = model.weights.clone().unwrap_or_else(|| LocalWeights::filled(&model.structure, cfg.init_value));
            if at_optimum {
                let long = TrainConfig { epochs: cfg.epochs.max(500), ..cfg };
                weights = match fit_from(&model.structure, weights, &long, &ds.x, &ds.y, Mode::Parallel) {
                    Ok(r) => r.weights,
                    Err(e) => e.last_weights,
                };
            }
            let est: RegionEstimate = probe::estimate_region(&model.structure, &weights, &ds.x, &ds.y, n, seed, Mode::Parallel)?;
            io::write_json(&out.join("region.json"), &est)?;
            println!("eta {:e}, bound {:e}, max residual {:e}, membership {}", est.eta, est.bound, est.max_residual, est.membership);
        }
        ProbeKind::SecondDeriv { model, data, n, seed, columns, out } => {
            let model = ModelFile::load(&model)?;
            let ds = load_data(&data, &columns)?;
            check_fits(&model.structure, &ds)?;
            let weights = model
                .weights
                .clone()
                .ok_or_else(|| consol_core::Error::Config("the model file has no weights".into()))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut csv = String::from("direction,second_derivative\n");
            let mut positive = 0;
            for i in 0..n {
                let d = probe::random_direction(&model.structure, &weights, &mut rng);
                let v = probe::loss_second_derivative(&model.structure, &weights, &ds.x, &ds.y, &d, Mode::Parallel)?;
                positive += usize::from(v > 0.0);
                csv.push_str(&format!("{i},{v}\n"));
            }
            io::write_atomic(&out.join("second_deriv.csv"), csv.as_bytes())?;
            println!("{positive} of {n} directions have positive curvature");
        }
    }
    Ok(())
}

fn eval(model: &Path, data: &Path, columns: &Columns, out: &Path) -> Result<()> {
    let model = ModelFile::load(model)?;
    let ds = load_data(data, columns)?;
    check_fits(&model.structure, &ds)?;
    let weights = model.weights.clone().ok_or_else(|| consol_core::Error::Config("the model file has no weights".into()))?;
    let pred = predict(&model.structure, &weights, &ds.x, Mode::Parallel)?;
    let nrmse = nrmse_multi(&pred, &ds.y, &output_sigmas(&ds.y)?)?;
    let eq = extract_equation(&model.structure, &weights, 0.01);
    let coefficients = ds.meta.truth.as_ref().map(|t| e_c(t, &eq)).transpose()?;
    let report = MetricReport {
        nrmse_train: nrmse,
        nrmse_test: None,
        e_c_percent: coefficients.as_ref().map(|c| c.e_c_percent),
        coefficients,
    };
    io::write_json(&out.join("metrics.json"), &report)?;
    println!("{:<12} {:>12}", "metric", "value");
    println!("{:<12} {:>12.6}", "NRMSE", nrmse);
    if let Some(ec) = report.e_c_percent {
        println!("{:<12} {:>11.4}%", "E_c", ec);
    }
    if let Some(c) = &report.coefficients {
        for m in &c.matches {
            let pe = m.errors.iter().map(|e| format!("{e:.3}")).collect::<Vec<_>>().join("/");
            println!("  y{} {:<28} {:<28} {}", m.output + 1, m.truth, m.learned.as_deref().unwrap_or("-"), pe);
        }
        for (o, t) in &c.spurious {
            println!("  y{} extra term {t} (not averaged)", o + 1);
        }
    }
    Ok(())
}
