use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use gatcons::adcore::{finite_diff_grad, max_relative_error, Tensor};
use gatcons::conservation::{c_value, delta_summary, max_abs_c, max_rescale_deviation, telescoped_residual};
use gatcons::fmt_f64;
use gatcons::graphio::{gen_sbm, write_dataset, Dataset, Graph, SbmParams};
use gatcons::init::{initialize, InitScheme, InitSpec};
use gatcons::model::{GatNetwork, NetworkConfig};
use gatcons::train::{loss_mask, train, TrainHistory};
use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Override};
use crate::stats::MeanCi;
use crate::{Cli, CliError, Command};

type Result<T> = std::result::Result<T, CliError>;

pub const DELTA_TOL: f64 = 1e-9;
pub const C_TOL: f64 = 1e-12;
pub const TELESCOPE_TOL: f64 = 1e-8;
pub const RESCALE_TOL: f64 = 1e-10;
pub const GRADCHECK_TOL: f64 = 1e-5;
/// Central-difference step, near the cube root of machine epsilon; smaller
/// steps let round-off dominate the relative error of tiny gradient entries.
pub const GRADCHECK_STEP: f64 = 1e-5;
pub const RESCALE_LAMBDAS: [f64; 3] = [0.5, 2.0, 10.0];

pub fn dispatch(cli: &Cli, overrides: &[Override]) -> Result<()> {
    let mut cfg = ExperimentConfig::load(cli.config.as_deref(), overrides)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match &cli.command {
        Command::Train => cmd_train(&cfg, cli.jobs.max(1)),
        Command::Verify { corrupt_gradient } => cmd_verify(&cfg, *corrupt_gradient),
        Command::Gradcheck => cmd_gradcheck(&cfg),
        Command::InitInspect => cmd_init_inspect(&cfg),
        Command::Gen { out, blocks, p_in, p_out, feat_dim, feature_shift } => {
            let mut p = cfg.sbm.clone().unwrap_or_else(|| SbmParams::new(vec![30, 30], 0.5, 0.05, 16, 0));
            if let Some(b) = blocks {
                p.blocks = b.clone();
            }
            p.p_in = p_in.unwrap_or(p.p_in);
            p.p_out = p_out.unwrap_or(p.p_out);
            p.feat_dim = feat_dim.unwrap_or(p.feat_dim);
            p.feature_shift = feature_shift.unwrap_or(p.feature_shift);
            if let Some(s) = cli.seed {
                p.seed = s;
            }
            cmd_gen(&p, out.as_deref().unwrap_or(&cfg.output_dir))
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Config(format!("output_dir {} not writable: {e}", dir.display())))
}

fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let file = File::create(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    f(&mut w).and_then(|_| w.flush()).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write_with(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        writeln!(w)
    })
}

/// Contents of `run_{r}/summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run: usize,
    pub seed: u64,
    pub best_epoch: usize,
    pub best_train_acc: f64,
    pub best_val_acc: f64,
    pub best_test_acc: f64,
    pub final_train_loss: f64,
    pub epochs_run: usize,
    pub converged: bool,
    pub diverged_at: Option<usize>,
    pub wall_time_secs: f64,
}

/// Contents of `aggregate.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub runs: usize,
    pub test_acc: MeanCi,
    pub epochs_to_best: MeanCi,
}

impl Aggregate {
    pub fn from_runs(runs: &[RunSummary]) -> Self {
        let acc: Vec<f64> = runs.iter().map(|r| r.best_test_acc).collect();
        let ep: Vec<f64> = runs.iter().map(|r| r.best_epoch as f64).collect();
        Aggregate { runs: runs.len(), test_acc: MeanCi::of(&acc), epochs_to_best: MeanCi::of(&ep) }
    }
}

fn write_run(dir: &Path, h: &TrainHistory, net: &NetworkConfig) -> Result<()> {
    create_dir(dir)?;
    write_with(&dir.join("history.csv"), |w| h.write_history_csv(w))?;
    write_with(&dir.join("diagnostics.csv"), |w| h.write_diagnostics_csv(w))?;
    let checkpoint = GatNetwork { config: net.clone(), params: h.best_params.clone() };
    write_json(&dir.join("checkpoint.json"), &checkpoint)
}

fn one_run(cfg: &ExperimentConfig, data: &Dataset, net: &NetworkConfig, r: usize) -> Result<RunSummary> {
    let (init, tc) = cfg.run_specs(r);
    let start = Instant::now();
    let h = train(data, net, &init, &tc).map_err(runtime)?;
    let wall = start.elapsed().as_secs_f64();
    let best = *h.best().ok_or_else(|| runtime(format!("run {r} diverged before completing an epoch")))?;
    write_run(&cfg.output_dir.join(format!("run_{r}")), &h, net)?;
    let summary = RunSummary {
        run: r,
        seed: init.seed,
        best_epoch: h.best_epoch,
        best_train_acc: best.train_acc,
        best_val_acc: best.val_acc,
        best_test_acc: best.test_acc,
        final_train_loss: h.epochs.last().map_or(f64::NAN, |e| e.train_loss),
        epochs_run: h.epochs.len(),
        converged: h.converged,
        diverged_at: h.diverged_at,
        wall_time_secs: wall,
    };
    write_json(&cfg.output_dir.join(format!("run_{r}")).join("summary.json"), &summary)?;
    Ok(summary)
}

/// Runs `f(0..n)` on up to `jobs` threads; results come back in index order.
fn parallel<T: Send>(n: usize, jobs: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.min(n) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let out = f(i);
                slots.lock().expect("no poisoned workers")[i] = Some(out);
            });
        }
    });
    slots.into_inner().expect("workers joined").into_iter().map(|x| x.expect("every slot filled")).collect()
}

pub fn cmd_train(cfg: &ExperimentConfig, jobs: usize) -> Result<()> {
    let data = cfg.dataset()?;
    let net = cfg.network(&data)?;
    create_dir(&cfg.output_dir)?;
    write_json(&cfg.output_dir.join("config.json"), cfg)?;
    let results = parallel(cfg.runs, jobs, |r| one_run(cfg, &data, &net, r));
    let runs = results.into_iter().collect::<Result<Vec<_>>>()?;
    for r in &runs {
        println!(
            "run {}: best epoch {}, val acc {:.4}, test acc {:.4}{}",
            r.run,
            r.best_epoch,
            r.best_val_acc,
            r.best_test_acc,
            match r.diverged_at {
                Some(e) => format!(", diverged at epoch {e}"),
                None => String::new(),
            }
        );
    }
    let agg = Aggregate::from_runs(&runs);
    println!("test acc {:.4} +- {:.4} over {} runs", agg.test_acc.mean, agg.test_acc.ci95, agg.runs);
    write_json(&cfg.output_dir.join("aggregate.json"), &agg)
}

fn init_network(net: &NetworkConfig, spec: &InitSpec) -> Result<GatNetwork> {
    initialize(net, spec).map_err(|e| CliError::Config(e.to_string()))
}

/// Up to five seeded picks per hidden layer.
fn rescale_picks(net: &NetworkConfig, seed: u64) -> Vec<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (1..net.depth())
        .flat_map(|l| {
            let n = net.widths[l];
            let k = n.min(5);
            rand::seq::index::sample(&mut rng, n, k).into_iter().map(move |i| (l, i)).collect::<Vec<_>>()
        })
        .collect()
}

pub fn cmd_verify(cfg: &ExperimentConfig, corrupt_gradient: bool) -> Result<()> {
    let data = cfg.dataset()?;
    let net_cfg = cfg.network(&data)?;
    let (spec, _) = cfg.run_specs(0);
    let net = init_network(&net_cfg, &spec)?;
    let mask = loss_mask(&data);
    let (_, mut grads) = net.loss_and_grads(&data, &mask).map_err(runtime)?;
    if corrupt_gradient {
        // Adds W to dW in the first layer, so every first-layer neuron's
        // incoming term grows by its squared row norm.
        let h = &mut grads.layers[0].heads[0];
        let w = &net.params.layers[0].heads[0].w;
        for (g, x) in h.w.data_mut().iter_mut().zip(w.data()) {
            *g += x;
        }
    }
    let homogeneous = net_cfg.activation.is_positively_homogeneous();
    let mut failures = Vec::new();
    let mut check = |name: &str, value: f64, tol: f64| {
        let ok = value < tol;
        println!("{name}: {} (tol {tol:e}) {}", fmt_f64(value), if ok { "ok" } else { "FAIL" });
        if !ok {
            failures.push(name.to_string());
        }
    };
    if homogeneous {
        let d = delta_summary(&net, &grads).map_err(runtime)?;
        check("max relative delta", d.max_relative, DELTA_TOL);
    } else {
        warn!("activation is not positively homogeneous; skipping identity checks");
        println!("max relative delta: skipped (activation not positively homogeneous)");
    }
    let c = max_abs_c(&net);
    if spec.scheme.is_balanced() {
        check("max |c|", c, C_TOL);
    } else {
        println!("max |c|: {} (unbalanced scheme, not checked)", fmt_f64(c));
    }
    if homogeneous {
        let r = telescoped_residual(&net, &grads).map_err(runtime)?;
        check("telescoped residual", r.abs(), TELESCOPE_TOL);
        let picks = rescale_picks(&net_cfg, cfg.seed);
        let dev = max_rescale_deviation(&net, &data, &mask, &picks, &RESCALE_LAMBDAS).map_err(runtime)?;
        check("max rescale loss deviation", dev, RESCALE_TOL);
    } else {
        println!("telescoped residual: skipped (activation not positively homogeneous)");
        println!("max rescale loss deviation: skipped (activation not positively homogeneous)");
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verification(failures.join(", ")))
    }
}

/// Six-node random digraph with 5 features and 3 classes.
pub fn gradcheck_instance(seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::new();
    for u in 0..6 {
        for v in 0..6 {
            if u != v && rng.random_bool(0.4) {
                edges.push((u, v));
            }
        }
    }
    let graph = Graph::from_edges(6, &edges).expect("valid edges");
    let feats = (0..30).map(|_| rng.random_range(-1.0..1.0)).collect();
    let x = Tensor::new(6, 5, feats).expect("6x5");
    Dataset::new(graph, x, (0..6).map(|v| v % 3).collect(), (0..6).collect(), vec![], vec![]).expect("valid dataset")
}

pub fn cmd_gradcheck(cfg: &ExperimentConfig) -> Result<()> {
    let data = gradcheck_instance(cfg.seed);
    let mut block = cfg.network.clone();
    block.depth = block.depth.clamp(1, 3);
    block.hidden = 4 * block.heads;
    let net_cfg = block.resolve(5, 3);
    net_cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let net = init_network(&net_cfg, &InitSpec::new(InitScheme::Xavier, cfg.seed))?;
    let mask: Vec<usize> = (0..6).collect();
    let (_, grads) = net.loss_and_grads(&data, &mask).map_err(runtime)?;
    let mut probe = net.clone();
    let mut failed = None;
    let numeric = finite_diff_grad(
        |w| {
            probe.params.assign_flat(w);
            probe.loss(&data, &mask).unwrap_or_else(|e| {
                failed = Some(e);
                f64::NAN
            })
        },
        &net.params.flatten(),
        GRADCHECK_STEP,
    );
    if let Some(e) = failed {
        return Err(runtime(e));
    }
    let numeric = numeric.map_err(runtime)?;
    let err = max_relative_error(&grads.flatten(), &numeric);
    println!("parameters: {}", numeric.len());
    println!("max relative error: {} (tol {GRADCHECK_TOL:e})", fmt_f64(err));
    if err < GRADCHECK_TOL {
        Ok(())
    } else {
        Err(CliError::Verification(format!("gradient error {err:e}")))
    }
}

pub const NORMS_HEADER: &str = "layer,neuron,row_norm_sq,col_norm_sq,attention,attention_sq,c";

/// One `norms.csv` row per neuron of every layer. The last layer has no
/// outgoing columns, so `col_norm_sq` and `c` are left empty there.
pub fn write_norms(net: &GatNetwork, out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "{NORMS_HEADER}")?;
    let cfg = &net.config;
    for l in 1..=cfg.depth() {
        for i in 0..cfg.widths[l] {
            let (incoming, outgoing) = if l < cfg.depth() {
                let fan = cfg.neuron_fan(l, i).expect("in range");
                (fan.incoming, Some(fan.outgoing))
            } else {
                ((0..cfg.heads).map(|k| (k, i)).collect(), None)
            };
            let mut row = 0.0;
            let mut a = 0.0;
            let mut a2 = 0.0;
            for &(k, r) in &incoming {
                let h = net.head(l, k);
                row += h.feature_mats().map(|m| m.row_norm_sq(r)).sum::<f64>();
                a += h.a.data()[r];
                a2 += h.a.data()[r].powi(2);
            }
            let (col, c) = match outgoing {
                Some(og) => {
                    let col: f64 = og
                        .iter()
                        .map(|&(k, j)| net.head(l + 1, k).feature_mats().map(|m| m.col_norm_sq(j)).sum::<f64>())
                        .sum();
                    (fmt_f64(col), fmt_f64(c_value(net, l, i).expect("in range")))
                }
                None => (String::new(), String::new()),
            };
            writeln!(out, "{l},{i},{},{col},{},{},{c}", fmt_f64(row), fmt_f64(a), fmt_f64(a2))?;
        }
    }
    Ok(())
}

pub fn cmd_init_inspect(cfg: &ExperimentConfig) -> Result<()> {
    let data = cfg.dataset()?;
    let net_cfg = cfg.network(&data)?;
    let net = init_network(&net_cfg, &cfg.run_specs(0).0)?;
    create_dir(&cfg.output_dir)?;
    let path = cfg.output_dir.join("norms.csv");
    write_with(&path, |w| write_norms(&net, w))?;
    println!("max |c|: {}", fmt_f64(max_abs_c(&net)));
    println!("wrote {}", path.display());
    Ok(())
}

pub fn cmd_gen(params: &SbmParams, out: &Path) -> Result<()> {
    let data = gen_sbm(params).map_err(|e| CliError::Config(e.to_string()))?;
    create_dir(out)?;
    write_dataset(&data, out).map_err(runtime)?;
    println!(
        "wrote {} nodes, {} edges, {} classes to {}",
        data.num_nodes(),
        data.graph.num_edges(),
        data.num_classes,
        out.display()
    );
    Ok(())
}

/// Reads every `run_*/summary.json` under `dir`, ordered by run index.
pub fn read_summaries(dir: &Path) -> Result<Vec<RunSummary>> {
    let mut out = Vec::new();
    for r in 0.. {
        let p: PathBuf = dir.join(format!("run_{r}")).join("summary.json");
        if !p.exists() {
            break;
        }
        let text = fs::read_to_string(&p).map_err(runtime)?;
        out.push(serde_json::from_str(&text).map_err(runtime)?);
    }
    Ok(out)
}
