//! `quadnav`: train, evaluate, sweep, and ablate navigation agents with
//! adaptive quadtree state abstraction.
//!
//! Exit codes: 0 success, 1 usage, 2 configuration, 3 runtime failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use quadnav_core::agent::{AgentNet, EncoderVariant};
use quadnav_core::config::{ConfigError, RunConfig};
use quadnav_core::evalharness::{self, SweepParam};
use quadnav_core::grid::SpawnRule;
use quadnav_core::metrics::{parse_metrics, tsv_table, MetricRecord};
use quadnav_core::trainer::{self, TrainError};
use quadnav_core::seeding;

#[derive(Parser)]
#[command(name = "quadnav", version, about = "Multi-agent navigation with adaptive quadtree state abstraction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train agents and stream metrics to the run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint, optionally under noise or erasure.
    Eval(EvalArgs),
    /// Evaluate a checkpoint across a range of noise/erasure levels.
    Sweep(SweepArgs),
    /// Train with and without the communication channel and compare.
    Ablate(AblateArgs),
    /// Convert a metrics stream into a plot-ready table.
    PlotData(PlotArgs),
    /// Run the built-in invariant suites.
    Selftest,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Encoder variant override: proposed | full-image | full-tree |
    /// level1-tree | level2-tree.
    #[arg(long)]
    variant: Option<String>,
    /// Root seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory override (also via QUADNAV_OUT).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Episode budget override.
    #[arg(long)]
    episodes: Option<u64>,
    /// Worker count override.
    #[arg(long)]
    workers: Option<usize>,
    /// Disable the communication channel (ablation arm).
    #[arg(long)]
    no_comm: bool,
    /// Omit wallclock stamps so equal seeds give byte-identical streams.
    #[arg(long)]
    no_timestamps: bool,
    /// Continue from a checkpoint directory.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Checkpoint directory (containing params.bin).
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    episodes: Option<u64>,
    /// Observation noise level.
    #[arg(long, default_value_t = 0.0)]
    alpha: f64,
    /// Symbol erasure probability.
    #[arg(long, default_value_t = 0.0)]
    beta: f64,
    /// Silence the channel (all received symbols become null).
    #[arg(long)]
    no_comm: bool,
    /// Also dump per-episode step traces to this file (JSON lines).
    #[arg(long)]
    traces: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Which parameter to sweep: alpha | beta.
    #[arg(long)]
    param: String,
    /// Comma-separated values; defaults to the config's list.
    #[arg(long)]
    values: Option<String>,
    #[arg(long)]
    episodes: Option<u64>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    episodes: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    no_timestamps: bool,
}

#[derive(Args)]
struct PlotArgs {
    /// Metrics stream to read.
    #[arg(long)]
    metrics: PathBuf,
    /// Record kind to tabulate: episode | eval.
    #[arg(long, default_value = "eval")]
    kind: String,
    /// Trailing moving-average window (1 = raw only).
    #[arg(long, default_value_t = 1)]
    window: usize,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

enum CliError {
    Config(String),
    Runtime(String),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Checkpoint(inner) => CliError::Config(inner.to_string()),
            TrainError::Config(m) => CliError::Config(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successful outputs.
            if e.use_stderr() {
                eprint!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::PlotData(args) => cmd_plot(args),
        Command::Selftest => cmd_selftest(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(m)) => {
            eprintln!("config error: {m}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}

/// Loads the configuration, applies common overrides, and resolves it.
fn load_config(common: &CommonArgs) -> Result<RunConfig, CliError> {
    let mut config = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(v) = &common.variant {
        config.agent.variant = EncoderVariant::parse(v)
            .ok_or_else(|| CliError::Config(format!("unknown variant `{v}`")))?;
    }
    if let Some(seed) = common.seed {
        config.train.seed = seed;
        config.eval.seed = seed.wrapping_add(1);
    }
    if let Some(out) = &common.out {
        config.io.out_dir = out.clone();
    } else if let Ok(dir) = std::env::var("QUADNAV_OUT") {
        config.io.out_dir = PathBuf::from(dir);
    }
    Ok(config.resolve()?)
}

/// Writes the fully resolved configuration next to the run outputs.
fn persist_config(config: &RunConfig, dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.toml"), config.to_toml_string())?;
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let mut config = load_config(&args.common)?;
    if let Some(e) = args.episodes {
        config.train.total_episodes = e;
    }
    if let Some(w) = args.workers {
        config.train.workers = w;
    }
    if args.no_comm {
        config.train.comm_enabled = false;
    }
    if args.no_timestamps {
        config.train.timestamps = false;
    }
    let out_dir = config.io.out_dir.clone();
    persist_config(&config, &out_dir)?;
    let metrics = fs::File::create(out_dir.join("metrics.jsonl"))?;
    let handle = trainer::train_resumable(
        &config.env,
        &config.agent,
        &config.train,
        std::io::BufWriter::new(metrics),
        Some(&out_dir.join("checkpoints")),
        args.resume.as_deref(),
    )?;
    println!(
        "trained {} episodes ({} variant); outputs in {}",
        handle.episodes_run,
        config.agent.variant.name(),
        out_dir.display()
    );
    Ok(())
}

/// Rebuilds agent nets from the configuration and loads checkpoint
/// parameters into them.
fn nets_from_checkpoint(config: &RunConfig, dir: &Path) -> Result<Vec<AgentNet>, CliError> {
    let mut nets: Vec<AgentNet> = (0..config.env.agents)
        .map(|n| {
            let mut rng = seeding::stream_rng(config.train.seed, "init", n as u64);
            AgentNet::new(config.agent, &mut rng)
        })
        .collect();
    trainer::load_checkpoint_params(dir, &mut nets)
        .map_err(|e| CliError::Config(format!("checkpoint {}: {e}", dir.display())))?;
    Ok(nets)
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let mut config = load_config(&args.common)?;
    if let Some(e) = args.episodes {
        config.eval.episodes = e;
    }
    let nets = nets_from_checkpoint(&config, &args.checkpoint)?;
    let (report, traces) = evalharness::evaluate_traced(
        &nets,
        &config.env,
        config.eval.episodes,
        args.alpha,
        args.beta,
        !args.no_comm,
        config.eval.seed,
    )?;
    if let Some(path) = &args.traces {
        let mut file = fs::File::create(path)?;
        for trace in &traces {
            file.write_all(trace.to_jsonl().as_bytes())?;
        }
    }
    let out_dir = config.io.out_dir.clone();
    fs::create_dir_all(&out_dir)?;
    let mut lines = String::new();
    for r in &report.records {
        lines.push_str(&serde_json::to_string(r).expect("record serializes"));
        lines.push('\n');
    }
    fs::write(out_dir.join("eval.jsonl"), lines)?;
    println!("{}", serde_json::to_string(&report.summary).expect("summary serializes"));
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<(), CliError> {
    let mut config = load_config(&args.common)?;
    if let Some(e) = args.episodes {
        config.eval.episodes = e;
    }
    let param = match args.param.as_str() {
        "alpha" => SweepParam::Alpha,
        "beta" => SweepParam::Beta,
        other => return Err(CliError::Config(format!("unknown sweep parameter `{other}`"))),
    };
    let values: Vec<f64> = match &args.values {
        Some(text) => text
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| CliError::Config(format!("bad sweep value `{v}`")))
            })
            .collect::<Result<_, _>>()?,
        None => match param {
            SweepParam::Alpha => config.eval.alphas.clone(),
            SweepParam::Beta => config.eval.betas.clone(),
        },
    };
    let nets = nets_from_checkpoint(&config, &args.checkpoint)?;
    let rows = evalharness::sweep(
        &nets,
        &config.env,
        param,
        &values,
        config.eval.episodes,
        config.eval.seed,
    )?;
    let (header, data) = evalharness::sweep_table(&rows);
    let table = tsv_table(&header, &data);
    let out_dir = config.io.out_dir.clone();
    fs::create_dir_all(&out_dir)?;
    let name = format!("sweep-{}.tsv", args.param);
    fs::write(out_dir.join(&name), &table)?;
    print!("{table}");
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<(), CliError> {
    let mut config = load_config(&args.common)?;
    if let Some(e) = args.episodes {
        config.train.total_episodes = e;
    }
    if let Some(w) = args.workers {
        config.train.workers = w;
    }
    if args.no_timestamps {
        config.train.timestamps = false;
    }
    let out_dir = config.io.out_dir.clone();
    persist_config(&config, &out_dir)?;
    let mut rows = Vec::new();
    for (arm, comm) in [("comm", true), ("no-comm", false)] {
        let mut train_config = config.train;
        train_config.comm_enabled = comm;
        let arm_dir = out_dir.join(arm);
        fs::create_dir_all(&arm_dir)?;
        let metrics = fs::File::create(arm_dir.join("metrics.jsonl"))?;
        let handle = trainer::train(
            &config.env,
            &config.agent,
            &train_config,
            std::io::BufWriter::new(metrics),
            Some(&arm_dir.join("checkpoints")),
        )?;
        let mut nets = nets_from_checkpoint(&config, &arm_dir.join("checkpoints/final"))?;
        for (net, store) in nets.iter_mut().zip(&handle.stores) {
            net.store = store.clone();
        }
        let summary = evalharness::evaluate_nets(
            &nets,
            &config.env,
            config.eval.episodes,
            0.0,
            0.0,
            comm,
            config.eval.seed,
        )?;
        println!(
            "{arm}: mean total reward {:.3}, timeout rate {:.3}",
            summary.mean_total_reward, summary.timeout_rate
        );
        let mut row = vec![if comm { 1.0 } else { 0.0 }];
        row.extend(&summary.mean_reward_per_agent);
        row.push(summary.mean_total_reward);
        row.push(summary.timeout_rate);
        row.push(summary.mean_length);
        rows.push(row);
    }
    let mut header = vec!["comm_enabled"];
    let agents = config.env.agents;
    const AGENT_COLS: [&str; 8] = [
        "reward0", "reward1", "reward2", "reward3", "reward4", "reward5", "reward6", "reward7",
    ];
    header.extend(AGENT_COLS.iter().take(agents));
    header.extend(["total_reward", "timeout_rate", "mean_length"]);
    fs::write(out_dir.join("ablation.tsv"), tsv_table(&header, &rows))?;
    Ok(())
}

fn cmd_plot(args: PlotArgs) -> Result<(), CliError> {
    let text = fs::read_to_string(&args.metrics)?;
    let records = parse_metrics(&text).map_err(|e| CliError::Runtime(e.to_string()))?;
    let (header, rows): (Vec<String>, Vec<Vec<f64>>) = match args.kind.as_str() {
        "episode" => {
            let rows: Vec<(u64, Vec<f64>, usize, Option<f64>)> = records
                .iter()
                .filter_map(|r| match r {
                    MetricRecord::Episode { episode, reward, length, tree_size, .. } => {
                        Some((*episode, reward.clone(), *length, *tree_size))
                    }
                    _ => None,
                })
                .collect();
            let agents = rows.first().map(|r| r.1.len()).unwrap_or(0);
            let mut header: Vec<String> = vec!["episode".into()];
            header.extend((0..agents).map(|i| format!("reward{i}")));
            header.push("length".into());
            header.push("tree_size".into());
            let data: Vec<Vec<f64>> = rows
                .iter()
                .map(|(e, rw, len, ts)| {
                    let mut row = vec![*e as f64];
                    row.extend(rw);
                    row.push(*len as f64);
                    row.push(ts.unwrap_or(f64::NAN));
                    row
                })
                .collect();
            (header, data)
        }
        "eval" => {
            let rows: Vec<(u64, Vec<f64>, f64, f64, f64, Option<f64>)> = records
                .iter()
                .filter_map(|r| match r {
                    MetricRecord::Eval {
                        episode,
                        reward,
                        total_reward,
                        timeout_rate,
                        mean_length,
                        mean_tree_size,
                        ..
                    } => Some((
                        *episode,
                        reward.clone(),
                        *total_reward,
                        *timeout_rate,
                        *mean_length,
                        *mean_tree_size,
                    )),
                    _ => None,
                })
                .collect();
            let agents = rows.first().map(|r| r.1.len()).unwrap_or(0);
            let mut header: Vec<String> = vec!["episode".into()];
            header.extend((0..agents).map(|i| format!("reward{i}")));
            header.extend(
                ["total_reward", "timeout_rate", "mean_length", "mean_tree_size"]
                    .map(String::from),
            );
            let data: Vec<Vec<f64>> = rows
                .iter()
                .map(|(e, rw, total, to, len, ts)| {
                    let mut row = vec![*e as f64];
                    row.extend(rw);
                    row.extend([*total, *to, *len, ts.unwrap_or(f64::NAN)]);
                    row
                })
                .collect();
            (header, data)
        }
        other => return Err(CliError::Config(format!("unknown record kind `{other}`"))),
    };

    // Smooth every column except the episode index, appending *_sm columns.
    let mut full_header: Vec<String> = header.clone();
    let mut full_rows = rows.clone();
    if args.window > 1 && !rows.is_empty() {
        for c in 1..header.len() {
            full_header.push(format!("{}_sm", header[c]));
            let series: Vec<f64> = rows.iter().map(|r| r[c]).collect();
            let smoothed = evalharness::smooth(&series, args.window)?;
            for (row, v) in full_rows.iter_mut().zip(smoothed) {
                row.push(v);
            }
        }
    }
    let header_refs: Vec<&str> = full_header.iter().map(|s| s.as_str()).collect();
    let table = tsv_table(&header_refs, &full_rows);
    match &args.out {
        Some(path) => fs::write(path, table)?,
        None => print!("{table}"),
    }
    Ok(())
}

fn cmd_selftest() -> Result<(), CliError> {
    use quadnav_core::abstractor;
    use quadnav_core::grid::{CellState, Observation};
    use quadnav_core::neural::{self, Tape};
    use quadnav_core::quadtree::{decompose_full, trim, MergeMask};
    use rand::Rng;

    let mut failures = 0usize;
    let mut check = |name: &str, ok: bool| {
        println!("selftest {name}: {}", if ok { "ok" } else { "FAILED" });
        if !ok {
            failures += 1;
        }
    };
    let mut rng = seeding::stream_rng(2024, "selftest", 0);

    let random_obs = |rng: &mut rand_chacha::ChaCha8Rng, side: usize| {
        let cells: Vec<CellState> = (0..side * side)
            .map(|_| match rng.random_range(0..4) {
                0 => CellState::Occupied,
                1 => CellState::Unoccupied,
                2 => CellState::Destination,
                _ => CellState::Unknown,
            })
            .collect();
        Observation::new(side, cells, (0, 0))
    };

    // Quadtree round trip.
    let mut ok = true;
    for _ in 0..200 {
        let obs = random_obs(&mut rng, 8);
        let painted = decompose_full(&obs).unwrap().reconstruct();
        for r in 0..8 {
            for c in 0..8 {
                let expect: quadnav_core::quadtree::NodeState = obs.cell(r, c).into();
                ok &= painted[r * 8 + c] == expect;
            }
        }
    }
    check("quadtree round-trip", ok);

    // Trim validity and size monotonicity.
    let mut ok = true;
    for _ in 0..200 {
        let obs = random_obs(&mut rng, 8);
        let tree = decompose_full(&obs).unwrap();
        let mask = MergeMask((0..21).map(|_| rng.random::<bool>()).collect());
        let trimmed = trim(&tree, &mask).unwrap();
        ok &= trimmed.check_invariants().is_ok();
        ok &= trimmed.tree_size() <= tree.tree_size() + 1e-12;
        let expect = (2.0 * (trimmed.node_count() as f64 - 1.0)).sqrt();
        ok &= (trimmed.tree_size() - expect).abs() < 1e-12;
    }
    check("trim validity", ok);

    // Straight-through Gumbel-softmax statistics.
    let mut ok = true;
    let mut counts = [0usize; 2];
    let draws = 20_000;
    for _ in 0..draws {
        let mut tape = Tape::new();
        let logits = tape.input(1, 2, vec![0.3f64.ln(), 0.7f64.ln()]);
        let sample = neural::gumbel_softmax_st(&mut tape, logits, 1.0, &mut rng).unwrap();
        let hard = tape.values(sample.hard);
        ok &= hard.iter().filter(|&&v| v == 1.0).count() == 1;
        counts[sample.selected] += 1;
    }
    let p0 = counts[0] as f64 / draws as f64;
    ok &= (p0 - 0.3).abs() < 0.02;
    check("st-gumbel statistics", ok);

    // Penalty consistency at hard probabilities.
    let mut ok = true;
    for _ in 0..200 {
        let obs = random_obs(&mut rng, 8);
        let tree = decompose_full(&obs).unwrap();
        let mask = MergeMask((0..21).map(|_| rng.random::<bool>()).collect());
        let probs: Vec<f64> = mask.0.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        let soft = abstractor::soft_tree_size(&tree, &probs).unwrap();
        let hard = trim(&tree, &mask).unwrap().tree_size();
        ok &= (soft - hard).abs() <= 1e-5;
    }
    check("penalty consistency", ok);

    // Gradient checks on each differentiable block.
    check("gradient check: mlp", selftest_mlp_grad(&mut rng));
    check("gradient check: gru (bptt)", selftest_gru_grad(&mut rng));
    check("gradient check: episode loss", selftest_episode_grad());

    if failures == 0 {
        println!("selftest: all suites passed");
        Ok(())
    } else {
        Err(CliError::Runtime(format!("{failures} selftest suites failed")))
    }
}

fn selftest_mlp_grad(rng: &mut rand_chacha::ChaCha8Rng) -> bool {
    use quadnav_core::neural::{
        grad_check, mlp_forward, Activation, MlpParams, ParamStore, Tape,
    };
    use rand::Rng;
    let mut store = ParamStore::new();
    let mlp = MlpParams::new(&mut store, rng, "mlp", &[3, 6, 2], Activation::Tanh);
    let input: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let run = |store: &ParamStore| -> (f64, Vec<f64>) {
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape);
        let x = tape.input(1, 3, input.clone());
        let y = mlp_forward(&mlp, &binding, &mut tape, x).unwrap();
        let sq = tape.sqr(y);
        let loss = tape.sum(sq);
        tape.backward(loss);
        (tape.scalar(loss), binding.gradients_flat(&tape))
    };
    let (_, analytic) = run(&store);
    let theta = store.flatten();
    let err = grad_check(
        |t| {
            let mut probe = store.clone();
            probe.set_from_flat(t);
            run(&probe).0
        },
        &theta,
        &analytic,
        1e-5,
    );
    err < 1e-4
}

fn selftest_gru_grad(rng: &mut rand_chacha::ChaCha8Rng) -> bool {
    use quadnav_core::neural::{grad_check, gru_step, GruParams, ParamStore, Tape};
    use rand::Rng;
    let mut store = ParamStore::new();
    let gru = GruParams::new(&mut store, rng, "gru", 2, 3);
    let inputs: Vec<Vec<f64>> =
        (0..5).map(|_| (0..2).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let run = |store: &ParamStore| -> (f64, Vec<f64>) {
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape);
        let mut h = tape.input(1, 3, vec![0.0; 3]);
        for x in &inputs {
            let xid = tape.input(1, 2, x.clone());
            h = gru_step(&gru, &binding, &mut tape, xid, h).unwrap();
        }
        let sq = tape.sqr(h);
        let loss = tape.sum(sq);
        tape.backward(loss);
        (tape.scalar(loss), binding.gradients_flat(&tape))
    };
    let (_, analytic) = run(&store);
    let theta = store.flatten();
    let err = grad_check(
        |t| {
            let mut probe = store.clone();
            probe.set_from_flat(t);
            run(&probe).0
        },
        &theta,
        &analytic,
        1e-5,
    );
    err < 1e-4
}

fn selftest_episode_grad() -> bool {
    use quadnav_core::agent::{act, AgentConfig, Decide};
    use quadnav_core::grid::{self, Action, EnvConfig, Symbol};
    use quadnav_core::neural::{grad_check_sampled, ParamStore, Tape};
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    let env = EnvConfig {
        grid_side: 7,
        fov_side: 4,
        agents: 1,
        obstacle_count: 4,
        obstacle_density: None,
        max_steps: 8,
        spawn_rule: SpawnRule::Any,
    };
    let agent_config = AgentConfig {
        variant: EncoderVariant::Proposed,
        fov_side: 4,
        grid_side: 7,
        agents: 1,
        vocab: 4,
        gin_hidden: 4,
        gin_iterations: 1,
        gru_hidden: 6,
        embed_dim: 3,
        combiner_hidden: 6,
        tau: 1.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let net = AgentNet::new(agent_config, &mut rng);
    let state0 = grid::reset(&env, 5).unwrap();

    // Record a short script.
    let mut scripts = Vec::new();
    {
        let mut tape = Tape::new();
        let binding = net.store.bind(&mut tape);
        let mut h = tape.input(1, 6, net.initial_hidden());
        let mut state = state0.clone();
        let mut rng2 = ChaCha8Rng::seed_from_u64(32);
        for _ in 0..2 {
            let obs = grid::observe(&state, 0).unwrap();
            let out = act(
                &net,
                &binding,
                &mut tape,
                &obs,
                state.agent_pos[0],
                &[Symbol::NULL],
                h,
                Decide::Sample(&mut rng2),
            )
            .unwrap();
            h = out.hidden_node;
            let (next, _) = grid::step(&state, &[out.action]).unwrap();
            state = next;
            scripts.push((out.script.clone(), out.action));
        }
    }
    let run = |store: &ParamStore| -> (f64, Vec<f64>) {
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape);
        let mut h = tape.input(1, 6, net.initial_hidden());
        let mut state = state0.clone();
        let mut terms = Vec::new();
        for (script, action) in &scripts {
            let obs = grid::observe(&state, 0).unwrap();
            let out = act(
                &net,
                &binding,
                &mut tape,
                &obs,
                state.agent_pos[0],
                &[Symbol::NULL],
                h,
                Decide::<ChaCha8Rng>::Script(script, true),
            )
            .unwrap();
            h = out.hidden_node;
            let logp = tape.add(out.logp_action_node, out.logp_symbol_node);
            let policy = tape.scale(logp, -0.5);
            let neg_v = tape.scale(out.value_node, -1.0);
            let delta = tape.add_const(neg_v, 0.8);
            let sq = tape.sqr(delta);
            let vterm = tape.scale(sq, 0.5);
            let t1 = tape.add(policy, vterm);
            let t2 = tape.add(t1, out.penalty_node.unwrap());
            terms.push(t2);
            let step: [Action; 1] = [*action];
            let (next, _) = grid::step(&state, &step).unwrap();
            state = next;
        }
        let stacked = tape.stack_scalars(&terms);
        let loss = tape.sum(stacked);
        tape.backward(loss);
        (tape.scalar(loss), binding.gradients_flat(&tape))
    };
    let (_, analytic) = run(&net.store);
    let theta = net.store.flatten();
    let err = grad_check_sampled(
        |t| {
            let mut probe = net.store.clone();
            probe.set_from_flat(t);
            run(&probe).0
        },
        &theta,
        &analytic,
        1e-5,
        400,
    );
    err < 1e-4
}
