//! Command surface of the `cgdp` binary.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::diffusion::{make_schedule, NoiseNet};
use crate::discovery::discover_masks_detailed;
use crate::dynamics::CausalDynamics;
use crate::envs::Env;
use crate::error::{Error, Result};
use crate::numerics::{seeded_rng, Matrix};
use crate::par::map_indexed;
use crate::rl::{evaluate_policy, fmt_sig, train, Artifacts, TrainerConfig, TrainingTrace};
use crate::scm::{read_dataset, write_dataset, Dataset, Transition};
use crate::verify::{
    check_lemma1, check_prop1, check_prop2, check_theorem1, lemma1_instance, prop2_instance, theorem1_guidance,
    theorem1_parts, StabilityInstance, Theorem1Setup,
};
use clap::{Parser, Subcommand, ValueEnum};
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::PathBuf;

#[derive(Debug, Parser)]
#[command(
    name = "cgdp",
    about = "Causality-guided diffusion policies on synthetic environments"
)]
pub struct Cli {
    /// Config file (`key = value` lines).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Switches causal guidance on or off.
    #[arg(long, global = true, value_enum)]
    pub guidance: Option<Toggle>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Toggle {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Check {
    Lemma1,
    Prop1,
    Prop2,
    Theorem1,
    All,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Writes an offline dataset from the behavior policy.
    GenData,
    /// Runs causal discovery on the dataset.
    Discover,
    /// Offline then online training; writes checkpoints and metrics.
    Train,
    /// Evaluates saved checkpoints.
    Eval,
    /// NOTEARS masks vs corrupted masks vs no guidance.
    Ablate,
    /// Runs the theory checks.
    Verify {
        #[arg(value_enum)]
        which: Check,
    },
    /// Prints the effective config.
    DumpConfig,
}

/// Parses arguments, runs the command and maps the outcome to an exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let cfg = match effective_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    match execute(&cli.command, &cfg) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if cli.guidance == Some(Toggle::Off) {
        cfg.trainer = cfg.trainer.unguided();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Runs one command; `Ok(false)` means a check failed.
pub fn execute(command: &Command, cfg: &RunConfig) -> Result<bool> {
    std::fs::create_dir_all(&cfg.out)?;
    match command {
        Command::GenData => cmd_gen_data(cfg).map(|_| true),
        Command::Discover => cmd_discover(cfg).map(|_| true),
        Command::Train => cmd_train(cfg).map(|_| true),
        Command::Eval => cmd_eval(cfg).map(|_| true),
        Command::Ablate => cmd_ablate(cfg).map(|_| true),
        Command::Verify { which } => cmd_verify(cfg, *which),
        Command::DumpConfig => {
            print!("{}", cfg.dump());
            Ok(true)
        }
    }
}

fn with_context(e: Error, what: &str) -> Error {
    match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{what}: {io}"))),
        other => other,
    }
}

pub fn cmd_gen_data(cfg: &RunConfig) -> Result<PathBuf> {
    let env = Env::new(cfg.env.clone())?;
    let transitions = env.behavior_dataset(cfg.data.episodes, cfg.data.behavior_noise, &mut seeded_rng(cfg.seed))?;
    let count = transitions.len();
    let data = Dataset::new(env.state_dim(), env.action_dim(), transitions)?;
    let path = cfg.dataset_path();
    write_dataset(&path, &data).map_err(|e| with_context(e, &path.display().to_string()))?;
    println!("wrote {count} transitions to {}", path.display());
    Ok(path)
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let path = cfg.dataset_path();
    read_dataset(&path).map_err(|e| with_context(e, &format!("dataset {}", path.display())))
}

pub fn cmd_discover(cfg: &RunConfig) -> Result<PathBuf> {
    let data = load_dataset(cfg)?;
    let found = discover_masks_detailed(&data.transitions, &cfg.trainer.notears, None)?;
    let path = cfg.out.join("discovery.txt");
    std::fs::write(&path, found.to_text())?;
    println!(
        "{} edges, h(W) = {}, written to {}",
        found.result.edges().len(),
        fmt_sig(found.result.acyclicity),
        path.display()
    );
    Ok(path)
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainingTrace> {
    let data = load_dataset(cfg)?;
    let env = Env::new(cfg.env.clone())?;
    let (art, trace) = train(&env, &data.transitions, &cfg.trainer_for_seed(cfg.seed))?;
    std::fs::write(cfg.out.join("metrics.txt"), trace.to_text())?;
    for (name, ck) in art.checkpoints() {
        ck.save(&cfg.out.join(format!("{name}.ckpt")))?;
    }
    std::fs::write(cfg.out.join("config.txt"), cfg.dump())?;
    let last = trace.episodes.last().map_or(0.0, |e| e.ret);
    println!(
        "trained {} episodes, last return {}",
        trace.episodes.len(),
        fmt_sig(last)
    );
    Ok(trace)
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<f64> {
    let load = |name: &str| {
        let p = cfg.out.join(format!("{name}.ckpt"));
        Checkpoint::load(&p).map_err(|e| with_context(e, &format!("checkpoint {}", p.display())))
    };
    let net = NoiseNet::from_checkpoint(&load("policy")?)?;
    let dynamics = CausalDynamics::from_checkpoint(&load("dynamics")?)?;
    let masks = dynamics.masks().clone();
    let art = Artifacts {
        net,
        dynamics,
        masks,
        adjacency: Matrix::zeros(0, 0),
    };
    let env = Env::new(cfg.env.clone())?;
    let mut rng = seeded_rng(cfg.seed ^ 0xe7a1);
    let mean = evaluate_policy(&env, &art, &cfg.trainer, cfg.eval_episodes, &mut rng)?;
    std::fs::write(
        cfg.out.join("eval.txt"),
        format!("episodes {}\nmean_return {}\n", cfg.eval_episodes, fmt_sig(mean)),
    )?;
    println!("mean return over {} episodes: {}", cfg.eval_episodes, fmt_sig(mean));
    Ok(mean)
}

/// Mean return over the trailing `window` episodes ending at `end` (exclusive).
pub fn window_mean(returns: &[f64], end: usize, window: usize) -> f64 {
    let start = end.saturating_sub(window);
    let xs = &returns[start..end];
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

pub const RETURN_WINDOW: usize = 50;

/// Final return of a run: the mean of its last 50 episodes.
pub fn final_return(trace: &TrainingTrace) -> f64 {
    let r = trace.returns();
    window_mean(&r, r.len(), RETURN_WINDOW)
}

pub const ARMS: [&str; 3] = ["notears", "corrupted", "unguided"];

/// Trainer settings of one ablation arm.
pub fn arm_config(base: &TrainerConfig, arm: usize, flip_prob: f64, seed: u64) -> TrainerConfig {
    let cfg = TrainerConfig { seed, ..base.clone() };
    match arm {
        0 => TrainerConfig {
            mask_flip_prob: 0.0,
            ..cfg
        },
        1 => TrainerConfig {
            mask_flip_prob: flip_prob,
            ..cfg
        },
        _ => TrainerConfig {
            mask_flip_prob: 0.0,
            ..cfg.unguided()
        },
    }
}

/// Traces indexed `[arm][seed]`; all arms share seeds and dataset.
pub fn run_ablation(
    env: &Env,
    data: &[Transition],
    base: &TrainerConfig,
    flip_prob: f64,
    seeds: &[u64],
) -> Result<Vec<Vec<TrainingTrace>>> {
    let jobs: Vec<(usize, u64)> = (0..ARMS.len())
        .flat_map(|a| seeds.iter().map(move |&s| (a, s)))
        .collect();
    let results = map_indexed(&jobs, |_, &(arm, seed)| {
        train(env, data, &arm_config(base, arm, flip_prob, seed)).map(|r| r.1)
    });
    let mut out: Vec<Vec<TrainingTrace>> = vec![Vec::new(); ARMS.len()];
    for ((arm, _), r) in jobs.iter().zip(results) {
        out[*arm].push(r?);
    }
    Ok(out)
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn cmd_ablate(cfg: &RunConfig) -> Result<PathBuf> {
    let data = load_dataset(cfg)?;
    let env = Env::new(cfg.env.clone())?;
    let seeds: Vec<u64> = (0..cfg.ablate.seeds as u64).map(|i| cfg.seed + i).collect();
    let traces = run_ablation(&env, &data.transitions, &cfg.trainer, cfg.ablate.flip_prob, &seeds)?;
    let mut csv = String::from("arm,mean,std\n");
    for (arm, runs) in traces.iter().enumerate() {
        for (trace, seed) in runs.iter().zip(&seeds) {
            std::fs::write(
                cfg.out.join(format!("ablate_{}_seed{seed}.txt", ARMS[arm])),
                trace.to_text(),
            )?;
        }
        let finals: Vec<f64> = runs.iter().map(final_return).collect();
        let (m, s) = mean_std(&finals);
        writeln!(csv, "{},{},{}", ARMS[arm], fmt_sig(m), fmt_sig(s)).unwrap();
    }
    let path = cfg.out.join("ablate.csv");
    std::fs::write(&path, &csv)?;
    print!("{csv}");
    Ok(path)
}

/// One verification outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
    pub csv: String,
}

impl CheckOutcome {
    pub fn summary_line(&self) -> String {
        format!(
            "{} {} {}",
            self.name,
            if self.pass { "PASS" } else { "FAIL" },
            self.detail
        )
    }
}

pub fn verify_lemma1(cfg: &RunConfig) -> Result<CheckOutcome> {
    let spec = lemma1_instance(cfg.seed)?;
    let schedule = make_schedule(cfg.verify.lemma1_steps, 1e-4, 0.02)?;
    let rep = check_lemma1(
        &spec,
        &schedule,
        cfg.verify.lemma1_samples,
        true,
        &mut seeded_rng(cfg.seed),
    )?;
    Ok(CheckOutcome {
        name: "lemma1",
        pass: rep.pass,
        detail: rep.summary(),
        csv: rep.to_csv(),
    })
}

pub fn verify_prop1(cfg: &RunConfig) -> Result<CheckOutcome> {
    let n = cfg.verify.prop1_seeds as u64;
    let instances = (0..n)
        .map(|i| StabilityInstance::random_linear(cfg.seed + i))
        .collect::<Result<Vec<_>>>()?;
    let steps = cfg.verify.prop1_steps;
    let linear = check_prop1(&instances, 0.5, &[cfg.seed], steps)?;
    let seeds: Vec<u64> = (0..n).map(|i| cfg.seed + i).collect();
    let stiff = check_prop1(&[StabilityInstance::stiff()?], 0.5, &seeds, steps)?;
    let at_bound = linear
        .rows
        .iter()
        .chain(&stiff.rows)
        .filter(|r| r.multiple <= 1.0 && r.diverged)
        .count();
    let pass = linear.pass && stiff.pass && stiff.divergences_above >= 1;
    let mut csv = linear.to_csv();
    for line in stiff.to_csv().lines().skip(1) {
        // Stiff rows are tagged with instance id `stiff`.
        let rest = line.split_once(',').map_or(line, |x| x.1);
        writeln!(csv, "stiff,{rest}").unwrap();
    }
    Ok(CheckOutcome {
        name: "prop1",
        pass,
        detail: format!(
            "divergences_at_or_below_bound={at_bound} stiff_divergences_at_50x={}",
            stiff.divergences_above
        ),
        csv,
    })
}

pub fn verify_prop2(cfg: &RunConfig) -> Result<CheckOutcome> {
    let mut csv = String::from("seed,cosine,estimate_norm,analytic_norm\n");
    let mut worst = f64::INFINITY;
    let mut pass = true;
    for i in 0..cfg.verify.prop2_seeds as u64 {
        let seed = cfg.seed + i;
        let (dyn_, s, a) = prop2_instance(seed)?;
        let rep = check_prop2(&dyn_, &s, &a, cfg.verify.prop2_samples, &mut seeded_rng(seed ^ 0x9e37))?;
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        writeln!(
            csv,
            "{seed},{},{},{}",
            fmt_sig(rep.cosine),
            fmt_sig(norm(&rep.estimate)),
            fmt_sig(norm(&rep.analytic))
        )
        .unwrap();
        worst = worst.min(rep.cosine);
        pass &= rep.pass;
    }
    Ok(CheckOutcome {
        name: "prop2",
        pass,
        detail: format!("min_cosine={worst:.4}"),
        csv,
    })
}

pub fn verify_theorem1(cfg: &RunConfig) -> Result<CheckOutcome> {
    let v = &cfg.verify;
    let (env, prior, dynamics, schedule) = theorem1_parts(cfg.env.seed, v.theorem1_horizon)?;
    let seeds: Vec<u64> = (0..v.theorem1_seeds as u64).map(|i| cfg.seed + i).collect();
    let mut csv = String::from("lambda,seed,kl,bound,gap,j_guided,j_base,holds\n");
    let mut detail = Vec::new();
    let mut pass = true;
    for &lambda in &v.theorem1_lambdas {
        let setup = Theorem1Setup {
            env: &env,
            prior: &prior,
            dynamics: &dynamics,
            schedule: &schedule,
            guidance: theorem1_guidance(lambda),
            discount: cfg.trainer.discount,
            rollouts: v.theorem1_rollouts,
            stability_delta: Some(0.5),
        };
        let rep = check_theorem1(&setup, &seeds)?;
        for line in rep.to_csv().lines().skip(1) {
            writeln!(csv, "{lambda:?},{line}").unwrap();
        }
        let frac = rep.hold_fraction();
        pass &= frac >= 0.95;
        detail.push(format!("holds[{lambda}]={frac:.2}"));
    }
    Ok(CheckOutcome {
        name: "theorem1",
        pass,
        detail: detail.join(" "),
        csv,
    })
}

pub fn cmd_verify(cfg: &RunConfig, which: Check) -> Result<bool> {
    let selected: Vec<Check> = match which {
        Check::All => vec![Check::Lemma1, Check::Prop1, Check::Prop2, Check::Theorem1],
        one => vec![one],
    };
    let mut summary = String::new();
    let mut all = true;
    for check in selected {
        let outcome = match check {
            Check::Lemma1 => verify_lemma1(cfg)?,
            Check::Prop1 => verify_prop1(cfg)?,
            Check::Prop2 => verify_prop2(cfg)?,
            Check::Theorem1 => verify_theorem1(cfg)?,
            Check::All => unreachable!(),
        };
        std::fs::write(cfg.out.join(format!("{}.csv", outcome.name)), &outcome.csv)?;
        let line = outcome.summary_line();
        println!("{line}");
        writeln!(summary, "{line}").unwrap();
        all &= outcome.pass;
    }
    std::fs::write(cfg.out.join("summary.txt"), summary)?;
    Ok(all)
}

/// Reads `CGDP_THREADS` and caps the worker pool.
pub fn init_threads_from_env() {
    if let Some(n) = std::env::var("CGDP_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        crate::par::init_thread_pool(n);
    }
}
