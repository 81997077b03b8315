use std::collections::{BTreeMap, BTreeSet};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use anyhow::{anyhow, bail};
use clap::{Parser, Subcommand, ValueEnum};
use limo::bench::{self, AffinityParams, AffinityPredictors, ReportMolecule, TaskReport};
use limo::checkpoint::Checkpoint;
use limo::config::{split_config_flags, RunConfig};
use limo::dataset::{read_corpus, synthetic_corpus, write_corpus};
use limo::optimize::{multi_start, Goal, Objective};
use limo::oracles::{
    CachedOracle, Direction, ExternalConfig, ExternalOracle, OracleCache, PropertyOracle, Surrogate,
};
use limo::predictor::{gen_training_set, r_squared, train_predictor, Predictor};
use limo::refine::finetune;
use limo::vae::{sample_latents, Vae};
use limo::workspace::{Latest, RunId, WorkLock};
use limo_chem::selfies::{decode, encode};
use limo_chem::synth::{random_molecule, SynthParams};
use limo_chem::{canonical_key, to_smiles, MolGraph, SelfiesString};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Latent-space molecule optimization.
///
/// Any config key can be given as a flag, e.g. `--optimize.steps 500`, or
/// through the environment as `LIMO_OPTIMIZE__STEPS=500`. Flags win over
/// the environment, which wins over the config file.
#[derive(Parser, Debug)]
#[command(name = "limo", version)]
struct Cli {
    /// TOML config file; built-in defaults when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the bundled synthetic SELFIES corpus.
    SynthCorpus,
    /// Train the VAE on the corpus.
    TrainVae,
    /// Train property predictors on top of the VAE decoder.
    TrainPredictor {
        /// Train only this property instead of `predictor.properties`.
        #[arg(long)]
        property: Option<String>,
    },
    /// Decode random latent vectors.
    Sample {
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Multi-start reverse optimization of `optimize.property`.
    Optimize,
    /// Keep molecules passing the QED′/SA′/ring filter.
    Filter {
        /// SELFIES file; defaults to the latest `optimize` output.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Greedy heteroatom substitution against the affinity oracle.
    Finetune {
        /// SELFIES file; defaults to the latest `filter` output.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Run a benchmark task and write its reports.
    Bench { task: Task },
    /// Score a fixed panel through the external oracle and check the protocol.
    OracleCheck {
        /// Oracle command, overriding `oracle.command`.
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        command: Vec<String>,
    },
    /// Print the effective configuration.
    ShowConfig,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Task {
    RandomGeneration,
    Maximize,
    TargetRange,
    Similarity,
    Substructure,
    Affinity,
}

impl Task {
    fn label(self) -> &'static str {
        match self {
            Task::RandomGeneration => "random-generation",
            Task::Maximize => "maximize",
            Task::TargetRange => "target-range",
            Task::Similarity => "similarity",
            Task::Substructure => "substructure",
            Task::Affinity => "affinity",
        }
    }
}

struct Ctx {
    cfg: RunConfig,
    work: PathBuf,
    latest: Latest,
}

impl Ctx {
    fn output(&self, stem: &str, id: &str, ext: &str) -> PathBuf {
        self.work.join(format!("{stem}-{id}.{ext}"))
    }

    fn run_id(&self, command: &str) -> RunId {
        let mut id = RunId::new(command);
        id.field("config", &self.cfg.to_toml());
        id
    }

    fn corpus_path(&self) -> anyhow::Result<PathBuf> {
        if !self.cfg.paths.corpus.as_os_str().is_empty() {
            return Ok(self.cfg.paths.corpus.clone());
        }
        self.latest
            .get(&self.work, "corpus")
            .ok_or_else(|| anyhow!("corpus not found: set paths.corpus or run synth-corpus"))
    }

    fn corpus(&self) -> anyhow::Result<(PathBuf, Vec<SelfiesString>)> {
        let path = self.corpus_path()?;
        let alphabet = limo_chem::Alphabet::standard();
        let strings = read_corpus(&path, self.cfg.model.n, &alphabet)?;
        Ok((path, strings))
    }

    fn vae_path(&self) -> anyhow::Result<PathBuf> {
        if !self.cfg.paths.vae.as_os_str().is_empty() {
            return Ok(self.cfg.paths.vae.clone());
        }
        self.latest.get(&self.work, "vae").ok_or_else(|| {
            anyhow!(
                "checkpoint not found: no VAE in {} (run train-vae)",
                self.work.display()
            )
        })
    }

    fn vae(&self) -> anyhow::Result<(PathBuf, Vae)> {
        let path = self.vae_path()?;
        let vae = Vae::from_checkpoint(Checkpoint::load(&path)?)?;
        if vae.dims() != &self.cfg.model {
            warn!("VAE checkpoint dims differ from [model]; using the checkpoint's");
        }
        Ok((path, vae))
    }

    fn predictor(&self, property: &str) -> anyhow::Result<(PathBuf, Predictor)> {
        let path = self
            .latest
            .get(&self.work, &format!("predictor.{property}"))
            .ok_or_else(|| {
                anyhow!(
                    "checkpoint not found: no {property} predictor in {} (run train-predictor)",
                    self.work.display()
                )
            })?;
        let p = Predictor::from_checkpoint(Checkpoint::load(&path)?)?;
        Ok((path, p))
    }

    /// Name of the oracle standing in for binding affinity.
    fn affinity_name(&self) -> String {
        if self.cfg.oracle.affinity == "external" {
            self.cfg.oracle.name.clone()
        } else {
            Surrogate::MockAffinity.label().to_string()
        }
    }

    fn external(&self, command: Vec<String>) -> anyhow::Result<Box<dyn PropertyOracle>> {
        let o = &self.cfg.oracle;
        let config = ExternalConfig {
            name: o.name.clone(),
            command,
            direction: o.direction,
            timeout_secs: o.timeout_secs,
            in_flight: o.in_flight,
        };
        let ext = ExternalOracle::new(config)?;
        if o.cache {
            let cache = OracleCache::open(&self.work.join("oracle.cache"))?;
            Ok(Box::new(CachedOracle::new(ext, Arc::new(cache))))
        } else {
            Ok(Box::new(ext))
        }
    }

    fn oracle(&self, name: &str) -> anyhow::Result<Box<dyn PropertyOracle>> {
        if let Some(s) = Surrogate::from_name(name) {
            return Ok(Box::new(s));
        }
        if self.cfg.oracle.affinity == "external" && name == self.cfg.oracle.name {
            return self.external(self.cfg.oracle.command.clone());
        }
        bail!(
            "unknown oracle {name}: expected one of {} or the external oracle name",
            Surrogate::ALL.map(Surrogate::label).join(", ")
        )
    }

    fn record(&mut self, name: &str, path: &Path) -> anyhow::Result<()> {
        self.latest.record(&self.work, name, path)?;
        Ok(())
    }
}

fn goal_of(direction: Direction) -> Goal {
    match direction {
        Direction::Maximize => Goal::Maximize,
        Direction::Minimize => Goal::Minimize,
    }
}

fn write_strings(path: &Path, strings: &[SelfiesString]) -> anyhow::Result<()> {
    write_corpus(path, strings, &limo_chem::Alphabet::standard())?;
    Ok(())
}

fn graphs_of(strings: &[SelfiesString]) -> Vec<MolGraph> {
    let alphabet = limo_chem::Alphabet::standard();
    strings.iter().map(|s| decode(s, &alphabet)).collect()
}

fn synth_corpus(ctx: &mut Ctx) -> anyhow::Result<()> {
    let d = &ctx.cfg.data;
    let id = ctx.run_id("synth-corpus").finish();
    let strings = synthetic_corpus(
        d.synthetic_count,
        d.synthetic_seed,
        ctx.cfg.model.n,
        &limo_chem::Alphabet::standard(),
    );
    let path = ctx.output("corpus", &id, "selfies");
    write_strings(&path, &strings)?;
    ctx.record("corpus", &path)?;
    println!("wrote {} strings to {}", strings.len(), path.display());
    Ok(())
}

fn train_vae(ctx: &mut Ctx) -> anyhow::Result<()> {
    let (corpus_path, strings) = ctx.corpus()?;
    let id = ctx
        .run_id("train-vae")
        .input("corpus", &corpus_path)?
        .finish();
    let mut vae = Vae::new(ctx.cfg.model.clone(), ctx.cfg.train.seed)?;
    let log = vae.train(&strings, &ctx.cfg.train)?;
    let head = &strings[..strings.len().min(1000)];
    let accuracy = vae.reconstruction_accuracy(head)?;
    let path = ctx.output("vae", &id, "limo");
    vae.to_checkpoint().save(&path)?;
    let summary = serde_json::json!({
        "epoch_losses": log.epoch_losses,
        "reconstruction_accuracy": accuracy,
    });
    std::fs::write(
        ctx.output("vae", &id, "log.json"),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    ctx.record("vae", &path)?;
    println!(
        "wrote {} (symbol reconstruction {:.3})",
        path.display(),
        accuracy
    );
    Ok(())
}

fn train_predictors(ctx: &mut Ctx, only: Option<String>) -> anyhow::Result<()> {
    let (vae_path, vae) = ctx.vae()?;
    let properties = match only {
        Some(p) => vec![p],
        None => ctx.cfg.predictor.properties.clone(),
    };
    let p = ctx.cfg.predictor.clone();
    for property in properties {
        let oracle = ctx.oracle(&property)?;
        let id = ctx
            .run_id("train-predictor")
            .field("property", &property)
            .input("vae", &vae_path)?
            .finish();
        let data = gen_training_set(&vae, oracle.as_ref(), p.dataset_size, p.seed)?;
        let (train, heldout) = data.split(p.heldout_fraction, p.seed);
        let (predictor, losses) =
            train_predictor(&vae, &train, p.mode, oracle.name(), &p.train_config())?;
        let r2 = if heldout.len() >= 2 {
            r_squared(&predictor, &vae, &heldout).ok()
        } else {
            None
        };
        let path = ctx.output(&format!("predictor-{property}"), &id, "limo");
        predictor.to_checkpoint().save(&path)?;
        let summary = serde_json::json!({ "epoch_losses": losses, "heldout_r2": r2 });
        std::fs::write(
            ctx.output(&format!("predictor-{property}"), &id, "log.json"),
            serde_json::to_string_pretty(&summary)? + "\n",
        )?;
        ctx.record(&format!("predictor.{property}"), &path)?;
        match r2 {
            Some(r2) => println!("wrote {} (held-out r² {r2:.3})", path.display()),
            None => println!("wrote {}", path.display()),
        }
    }
    Ok(())
}

fn sample(ctx: &mut Ctx, count: usize, seed: u64) -> anyhow::Result<()> {
    let (vae_path, vae) = ctx.vae()?;
    let id = ctx
        .run_id("sample")
        .field("count", &count.to_string())
        .field("seed", &seed.to_string())
        .input("vae", &vae_path)?
        .finish();
    let mols = vae.molecules(&sample_latents(count, vae.dims().m, seed))?;
    let path = ctx.output("samples", &id, "tsv");
    let mut body = String::from("selfies\tsmiles\n");
    for (s, g) in &mols {
        body.push_str(&format!(
            "{}\t{}\n",
            s.to_text(vae.alphabet()),
            to_smiles(g)
        ));
    }
    std::fs::write(&path, body)?;
    ctx.record("samples", &path)?;
    println!("wrote {count} samples to {}", path.display());
    Ok(())
}

fn optimize(ctx: &mut Ctx) -> anyhow::Result<()> {
    let (vae_path, vae) = ctx.vae()?;
    let o = ctx.cfg.optimize.clone();
    let (pred_path, predictor) = ctx.predictor(&o.property)?;
    let oracle = ctx.oracle(&o.property)?;
    let id = ctx
        .run_id("optimize")
        .input("vae", &vae_path)?
        .input("predictor", &pred_path)?
        .finish();
    let obj = Objective::single(&predictor, goal_of(o.direction), o.steps, o.lr);
    let (candidates, _) = multi_start(&vae, &obj, None, o.restarts, o.seed)?;
    let graphs: Vec<MolGraph> = candidates.iter().map(|c| c.graph.clone()).collect();
    let scores = oracle.score_batch(&graphs)?;
    let mut report = TaskReport::new("optimize", serde_json::to_value(&o)?);
    report.run_id = Some(id.clone());
    for (c, s) in candidates.iter().zip(scores) {
        let mut map = BTreeMap::from([
            ("predicted".to_string(), c.predicted[0]),
            ("loss".to_string(), c.loss),
        ]);
        if let Ok(v) = s {
            map.insert(format!("oracle.{}", oracle.name()), v);
        }
        report.molecules.push(ReportMolecule::new(
            &c.graph,
            c.selfies.to_text(vae.alphabet()),
            map,
        ));
    }
    report
        .metrics
        .insert("candidates".into(), candidates.len() as f64);
    let path = ctx.output("optimized", &id, "selfies");
    let strings: Vec<SelfiesString> = candidates.into_iter().map(|c| c.selfies).collect();
    write_strings(&path, &strings)?;
    report.write_all(&ctx.work, &format!("optimize-{id}"))?;
    ctx.record("optimized", &path)?;
    println!("wrote {} candidates to {}", strings.len(), path.display());
    Ok(())
}

fn input_strings(
    ctx: &Ctx,
    input: Option<PathBuf>,
    latest: &str,
) -> anyhow::Result<(PathBuf, Vec<SelfiesString>)> {
    let path = match input {
        Some(p) => p,
        None => ctx.latest.get(&ctx.work, latest).ok_or_else(|| {
            anyhow!(
                "no {latest} molecules in {}; pass --input",
                ctx.work.display()
            )
        })?,
    };
    let strings = read_corpus(&path, ctx.cfg.model.n, &limo_chem::Alphabet::standard())?;
    Ok((path, strings))
}

fn run_filter(ctx: &mut Ctx, input: Option<PathBuf>) -> anyhow::Result<()> {
    let (input, strings) = input_strings(ctx, input, "optimized")?;
    let id = ctx.run_id("filter").input("input", &input)?.finish();
    let kept: Vec<SelfiesString> = strings
        .iter()
        .zip(graphs_of(&strings))
        .filter(|(_, g)| ctx.cfg.filter.admits(g))
        .map(|(s, _)| s.clone())
        .collect();
    let path = ctx.output("filtered", &id, "selfies");
    write_strings(&path, &kept)?;
    ctx.record("filtered", &path)?;
    println!(
        "kept {} of {} molecules in {}",
        kept.len(),
        strings.len(),
        path.display()
    );
    Ok(())
}

fn run_finetune(ctx: &mut Ctx, input: Option<PathBuf>) -> anyhow::Result<()> {
    let (input, strings) = input_strings(ctx, input, "filtered")?;
    let oracle = ctx.oracle(&ctx.affinity_name())?;
    let id = ctx.run_id("finetune").input("input", &input)?.finish();
    let alphabet = limo_chem::Alphabet::standard();
    let mut out = Vec::new();
    let mut report = TaskReport::new("finetune", serde_json::json!({ "oracle": oracle.name() }));
    report.run_id = Some(id.clone());
    for g in graphs_of(&strings) {
        let tuned = finetune(&g, oracle.as_ref())?;
        match encode(&tuned.graph, ctx.cfg.model.n, &alphabet) {
            Ok(s) => {
                let scores = BTreeMap::from([
                    ("initial".to_string(), tuned.initial_score),
                    ("final".to_string(), tuned.score),
                    ("sweeps".to_string(), tuned.sweeps as f64),
                ]);
                report.molecules.push(ReportMolecule::new(
                    &tuned.graph,
                    s.to_text(&alphabet),
                    scores,
                ));
                out.push(s);
            }
            Err(e) => warn!("dropping {}: {e}", to_smiles(&tuned.graph)),
        }
    }
    report.metrics.insert("count".into(), out.len() as f64);
    let path = ctx.output("finetuned", &id, "selfies");
    write_strings(&path, &out)?;
    report.write_all(&ctx.work, &format!("finetune-{id}"))?;
    ctx.record("finetuned", &path)?;
    println!("wrote {} molecules to {}", out.len(), path.display());
    Ok(())
}

fn run_bench(ctx: &mut Ctx, task: Task) -> anyhow::Result<()> {
    let (vae_path, vae) = ctx.vae()?;
    let mut id = ctx.run_id("bench");
    id.field("task", task.label()).input("vae", &vae_path)?;
    let cfg = ctx.cfg.clone();
    let o = &cfg.optimize;
    let b = &cfg.bench;
    let started = Instant::now();
    let predictor_for = |property: &str, id: &mut RunId| -> anyhow::Result<Predictor> {
        let (path, p) = ctx.predictor(property)?;
        id.input(&format!("predictor.{property}"), &path)?;
        Ok(p)
    };
    let mut report = match task {
        Task::RandomGeneration => {
            let (corpus_path, strings) = ctx.corpus()?;
            id.input("corpus", &corpus_path)?;
            let keys: BTreeSet<String> = graphs_of(&strings).iter().map(canonical_key).collect();
            let params = bench::RandomGenerationParams {
                count: b.random_count,
                seed: o.seed,
            };
            bench::task_random_generation(&vae, &params, &keys)?
        }
        Task::Maximize => {
            let predictor = predictor_for(&o.property, &mut id)?;
            let oracle = ctx.oracle(&o.property)?;
            let params = bench::MaximizeParams {
                restarts: o.restarts,
                steps: o.steps,
                lr: o.lr,
                seed: o.seed,
                top_k: b.top_k,
            };
            bench::task_maximize(&vae, &predictor, oracle.as_ref(), &params)?
        }
        Task::TargetRange => {
            let predictor = predictor_for(&b.target_property, &mut id)?;
            let oracle = ctx.oracle(&b.target_property)?;
            let params = bench::TargetRangeParams {
                lo: b.target_lo,
                hi: b.target_hi,
                restarts: o.restarts,
                steps: o.steps,
                lr: o.lr,
                seed: o.seed,
            };
            bench::task_target_range(&vae, &predictor, oracle.as_ref(), &params)?
        }
        Task::Similarity => {
            let predictor = predictor_for("plogp", &mut id)?;
            let oracle = ctx.oracle("plogp")?;
            let (corpus_path, strings) = ctx.corpus()?;
            id.input("corpus", &corpus_path)?;
            let starts = bench::lowest_scoring(&strings, oracle.as_ref(), b.similarity_starts)?;
            let params = bench::SimilarityParams {
                deltas: b.similarity_deltas.clone(),
                steps: o.steps,
                lr: o.lr,
            };
            bench::task_similarity(&vae, &predictor, oracle.as_ref(), &starts, &params)?
        }
        Task::Substructure => {
            let predictor = predictor_for(&b.substructure_property, &mut id)?;
            let oracle = ctx.oracle(&b.substructure_property)?;
            let (corpus_path, strings) = ctx.corpus()?;
            id.input("corpus", &corpus_path)?;
            let starts = bench::distinct_prefix(&strings, b.substructure_starts);
            let params = bench::SubstructureParams {
                positions: b.substructure_positions.clone(),
                goal: goal_of(o.direction),
                steps: o.steps,
                lr: o.lr,
                mask_weight: o.mask_weight,
            };
            bench::task_substructure(&vae, &predictor, oracle.as_ref(), &starts, &params)?
        }
        Task::Affinity => {
            let name = ctx.affinity_name();
            let affinity = predictor_for(&name, &mut id)?;
            let qed = predictor_for("qed", &mut id)?;
            let sa = predictor_for("sa", &mut id)?;
            let oracle = ctx.oracle(&name)?;
            let weight = |k: &str| o.weights.get(k).copied().unwrap_or(1.0);
            let params = AffinityParams {
                mode: b.affinity_mode,
                affinity_weight: weight("affinity"),
                qed_weight: weight("qed"),
                sa_weight: weight("sa"),
                restarts: o.restarts,
                steps: o.steps,
                lr: o.lr,
                seed: o.seed,
                temperature: b.temperature,
                filter: cfg.filter.clone(),
            };
            let predictors = AffinityPredictors {
                affinity: &affinity,
                qed: &qed,
                sa: &sa,
            };
            bench::task_affinity(&vae, &predictors, oracle.as_ref(), &params)?
        }
    };
    let run_id = id.finish();
    report.run_id = Some(run_id.clone());
    report.seconds = started.elapsed().as_secs_f64();
    let stem = format!("{}-{run_id}", task.label());
    let reports = ctx.work.join("reports");
    let paths = report.write_all(&reports, &stem)?;
    ctx.record(&format!("report.{}", task.label()), &paths[2])?;
    print!("{}", report.to_text());
    info!("{} finished in {:.1}s", task.label(), report.seconds);
    Ok(())
}

/// A fixed panel of drug-like molecules for protocol checks.
fn check_panel() -> Vec<MolGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let params = SynthParams::druglike();
    (0..10)
        .map(|_| random_molecule(&mut rng, &params))
        .collect()
}

fn oracle_check(ctx: &mut Ctx, command: Vec<String>) -> anyhow::Result<()> {
    let command = if command.is_empty() {
        ctx.cfg.oracle.command.clone()
    } else {
        command
    };
    if command.is_empty() {
        bail!("no oracle command: set oracle.command or pass one after `oracle-check`");
    }
    let mut o = ctx.cfg.oracle.clone();
    o.cache = false;
    ctx.cfg.oracle = o;
    let oracle = ctx.external(command)?;
    let panel = check_panel();
    let started = Instant::now();
    let scores = oracle.score_batch(&panel)?;
    let failures: Vec<String> = scores
        .iter()
        .enumerate()
        .filter_map(|(i, s)| s.as_ref().err().map(|e| format!("#{i}: {e}")))
        .collect();
    if !failures.is_empty() {
        bail!("protocol check failed: {}", failures.join("; "));
    }
    println!(
        "protocol OK: {}/{} scored in {:.0} ms",
        scores.len(),
        panel.len(),
        started.elapsed().as_secs_f64() * 1e3
    );
    Ok(())
}

fn run() -> anyhow::Result<()> {
    let (args, flags) = split_config_flags(std::env::args().collect())?;
    let cli = Cli::parse_from(args);
    let cfg = RunConfig::load(cli.config.as_deref(), &flags)?;
    if let Command::ShowConfig = cli.command {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let work = cfg.paths.work.clone();
    let _lock = WorkLock::acquire(&work)?;
    let latest = Latest::load(&work)?;
    let mut ctx = Ctx { cfg, work, latest };
    match cli.command {
        Command::SynthCorpus => synth_corpus(&mut ctx),
        Command::TrainVae => train_vae(&mut ctx),
        Command::TrainPredictor { property } => train_predictors(&mut ctx, property),
        Command::Sample { count, seed } => sample(&mut ctx, count, seed),
        Command::Optimize => optimize(&mut ctx),
        Command::Filter { input } => run_filter(&mut ctx, input),
        Command::Finetune { input } => run_finetune(&mut ctx, input),
        Command::Bench { task } => run_bench(&mut ctx, task),
        Command::OracleCheck { command } => oracle_check(&mut ctx, command),
        Command::ShowConfig => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = writeln!(std::io::stderr(), "error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
