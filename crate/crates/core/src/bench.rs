//! Benchmark tasks and their reports.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use limo_chem::selfies::{decode as decode_selfies, encode};
use limo_chem::{
    canonical_key, diversity, fingerprint, tanimoto, to_smiles, Alphabet, MolGraph, SelfiesString,
};
use limo_chem::{DEFAULT_NBITS, DEFAULT_RADIUS};
use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{LimoError, Result};
use crate::optimize::{
    build_mask, multi_start, reverse_optimize_batch, reverse_optimize_masked, Goal, Objective,
    Term, Trace,
};
use crate::oracles::thermo::kd_from_dg;
use crate::oracles::{qed_surrogate, sa_surrogate, Direction, PropertyOracle};
use crate::predictor::Predictor;
use crate::refine::{filter, finetune, FilterPolicy};
use crate::vae::{sample_latents, Vae};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMolecule {
    pub key: String,
    pub smiles: String,
    pub selfies: String,
    pub scores: BTreeMap<String, f64>,
}

impl ReportMolecule {
    pub fn new(graph: &MolGraph, selfies: String, scores: BTreeMap<String, f64>) -> Self {
        ReportMolecule {
            key: canonical_key(graph),
            smiles: to_smiles(graph),
            selfies,
            scores,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Equal-width bins over `[lo, hi]`; the top edge falls in the last bin.
    pub fn new(values: &[f64], lo: f64, hi: f64, bins: usize) -> Self {
        let mut counts = vec![0; bins.max(1)];
        let width = (hi - lo) / counts.len() as f64;
        for &v in values {
            let k = if width > 0.0 {
                ((v - lo) / width).floor() as isize
            } else {
                0
            };
            let k = k.clamp(0, counts.len() as isize - 1) as usize;
            counts[k] += 1;
        }
        Histogram { lo, hi, counts }
    }
}

/// Paired histograms on a shared range.
fn paired_histograms(
    name: &str,
    before: &[f64],
    after: &[f64],
    out: &mut BTreeMap<String, Histogram>,
) {
    let all = before.iter().chain(after);
    let lo = all.clone().copied().fold(f64::INFINITY, f64::min);
    let hi = all.copied().fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() || !hi.is_finite() {
        return;
    }
    out.insert(format!("{name}.before"), Histogram::new(before, lo, hi, 20));
    out.insert(format!("{name}.after"), Histogram::new(after, lo, hi, 20));
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_id: Option<String>,
    pub config: serde_json::Value,
    pub metrics: BTreeMap<String, f64>,
    pub molecules: Vec<ReportMolecule>,
    #[serde(skip)]
    pub histograms: BTreeMap<String, Histogram>,
    /// Wall-clock duration; kept out of the report body.
    #[serde(skip)]
    pub seconds: f64,
}

impl TaskReport {
    pub fn new(task: &str, config: serde_json::Value) -> Self {
        TaskReport {
            task: task.to_string(),
            run_id: None,
            config,
            metrics: BTreeMap::new(),
            molecules: Vec::new(),
            histograms: BTreeMap::new(),
            seconds: 0.0,
        }
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    fn set(&mut self, name: impl Into<String>, value: f64) {
        let name = name.into();
        if value.is_finite() {
            self.metrics.insert(name, value);
        } else {
            warn!("{}: metric {name} is not finite, omitted", self.task);
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn histograms_json(&self) -> String {
        serde_json::to_string_pretty(&self.histograms).expect("histograms serialize") + "\n"
    }

    pub fn timing_json(&self) -> String {
        serde_json::to_string_pretty(&serde_json::json!({
            "task": self.task,
            "seconds": self.seconds,
        }))
        .expect("timing serializes")
            + "\n"
    }

    fn score_columns(&self) -> Vec<String> {
        let names: BTreeSet<&String> = self
            .molecules
            .iter()
            .flat_map(|m| m.scores.keys())
            .collect();
        names.into_iter().cloned().collect()
    }

    pub fn to_csv(&self) -> Result<String> {
        let columns = self.score_columns();
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec![
            "rank".to_string(),
            "key".into(),
            "smiles".into(),
            "selfies".into(),
        ];
        header.extend(columns.iter().cloned());
        w.write_record(&header).map_err(csv_error)?;
        for (i, m) in self.molecules.iter().enumerate() {
            let mut row = vec![
                (i + 1).to_string(),
                m.key.clone(),
                m.smiles.clone(),
                m.selfies.clone(),
            ];
            row.extend(
                columns
                    .iter()
                    .map(|c| m.scores.get(c).map(|v| v.to_string()).unwrap_or_default()),
            );
            w.write_record(&row).map_err(csv_error)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| LimoError::InvalidInput(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv of utf-8 fields"))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "task    {}", self.task);
        if let Some(id) = &self.run_id {
            let _ = writeln!(out, "run-id  {id}");
        }
        let _ = writeln!(out, "\nmetrics");
        for (k, v) in &self.metrics {
            let _ = writeln!(out, "  {k:<32} {v:>14.4}");
        }
        if !self.molecules.is_empty() {
            let columns = self.score_columns();
            let _ = write!(out, "\nmolecules\n  {:>4}", "rank");
            for c in &columns {
                let _ = write!(out, " {c:>12}");
            }
            let _ = writeln!(out, "  smiles");
            for (i, m) in self.molecules.iter().enumerate() {
                let _ = write!(out, "  {:>4}", i + 1);
                for c in &columns {
                    match m.scores.get(c) {
                        Some(v) => {
                            let _ = write!(out, " {v:>12.4}");
                        }
                        None => {
                            let _ = write!(out, " {:>12}", "-");
                        }
                    }
                }
                let _ = writeln!(out, "  {}", m.smiles);
            }
        }
        out
    }

    /// Writes `<stem>.txt`, `.csv`, `.json`, `.hist.json` and `.timing.json` into `dir`.
    pub fn write_all(&self, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let files = [
            (format!("{stem}.txt"), self.to_text()),
            (format!("{stem}.csv"), self.to_csv()?),
            (format!("{stem}.json"), self.to_json()),
            (format!("{stem}.hist.json"), self.histograms_json()),
            (format!("{stem}.timing.json"), self.timing_json()),
        ];
        let mut paths = Vec::new();
        for (name, body) in files {
            let path = dir.join(name);
            std::fs::write(&path, body)?;
            paths.push(path);
        }
        Ok(paths)
    }
}

fn csv_error(e: csv::Error) -> LimoError {
    LimoError::InvalidInput(format!("csv: {e}"))
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Oracle values in batch order; failed items become `None`.
fn score_all(oracle: &dyn PropertyOracle, mols: &[MolGraph]) -> Result<Vec<Option<f64>>> {
    Ok(oracle
        .score_batch(mols)?
        .into_iter()
        .map(|s| s.ok().filter(|v| v.is_finite()))
        .collect())
}

/// Sorts best-first by `direction`, then by key.
fn rank(items: &mut [(f64, ReportMolecule)], direction: Direction) {
    items.sort_by(|a, b| {
        let ord = a.0.total_cmp(&b.0);
        let ord = if direction == Direction::Maximize {
            ord.reverse()
        } else {
            ord
        };
        ord.then_with(|| a.1.key.cmp(&b.1.key))
    });
}

/// Unique molecules visited by a set of traces, decoded once each.
struct TraceMolecules {
    graphs: Vec<MolGraph>,
    keys: Vec<String>,
    texts: Vec<String>,
    /// Per trace, per step: index into `graphs`.
    steps: Vec<Vec<usize>>,
}

impl TraceMolecules {
    fn collect(vae: &Vae, traces: &[Trace]) -> Self {
        let mut by_string: HashMap<Vec<u8>, usize> = HashMap::new();
        let mut by_key: HashMap<String, usize> = HashMap::new();
        let mut out = TraceMolecules {
            graphs: Vec::new(),
            keys: Vec::new(),
            texts: Vec::new(),
            steps: Vec::with_capacity(traces.len()),
        };
        for trace in traces {
            let mut idx = Vec::with_capacity(trace.steps.len());
            for step in &trace.steps {
                let ids = step.selfies.ids();
                let i = match by_string.get(ids) {
                    Some(&i) => i,
                    None => {
                        let g = decode_selfies(&step.selfies, vae.alphabet());
                        let key = canonical_key(&g);
                        let i = *by_key.entry(key.clone()).or_insert_with(|| {
                            out.graphs.push(g);
                            out.keys.push(key);
                            out.texts.push(step.selfies.to_text(vae.alphabet()));
                            out.graphs.len() - 1
                        });
                        by_string.insert(ids.to_vec(), i);
                        i
                    }
                };
                idx.push(i);
            }
            out.steps.push(idx);
        }
        out
    }
}

fn config_json<T: Serialize>(value: &T) -> serde_json::Value {
    serde_json::to_value(value).expect("config serializes")
}

/// The `count` distinct corpus molecules with the lowest `oracle` score.
pub fn lowest_scoring(
    strings: &[SelfiesString],
    oracle: &dyn PropertyOracle,
    count: usize,
) -> Result<Vec<MolGraph>> {
    let alphabet = Alphabet::standard();
    let mut by_key: BTreeMap<String, MolGraph> = BTreeMap::new();
    for g in strings.iter().map(|s| decode_selfies(s, &alphabet)) {
        by_key.entry(canonical_key(&g)).or_insert(g);
    }
    let graphs: Vec<MolGraph> = by_key.into_values().collect();
    let scores = oracle.score_batch(&graphs)?;
    let mut scored: Vec<(f64, MolGraph)> = graphs
        .into_iter()
        .zip(scores)
        .filter_map(|(g, s)| s.ok().map(|v| (v, g)))
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(scored.into_iter().take(count).map(|(_, g)| g).collect())
}

/// The first `count` distinct corpus strings.
pub fn distinct_prefix(strings: &[SelfiesString], count: usize) -> Vec<SelfiesString> {
    let mut seen = BTreeSet::new();
    strings
        .iter()
        .filter(|s| seen.insert(s.ids().to_vec()))
        .take(count)
        .cloned()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomGenerationParams {
    pub count: usize,
    pub seed: u64,
}

/// Validity, uniqueness, diversity and novelty of prior samples.
pub fn task_random_generation(
    vae: &Vae,
    params: &RandomGenerationParams,
    training_keys: &BTreeSet<String>,
) -> Result<TaskReport> {
    let mut report = TaskReport::new("random-generation", config_json(params));
    let z = sample_latents(params.count, vae.dims().m, params.seed);
    let mols = vae.molecules(&z)?;
    let count = mols.len();
    if count == 0 {
        return Err(LimoError::EmptyDataset);
    }
    let valid = mols.iter().filter(|(_, g)| g.validate()).count();
    report.set("valid_pct", 100.0 * valid as f64 / count as f64);
    let keys: Vec<String> = mols.iter().map(|(_, g)| canonical_key(g)).collect();
    for (label, k) in [("unique_at_1k_pct", 1_000), ("unique_at_10k_pct", 10_000)] {
        if count >= k {
            let unique: BTreeSet<&String> = keys[..k].iter().collect();
            report.set(label, 100.0 * unique.len() as f64 / k as f64);
        } else {
            warn!("random-generation: {count} samples, {label} omitted");
        }
    }
    let unique: BTreeMap<&String, usize> =
        keys.iter().enumerate().map(|(i, k)| (k, i)).rev().collect();
    let novel = unique
        .keys()
        .filter(|k| !training_keys.contains(k.as_str()))
        .count();
    report.set("novel_pct", 100.0 * novel as f64 / unique.len() as f64);
    let head: Vec<MolGraph> = mols.iter().take(1_000).map(|(_, g)| g.clone()).collect();
    if head.len() >= 2 {
        report.set("diversity", diversity(&head)?);
    }
    let mut seen = BTreeSet::new();
    for ((s, g), key) in mols.iter().zip(&keys) {
        if report.molecules.len() == 10 {
            break;
        }
        if seen.insert(key) {
            let scores = BTreeMap::from([
                ("qed".to_string(), qed_surrogate(g)),
                ("sa".to_string(), sa_surrogate(g)),
            ]);
            report
                .molecules
                .push(ReportMolecule::new(g, s.to_text(vae.alphabet()), scores));
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaximizeParams {
    pub restarts: usize,
    pub steps: usize,
    pub lr: f32,
    pub seed: u64,
    pub top_k: usize,
}

/// Per restart, the trace molecule the oracle rates best; reports the top-k
/// distinct molecules and the same statistic for prior samples.
pub fn task_maximize(
    vae: &Vae,
    predictor: &Predictor,
    oracle: &dyn PropertyOracle,
    params: &MaximizeParams,
) -> Result<TaskReport> {
    let mut report = TaskReport::new("maximize", config_json(params));
    let direction = oracle.direction();
    let goal = match direction {
        Direction::Maximize => Goal::Maximize,
        Direction::Minimize => Goal::Minimize,
    };
    let obj = Objective::single(predictor, goal, params.steps, params.lr);
    let (_, traces) = multi_start(vae, &obj, None, params.restarts, params.seed)?;
    let visited = TraceMolecules::collect(vae, &traces);
    let scores = score_all(oracle, &visited.graphs)?;
    let better = |a: f64, b: f64| direction.better(a, b);
    let mut picks: BTreeMap<usize, f64> = BTreeMap::new();
    let mut per_restart = Vec::new();
    for steps in &visited.steps {
        let mut best: Option<(usize, f64)> = None;
        for &i in steps {
            if let Some(s) = scores[i] {
                if best.is_none_or(|(_, b)| better(s, b)) {
                    best = Some((i, s));
                }
            }
        }
        if let Some((i, s)) = best {
            picks.insert(i, s);
            per_restart.push(s);
        }
    }
    let improved = traces
        .iter()
        .filter(|t| t.best_step().loss < t.first().loss)
        .count();
    report.set(
        "improved_pct",
        100.0 * improved as f64 / traces.len().max(1) as f64,
    );
    report.set("restart_best_mean", mean_std(&per_restart).0);
    let mut ranked: Vec<(f64, ReportMolecule)> = picks
        .into_iter()
        .map(|(i, s)| {
            let scores = BTreeMap::from([(oracle.name().to_string(), s)]);
            (
                s,
                ReportMolecule::new(&visited.graphs[i], visited.texts[i].clone(), scores),
            )
        })
        .collect();
    rank(&mut ranked, direction);
    for (k, (s, _)) in ranked.iter().take(params.top_k).enumerate() {
        report.set(format!("top{}", k + 1), *s);
    }
    report.molecules = ranked
        .into_iter()
        .take(params.top_k)
        .map(|(_, m)| m)
        .collect();

    let baseline = vae.molecules(&sample_latents(
        params.restarts,
        vae.dims().m,
        params.seed ^ BASELINE_SALT,
    ))?;
    let mut random: BTreeMap<String, f64> = BTreeMap::new();
    let graphs: Vec<MolGraph> = baseline.into_iter().map(|(_, g)| g).collect();
    for (g, s) in graphs.iter().zip(score_all(oracle, &graphs)?) {
        if let Some(s) = s {
            random.insert(canonical_key(g), s);
        }
    }
    let mut random: Vec<f64> = random.into_values().collect();
    random.sort_by(|a, b| {
        if direction == Direction::Maximize {
            b.total_cmp(a)
        } else {
            a.total_cmp(b)
        }
    });
    for (k, s) in random.iter().take(params.top_k).enumerate() {
        report.set(format!("random_top{}", k + 1), *s);
    }
    Ok(report)
}

/// Seed offset for the equal-budget random baselines.
pub const BASELINE_SALT: u64 = 0x5eed_0ba5e;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetRangeParams {
    pub lo: f64,
    pub hi: f64,
    pub restarts: usize,
    pub steps: usize,
    pub lr: f32,
    pub seed: u64,
}

/// Drives predictions toward the middle of `(lo, hi)` and counts oracle hits.
pub fn task_target_range(
    vae: &Vae,
    predictor: &Predictor,
    oracle: &dyn PropertyOracle,
    params: &TargetRangeParams,
) -> Result<TaskReport> {
    if !(params.lo < params.hi) {
        return Err(LimoError::InvalidInput(format!(
            "empty range ({}, {})",
            params.lo, params.hi
        )));
    }
    let mut report = TaskReport::new("target-range", config_json(params));
    let mid = 0.5 * (params.lo + params.hi);
    let inside = |v: f64| params.lo < v && v < params.hi;
    let obj = Objective::single(predictor, Goal::Target(mid), params.steps, params.lr);
    let (_, traces) = multi_start(vae, &obj, None, params.restarts, params.seed)?;
    let picks: Vec<MolGraph> = traces
        .iter()
        .map(|t| decode_selfies(&t.best_step().selfies, vae.alphabet()))
        .collect();
    let texts: Vec<String> = traces
        .iter()
        .map(|t| t.best_step().selfies.to_text(vae.alphabet()))
        .collect();
    let scores = score_all(oracle, &picks)?;
    let mut successes: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    let mut hits = 0;
    for (i, s) in scores.iter().enumerate() {
        if let Some(v) = s.filter(|&v| inside(v)) {
            hits += 1;
            successes.entry(canonical_key(&picks[i])).or_insert((v, i));
        }
    }
    report.set(
        "success_pct",
        100.0 * hits as f64 / picks.len().max(1) as f64,
    );
    let unique: Vec<MolGraph> = successes.values().map(|&(_, i)| picks[i].clone()).collect();
    if unique.len() >= 2 {
        report.set("success_diversity", diversity(&unique)?);
    }
    report.set("unique_successes", unique.len() as f64);

    let baseline: Vec<MolGraph> = vae
        .molecules(&sample_latents(
            params.restarts,
            vae.dims().m,
            params.seed ^ BASELINE_SALT,
        ))?
        .into_iter()
        .map(|(_, g)| g)
        .collect();
    let random_hits = score_all(oracle, &baseline)?
        .into_iter()
        .flatten()
        .filter(|&v| inside(v))
        .count();
    report.set(
        "random_success_pct",
        100.0 * random_hits as f64 / baseline.len().max(1) as f64,
    );

    let mut ranked: Vec<(f64, ReportMolecule)> = successes
        .into_values()
        .map(|(v, i)| {
            let scores = BTreeMap::from([(oracle.name().to_string(), v)]);
            (
                (v - mid).abs(),
                ReportMolecule::new(&picks[i], texts[i].clone(), scores),
            )
        })
        .collect();
    rank(&mut ranked, Direction::Minimize);
    report.molecules = ranked.into_iter().map(|(_, m)| m).collect();
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityParams {
    pub deltas: Vec<f64>,
    pub steps: usize,
    pub lr: f32,
}

/// Per start and threshold: the best oracle improvement among trace
/// molecules at least `delta`-similar to the start, the start itself
/// counting as an improvement of zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityOutcome {
    /// `[start][delta]`.
    pub improvement: Vec<Vec<f64>>,
    /// `[start][delta]`: some trace molecule met the threshold.
    pub success: Vec<Vec<bool>>,
}

pub fn similarity_outcomes(
    vae: &Vae,
    predictor: &Predictor,
    oracle: &dyn PropertyOracle,
    starts: &[MolGraph],
    params: &SimilarityParams,
) -> Result<(SimilarityOutcome, Vec<ReportMolecule>)> {
    let (n, m) = (vae.dims().n, vae.dims().m);
    let strings = starts
        .iter()
        .map(|g| encode(g, n, vae.alphabet()))
        .collect::<std::result::Result<Vec<SelfiesString>, _>>()?;
    let (mu, _) = vae.encode_batch(&strings)?;
    debug_assert_eq!(mu.cols(), m);
    let direction = oracle.direction();
    let goal = match direction {
        Direction::Maximize => Goal::Maximize,
        Direction::Minimize => Goal::Minimize,
    };
    let obj = Objective::single(predictor, goal, params.steps, params.lr);
    let traces = reverse_optimize_batch(vae, &obj, None, &mu)?;
    let visited = TraceMolecules::collect(vae, &traces);
    let scores = score_all(oracle, &visited.graphs)?;
    let fps = visited
        .graphs
        .iter()
        .map(|g| fingerprint(g, DEFAULT_RADIUS, DEFAULT_NBITS))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let start_scores = oracle.score_batch(starts)?;
    let mut outcome = SimilarityOutcome {
        improvement: Vec::new(),
        success: Vec::new(),
    };
    let mut molecules = Vec::new();
    for (s, start) in starts.iter().enumerate() {
        let base = start_scores[s]
            .clone()
            .map_err(|e| LimoError::Oracle(format!("start molecule {s}: {e}")))?;
        let start_fp = fingerprint(start, DEFAULT_RADIUS, DEFAULT_NBITS)?;
        let mut unique: Vec<usize> = visited.steps[s].clone();
        unique.sort_unstable();
        unique.dedup();
        let sims: Vec<(usize, f64)> = unique
            .iter()
            .map(|&i| Ok((i, tanimoto(&start_fp, &fps[i])?)))
            .collect::<std::result::Result<_, limo_chem::ChemError>>()?;
        let mut improvements = Vec::new();
        let mut successes = Vec::new();
        for &delta in &params.deltas {
            let mut best = (0.0, None);
            let mut any = false;
            for &(i, sim) in &sims {
                if sim < delta {
                    continue;
                }
                any = true;
                if let Some(v) = scores[i] {
                    let gain = direction.sign() * (v - base);
                    if gain > best.0 {
                        best = (gain, Some((i, sim, v)));
                    }
                }
            }
            improvements.push(best.0);
            successes.push(any);
            let (graph, text, sim, value) = match best.1 {
                Some((i, sim, v)) => (&visited.graphs[i], visited.texts[i].clone(), sim, v),
                None => (start, strings[s].to_text(vae.alphabet()), 1.0, base),
            };
            let scores = BTreeMap::from([
                ("start".to_string(), s as f64),
                ("delta".to_string(), delta),
                ("similarity".to_string(), sim),
                ("improvement".to_string(), best.0),
                (oracle.name().to_string(), value),
            ]);
            molecules.push(ReportMolecule::new(graph, text, scores));
        }
        outcome.improvement.push(improvements);
        outcome.success.push(successes);
    }
    Ok((outcome, molecules))
}

pub fn task_similarity(
    vae: &Vae,
    predictor: &Predictor,
    oracle: &dyn PropertyOracle,
    starts: &[MolGraph],
    params: &SimilarityParams,
) -> Result<TaskReport> {
    if starts.is_empty() {
        return Err(LimoError::EmptyDataset);
    }
    let mut report = TaskReport::new("similarity", config_json(params));
    let (outcome, molecules) = similarity_outcomes(vae, predictor, oracle, starts, params)?;
    for (d, delta) in params.deltas.iter().enumerate() {
        let gains: Vec<f64> = outcome.improvement.iter().map(|row| row[d]).collect();
        let (mean, std) = mean_std(&gains);
        let hits = outcome.success.iter().filter(|row| row[d]).count();
        report.set(format!("delta_{delta:.1}.improvement_mean"), mean);
        report.set(format!("delta_{delta:.1}.improvement_std"), std);
        report.set(
            format!("delta_{delta:.1}.success_pct"),
            100.0 * hits as f64 / starts.len() as f64,
        );
    }
    report.molecules = molecules;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubstructureParams {
    /// Fixed string positions.
    pub positions: Vec<usize>,
    pub goal: Goal,
    pub steps: usize,
    pub lr: f32,
    pub mask_weight: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubstructureRun {
    /// Oracle change from the initial molecule to the selected one.
    pub delta: f64,
    /// The final iterate keeps the anchor's symbols at every fixed position.
    pub retained: bool,
    pub initial: MolGraph,
    pub selected: MolGraph,
    pub selected_text: String,
}

/// One masked run per start, starting from the encoder mean. The selected
/// molecule is the best-by-oracle trace entry that keeps the fixed symbols.
pub fn substructure_runs(
    vae: &Vae,
    predictor: &Predictor,
    oracle: &dyn PropertyOracle,
    starts: &[SelfiesString],
    params: &SubstructureParams,
) -> Result<Vec<SubstructureRun>> {
    let d = vae.dims().d;
    let obj = Objective::single(predictor, params.goal, params.steps, params.lr);
    let sign = match params.goal {
        Goal::Maximize => 1.0,
        Goal::Minimize => -1.0,
        Goal::Target(_) => {
            return Err(LimoError::InvalidInput(
                "substructure task needs maximize or minimize".into(),
            ))
        }
    };
    let masks = starts
        .iter()
        .map(|s| build_mask(vae, s, &params.positions, params.mask_weight))
        .collect::<Result<Vec<_>>>()?;
    let (mu, _) = vae.encode_batch(starts)?;
    let traces = reverse_optimize_masked(vae, &obj, &masks, &mu)?;
    let mut runs = Vec::with_capacity(starts.len());
    for (trace, mask) in traces.iter().zip(&masks) {
        let visited = TraceMolecules::collect(vae, std::slice::from_ref(trace));
        let scores = score_all(oracle, &visited.graphs)?;
        let initial_idx = visited.steps[0][0];
        let initial_score = scores[initial_idx]
            .ok_or_else(|| LimoError::Oracle("initial molecule could not be scored".into()))?;
        let mut best = (initial_score, initial_idx);
        for (step, &i) in trace.steps.iter().zip(&visited.steps[0]) {
            if !mask.retained_by(&step.selfies, d) {
                continue;
            }
            if let Some(v) = scores[i] {
                if sign * v > sign * best.0 {
                    best = (v, i);
                }
            }
        }
        runs.push(SubstructureRun {
            delta: best.0 - initial_score,
            retained: mask.retained_by(&trace.last().selfies, d),
            initial: visited.graphs[initial_idx].clone(),
            selected: visited.graphs[best.1].clone(),
            selected_text: visited.texts[best.1].clone(),
        });
    }
    Ok(runs)
}

pub fn task_substructure(
    vae: &Vae,
    predictor: &Predictor,
    oracle: &dyn PropertyOracle,
    starts: &[SelfiesString],
    params: &SubstructureParams,
) -> Result<TaskReport> {
    if starts.is_empty() {
        return Err(LimoError::EmptyDataset);
    }
    let mut report = TaskReport::new("substructure", config_json(params));
    let runs = substructure_runs(vae, predictor, oracle, starts, params)?;
    let deltas: Vec<f64> = runs.iter().map(|r| r.delta).collect();
    let (mean, std) = mean_std(&deltas);
    report.set("delta_mean", mean);
    report.set("delta_std", std);
    report.set(
        "retention_pct",
        100.0 * runs.iter().filter(|r| r.retained).count() as f64 / runs.len() as f64,
    );
    for (i, r) in runs.iter().enumerate() {
        let scores = BTreeMap::from([
            ("start".to_string(), i as f64),
            ("delta".to_string(), r.delta),
            ("retained".to_string(), f64::from(u8::from(r.retained))),
        ]);
        report.molecules.push(ReportMolecule::new(
            &r.selected,
            r.selected_text.clone(),
            scores,
        ));
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AffinityMode {
    Single,
    Multi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffinityParams {
    pub mode: AffinityMode,
    pub affinity_weight: f64,
    pub qed_weight: f64,
    pub sa_weight: f64,
    pub restarts: usize,
    pub steps: usize,
    pub lr: f32,
    pub seed: u64,
    pub temperature: f64,
    pub filter: FilterPolicy,
}

pub struct AffinityPredictors<'p> {
    pub affinity: &'p Predictor,
    pub qed: &'p Predictor,
    pub sa: &'p Predictor,
}

/// Binding-affinity optimization, alone or weighted with QED′ and SA′,
/// followed in multi mode by filtering and fine-tuning.
pub fn task_affinity(
    vae: &Vae,
    predictors: &AffinityPredictors,
    oracle: &dyn PropertyOracle,
    params: &AffinityParams,
) -> Result<TaskReport> {
    let mut report = TaskReport::new("affinity", config_json(params));
    let affinity_goal = match oracle.direction() {
        Direction::Maximize => Goal::Maximize,
        Direction::Minimize => Goal::Minimize,
    };
    let mut terms = vec![Term {
        predictor: predictors.affinity,
        weight: params.affinity_weight,
        goal: affinity_goal,
    }];
    if params.mode == AffinityMode::Multi {
        terms.push(Term {
            predictor: predictors.qed,
            weight: params.qed_weight,
            goal: Goal::Maximize,
        });
        terms.push(Term {
            predictor: predictors.sa,
            weight: params.sa_weight,
            goal: Goal::Minimize,
        });
    }
    let obj = Objective::new(terms, params.steps, params.lr)?;
    let (_, traces) = multi_start(vae, &obj, None, params.restarts, params.seed)?;
    let optimized: Vec<MolGraph> = traces
        .iter()
        .map(|t| decode_selfies(&t.best_step().selfies, vae.alphabet()))
        .collect();
    let before: Vec<MolGraph> = vae
        .molecules(&sample_latents(
            params.restarts,
            vae.dims().m,
            params.seed ^ BASELINE_SALT,
        ))?
        .into_iter()
        .map(|(_, g)| g)
        .collect();

    let name = oracle.name().to_string();
    let before_aff: Vec<f64> = score_all(oracle, &before)?.into_iter().flatten().collect();
    let after_aff: Vec<f64> = score_all(oracle, &optimized)?
        .into_iter()
        .flatten()
        .collect();
    let props =
        |mols: &[MolGraph], f: fn(&MolGraph) -> f64| mols.iter().map(f).collect::<Vec<f64>>();
    let (before_qed, after_qed) = (
        props(&before, qed_surrogate),
        props(&optimized, qed_surrogate),
    );
    let (before_sa, after_sa) = (
        props(&before, sa_surrogate),
        props(&optimized, sa_surrogate),
    );
    for (label, b, a) in [
        (name.as_str(), &before_aff, &after_aff),
        ("qed", &before_qed, &after_qed),
        ("sa", &before_sa, &after_sa),
    ] {
        report.set(format!("before.{label}_mean"), mean_std(b).0);
        report.set(format!("optimized.{label}_mean"), mean_std(a).0);
        paired_histograms(label, b, a, &mut report.histograms);
    }
    report.set("optimized_count", optimized.len() as f64);

    let mut unique: BTreeMap<String, MolGraph> = BTreeMap::new();
    for g in &optimized {
        unique.entry(canonical_key(g)).or_insert_with(|| g.clone());
    }
    let mut pool: Vec<MolGraph> = unique.into_values().collect();
    if params.mode == AffinityMode::Multi {
        let kept = filter(&pool, &params.filter);
        report.set(
            "filter_pass_pct",
            100.0 * kept.len() as f64 / pool.len().max(1) as f64,
        );
        let mut tuned: BTreeMap<String, MolGraph> = BTreeMap::new();
        for g in &kept {
            let out = finetune(g, oracle)?;
            tuned.entry(canonical_key(&out.graph)).or_insert(out.graph);
        }
        pool = tuned.into_values().collect();
        report.set("final_count", pool.len() as f64);
    }
    let scores = score_all(oracle, &pool)?;
    let mut ranked: Vec<(f64, ReportMolecule)> = pool
        .iter()
        .zip(scores)
        .filter_map(|(g, s)| {
            let s = s?;
            let mut map = BTreeMap::from([
                (name.clone(), s),
                ("qed".to_string(), qed_surrogate(g)),
                ("sa".to_string(), sa_surrogate(g)),
            ]);
            map.insert("kd_nm".to_string(), kd_from_dg(s, params.temperature));
            let text = encode(g, vae.dims().n, vae.alphabet())
                .map(|s| s.to_text(vae.alphabet()))
                .unwrap_or_default();
            Some((s, ReportMolecule::new(g, text, map)))
        })
        .collect();
    rank(&mut ranked, oracle.direction());
    for (k, (s, _)) in ranked.iter().take(3).enumerate() {
        report.set(format!("top{}.{name}", k + 1), *s);
        report.set(
            format!("top{}.kd_nm", k + 1),
            kd_from_dg(*s, params.temperature),
        );
    }
    report.molecules = ranked.into_iter().take(10).map(|(_, m)| m).collect();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_bins_cover_the_range() {
        let h = Histogram::new(&[0.0, 0.5, 1.0, 0.99, 0.25], 0.0, 1.0, 4);
        assert_eq!(h.counts, vec![1, 1, 1, 2]);
        assert_eq!(h.counts.iter().sum::<usize>(), 5);
    }

    #[test]
    fn report_formats_are_stable() {
        let mut r = TaskReport::new("demo", serde_json::json!({"k": 1}));
        r.set("b", 2.0);
        r.set("a", 1.5);
        r.set("bad", f64::NAN);
        let mut g = MolGraph::new();
        g.add_atom(limo_chem::Element::C);
        r.molecules.push(ReportMolecule::new(
            &g,
            "[C]".into(),
            BTreeMap::from([("plogp".to_string(), -0.8)]),
        ));
        r.seconds = 12.0;
        let json = r.to_json();
        assert!(!json.contains("seconds"));
        assert!(json.find("\"a\"").unwrap() < json.find("\"b\"").unwrap());
        assert!(r.metric("bad").is_none());
        let back: TaskReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.metrics, r.metrics);
        assert_eq!(
            r.to_csv().unwrap().lines().next(),
            Some("rank,key,smiles,selfies,plogp")
        );
        assert!(r.to_text().contains("-0.8000"));
    }

    #[test]
    fn ranking_respects_direction_then_key() {
        let mk = |k: &str| ReportMolecule {
            key: k.into(),
            smiles: String::new(),
            selfies: String::new(),
            scores: BTreeMap::new(),
        };
        let mut items = vec![(1.0, mk("b")), (3.0, mk("c")), (1.0, mk("a"))];
        rank(&mut items, Direction::Maximize);
        let keys: Vec<&str> = items.iter().map(|(_, m)| m.key.as_str()).collect();
        assert_eq!(keys, ["c", "a", "b"]);
        rank(&mut items, Direction::Minimize);
        let keys: Vec<&str> = items.iter().map(|(_, m)| m.key.as_str()).collect();
        assert_eq!(keys, ["a", "b", "c"]);
    }
}
