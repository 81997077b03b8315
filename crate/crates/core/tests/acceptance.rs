//! Desk-scale acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.
//!
//! The end-to-end CLI criterion runs first; its first work directory then
//! supplies the trained VAE, predictors and bench reports for the rest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use limo::bench::{task_affinity, AffinityMode, AffinityParams, AffinityPredictors, TaskReport};
use limo::checkpoint::Checkpoint;
use limo::config::RunConfig;
use limo::oracles::thermo::{combine_poses, kd_from_dg, DEFAULT_TEMPERATURE, GAS_CONSTANT};
use limo::oracles::{qed_surrogate, sa_surrogate, Direction, ItemScore, PropertyOracle, Surrogate};
use limo::predictor::{gen_training_set, r_squared, train_predictor, InputMode, Predictor};
use limo::refine::{finetune, FilterPolicy};
use limo::vae::{sample_latents, Vae};
use limo_chem::selfies::{decode_ids, encode_unpadded};
use limo_chem::synth::{random_molecule, SynthParams};
use limo_chem::{canonical_key, ring_sizes, Alphabet, Element, MolGraph};
use limo_tensor::gradcheck::{primitive_cases, random_tensor, Case, TOLERANCE};
use limo_tensor::BATCHNORM_EPS;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LIMO: &str = env!("CARGO_BIN_EXE_limo");
const DESK: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/desk.toml");
const PIPELINE_BUDGET_SECS: f64 = 30.0 * 60.0;

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
    seconds: f64,
}

fn criterion(name: &'static str, run: impl FnOnce() -> Result<(bool, String), String>) -> Outcome {
    let started = Instant::now();
    let (pass, detail) = match std::panic::catch_unwind(std::panic::AssertUnwindSafe(run)) {
        Ok(Ok(r)) => r,
        Ok(Err(e)) => (false, format!("error: {e}")),
        Err(_) => (false, "panicked".into()),
    };
    let out = Outcome {
        name,
        pass,
        detail,
        seconds: started.elapsed().as_secs_f64(),
    };
    println!(
        "{} {} ({:.1}s): {}",
        if out.pass { "PASS" } else { "FAIL" },
        out.name,
        out.seconds,
        out.detail
    );
    out
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

// ---------------------------------------------------------------------------
// End-to-end CLI

const PIPELINE: &[&[&str]] = &[
    &["synth-corpus"],
    &["train-vae"],
    &["train-predictor"],
    &["sample", "--count", "1000", "--seed", "7"],
    &["optimize"],
    &["filter"],
    &["finetune"],
    &["bench", "random-generation"],
    &["bench", "maximize"],
    &["bench", "target-range"],
    &["bench", "similarity"],
    &["bench", "substructure"],
    &["bench", "affinity"],
];

fn run_pipeline(dir: &Path) -> Result<f64, String> {
    let started = Instant::now();
    for args in PIPELINE {
        let out = Command::new(LIMO)
            .current_dir(dir)
            .arg("--config")
            .arg(DESK)
            .args(*args)
            .env("RUST_LOG", "warn")
            .output()
            .map_err(err)?;
        if !out.status.success() {
            return Err(format!(
                "{args:?}: {}",
                String::from_utf8_lossy(&out.stderr).trim()
            ));
        }
    }
    Ok(started.elapsed().as_secs_f64())
}

/// Relative path to contents, skipping the timing sidecars.
fn tree(root: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).map_err(err)? {
            let path = entry.map_err(err)?.path();
            if path.is_dir() {
                stack.push(path);
            } else if !path.to_string_lossy().ends_with(".timing.json") {
                let rel = path.strip_prefix(root).map_err(err)?.to_path_buf();
                out.insert(rel, std::fs::read(&path).map_err(err)?);
            }
        }
    }
    Ok(out)
}

fn end_to_end(a: &Path, b: &Path) -> Result<(bool, String), String> {
    let first = run_pipeline(a)?;
    let second = run_pipeline(b)?;
    let (ta, tb) = (tree(a)?, tree(b)?);
    let differing: Vec<String> = ta
        .keys()
        .chain(tb.keys())
        .filter(|k| ta.get(*k) != tb.get(*k))
        .map(|k| k.display().to_string())
        .collect();
    let pass =
        differing.is_empty() && first < PIPELINE_BUDGET_SECS && second < PIPELINE_BUDGET_SECS;
    let mut detail = format!("{} files, runs took {first:.0}s and {second:.0}s", ta.len());
    if !differing.is_empty() {
        detail += &format!("; differing: {}", differing.join(", "));
    }
    Ok((pass, detail))
}

// ---------------------------------------------------------------------------
// Artifacts of the first run

struct Desk {
    cfg: RunConfig,
    work: PathBuf,
    latest: serde_json::Value,
}

impl Desk {
    fn open(dir: &Path) -> Result<Self, String> {
        let cfg = RunConfig::load(Some(Path::new(DESK)), &[]).map_err(err)?;
        let work = dir.join(&cfg.paths.work);
        let latest = std::fs::read_to_string(work.join("latest.json")).map_err(err)?;
        let latest = serde_json::from_str(&latest).map_err(err)?;
        Ok(Desk { cfg, work, latest })
    }

    fn path(&self, key: &str) -> Result<PathBuf, String> {
        let name = self.latest[key]
            .as_str()
            .ok_or_else(|| format!("no {key} in latest.json"))?;
        Ok(self.work.join(name))
    }

    fn vae(&self) -> Result<Vae, String> {
        Vae::from_checkpoint(Checkpoint::load(&self.path("vae")?).map_err(err)?).map_err(err)
    }

    fn predictor(&self, property: &str) -> Result<Predictor, String> {
        let path = self.path(&format!("predictor.{property}"))?;
        Predictor::from_checkpoint(Checkpoint::load(&path).map_err(err)?).map_err(err)
    }

    fn report(&self, task: &str) -> Result<TaskReport, String> {
        let text = std::fs::read_to_string(self.path(&format!("report.{task}"))?).map_err(err)?;
        serde_json::from_str(&text).map_err(err)
    }
}

fn metric(report: &TaskReport, key: &str) -> Result<f64, String> {
    report
        .metrics
        .get(key)
        .copied()
        .ok_or_else(|| format!("{} report has no {key}", report.task))
}

// ---------------------------------------------------------------------------
// Criteria

fn validity(vae: &Vae) -> Result<(bool, String), String> {
    let mols = vae
        .molecules(&sample_latents(10_000, vae.dims().m, 0))
        .map_err(err)?;
    let valid = mols.iter().filter(|(_, g)| g.validate()).count();
    Ok((
        valid == mols.len(),
        format!(
            "{valid}/{} prior samples decode to valid molecules",
            mols.len()
        ),
    ))
}

fn codec_round_trip() -> Result<(bool, String), String> {
    let alphabet = Alphabet::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut same = 0;
    for i in 0..10_000 {
        let params = if i % 2 == 0 {
            SynthParams::druglike()
        } else {
            SynthParams::wild()
        };
        let g = random_molecule(&mut rng, &params);
        let ids = encode_unpadded(&g, &alphabet).map_err(err)?;
        if canonical_key(&decode_ids(&ids, &alphabet)) == canonical_key(&g) {
            same += 1;
        }
    }
    Ok((
        same == 10_000,
        format!("{same}/10000 graphs survive encode then decode"),
    ))
}

fn block(ck: &mut Checkpoint, name: &str, shape: &[usize]) -> Result<Vec<f64>, String> {
    let t = ck.take(name, shape).map_err(err)?;
    Ok(t.data().iter().map(|&v| f64::from(v)).collect())
}

fn affine(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let cols = b.len();
    let mut out = b.to_vec();
    for (i, &xi) in x.iter().enumerate() {
        for (o, &wij) in out.iter_mut().zip(&w[i * cols..(i + 1) * cols]) {
            *o += xi * wij;
        }
    }
    out
}

struct Layer {
    w: Vec<f64>,
    b: Vec<f64>,
    /// Eval-mode batch norm: gamma, beta, running mean, running variance.
    norm: Option<[Vec<f64>; 4]>,
    relu: bool,
}

impl Layer {
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut h = affine(x, &self.w, &self.b);
        if let Some([gamma, beta, mean, var]) = &self.norm {
            let eps = f64::from(BATCHNORM_EPS);
            for (j, v) in h.iter_mut().enumerate() {
                *v = gamma[j] * (*v - mean[j]) / (var[j] + eps).sqrt() + beta[j];
            }
        }
        if self.relu {
            h.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        h
    }
}

/// Independent `f64` forward of z -> decoder probabilities -> prediction.
struct ChainReference {
    decoder: Vec<Layer>,
    d: usize,
    predictor: Vec<Layer>,
    mean: f64,
    std: f64,
}

impl ChainReference {
    fn new(vae: &Vae, predictor: &Predictor) -> Result<Self, String> {
        let dims = vae.dims().clone();
        let mut ck = vae.to_checkpoint();
        let mut decoder = Vec::new();
        let mut width = dims.m;
        for (i, &h) in dims.hidden.iter().rev().enumerate() {
            let p = format!("dec{i}");
            decoder.push(Layer {
                w: block(&mut ck, &format!("{p}.weight"), &[width, h])?,
                b: block(&mut ck, &format!("{p}.bias"), &[h])?,
                norm: Some([
                    block(&mut ck, &format!("{p}.gamma"), &[h])?,
                    block(&mut ck, &format!("{p}.beta"), &[h])?,
                    block(&mut ck, &format!("{p}.running_mean"), &[h])?,
                    block(&mut ck, &format!("{p}.running_var"), &[h])?,
                ]),
                relu: true,
            });
            width = h;
        }
        let nd = dims.n * dims.d;
        decoder.push(Layer {
            w: block(&mut ck, "out.weight", &[width, nd])?,
            b: block(&mut ck, "out.bias", &[nd])?,
            norm: None,
            relu: false,
        });
        let mut pk = predictor.to_checkpoint();
        let w = pk.header[2] as usize;
        let shapes = [(nd, w), (w, w), (w, 1)];
        let mut layers = Vec::new();
        for (i, (rows, cols)) in shapes.into_iter().enumerate() {
            layers.push(Layer {
                w: block(&mut pk, &format!("l{i}.weight"), &[rows, cols])?,
                b: block(&mut pk, &format!("l{i}.bias"), &[cols])?,
                norm: None,
                relu: i < 2,
            });
        }
        let target = block(&mut pk, "target", &[2])?;
        Ok(ChainReference {
            decoder,
            d: dims.d,
            predictor: layers,
            mean: target[0],
            std: target[1],
        })
    }

    fn forward(&self, z: &[f64]) -> f64 {
        let mut h = z.to_vec();
        for layer in &self.decoder {
            h = layer.apply(&h);
        }
        for row in h.chunks_mut(self.d) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
            row.iter_mut().for_each(|v| *v = (*v - max).exp() / total);
        }
        for layer in &self.predictor {
            h = layer.apply(&h);
        }
        h[0] * self.std + self.mean
    }
}

fn autodiff(desk: &Desk) -> Result<(bool, String), String> {
    const INSTANCES: u64 = 20;
    let mut worst: Vec<(String, f64)> = Vec::new();
    for case in primitive_cases() {
        worst.push((case.name.clone(), case.worst_error(INSTANCES)?));
    }
    // The closures must be 'static; these copies live for the whole run.
    let vae: &'static Vae = Box::leak(Box::new(desk.vae()?));
    let predictor: &'static Predictor = Box::leak(Box::new(desk.predictor("plogp")?));
    let reference = ChainReference::new(vae, predictor)?;
    let m = vae.dims().m;
    let chain = Case::new(
        "z -> decode -> predict",
        move |rng| vec![random_tensor(rng, &[1, m], -1.5, 1.5)],
        move |g, v| {
            predictor
                .forward(vae, g, v[0], None)
                .expect("chain forward")
        },
        move |x| vec![reference.forward(&x[0])],
    );
    worst.push((chain.name.clone(), chain.worst_error(INSTANCES)?));
    let failing: Vec<String> = worst
        .iter()
        .filter(|(_, e)| !(*e <= TOLERANCE))
        .map(|(n, e)| format!("{n} {e:.2e}"))
        .collect();
    let max = worst.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    let mut detail = format!(
        "{} cases x {INSTANCES} instances, worst relative error {max:.2e} (tolerance {TOLERANCE:.0e})",
        worst.len()
    );
    if !failing.is_empty() {
        detail += &format!("; over tolerance: {}", failing.join(", "));
    }
    Ok((failing.is_empty(), detail))
}

fn ablation(desk: &Desk, vae: &Vae) -> Result<(bool, String), String> {
    let p = &desk.cfg.predictor;
    let data = gen_training_set(vae, &Surrogate::Plogp, p.dataset_size, p.seed).map_err(err)?;
    let (train, heldout) = data.split(p.heldout_fraction, p.seed);
    let decoded = desk.predictor("plogp")?;
    let (latent, _) =
        train_predictor(vae, &train, InputMode::Latent, "plogp", &p.train_config()).map_err(err)?;
    let r_decoded = r_squared(&decoded, vae, &heldout).map_err(err)?;
    let r_latent = r_squared(&latent, vae, &heldout).map_err(err)?;
    let gap = r_decoded - r_latent;
    Ok((
        gap >= 0.05,
        format!("held-out plogp r² decoded {r_decoded:.3}, latent {r_latent:.3}, gap {gap:.3} (need >= 0.05)"),
    ))
}

fn lift(desk: &Desk) -> Result<(bool, String), String> {
    let report = desk.report("maximize")?;
    let k = desk.cfg.bench.top_k;
    let mut margins = Vec::new();
    for i in 1..=k {
        margins.push(
            metric(&report, &format!("top{i}"))? - metric(&report, &format!("random_top{i}"))?,
        );
    }
    let improved = metric(&report, "improved_pct")?;
    let worst = margins.iter().copied().fold(f64::INFINITY, f64::min);
    let shown: Vec<String> = margins.iter().map(|m| format!("{m:.2}")).collect();
    Ok((
        worst >= 1.0 && improved >= 95.0,
        format!(
            "top-{k} plogp margins over random [{}] (need >= 1.0 each), {improved:.1}% of restarts improved (need >= 95)",
            shown.join(", ")
        ),
    ))
}

fn substructure(desk: &Desk) -> Result<(bool, String), String> {
    let o = &desk.cfg.optimize;
    if o.mask_weight != 1000.0 || o.steps != 1000 || desk.cfg.bench.substructure_starts != 100 {
        return Err("desk config must use mask weight 1000, 1000 steps and 100 starts".into());
    }
    let report = desk.report("substructure")?;
    let retained = metric(&report, "retention_pct")?;
    Ok((
        retained >= 95.0,
        format!(
            "{retained:.1}% of 100 masked runs keep the fixed symbols (need >= 95), mean logp change {:.3}",
            metric(&report, "delta_mean")?
        ),
    ))
}

fn similarity(desk: &Desk) -> Result<(bool, String), String> {
    let b = &desk.cfg.bench;
    if b.similarity_deltas != [0.0, 0.2, 0.4, 0.6] || b.similarity_starts != 50 {
        return Err("desk config must use deltas 0, 0.2, 0.4, 0.6 and 50 starts".into());
    }
    let report = desk.report("similarity")?;
    let mut means = Vec::new();
    for delta in &b.similarity_deltas {
        means.push(metric(
            &report,
            &format!("delta_{delta:.1}.improvement_mean"),
        )?);
    }
    let success = metric(&report, "delta_0.0.success_pct")?;
    let monotone = means.windows(2).all(|w| w[1] <= w[0]);
    let shown: Vec<String> = means.iter().map(|m| format!("{m:.3}")).collect();
    Ok((
        success == 100.0 && monotone,
        format!(
            "success at delta 0 {success:.1}%, mean improvement over deltas [{}]",
            shown.join(", ")
        ),
    ))
}

/// Sum of random per-(element, degree) values.
struct TableOracle {
    table: BTreeMap<(Element, usize), f64>,
    direction: Direction,
}

impl TableOracle {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let mut table = BTreeMap::new();
        for e in Element::ALL {
            for degree in 0..=4 {
                table.insert((e, degree), rng.random_range(-1.0..1.0));
            }
        }
        let direction = if rng.random_bool(0.5) {
            Direction::Maximize
        } else {
            Direction::Minimize
        };
        TableOracle { table, direction }
    }
}

impl PropertyOracle for TableOracle {
    fn name(&self) -> &str {
        "table"
    }
    fn direction(&self) -> Direction {
        self.direction
    }
    fn score_batch(&self, mols: &[MolGraph]) -> limo::Result<Vec<ItemScore>> {
        Ok(mols
            .iter()
            .map(|g| {
                Ok((0..g.atom_count())
                    .map(|i| self.table[&(g.element(i), g.degree(i).min(4))])
                    .sum())
            })
            .collect())
    }
}

/// Bonds each new atom to an existing one: `(anchor, element)`.
fn grow(mut g: MolGraph, parts: &[(usize, Element)]) -> MolGraph {
    for &(anchor, e) in parts {
        let atom = g.add_atom(e);
        g.add_bond(anchor, atom, 1);
    }
    g
}

fn chain(elements: &[Element]) -> MolGraph {
    let mut g = MolGraph::new();
    g.add_atom(elements[0]);
    let parts: Vec<(usize, Element)> = elements[1..]
        .iter()
        .enumerate()
        .map(|(i, &e)| (i, e))
        .collect();
    grow(g, &parts)
}

/// `k` ring carbons, then a tail hanging off ring atom 0.
fn ring_with_tail(k: usize, tail: &[Element]) -> MolGraph {
    let mut g = chain(&vec![Element::C; k]);
    g.add_bond(k - 1, 0, 1);
    let mut parts = Vec::new();
    for (i, &e) in tail.iter().enumerate() {
        parts.push((if i == 0 { 0 } else { k + i - 1 }, e));
    }
    grow(g, &parts)
}

/// Four linearly fused cyclopentanes, 14 carbons. Atoms 3, 4, 6, 7, 9 and 10
/// sit on fusion bonds (degree 3); the rest have degree 2.
fn tetraquinane() -> MolGraph {
    let mut g = chain(&[Element::C; 5]);
    g.add_bond(4, 0, 1);
    let g = grow(g, &[(4, Element::C), (5, Element::C), (6, Element::C)]);
    let mut g = grow(g, &[(7, Element::C), (8, Element::C), (9, Element::C)]);
    g.add_bond(7, 3, 1);
    let mut g = grow(g, &[(10, Element::C), (11, Element::C), (12, Element::C)]);
    g.add_bond(10, 6, 1);
    g.add_bond(13, 9, 1);
    g
}

/// Substituents that bring every listed skeleton atom to degree 4, carbons
/// except for one hydroxyl per entry in `hydroxyl`.
fn saturate(g: MolGraph, atoms: &[usize], hydroxyl: &[usize]) -> MolGraph {
    let mut parts = Vec::new();
    for &a in atoms {
        for k in g.degree(a)..4 {
            let e = if k == g.degree(a) && hydroxyl.contains(&a) {
                Element::O
            } else {
                Element::C
            };
            parts.push((a, e));
        }
    }
    grow(g, &parts)
}

enum Cutoff {
    Qed,
    Sa,
    Rings,
}

/// Hand-built molecules next to each filter cutoff. SA′ moves in steps of
/// 0.05, so its neighbours are the grid points either side of the cutoff
/// plus the cutoff itself. The QED′ chains have 38 heavy atoms and no ring.
fn boundary_molecules() -> Vec<(&'static str, Cutoff, MolGraph, bool)> {
    use Element::{C, F, N, O};
    let qed_chain = |heteroatoms: &[(usize, Element)]| {
        let mut atoms = vec![C; 38];
        for &(i, e) in heteroatoms {
            atoms[i] = e;
        }
        chain(&atoms)
    };
    let ethers = |count: usize| (0..count).map(|k| (2 + 3 * k, O)).collect::<Vec<_>>();
    let mut above = ethers(8);
    above.push((30, N));
    let mut below = ethers(10);
    below.push((37, F));

    let fused = tetraquinane();
    let hydroxyls = [0, 2, 5, 8, 11];
    let all: Vec<usize> = (0..14).collect();
    // 13 crowded carbons, 34 atoms.
    let sa_mid = saturate(fused.clone(), &all[..13], &hydroxyls);
    // 13 crowded carbons, 35 atoms.
    let sa_high = grow(sa_mid.clone(), &[(13, C)]);
    // 12 crowded carbons, 37 atoms: two partly substituted ring atoms and
    // three ethyl groups.
    let g = saturate(
        fused,
        &[0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11],
        &[0, 2, 5, 8, 11, 1],
    );
    let n = g.atom_count();
    let sa_low = grow(g, &[(12, C), (13, C), (n - 1, C), (n - 2, C), (n - 3, C)]);

    let tail = [C, C, O, C, C, C, C, O, C, C, C, C, N, C];
    vec![
        ("qed just above", Cutoff::Qed, qed_chain(&above), true),
        ("qed just below", Cutoff::Qed, qed_chain(&below), false),
        ("sa below", Cutoff::Sa, sa_low, true),
        ("sa at cutoff", Cutoff::Sa, sa_mid, false),
        ("sa above", Cutoff::Sa, sa_high, false),
        ("4-ring", Cutoff::Rings, ring_with_tail(4, &tail), false),
        ("5-ring", Cutoff::Rings, ring_with_tail(5, &tail), true),
        ("6-ring", Cutoff::Rings, ring_with_tail(6, &tail), true),
        ("7-ring", Cutoff::Rings, ring_with_tail(7, &tail), false),
    ]
}

fn refinement() -> Result<(bool, String), String> {
    let policy = FilterPolicy::default();
    let mut wrong = Vec::new();
    let molecules = boundary_molecules();
    for (label, cutoff, g, admitted) in &molecules {
        let (qed, sa, rings) = (qed_surrogate(g), sa_surrogate(g), ring_sizes(g));
        let qed_clear = qed > policy.qed_min + 0.01;
        let sa_clear = sa < policy.sa_max - 0.01;
        let rings_clear = rings.iter().all(|s| [5, 6].contains(s));
        let placed = g.validate()
            && match cutoff {
                Cutoff::Qed => (qed - policy.qed_min).abs() <= 0.01 && sa_clear && rings_clear,
                Cutoff::Sa => (sa - policy.sa_max).abs() <= 0.05 + 1e-9 && qed_clear && rings_clear,
                Cutoff::Rings => {
                    rings.len() == 1
                        && label.starts_with(&rings[0].to_string())
                        && qed_clear
                        && sa_clear
                }
            };
        if !placed {
            wrong.push(format!(
                "{label} is not at its boundary (qed {qed:.4}, sa {sa:.2}, rings {rings:?})"
            ));
        } else if policy.admits(g) != *admitted {
            wrong.push(format!("{label}: admitted = {}", !admitted));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worse = 0;
    let mut improved = 0;
    for _ in 0..1000 {
        let g = random_molecule(&mut rng, &SynthParams::druglike());
        let oracle = TableOracle::new(&mut rng);
        let out = finetune(&g, &oracle).map_err(err)?;
        if oracle.direction.better(out.initial_score, out.score) {
            worse += 1;
        }
        if oracle.direction.better(out.score, out.initial_score) {
            improved += 1;
        }
    }
    let mut detail = format!(
        "{}/{} boundary molecules filtered correctly; finetune worse in {worse}/1000 pairs, better in {improved}",
        molecules.len() - wrong.len(),
        molecules.len()
    );
    if !wrong.is_empty() {
        detail += &format!("; {}", wrong.join("; "));
    }
    Ok((wrong.is_empty() && worse == 0, detail))
}

fn thermo() -> Result<(bool, String), String> {
    let t = DEFAULT_TEMPERATURE;
    let rt = GAS_CONSTANT * t;
    let energies = [-12.3, -7.0, -0.5, 0.0, 2.25];
    let single = energies
        .iter()
        .all(|&e| combine_poses(&[e], t).ok() == Some(e));
    let mut worst = 0.0f64;
    for &e in &energies {
        for k in 1..=10 {
            let combined = combine_poses(&vec![e; k], t).map_err(err)?;
            worst = worst.max((combined - (e - rt * (k as f64).ln())).abs());
        }
    }
    let kd0 = kd_from_dg(0.0, t);
    let kd10 = kd_from_dg(-rt * 10f64.ln(), t);
    let rel = (kd10 - 1e8).abs() / 1e8;
    Ok((
        single && worst <= 1e-9 && kd0 == 1e9 && rel <= 1e-3,
        format!(
            "single pose exact: {single}; k equal poses off by {worst:.1e}; kd(0) = {kd0:e} nM; kd(-RT ln 10) = {kd10:.6e} nM"
        ),
    ))
}

fn qed_shift(desk: &Desk, vae: &Vae) -> Result<(bool, String), String> {
    let o = &desk.cfg.optimize;
    let affinity = desk.predictor("mock-affinity")?;
    let qed = desk.predictor("qed")?;
    let sa = desk.predictor("sa")?;
    let predictors = AffinityPredictors {
        affinity: &affinity,
        qed: &qed,
        sa: &sa,
    };
    let weight = |k: &str| o.weights.get(k).copied().unwrap_or(1.0);
    let params = |qed_weight: f64| AffinityParams {
        mode: AffinityMode::Multi,
        affinity_weight: weight("affinity"),
        qed_weight,
        sa_weight: weight("sa"),
        restarts: o.restarts,
        steps: o.steps,
        lr: o.lr,
        seed: o.seed,
        temperature: desk.cfg.bench.temperature,
        filter: desk.cfg.filter.clone(),
    };
    if o.restarts < 200 {
        return Err("desk config must use at least 200 restarts".into());
    }
    let with = task_affinity(
        vae,
        &predictors,
        &Surrogate::MockAffinity,
        &params(weight("qed")),
    )
    .map_err(err)?;
    let without =
        task_affinity(vae, &predictors, &Surrogate::MockAffinity, &params(0.0)).map_err(err)?;
    let (a, b) = (
        metric(&with, "optimized.qed_mean")?,
        metric(&without, "optimized.qed_mean")?,
    );
    Ok((
        a > b,
        format!(
            "mean QED′ of {} optimized molecules: {a:.4} with the QED′ term, {b:.4} without",
            o.restarts
        ),
    ))
}

fn main() -> ExitCode {
    let scratch = tempfile::tempdir().expect("temporary directory");
    let (a, b) = (scratch.path().join("a"), scratch.path().join("b"));
    std::fs::create_dir_all(&a).expect("run directory");
    std::fs::create_dir_all(&b).expect("run directory");

    let mut outcomes = vec![criterion("end-to-end CLI determinism", || {
        end_to_end(&a, &b)
    })];
    let desk = Desk::open(&a);
    let vae = desk.as_ref().map_err(Clone::clone).and_then(Desk::vae);
    let with_desk = |f: &dyn Fn(&Desk, &Vae) -> Result<(bool, String), String>| match (&desk, &vae)
    {
        (Ok(d), Ok(v)) => f(d, v),
        (Err(e), _) | (_, Err(e)) => Err(format!("desk artifacts unavailable: {e}")),
    };

    outcomes.push(criterion("prior sample validity", || {
        with_desk(&|_, v| validity(v))
    }));
    outcomes.push(criterion("codec round trip", codec_round_trip));
    outcomes.push(criterion("autodiff gradcheck", || {
        with_desk(&|d, _| autodiff(d))
    }));
    outcomes.push(criterion("decoder-stacking ablation", || {
        with_desk(&ablation)
    }));
    outcomes.push(criterion("optimization lift", || {
        with_desk(&|d, _| lift(d))
    }));
    outcomes.push(criterion("substructure retention", || {
        with_desk(&|d, _| substructure(d))
    }));
    outcomes.push(criterion("similarity-constrained optimization", || {
        with_desk(&|d, _| similarity(d))
    }));
    outcomes.push(criterion("refinement filter and finetune", refinement));
    outcomes.push(criterion("binding thermodynamics", thermo));
    outcomes.push(criterion("QED shift under multi-objective", || {
        with_desk(&qed_shift)
    }));

    let failed = outcomes.iter().filter(|o| !o.pass).count();
    println!("{} criteria, {failed} failed", outcomes.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
