//! Inference, accuracy reports and the ablation grid.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::net::{batch_logits, NcdModel};
use crate::problem::{ProblemView, CONTEXT_ROWS, ROWS};
use crate::synth::{Attribute, RpmProblem};
use crate::tensor::Float;
use crate::trainer::{initial_model, run_training, TrainConfig};
use crate::{Error, Result};

/// Problems scored per forward pass.
const EVAL_CHUNK: usize = 64;

/// Argmax over the candidate rows; the first maximum wins.
pub fn infer_from_logits(logits: &[Float; ROWS]) -> u8 {
    let mut best = 0;
    for (i, &l) in logits[CONTEXT_ROWS..].iter().enumerate() {
        if l > logits[CONTEXT_ROWS + best] {
            best = i;
        }
    }
    best as u8
}

/// Top candidate logit minus the runner-up.
pub fn margin(logits: &[Float; ROWS]) -> Float {
    let mut c: Vec<Float> = logits[CONTEXT_ROWS..].to_vec();
    c.sort_by(|a, b| b.total_cmp(a));
    c[0] - c[1]
}

pub fn infer(model: &NcdModel, problem: ProblemView<'_>) -> Result<u8> {
    Ok(infer_from_logits(&crate::net::problem_logits(model, problem)?))
}

/// Answers for many problems, in input order.
pub fn infer_batch(model: &NcdModel, problems: &[ProblemView<'_>]) -> Result<Vec<u8>> {
    let logits = chunked_logits(model, problems)?;
    Ok(logits.iter().map(infer_from_logits).collect())
}

fn chunked_logits(model: &NcdModel, problems: &[ProblemView<'_>]) -> Result<Vec<[Float; ROWS]>> {
    let parts: Vec<Result<Vec<[Float; ROWS]>>> = problems.par_chunks(EVAL_CHUNK).map(|chunk| batch_logits(model, chunk)).collect();
    let mut out = Vec::with_capacity(problems.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Tally {
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
}

impl Tally {
    fn add(&mut self, hit: bool) {
        self.n += 1;
        self.correct += usize::from(hit);
        self.accuracy = self.correct as f64 / self.n as f64;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub n: usize,
    pub correct: usize,
    /// Keyed by the full rule set, e.g. `shape=constant,size=progression+1,...`.
    pub per_rule: BTreeMap<String, Tally>,
    /// Keyed by one attribute's rule, e.g. `size=progression+1`.
    pub per_attribute_rule: BTreeMap<String, Tally>,
    pub mean_margin: f64,
    pub config_fingerprint: String,
    pub seed: u64,
}

/// Score `model` on labeled problems.
pub fn evaluate(model: &NcdModel, test: &[RpmProblem], config_fingerprint: &str, seed: u64) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::Data("empty test set".into()));
    }
    let views: Vec<ProblemView> = test.iter().map(RpmProblem::unlabeled).collect();
    let logits = chunked_logits(model, &views)?;
    let mut correct = 0;
    let mut margin_sum = 0.0f64;
    let mut per_rule: BTreeMap<String, Tally> = BTreeMap::new();
    let mut per_attribute_rule: BTreeMap<String, Tally> = BTreeMap::new();
    for (p, l) in test.iter().zip(&logits) {
        let hit = infer_from_logits(l) == p.answer_index;
        correct += usize::from(hit);
        margin_sum += f64::from(margin(l));
        per_rule.entry(p.rules.label()).or_default().add(hit);
        for a in Attribute::ALL {
            per_attribute_rule.entry(format!("{}={}", a.name(), p.rules.get(a).name())).or_default().add(hit);
        }
    }
    Ok(EvalReport {
        accuracy: correct as f64 / test.len() as f64,
        n: test.len(),
        correct,
        per_rule,
        per_attribute_rule,
        mean_margin: margin_sum / test.len() as f64,
        config_fingerprint: config_fingerprint.to_string(),
        seed,
    })
}

impl EvalReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "accuracy     {:.4}  ({}/{})", self.accuracy, self.correct, self.n);
        let _ = writeln!(s, "mean margin  {:.4}", self.mean_margin);
        let _ = writeln!(s, "fingerprint  {}  seed {}", self.config_fingerprint, self.seed);
        let _ = writeln!(s);
        let width = self.per_attribute_rule.keys().map(String::len).max().unwrap_or(0).max(9);
        let _ = writeln!(s, "{:<width$}  {:>6}  {:>8}", "rule", "n", "accuracy");
        for (k, t) in &self.per_attribute_rule {
            let _ = writeln!(s, "{k:<width$}  {:>6}  {:>8.4}", t.n, t.accuracy);
        }
        s
    }
}

/// Fail unless the two shards share no problem id.
pub fn ensure_disjoint(train: &[ProblemView<'_>], test: &[RpmProblem]) -> Result<()> {
    let ids: HashSet<u64> = train.iter().map(|p| p.problem_id()).collect();
    let shared: Vec<u64> = test.iter().map(|p| p.problem_id).filter(|id| ids.contains(id)).take(5).collect();
    if shared.is_empty() {
        Ok(())
    } else {
        Err(Error::Data(format!("train and test shards share problem ids, e.g. {shared:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    /// The initialized model, never trained.
    Untrained,
    NoNegativesNoDecentralization,
    NoNegatives,
    NoDecentralization,
    Full,
    K(u8),
}

impl Variant {
    pub const TABLE: [Variant; 5] =
        [Variant::Untrained, Variant::NoNegativesNoDecentralization, Variant::NoNegatives, Variant::NoDecentralization, Variant::Full];
    pub const K_SWEEP: [u8; 5] = [0, 2, 4, 6, 8];

    pub fn name(self) -> String {
        match self {
            Variant::Untrained => "NCD#".into(),
            Variant::NoNegativesNoDecentralization => "NCD-(NA+D)".into(),
            Variant::NoNegatives => "NCD-NA".into(),
            Variant::NoDecentralization => "NCD-D".into(),
            Variant::Full => "NCD".into(),
            Variant::K(k) => format!("k={k}"),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let v = match s.trim() {
            "NCD#" => Variant::Untrained,
            "NCD-(NA+D)" => Variant::NoNegativesNoDecentralization,
            "NCD-NA" => Variant::NoNegatives,
            "NCD-D" => Variant::NoDecentralization,
            "NCD" => Variant::Full,
            other => {
                let k: u8 = other.strip_prefix("k=")?.parse().ok()?;
                if k > 8 {
                    return None;
                }
                Variant::K(k)
            }
        };
        Some(v)
    }

    /// Changes this variant makes to the base configuration.
    pub fn deltas(self) -> Vec<String> {
        match self {
            Variant::Untrained => vec!["epochs=0".into()],
            Variant::NoNegativesNoDecentralization => vec!["use_negatives=false".into(), "use_decentralization=false".into()],
            Variant::NoNegatives => vec!["use_negatives=false".into()],
            Variant::NoDecentralization => vec!["use_decentralization=false".into()],
            Variant::Full => vec![],
            Variant::K(k) => vec!["use_negatives=true".into(), format!("k={k}")],
        }
    }

    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        match self {
            Variant::Untrained => c.epochs = 0,
            Variant::NoNegativesNoDecentralization => {
                c.use_negatives = false;
                c.use_decentralization = false;
            }
            Variant::NoNegatives => c.use_negatives = false,
            Variant::NoDecentralization => c.use_decentralization = false,
            Variant::Full => {}
            Variant::K(k) => {
                c.use_negatives = true;
                c.k = usize::from(k);
            }
        }
        c
    }
}

pub fn parse_variants(list: &str) -> std::result::Result<Vec<Variant>, String> {
    list.split(',').filter(|s| !s.trim().is_empty()).map(|s| Variant::parse(s).ok_or_else(|| format!("unknown variant {s:?}"))).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub variant: String,
    pub seed: u64,
    pub deltas: Vec<String>,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: String,
    pub seeds: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub runs: Vec<AblationRun>,
    pub summary: Vec<VariantSummary>,
}

/// Train every variant for every seed and score it on `test`.
///
/// Variants run in the given order; `on_run` sees each finished run.
pub fn run_ablation(
    train: &[RpmProblem],
    test: &[RpmProblem],
    base: &TrainConfig,
    variants: &[Variant],
    seeds: &[u64],
    transductive: bool,
    mut on_run: impl FnMut(&AblationRun),
) -> Result<AblationGrid> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(Error::Data("ablation needs at least one variant and one seed".into()));
    }
    let mut views: Vec<ProblemView> = train.iter().map(RpmProblem::unlabeled).collect();
    ensure_disjoint(&views, test)?;
    if transductive {
        views.extend(test.iter().map(RpmProblem::unlabeled));
    }
    let mut runs = Vec::new();
    for &variant in variants {
        for &seed in seeds {
            let config = TrainConfig { seed, ..variant.apply(base) };
            let model = if config.epochs == 0 { initial_model(&config) } else { run_training(&views, &config, None, None)?.state.model };
            let report = evaluate(&model, test, &config.fingerprint(), seed)?;
            let run = AblationRun { variant: variant.name(), seed, deltas: variant.deltas(), report };
            on_run(&run);
            runs.push(run);
        }
    }
    Ok(AblationGrid::from_runs(runs, variants))
}

impl AblationGrid {
    /// Summarise `runs` per variant, in the order of `variants`.
    pub fn from_runs(runs: Vec<AblationRun>, variants: &[Variant]) -> Self {
        let summary = variants
            .iter()
            .filter_map(|v| {
                let accs: Vec<f64> = runs.iter().filter(|r| r.variant == v.name()).map(|r| r.report.accuracy).collect();
                (!accs.is_empty()).then(|| VariantSummary {
                    variant: v.name(),
                    seeds: accs.len(),
                    mean: accs.iter().sum::<f64>() / accs.len() as f64,
                    min: accs.iter().copied().fold(f64::INFINITY, f64::min),
                    max: accs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                })
            })
            .collect();
        Self { runs, summary }
    }

    pub fn mean(&self, variant: Variant) -> Option<f64> {
        self.summary.iter().find(|s| s.variant == variant.name()).map(|s| s.mean)
    }

    /// `k,accuracy,seed` for every k-sweep run.
    pub fn k_sweep_csv(&self) -> String {
        let mut s = String::from("k,accuracy,seed\n");
        for r in &self.runs {
            if let Some(Variant::K(k)) = Variant::parse(&r.variant) {
                let _ = writeln!(s, "{k},{:.6},{}", r.report.accuracy, r.seed);
            }
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<12}  {:>5}  {:>8}  {:>8}  {:>8}", "variant", "seeds", "mean", "min", "max");
        for v in &self.summary {
            let _ = writeln!(s, "{:<12}  {:>5}  {:>8.4}  {:>8.4}  {:>8.4}", v.variant, v.seeds, v.mean, v.min, v.max);
        }
        s
    }

    /// Whether full NCD beats each of its reduced variants on mean accuracy.
    pub fn advisory(&self) -> Option<String> {
        let full = self.mean(Variant::Full)?;
        let mut parts = Vec::new();
        for v in [Variant::NoNegatives, Variant::NoDecentralization, Variant::NoNegativesNoDecentralization, Variant::Untrained] {
            if let Some(m) = self.mean(v) {
                let verdict = if full > m { "pass" } else { "fail" };
                parts.push(format!("NCD {full:.4} > {} {m:.4}: {verdict}", v.name()));
            }
        }
        (!parts.is_empty()).then(|| format!("advisory ordering: {}", parts.join("; ")))
    }
}
