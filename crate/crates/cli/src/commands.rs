use std::path::{Path, PathBuf};

use anyhow::Result;
use chanfuse::bayesopt::{run_bayesopt, BoOutcome};
use chanfuse::cem::{resume_cem, run_cem, CemOutcome, CemState};
use chanfuse::dirichlet::DirichletParams;
use chanfuse::fusion::merge_all;
use chanfuse::ingest::{validate_dataset, write_dataset, LoadReport, ValidationReport};
use chanfuse::metrics::{
    evaluate, item_coverage, jaccard_matrix, rbo_matrix, EvalReport, FusionObjective, DEFAULT_PERSISTENCE,
};
use chanfuse::policy::{build_states, infer_weights, train_pg, PgEpoch, PolicyCheckpoint};
use chanfuse::synth::{generate_benchmark, split_users, SyntheticSpec};
use chanfuse::{Dataset, PersonalizedWeights, WeightVector, Weights};
use serde::Serialize;

use crate::config::{read_json, Optimizer, RunConfig};
use crate::data::{self, Manifest, WeightsFile, MANIFEST};
use crate::Invalid;

#[derive(Debug, Serialize)]
struct ChannelWeight {
    channel: String,
    weight: f64,
}

fn weight_table(ds: &Dataset, w: &WeightVector) -> Vec<ChannelWeight> {
    ds.channel_names()
        .into_iter()
        .zip(w.as_slice())
        .map(|(channel, &weight)| ChannelWeight { channel, weight })
        .collect()
}

fn print_weights(ds: &Dataset, w: &WeightVector) {
    for row in weight_table(ds, w) {
        println!("  {:<16} {:.4}", row.channel, row.weight);
    }
}

#[derive(Debug, Serialize)]
struct DatasetSummary {
    users: usize,
    items: usize,
    depth: usize,
    channels: Vec<String>,
    load: LoadReport,
}

impl DatasetSummary {
    fn new(ds: &Dataset, load: LoadReport) -> Self {
        DatasetSummary {
            users: ds.n_users(),
            items: ds.item_universe_size(),
            depth: ds.max_depth(),
            channels: ds.channel_names(),
            load,
        }
    }
}

/// User index sets for fitting, model selection and reporting.
#[derive(Debug)]
struct Parts {
    train: Vec<usize>,
    select: Vec<usize>,
    eval: Vec<usize>,
    sizes: [usize; 3],
}

fn parts(cfg: &RunConfig, n: usize) -> Result<Parts> {
    let (train, select, eval) = match cfg.split.as_deref() {
        None => {
            let all: Vec<usize> = (0..n).collect();
            (all.clone(), all.clone(), all)
        }
        Some(f) if f.len() == 2 || f.len() == 3 => {
            let mut p = split_users(n, f, cfg.seed)?;
            if p.iter().any(|s| s.is_empty()) {
                return Err(Invalid(format!("split {f:?} leaves a part empty for {n} users")).into());
            }
            let eval = p.pop().unwrap();
            let select = if p.len() == 2 { p.pop().unwrap() } else { eval.clone() };
            (p.pop().unwrap(), select, eval)
        }
        Some(f) => return Err(Invalid(format!("split needs 2 or 3 fractions, got {f:?}")).into()),
    };
    Ok(Parts {
        sizes: [train.len(), select.len(), eval.len()],
        train,
        select,
        eval,
    })
}

#[derive(Debug, Serialize)]
struct Scores {
    train: f64,
    eval: EvalReport,
}

fn scores(ds: &Dataset, cfg: &RunConfig, p: &Parts, weights: Weights<'_>) -> Result<Scores> {
    let train = evaluate(ds, weights, cfg.l, &p.train)?.mean(cfg.metric);
    let mut eval = evaluate(ds, weights, cfg.l, &p.eval)?;
    eval.per_user.clear();
    Ok(Scores { train, eval })
}

#[derive(Debug, Serialize)]
struct OptimizeReport<'a, T: Serialize> {
    command: String,
    seed: u64,
    config: &'a RunConfig,
    dataset: DatasetSummary,
    split: [usize; 3],
    weights: Vec<ChannelWeight>,
    scores: Scores,
    result: T,
}

fn cem_history(path: &Path, out: &CemOutcome) -> Result<()> {
    let header: Vec<String> = ["iter", "mean", "best", "gamma", "elites", "eta"].map(String::from).to_vec();
    let rows: Vec<Vec<String>> = out
        .state
        .history
        .iter()
        .map(|h| {
            vec![
                h.iter.to_string(),
                h.mean_score.to_string(),
                h.best_score.to_string(),
                h.gamma.to_string(),
                h.elites.to_string(),
                h.eta.to_string(),
            ]
        })
        .collect();
    data::write_table(path, &header, &rows)
}

fn bayes_trace(path: &Path, out: &BoOutcome) -> Result<()> {
    let k = out.beta.len();
    let mut header: Vec<String> = ["call", "score", "ei"].map(String::from).to_vec();
    header.extend((0..k).map(|i| format!("beta_{i}")));
    let rows: Vec<Vec<String>> = out
        .trace
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let mut row = vec![i.to_string(), c.score.to_string(), c.ei.map(|e| e.to_string()).unwrap_or_default()];
            row.extend(c.beta.iter().map(|b| b.to_string()));
            row
        })
        .collect();
    data::write_table(path, &header, &rows)
}

fn pg_history(path: &Path, history: &[PgEpoch]) -> Result<()> {
    let header: Vec<String> = [
        "epoch",
        "mean_loss",
        "mean_reward",
        "select_metric",
        "select_penalty",
        "select_score",
    ]
    .map(String::from)
    .to_vec();
    let rows: Vec<Vec<String>> = history
        .iter()
        .map(|e| {
            vec![
                e.epoch.to_string(),
                e.mean_loss.to_string(),
                e.mean_reward.to_string(),
                e.select.metric.to_string(),
                e.select.penalty.to_string(),
                e.select_score.to_string(),
            ]
        })
        .collect();
    data::write_table(path, &header, &rows)
}

fn run_cem_stage(ds: &Dataset, cfg: &RunConfig, p: &Parts, resume: Option<&Path>) -> Result<CemOutcome> {
    let obj = FusionObjective::new(ds, p.train.clone(), cfg.l, cfg.metric);
    let cem_cfg = cfg.cem.as_ref().expect("resolved config");
    let out = match resume {
        Some(path) => {
            let state: CemState = read_json(path)?;
            log::info!("resuming CEM at iteration {}", state.iteration);
            resume_cem(&obj, cem_cfg, state)?
        }
        None => run_cem(&obj, cem_cfg)?,
    };
    log::info!(
        "CEM finished after {} iterations, best score {:.4}",
        out.state.iteration,
        out.state.best_score
    );
    Ok(out)
}

fn run_bayes_stage(ds: &Dataset, cfg: &RunConfig, p: &Parts, start: &DirichletParams) -> Result<BoOutcome> {
    let obj = FusionObjective::new(ds, p.train.clone(), cfg.l, cfg.metric);
    Ok(run_bayesopt(&obj, start, cfg.bayes.as_ref().expect("resolved config"))?)
}

#[derive(Debug, Serialize)]
struct BayesResult {
    start_alpha: Vec<f64>,
    start_source: String,
    cem: Option<CemOutcome>,
    bayes: BoOutcome,
}

fn bayes_start(ds: &Dataset, cfg: &RunConfig, p: &Parts) -> Result<(DirichletParams, String, Option<CemOutcome>)> {
    match &cfg.start {
        Some(path) => {
            let state: CemState = read_json(path)?;
            if state.best_alpha.len() != ds.n_channels() {
                return Err(Invalid(format!("{} does not match the channel count", path.display())).into());
            }
            Ok((state.best_alpha, path.display().to_string(), None))
        }
        None => {
            let cem = run_cem_stage(ds, cfg, p, None)?;
            Ok((cem.state.best_alpha.clone(), "cem".into(), Some(cem)))
        }
    }
}

#[derive(Debug, Serialize)]
struct PgResult {
    global_source: String,
    global_weights: Vec<f64>,
    global_eval: Scores,
    best_epoch: usize,
    best_score: f64,
    history: Vec<PgEpoch>,
}

struct RunContext<'a> {
    command: String,
    cfg: &'a RunConfig,
    ds: &'a Dataset,
    load: &'a LoadReport,
    split: [usize; 3],
}

impl<'a> RunContext<'a> {
    fn report<T: Serialize>(&self, weights: &WeightVector, scores: Scores, result: T) -> OptimizeReport<'a, T> {
        OptimizeReport {
            command: self.command.clone(),
            seed: self.cfg.seed,
            config: self.cfg,
            dataset: DatasetSummary::new(self.ds, self.load.clone()),
            split: self.split,
            weights: weight_table(self.ds, weights),
            scores,
            result,
        }
    }
}

pub fn optimize(cfg: &RunConfig, opt: Optimizer, resume: Option<&Path>) -> Result<()> {
    let (ds, load) = data::load(&cfg.data)?;
    let p = parts(cfg, ds.n_users())?;
    let out_dir = &cfg.out;
    std::fs::create_dir_all(out_dir)?;
    let run = RunContext {
        command: format!("optimize {}", opt.name()),
        cfg,
        ds: &ds,
        load: &load,
        split: p.sizes,
    };
    match opt {
        Optimizer::Cem => {
            let out = run_cem_stage(&ds, cfg, &p, resume)?;
            let s = scores(&ds, cfg, &p, Weights::Global(&out.weights))?;
            println!(
                "cem: {} iterations, train {:.4}, eval {:.4}",
                out.state.iteration,
                s.train,
                s.eval.mean(cfg.metric)
            );
            print_weights(&ds, &out.weights);
            data::write_json(&out_dir.join("weights.json"), &WeightsFile::new(&out.weights, &ds, "cem"))?;
            data::write_json(&out_dir.join("checkpoint.json"), &out.state)?;
            cem_history(&out_dir.join("cem_history.csv"), &out)?;
            data::write_json(&out_dir.join("cem.json"), &run.report(&out.weights, s, &out))?;
        }
        Optimizer::Bayes => {
            let (start, start_source, cem) = bayes_start(&ds, cfg, &p)?;
            let bo = run_bayes_stage(&ds, cfg, &p, &start)?;
            let s = scores(&ds, cfg, &p, Weights::Global(&bo.weights))?;
            println!(
                "bayes: {} evaluations, train {:.4} (start {:.4}), eval {:.4}",
                bo.trace.len(),
                bo.best_score,
                bo.trace[0].score,
                s.eval.mean(cfg.metric)
            );
            print_weights(&ds, &bo.weights);
            data::write_json(&out_dir.join("weights.json"), &WeightsFile::new(&bo.weights, &ds, "bayes"))?;
            bayes_trace(&out_dir.join("bayes_trace.csv"), &bo)?;
            let weights = bo.weights.clone();
            let result = BayesResult {
                start_alpha: start.as_slice().to_vec(),
                start_source,
                cem,
                bayes: bo,
            };
            data::write_json(&out_dir.join("bayes.json"), &run.report(&weights, s, result))?;
        }
        Optimizer::Pg => {
            let pg_cfg = cfg.pg.as_ref().expect("resolved config");
            let (global, global_source) = match &cfg.global {
                Some(path) => (data::read_weights(path, &ds)?, path.display().to_string()),
                None => {
                    let (start, _, _) = bayes_start(&ds, cfg, &p)?;
                    (run_bayes_stage(&ds, cfg, &p, &start)?.weights, "cem+bayes".to_string())
                }
            };
            let states = build_states(&ds, pg_cfg.top_m)?;
            let trained = train_pg(&ds, &states, &p.train, &p.select, &global, pg_cfg, cfg.l)?;
            let personalized = infer_weights(&trained.generator, &ds, &states)?;
            let s = scores(&ds, cfg, &p, Weights::Personalized(&personalized))?;
            let global_eval = scores(&ds, cfg, &p, Weights::Global(&global))?;
            println!(
                "pg: best epoch {}, eval {:.4} (global anchor {:.4})",
                trained.best_epoch,
                s.eval.mean(cfg.metric),
                global_eval.eval.mean(cfg.metric)
            );
            print_weights(&ds, &global);
            let checkpoint: PolicyCheckpoint = trained.generator.to_checkpoint();
            data::write_json(&out_dir.join("policy.json"), &checkpoint)?;
            data::write_personalized(&out_dir.join("personalized.jsonl"), &personalized)?;
            pg_history(&out_dir.join("pg_history.csv"), &trained.history)?;
            let result = PgResult {
                global_source,
                global_weights: global.as_slice().to_vec(),
                global_eval,
                best_epoch: trained.best_epoch,
                best_score: trained.best_score,
                history: trained.history,
            };
            data::write_json(&out_dir.join("pg.json"), &run.report(&global, s, result))?;
        }
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvalOutput<'a> {
    command: &'static str,
    seed: u64,
    config: &'a RunConfig,
    weights_source: String,
    weights: Option<Vec<ChannelWeight>>,
    report: EvalReport,
}

pub enum WeightSource {
    Global(PathBuf),
    Personalized(PathBuf),
}

pub fn eval(cfg: &RunConfig, source: &WeightSource, per_user: bool) -> Result<()> {
    let (ds, _) = data::load(&cfg.data)?;
    let users = ds.all_users();
    let (mut report, table, name) = match source {
        WeightSource::Global(path) => {
            let w = data::read_weights(path, &ds)?;
            let r = evaluate(&ds, Weights::Global(&w), cfg.l, &users)?;
            (r, Some(weight_table(&ds, &w)), path.display().to_string())
        }
        WeightSource::Personalized(path) => {
            let pw: PersonalizedWeights = data::read_personalized(path)?;
            let r = evaluate(&ds, Weights::Personalized(&pw), cfg.l, &users)?;
            (r, None, path.display().to_string())
        }
    };
    if !per_user {
        report.per_user.clear();
    }
    println!(
        "eval over {} users at L={}: recall {:.4}, precision {:.4}, f1 {:.4}",
        report.user_count, report.l, report.mean_recall, report.mean_precision, report.mean_f1
    );
    let output = EvalOutput {
        command: "eval",
        seed: cfg.seed,
        config: cfg,
        weights_source: name,
        weights: table,
        report,
    };
    data::write_json(&cfg.out.join("eval.json"), &output)
}

#[derive(Debug, Serialize)]
struct Coverage {
    fused: f64,
    per_channel: Vec<ChannelWeight>,
}

#[derive(Debug, Serialize)]
struct AnalyzeOutput<'a> {
    command: &'static str,
    seed: u64,
    config: &'a RunConfig,
    channels: Vec<String>,
    persistence: f64,
    depth: usize,
    jaccard: Vec<Vec<f64>>,
    rbo: Vec<Vec<f64>>,
    weights: Vec<ChannelWeight>,
    coverage: Coverage,
}

pub struct AnalyzeOptions {
    pub weights: Option<PathBuf>,
    pub persistence: Option<f64>,
    pub depth: Option<usize>,
    pub csv: Option<PathBuf>,
}

pub fn analyze(cfg: &RunConfig, opts: &AnalyzeOptions) -> Result<()> {
    let (ds, _) = data::load(&cfg.data)?;
    let k = ds.n_channels();
    let w = match &opts.weights {
        Some(path) => data::read_weights(path, &ds)?,
        None => WeightVector::uniform(k),
    };
    let p = opts.persistence.unwrap_or(DEFAULT_PERSISTENCE);
    let depth = opts.depth.unwrap_or(ds.n_users());
    let jaccard = jaccard_matrix(&ds);
    let rbo = rbo_matrix(&ds, &ds.truth, p, depth)?;
    let universe = ds.item_universe_size();
    let coverage_of = |w: &WeightVector| -> Result<f64> {
        Ok(item_coverage(&merge_all(&ds, Weights::Global(w), cfg.l)?, universe)?)
    };
    let names = ds.channel_names();
    let per_channel = (0..k)
        .map(|c| {
            Ok(ChannelWeight {
                channel: names[c].clone(),
                weight: coverage_of(&WeightVector::one_hot(k, c))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let coverage = Coverage {
        fused: coverage_of(&w)?,
        per_channel,
    };
    println!("coverage at L={}: fused {:.4}", cfg.l, coverage.fused);
    for c in &coverage.per_channel {
        println!("  {:<16} {:.4}", c.channel, c.weight);
    }
    if let Some(path) = &opts.csv {
        let header: Vec<String> = ["matrix", "row", "col", "value"].map(String::from).to_vec();
        let mut rows = Vec::new();
        for (label, m) in [("jaccard", &jaccard), ("rbo", &rbo)] {
            for (i, row) in m.iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    rows.push(vec![label.to_string(), names[i].clone(), names[j].clone(), v.to_string()]);
                }
            }
        }
        data::write_table(path, &header, &rows)?;
    }
    let output = AnalyzeOutput {
        command: "analyze",
        seed: cfg.seed,
        config: cfg,
        channels: names.clone(),
        persistence: p,
        depth,
        jaccard,
        rbo,
        weights: weight_table(&ds, &w),
        coverage,
    };
    data::write_json(&cfg.out.join("analyze.json"), &output)
}

#[derive(Debug, Serialize)]
struct SynthOutput {
    command: &'static str,
    seed: u64,
    spec: SyntheticSpec,
    manifest: Manifest,
    validation: ValidationReport,
}

pub fn synth(spec: SyntheticSpec, out: &Path) -> Result<()> {
    let ds = generate_benchmark(&spec)?;
    let written = write_dataset(&ds, out)?;
    let manifest = Manifest::relative_to(&written, out);
    data::write_json(&out.join(MANIFEST), &manifest)?;
    data::write_json(&out.join("spec.json"), &spec)?;
    let validation = validate_dataset(&ds, true);
    println!(
        "synth: {} users, {} items, {} channels of depth {} written to {}",
        ds.n_users(),
        ds.item_universe_size(),
        ds.n_channels(),
        ds.max_depth(),
        out.display()
    );
    data::write_json(
        &out.join("synth.json"),
        &SynthOutput {
            command: "synth",
            seed: spec.seed,
            spec,
            manifest,
            validation,
        },
    )
}
