//! Batch runner. Everything is a function of the config and master seed;
//! work fans out over a rayon pool and results are reduced in index order.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{false_positive_rate, paired_metrics, patient0_metrics, score_pair, Analysis, Detector, EpisodeOutcome};
use super::{FalsePositive, PairOutcome, PairedMetrics, Patient0Metrics};
use crate::config::{AttackConfig, CriticSource, ExperimentConfig, PolicySource};
use crate::contagion::{edge_timeline_csv, GraphParams};
use crate::diff::{CriticNet, PolicyNet};
use crate::env::{rollout, Attack};
use crate::episode::{save_episode, AgentId, AttackKind, Episode};
use crate::error::{Error, Result};
use crate::failure::{paired_intervention, AttackPlan};
use crate::policyprov::{fit_probe_critic, scripted_critics, scripted_policies, train_lite, ScriptedGains};
use crate::stage1::{build_profile, detect, timeline_csv, StabilityProfile};

const STREAM_PROFILE: u64 = 1;
const STREAM_ATTACKED: u64 = 2;
const STREAM_HELDOUT: u64 = 3;
const STREAM_PAIRED: u64 = 4;
const STREAM_SINGLE: u64 = 5;

/// Episode seeds for one purpose, drawn from its own stream.
pub fn seeds(master: u64, stream: u64, count: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stream);
    (0..count).map(|_| rng.random()).collect()
}

/// Seed for a one-off episode generated outside the batch protocol.
pub fn single_seed(master: u64) -> u64 {
    seeds(master, STREAM_SINGLE, 1)[0]
}

/// Policies and the critics used by traceback and attacks.
#[derive(Clone, Debug)]
pub struct Models {
    pub policies: Vec<PolicyNet>,
    pub critics: Vec<CriticNet>,
}

/// Policies, critics and the baseline profile.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub policies: Vec<PolicyNet>,
    pub critics: Vec<CriticNet>,
    pub profile: StabilityProfile,
}

/// Builds the models and rolls out the fault-free profile episodes (which
/// also feed probe-critic fitting). Both are returned.
pub fn build_models(cfg: &ExperimentConfig) -> Result<(Models, Vec<Episode>)> {
    cfg.validate()?;
    let env = &cfg.env;
    let (policies, native) = match &cfg.policies.policy {
        PolicySource::Scripted { gains } => {
            let gains = gains.unwrap_or_else(|| ScriptedGains::for_env(env));
            (scripted_policies(env, &gains)?, scripted_critics(env, &gains)?)
        }
        PolicySource::TrainLite { hyper } => {
            let mut hyper = hyper.clone();
            hyper.seed ^= cfg.experiment.master_seed;
            let t = train_lite(env, &hyper)?;
            (t.policies, t.critics)
        }
    };
    let profile_seeds = seeds(cfg.experiment.master_seed, STREAM_PROFILE, cfg.stage1.profile_episodes);
    let clean: Vec<Episode> = profile_seeds
        .par_iter()
        .map(|&s| rollout(env, s, &policies, None))
        .collect::<Result<_>>()?;
    let critics = match &cfg.policies.critic {
        CriticSource::Native => native,
        CriticSource::Probe { fit } => (0..env.n)
            .into_par_iter()
            .map(|i| fit_probe_critic(&clean, AgentId(i), fit))
            .collect::<Result<_>>()?,
    };
    Ok((Models { policies, critics }, clean))
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let (models, clean) = build_models(cfg)?;
    let profile = build_profile(&clean, &models.policies, &cfg.probe, &cfg.stage1.settings)?;
    Ok(Prepared {
        policies: models.policies,
        critics: models.critics,
        profile,
    })
}

/// The configured sustained attack on `source` starting at `start`.
pub fn attack_plan(attack: &AttackConfig, source: AgentId, start: usize) -> AttackPlan {
    AttackPlan {
        agent: source,
        window: (start, start + attack.length - 1),
        kind: AttackKind::WorstAction,
        strength: attack.strength,
        label: Some("sustained".into()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub env_id: String,
    pub n: usize,
    pub master_seed: u64,
    pub patient0: Option<Patient0Metrics>,
    pub false_positive: Option<FalsePositive>,
    pub paired: Option<PairedMetrics>,
    pub variants_planned: usize,
    pub variants_run: usize,
    pub pairs_skipped: usize,
    /// How the AUC columns are computed; they are a stand-in definition.
    pub auc_definition: String,
}

impl MetricsSummary {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    pub summary: MetricsSummary,
    pub outcomes: Vec<EpisodeOutcome>,
    pub pairs: Vec<PairOutcome>,
}

/// Written next to partial results when a run aborts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunStatus {
    pub stage: String,
    pub error: String,
}

pub const FAILURE_MARKER: &str = "FAILED.json";

/// Upper bound on paired-study variants: two per ordered pair per base
/// episode.
pub fn plan_variant_count(cfg: &ExperimentConfig) -> usize {
    let n = cfg.env.n;
    2 * n * n.saturating_sub(1) * cfg.experiment.paired_episodes
}

struct Out {
    root: PathBuf,
}

impl Out {
    fn dir(&self, sub: &str) -> Result<PathBuf> {
        let d = self.root.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        Ok(d)
    }

    fn write(&self, rel: &str, text: &str) -> Result<()> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

/// Runs the whole protocol into `out`. `jobs` caps parallelism; results do
/// not depend on it. On failure a marker is written and the error returned.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    out: &Path,
    jobs: usize,
    progress: &(dyn Fn(&str) + Sync),
) -> Result<ExperimentOutput> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    let out = Out {
        root: out.to_path_buf(),
    };
    let mut stage = String::from("setup");
    let result = pool.install(|| run_inner(cfg, &out, progress, &mut stage));
    if let Err(e) = &result {
        let status = RunStatus {
            stage,
            error: e.to_string(),
        };
        let _ = out.write(
            FAILURE_MARKER,
            &serde_json::to_string_pretty(&status).expect("status serializes"),
        );
    }
    result
}

fn run_inner(
    cfg: &ExperimentConfig,
    out: &Out,
    progress: &(dyn Fn(&str) + Sync),
    stage: &mut String,
) -> Result<ExperimentOutput> {
    cfg.validate()?;
    out.write("config.toml", &cfg.to_toml())?;
    let run = &cfg.experiment;
    let env = &cfg.env;

    *stage = "profile".into();
    progress("building models and stability profile");
    let prep = prepare(cfg)?;
    out.write("profile.json", &prep.profile.to_json())?;
    let det = Detector {
        policies: &prep.policies,
        critics: &prep.critics,
        profile: &prep.profile,
        probe: &cfg.probe,
        traceback: &cfg.stage2,
        graph: &cfg.contagion,
    };

    *stage = "attacked".into();
    let mut outcomes = Vec::new();
    if run.attacked_episodes > 0 {
        progress(&format!("{} attacked episodes", run.attacked_episodes));
        let mut rng = ChaCha8Rng::seed_from_u64(run.master_seed);
        rng.set_stream(STREAM_ATTACKED);
        let plans: Vec<(u64, AttackPlan)> = (0..run.attacked_episodes)
            .map(|_| {
                let seed: u64 = rng.random();
                let source = AgentId(rng.random_range(0..env.n));
                let start = rng.random_range(run.attack.start_min..=run.attack.start_max);
                (seed, attack_plan(&run.attack, source, start))
            })
            .collect();
        for d in ["episodes", "reports", "graphs", "timelines"] {
            out.dir(d)?;
        }
        outcomes = plans
            .par_iter()
            .enumerate()
            .map(|(idx, (seed, plan))| {
                let attack = Attack {
                    plan,
                    critic: &prep.critics[plan.agent.0],
                };
                let ep = rollout(env, *seed, &prep.policies, Some(attack))?;
                let analysis = det.analyze(&ep)?;
                let name = format!("attacked_{idx:04}");
                save_episode(&out.dir("episodes")?.join(format!("{name}.jsonl")), &ep)?;
                write_analysis(&out.root, &name, &analysis, &prep.profile, &cfg.contagion)?;
                Ok(EpisodeOutcome::label(*seed, plan.agent, &analysis.report))
            })
            .collect::<Result<Vec<_>>>()?;
        out.write(
            "outcomes.json",
            &serde_json::to_string_pretty(&outcomes).expect("outcomes serialize"),
        )?;
    }

    *stage = "heldout".into();
    let mut false_positive = None;
    if run.heldout_episodes > 0 {
        progress(&format!("{} held-out fault-free episodes", run.heldout_episodes));
        let reports = seeds(run.master_seed, STREAM_HELDOUT, run.heldout_episodes)
            .par_iter()
            .map(|&s| {
                let ep = rollout(env, s, &prep.policies, None)?;
                Ok(detect(&ep, &prep.policies, &prep.profile, &cfg.probe)?.report)
            })
            .collect::<Result<Vec<_>>>()?;
        false_positive = Some(false_positive_rate(&reports));
    }

    *stage = "paired".into();
    let variants_planned = plan_variant_count(cfg);
    let mut pairs = Vec::new();
    let mut skipped = 0;
    if run.paired_episodes > 0 {
        progress(&format!("paired study: up to {variants_planned} variants"));
        let ordered: Vec<(usize, usize)> = (0..env.n)
            .flat_map(|j| (0..env.n).filter(move |&i| i != j).map(move |i| (j, i)))
            .collect();
        let bases = seeds(run.master_seed, STREAM_PAIRED, run.paired_episodes);
        let scored = bases
            .par_iter()
            .enumerate()
            .map(|(b, &seed)| {
                let base = rollout(env, seed, &prep.policies, None)?;
                let mut found = Vec::new();
                for &(j, i) in &ordered {
                    let Some(v) = paired_intervention(
                        env,
                        &prep.policies,
                        &base,
                        &prep.critics[i],
                        AgentId(j),
                        AgentId(i),
                        &run.intervention,
                    )?
                    else {
                        found.push(None);
                        continue;
                    };
                    if run.log_variants {
                        for (label, ep) in [("critical", &v.critical), ("robust", &v.robust)] {
                            let path = out.dir("variants")?.join(format!("base{b:04}_{j}to{i}_{label}.jsonl"));
                            save_episode(&path, ep)?;
                        }
                    }
                    let window = run.intervention.window;
                    found.push(Some(score_pair(
                        &base,
                        &v,
                        &prep.policies,
                        &prep.critics[j],
                        &prep.profile,
                        &cfg.probe,
                        window,
                    )?));
                }
                Ok(found)
            })
            .collect::<Result<Vec<_>>>()?;
        for p in scored.into_iter().flatten() {
            match p {
                Some(p) => pairs.push(p),
                None => skipped += 1,
            }
        }
        out.write(
            "pairs.json",
            &serde_json::to_string_pretty(&pairs).expect("pairs serialize"),
        )?;
    }

    *stage = "metrics".into();
    let summary = MetricsSummary {
        env_id: env.env_id().to_string(),
        n: env.n,
        master_seed: run.master_seed,
        patient0: (!outcomes.is_empty()).then(|| patient0_metrics(&outcomes)),
        false_positive,
        paired: if pairs.is_empty() {
            None
        } else {
            Some(paired_metrics(&pairs)?)
        },
        variants_planned,
        variants_run: 2 * pairs.len(),
        pairs_skipped: skipped,
        auc_definition:
            "summed drop below the base episode over the intervention window; AUC-Q uses the attacked agent's critic"
                .into(),
    };
    out.write("metrics.json", &summary.to_json())?;
    progress("done");
    Ok(ExperimentOutput {
        summary,
        outcomes,
        pairs,
    })
}

/// Detection report, graph (DOT and JSON) and timeline CSVs for one
/// analysed episode, under `reports/`, `graphs/` and `timelines/`.
pub fn write_analysis(
    root: &Path,
    name: &str,
    analysis: &Analysis,
    profile: &StabilityProfile,
    params: &GraphParams,
) -> Result<()> {
    let out = Out {
        root: root.to_path_buf(),
    };
    out.write(&format!("reports/{name}.json"), &analysis.report.to_json())?;
    out.write(
        &format!("timelines/{name}_signals.csv"),
        &timeline_csv(&analysis.signals, &profile.thresholds())?,
    )?;
    if let Some(g) = &analysis.graph {
        out.write(&format!("graphs/{name}.dot"), &g.to_dot())?;
        out.write(&format!("graphs/{name}.json"), &g.to_json())?;
        let csv = edge_timeline_csv(g, &analysis.pairs, &analysis.signals, profile, params, &analysis.report)?;
        out.write(&format!("timelines/{name}_edges.csv"), &csv)?;
    }
    Ok(())
}
