//! Multi-seed arms and the ablation suites built from them.

use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use super::config::{routing_name, CoefficientKind, ExperimentConfig, TrainingChoice};
use super::metrics::{aggregate_ci, mean_ci, tail_mean, AggregateCurve};
use super::output::{
    emit_aggregate_csv, emit_csv, emit_grad_csv, emit_svg, write_manifest, EpisodeRow,
};
use super::train::{train, GradSource, RunOptions, RunResult};
use crate::agent::GradientRouting;
use crate::error::{Error, Result};
use crate::prcl::SamplingMechanism;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Frequency,
    Coefficient,
    Sampling,
    Training,
    Routing,
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "frequency" => Self::Frequency,
            "coefficient" => Self::Coefficient,
            "sampling" => Self::Sampling,
            "training" => Self::Training,
            "routing" => Self::Routing,
            _ => return Err(Error::Config(format!("unknown suite `{s}`"))),
        })
    }
}

impl Suite {
    pub fn name(self) -> &'static str {
        match self {
            Self::Frequency => "frequency",
            Self::Coefficient => "coefficient",
            Self::Sampling => "sampling",
            Self::Training => "training",
            Self::Routing => "routing",
        }
    }

    /// The labelled configs this suite compares.
    pub fn arms(self, base: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
        let with = |label: String, f: &dyn Fn(&mut ExperimentConfig)| {
            let mut c = base.clone();
            f(&mut c);
            c.run_name = format!("{}-{label}", self.name());
            (label, c)
        };
        match self {
            Self::Frequency => [0.0, 0.25, 0.5, 0.75, 1.0]
                .into_iter()
                .map(|f| {
                    with(format!("freq{f}"), &move |c| {
                        c.prcl_frequency = f;
                        c.crir_without_cl = false;
                    })
                })
                .collect(),
            Self::Coefficient => [CoefficientKind::Positional, CoefficientKind::Balanced]
                .into_iter()
                .map(|k| {
                    let label = match k {
                        CoefficientKind::Positional => "positional",
                        CoefficientKind::Balanced => "balanced",
                    };
                    with(label.into(), &move |c| c.coefficient = k)
                })
                .collect(),
            Self::Sampling => [
                (SamplingMechanism::Mixed, "mixed"),
                (SamplingMechanism::Divided, "divided"),
                (SamplingMechanism::Combined, "combined"),
            ]
            .into_iter()
            .map(|(m, label)| with(label.into(), &move |c| c.sampling = m))
            .collect(),
            Self::Training => {
                let mut arms = vec![with("auxiliary".into(), &|c| {
                    c.training = TrainingChoice::Auxiliary
                })];
                for g in [0.0, 0.5, 1.0] {
                    arms.push(with(format!("constrained-gamma{g}"), &move |c| {
                        c.training = TrainingChoice::Constrained;
                        c.gamma_prcl = g;
                        c.gradient_routing = GradientRouting::Both;
                    }));
                }
                arms
            }
            Self::Routing => [
                GradientRouting::OnlyRl,
                GradientRouting::OnlyPrcl,
                GradientRouting::Both,
            ]
            .into_iter()
            .map(|r| {
                with(routing_name(r).into(), &move |c| {
                    c.gradient_routing = r;
                    c.training = TrainingChoice::Auxiliary;
                })
            })
            .collect(),
        }
    }
}

/// The runs of one labelled config across seeds.
#[derive(Debug, Clone)]
pub struct ArmResult {
    pub label: String,
    pub config: ExperimentConfig,
    pub runs: Vec<RunResult>,
}

impl ArmResult {
    pub fn rewards(&self) -> Vec<Vec<f64>> {
        self.runs
            .iter()
            .map(|r| r.episodes.iter().map(|m| m.cumulative_reward).collect())
            .collect()
    }

    pub fn ctrs(&self) -> Vec<Vec<f64>> {
        self.runs
            .iter()
            .map(|r| r.episodes.iter().map(|m| m.ctr).collect())
            .collect()
    }

    /// Mean and 95% half-width across seeds of each run's mean reward over
    /// its final `fraction` of episodes.
    pub fn final_reward(&self, fraction: f64) -> Option<(f64, f64)> {
        let tails: Option<Vec<f64>> = self
            .rewards()
            .iter()
            .map(|r| tail_mean(r, fraction))
            .collect();
        tails.filter(|t| !t.is_empty()).map(|t| mean_ci(&t))
    }

    pub fn run_id(&self, seed: u64) -> String {
        format!("{}-s{seed}", self.config.run_name)
    }
}

/// Runs every (arm, seed) pair on up to `jobs` threads. Results come back in
/// arm order, each arm's runs in seed order.
pub fn run_arms(
    arms: &[(String, ExperimentConfig)],
    options: RunOptions,
    jobs: usize,
) -> Result<Vec<ArmResult>> {
    let tasks: Vec<(usize, u64)> = arms
        .iter()
        .enumerate()
        .flat_map(|(a, (_, c))| c.seed_list().into_iter().map(move |s| (a, s)))
        .collect();
    for (_, c) in arms {
        c.validate()?;
    }
    let results: Vec<Mutex<Option<Result<RunResult>>>> =
        tasks.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let worker = || loop {
        let k = next.fetch_add(1, Ordering::SeqCst);
        let Some(&(a, seed)) = tasks.get(k) else {
            break;
        };
        let (label, config) = &arms[a];
        log::info!("run {label} seed {seed}");
        let r = train(config, seed, options, |_| {});
        *results[k].lock().unwrap() = Some(r);
    };
    std::thread::scope(|s| {
        for _ in 0..jobs.max(1).min(tasks.len().max(1)) {
            s.spawn(worker);
        }
    });
    let mut out: Vec<ArmResult> = arms
        .iter()
        .map(|(label, config)| ArmResult {
            label: label.clone(),
            config: config.clone(),
            runs: Vec::new(),
        })
        .collect();
    for ((a, _), slot) in tasks.iter().zip(results) {
        let r = slot.into_inner().unwrap().expect("every task ran")?;
        out[*a].runs.push(r);
    }
    Ok(out)
}

fn episode_rows(arm: &ArmResult, run: &RunResult) -> Vec<EpisodeRow> {
    let n = run.episodes.len();
    let mut sums = vec![[(0.0, 0usize); 2]; n];
    for g in &run.grad_norms {
        let k = match g.source {
            GradSource::Rl => 0,
            GradSource::Prcl => 1,
        };
        sums[g.episode][k].0 += g.grad_norm;
        sums[g.episode][k].1 += 1;
    }
    let avg = |(s, c): (f64, usize)| (c > 0).then(|| s / c as f64);
    run.episodes
        .iter()
        .zip(sums)
        .map(|(m, s)| EpisodeRow {
            run_id: arm.run_id(run.seed),
            metrics: m.clone(),
            grad_norm_rl: avg(s[0]),
            grad_norm_prcl: avg(s[1]),
        })
        .collect()
}

/// Writes per-run CSVs and manifests, the aggregate CSV, one SVG per metric
/// and, when asked, the long-form gradient-norm CSV.
pub fn write_outputs(title: &str, arms: &[ArmResult], with_grads: bool, out: &Path) -> Result<()> {
    let runs_dir = out.join("runs");
    std::fs::create_dir_all(&runs_dir)?;
    let mut reward_curves = Vec::new();
    let mut ctr_curves = Vec::new();
    for arm in arms {
        for run in &arm.runs {
            let id = arm.run_id(run.seed);
            emit_csv(
                &episode_rows(arm, run),
                with_grads,
                runs_dir.join(format!("{id}.csv")),
            )?;
            write_manifest(
                &arm.config,
                &[run.seed],
                std::slice::from_ref(&id),
                runs_dir.join(format!("{id}.manifest.txt")),
            )?;
        }
        if arm.runs.len() >= 2 {
            let w = arm.config.smoothing_window;
            reward_curves.push(aggregate_ci(&arm.label, &arm.rewards(), w)?);
            ctr_curves.push(aggregate_ci(&arm.label, &arm.ctrs(), w)?);
        }
    }
    if !reward_curves.is_empty() {
        let mut all: Vec<AggregateCurve> = Vec::new();
        for (r, c) in reward_curves.iter().zip(&ctr_curves) {
            all.push(AggregateCurve {
                label: format!("{}:cumulative_reward", r.label),
                ..r.clone()
            });
            all.push(AggregateCurve {
                label: format!("{}:ctr", c.label),
                ..c.clone()
            });
        }
        emit_aggregate_csv(&all, out.join("aggregate.csv"))?;
        emit_svg(
            &format!("{title}: episode reward"),
            "cumulative reward",
            &reward_curves,
            out.join("reward.svg"),
        )?;
        emit_svg(
            &format!("{title}: CTR"),
            "CTR",
            &ctr_curves,
            out.join("ctr.svg"),
        )?;
    }
    if with_grads {
        let logs: Vec<(String, u64, &[_])> = arms
            .iter()
            .flat_map(|a| {
                a.runs
                    .iter()
                    .map(move |r| (a.run_id(r.seed), r.seed, r.grad_norms.as_slice()))
            })
            .collect();
        emit_grad_csv(&logs, out.join("grad_norms.csv"))?;
    }
    Ok(())
}

/// Runs one suite against `base` and writes its outputs under `out`.
pub fn run_ablation(
    suite: Suite,
    base: &ExperimentConfig,
    out: &Path,
    jobs: usize,
) -> Result<Vec<ArmResult>> {
    let arms = suite.arms(base);
    let results = run_arms(&arms, RunOptions::default(), jobs)?;
    write_outputs(suite.name(), &results, suite == Suite::Routing, out)?;
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    #[allow(clippy::approx_constant)]
    fn suite_grids() {
        let base = ExperimentConfig::default();
        assert_eq!(Suite::Frequency.arms(&base).len(), 5);
        assert_eq!(Suite::Coefficient.arms(&base).len(), 2);
        assert_eq!(Suite::Sampling.arms(&base).len(), 3);
        assert_eq!(Suite::Training.arms(&base).len(), 4);
        assert_eq!(Suite::Routing.arms(&base).len(), 3);
        let bal = &Suite::Coefficient.arms(&base)[1].1;
        assert!((bal.strategy().coefficient(7) - 0.3183).abs() < 1e-4);
        for (_, c) in Suite::Training.arms(&base) {
            c.validate().unwrap();
        }
    }

    #[test]
    fn unknown_suite_rejected() {
        assert!("speed".parse::<Suite>().is_err());
        assert_eq!("routing".parse::<Suite>().unwrap(), Suite::Routing);
    }
}
