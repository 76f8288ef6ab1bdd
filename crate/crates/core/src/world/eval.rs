use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::derive_seed;

use super::script::{demo_episode, EpisodeParams, ScriptedController};
use super::sim::{Observation, World};
use super::{WorldSpec, ACTION_DIM};

/// Anything that can drive the world.
pub trait Agent {
    fn reset(&mut self, task: usize, params: &EpisodeParams) -> Result<()>;

    /// Actions to execute, in order, starting from `obs`. `world` is offered
    /// for privileged controllers; learned agents must only read `obs`.
    fn act(&mut self, obs: &Observation, world: &World) -> Result<Vec<[f64; ACTION_DIM]>>;
}

/// The demonstrator wrapped as an agent.
#[derive(Clone, Debug)]
pub struct ScriptedAgent {
    spec: WorldSpec,
    ctl: Option<ScriptedController>,
}

impl ScriptedAgent {
    pub fn new(spec: WorldSpec) -> Self {
        Self { spec, ctl: None }
    }
}

impl Agent for ScriptedAgent {
    fn reset(&mut self, task: usize, params: &EpisodeParams) -> Result<()> {
        self.ctl = Some(ScriptedController::new(self.spec.task(task)?.phases.clone(), *params));
        Ok(())
    }

    fn act(&mut self, _obs: &Observation, world: &World) -> Result<Vec<[f64; ACTION_DIM]>> {
        let ctl = self.ctl.as_mut().ok_or_else(|| Error::Config("scripted agent used before reset".into()))?;
        Ok(vec![ctl.act(world)])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoalReport {
    pub satisfied: Vec<bool>,
    pub q: f64,
}

impl GoalReport {
    pub fn from_flags(satisfied: &[bool]) -> Self {
        let q = if satisfied.is_empty() {
            1.0
        } else {
            satisfied.iter().filter(|&&s| s).count() as f64 / satisfied.len() as f64
        };
        Self { satisfied: satisfied.to_vec(), q }
    }

    pub fn success(&self) -> bool {
        self.satisfied.iter().all(|&s| s)
    }
}

#[derive(Clone, Debug)]
pub struct EpisodeConfig {
    pub task: usize,
    pub params: EpisodeParams,
    /// Overrides the default limit of twice the scripted duration.
    pub time_limit: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub task: usize,
    pub episode: usize,
    pub report: GoalReport,
    pub steps: usize,
    pub time_limit: usize,
    pub distance: f64,
    pub failure: Option<String>,
}

pub const TIME_LIMIT_FACTOR: usize = 2;

/// Steps the world with the agent's actions until every condition holds or
/// the time limit runs out.
pub fn rollout<A: Agent + ?Sized>(agent: &mut A, spec: &WorldSpec, cfg: &EpisodeConfig) -> Result<EpisodeOutcome> {
    let task = spec.task(cfg.task)?;
    let limit = match cfg.time_limit {
        Some(l) => l,
        None => TIME_LIMIT_FACTOR * demo_episode(spec, cfg.task, cfg.params)?.len(),
    };
    let mut world = World::new(task, &spec.landmarks, cfg.params.start_in(task));
    agent.reset(cfg.task, &cfg.params)?;
    let mut failure = None;
    'outer: while world.steps() < limit && !world.done() {
        let actions = match agent.act(&world.observe(), &world) {
            Ok(a) => a,
            Err(Error::Numerical { .. }) => {
                failure = Some("numerical".to_string());
                break;
            }
            Err(e) => return Err(e),
        };
        if actions.is_empty() {
            return Err(Error::Config("agent returned no actions".into()));
        }
        for a in &actions {
            if world.steps() >= limit || world.done() {
                break 'outer;
            }
            if let Err(e) = world.step(a) {
                failure = Some(match e {
                    Error::Numerical { .. } => "numerical".to_string(),
                    other => other.to_string(),
                });
                break 'outer;
            }
        }
    }
    let report = GoalReport::from_flags(world.satisfied());
    Ok(EpisodeOutcome {
        task: cfg.task,
        episode: 0,
        report,
        steps: world.steps(),
        time_limit: limit,
        distance: world.distance(),
        failure,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub task: usize,
    pub name: String,
    pub q: f64,
    pub success_rate: f64,
    pub mean_steps: f64,
    pub mean_distance: f64,
    pub episodes: Vec<EpisodeOutcome>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub q_score: f64,
    pub success_rate: f64,
    pub tasks: Vec<TaskScore>,
}

impl EvalReport {
    pub fn from_outcomes(spec: &WorldSpec, tasks: &[usize], mut outcomes: Vec<EpisodeOutcome>) -> Self {
        outcomes.sort_by_key(|o| (o.task, o.episode));
        let mut scores = Vec::with_capacity(tasks.len());
        for &t in tasks {
            let eps: Vec<EpisodeOutcome> = outcomes.iter().filter(|o| o.task == t).cloned().collect();
            let n = eps.len().max(1) as f64;
            scores.push(TaskScore {
                task: t,
                name: spec.tasks.get(t).map(|s| s.name.clone()).unwrap_or_default(),
                q: eps.iter().map(|e| e.report.q).sum::<f64>() / n,
                success_rate: eps.iter().filter(|e| e.report.success()).count() as f64 / n,
                mean_steps: eps.iter().map(|e| e.steps as f64).sum::<f64>() / n,
                mean_distance: eps.iter().map(|e| e.distance).sum::<f64>() / n,
                episodes: eps,
            });
        }
        let k = scores.len().max(1) as f64;
        Self {
            q_score: scores.iter().map(|s| s.q).sum::<f64>() / k,
            success_rate: scores.iter().map(|s| s.success_rate).sum::<f64>() / k,
            tasks: scores,
        }
    }

    pub fn task(&self, id: usize) -> Option<&TaskScore> {
        self.tasks.iter().find(|t| t.task == id)
    }
}

/// Episode parameters for evaluation episode `index` of `task`.
pub fn eval_params(seed: u64, task: usize, index: usize) -> EpisodeParams {
    EpisodeParams::for_episode(derive_seed(seed, &format!("eval-task-{task}")), index)
}

/// Runs `episodes_per_task` episodes of every listed task, fanning out over
/// up to `threads` workers; each worker builds its own agent.
pub fn evaluate<A, F>(
    make_agent: F,
    spec: &WorldSpec,
    tasks: &[usize],
    episodes_per_task: usize,
    seed: u64,
    threads: usize,
) -> Result<EvalReport>
where
    A: Agent,
    F: Fn() -> Result<A> + Sync,
{
    if episodes_per_task == 0 {
        return Err(Error::Config("evaluation needs at least one episode per task".into()));
    }
    let jobs: Vec<(usize, usize)> = tasks.iter().flat_map(|&t| (0..episodes_per_task).map(move |e| (t, e))).collect();
    let threads = threads.clamp(1, jobs.len().max(1));
    let run = |slice: &[(usize, usize)]| -> Result<Vec<EpisodeOutcome>> {
        let mut agent = make_agent()?;
        slice
            .iter()
            .map(|&(t, e)| {
                let cfg = EpisodeConfig { task: t, params: eval_params(seed, t, e), time_limit: None };
                let mut out = rollout(&mut agent, spec, &cfg)?;
                out.episode = e;
                Ok(out)
            })
            .collect()
    };
    let outcomes: Vec<EpisodeOutcome> = if threads == 1 {
        run(&jobs)?
    } else {
        let per = jobs.len().div_ceil(threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = jobs.chunks(per).map(|c| s.spawn(move || run(c))).collect();
            let mut all = Vec::with_capacity(jobs.len());
            for h in handles {
                all.extend(h.join().expect("evaluation worker panicked")?);
            }
            Ok::<_, Error>(all)
        })?
    };
    Ok(EvalReport::from_outcomes(spec, tasks, outcomes))
}
