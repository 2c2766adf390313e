//! Closed-loop evaluation on the planar tabletop: an environment driven by
//! state deltas, five-task chains and success-rate metrics.

use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{LanguageInstruction, Observation, RobotState, STATE_DIMS};
use crate::episode::arm::{self, ArmPose, JOINT_LIMITS};
use crate::episode::generate::{robot_state, robot_trajectory, NATIVE_FPS, OBS_SIZE, STORED_FPS};
use crate::episode::task::{feasible_tasks, sample_world, HOME};
use crate::episode::world::{render, Effector};
use crate::episode::{derive_seed, subsample_indices, Palette, TaskSpec, World};
use crate::error::{Error, Result};
use crate::model::{Model, Sequence, Slots};
use crate::par;

pub const CHAIN_LEN: usize = 5;
pub const DEFAULT_MAX_STEPS: usize = 120;

pub type Action = [f64; STATE_DIMS];

#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    pub joints: [f64; 3],
    pub gripper: f64,
    pub world: World,
    pub steps: usize,
}

impl EnvState {
    pub fn new(world: World, effector: [f64; 2]) -> Self {
        let gripper = if world.held.is_some() { 1.0 } else { 0.0 };
        let joints = crate::episode::generate::joints_at(effector);
        Self { joints, gripper, world, steps: 0 }
    }

    pub fn state(&self) -> RobotState {
        robot_state(self.joints, self.gripper)
    }

    pub fn effector(&self) -> [f64; 2] {
        let p = arm::forward(self.joints);
        [p.x, p.y]
    }

    pub fn render(&self, palette: Palette) -> Observation {
        render(&self.world, &Effector::Robot { joints: self.joints, gripper: self.gripper }, palette, OBS_SIZE)
    }
}

/// Applies one state delta.
///
/// The pose part moves the tool to the commanded Cartesian pose through
/// inverse kinematics (with reach and joint clamping); the joint part of the
/// action is implied by the pose and ignored. The gripper closes when the
/// commanded value reaches 0.5. Returns whether any clamp applied.
pub fn env_step(env: &EnvState, action: &Action) -> Result<(EnvState, bool)> {
    if action.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input(format!("non-finite action {action:?}")));
    }
    let mut next = env.clone();
    next.steps += 1;
    let mut clamped = false;
    if action[..3].iter().any(|&v| v != 0.0) {
        let s = env.state();
        let target = ArmPose { x: s.pose[0] + action[0], y: s.pose[1] + action[1], heading: s.pose[2] + action[2] };
        let (j, c) = arm::inverse(target);
        if c {
            log::debug!("action {action:?} clamped to joints {j:?}");
        }
        clamped = c;
        next.joints = j;
        let p = next.effector();
        next.world.carry(p);
    }
    let grip = if env.gripper + action[6] >= 0.5 { 1.0 } else { 0.0 };
    if grip != env.gripper {
        next.gripper = grip;
        let p = next.effector();
        next.world.set_grip(grip == 1.0, p);
    }
    Ok((next, clamped))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskChain {
    pub tasks: Vec<TaskSpec>,
    pub seed: u64,
}

impl TaskChain {
    pub fn initial_state(&self) -> EnvState {
        EnvState::new(self.tasks[0].world.clone(), self.tasks[0].start)
    }

    pub fn palette(&self) -> Palette {
        self.tasks[0].palette
    }
}

/// Samples a chain of five tasks that the scripted expert completes in
/// order, starting with nothing held and the arm at its home position.
pub fn sample_chain(seed: u64, palettes: &[Palette], unseen: bool) -> TaskChain {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let palette = *palettes.choose(&mut rng).expect("at least one palette");
    'scene: loop {
        let (mut world, _) = sample_world(&mut rng);
        world.held = None;
        let mut p = HOME;
        let mut tasks = Vec::with_capacity(CHAIN_LEN);
        while tasks.len() < CHAIN_LEN {
            let mut found = None;
            for _ in 0..8 {
                let options = feasible_tasks(&world);
                let mut templates: Vec<&str> = options.iter().map(|t| t.template_id()).collect();
                templates.dedup();
                let Some(&template) = templates.choose(&mut rng) else { continue 'scene };
                let variants: Vec<_> = options.iter().filter(|t| t.template_id() == template).collect();
                let task = **variants.choose(&mut rng).expect("non-empty");
                let spec = TaskSpec::new(task, world.clone(), p, palette, unseen);
                if let Ok(traj) = robot_trajectory(&spec) {
                    found = Some((spec, traj));
                    break;
                }
            }
            let Some((spec, traj)) = found else { continue 'scene };
            let (w, s) = traj.last().expect("non-empty trajectory");
            world = w.clone();
            p = [s.pose[0], s.pose[1]];
            tasks.push(spec);
        }
        return TaskChain { tasks, seed };
    }
}

pub fn sample_chains(n: usize, seed: u64, palettes: &[Palette], unseen: bool) -> Vec<TaskChain> {
    let idx: Vec<u64> = (0..n as u64).collect();
    par::map(&idx, |&i| sample_chain(derive_seed(seed, 11, i), palettes, unseen))
}

/// Something that maps the current environment to an action.
pub trait Policy {
    fn begin_task(&mut self, spec: &TaskSpec, env: &EnvState) -> Result<()>;
    fn act(&mut self, env: &EnvState, obs: &Observation) -> Result<Action>;
}

/// Replays the scripted expert from the current environment state.
#[derive(Default)]
pub struct ExpertPolicy {
    plan: Vec<RobotState>,
    next: usize,
}

impl Policy for ExpertPolicy {
    fn begin_task(&mut self, spec: &TaskSpec, env: &EnvState) -> Result<()> {
        let live = TaskSpec { world: env.world.clone(), start: env.effector(), ..spec.clone() };
        self.plan = match robot_trajectory(&live) {
            Ok(traj) => {
                let idx = subsample_indices(traj.len(), NATIVE_FPS, STORED_FPS)?;
                idx.into_iter().map(|i| traj[i].1).collect()
            }
            Err(e) => {
                log::debug!("expert has no plan: {e}");
                vec![]
            }
        };
        self.next = 1;
        Ok(())
    }

    fn act(&mut self, env: &EnvState, _obs: &Observation) -> Result<Action> {
        let Some(target) = self.plan.get(self.next) else { return Ok([0.0; STATE_DIMS]) };
        self.next += 1;
        Ok(crate::episode::compute_action(&env.state(), target))
    }
}

/// Uniform random pose deltas and a random gripper command.
pub struct RandomPolicy {
    rng: ChaCha8Rng,
}

impl RandomPolicy {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

impl Policy for RandomPolicy {
    fn begin_task(&mut self, _spec: &TaskSpec, _env: &EnvState) -> Result<()> {
        Ok(())
    }

    fn act(&mut self, env: &EnvState, _obs: &Observation) -> Result<Action> {
        let r = &mut self.rng;
        let mut a = [0.0; STATE_DIMS];
        a[0] = r.random_range(-0.3..0.3);
        a[1] = r.random_range(-0.3..0.3);
        a[2] = r.random_range(-0.5..0.5);
        a[6] = f64::from(r.random_bool(0.5)) - env.gripper;
        Ok(a)
    }
}

/// Drives the environment with the model's next-state forecast.
pub struct ModelPolicy<'a> {
    model: &'a Model,
    seq: Option<Sequence>,
    instruction: Option<LanguageInstruction>,
}

impl<'a> ModelPolicy<'a> {
    pub fn new(model: &'a Model) -> Self {
        Self { model, seq: None, instruction: None }
    }
}

impl Policy for ModelPolicy<'_> {
    fn begin_task(&mut self, spec: &TaskSpec, _env: &EnvState) -> Result<()> {
        self.instruction = Some(spec.instruction.clone());
        self.seq = None;
        Ok(())
    }

    fn act(&mut self, env: &EnvState, obs: &Observation) -> Result<Action> {
        let state = env.state();
        let frame = self.model.frame_features(obs)?;
        let keep = self.model.cfg.context.saturating_sub(1).max(1);
        let seq = match self.seq.take() {
            None => {
                let l = self.instruction.as_ref().ok_or_else(|| Error::Contract("act before begin_task".into()))?;
                Sequence { lang: self.model.language_base(l)?, frames: vec![frame], slots: Slots::States(vec![state]) }
            }
            Some(mut s) => {
                s.frames.push(frame);
                if let Slots::States(v) = &mut s.slots {
                    v.push(state);
                }
                // Row `n` of an `n`-step history is trained only for
                // `n < context`, so the forecast never uses a full window.
                s.last_window(keep)
            }
        };
        let next = self.model.forecast_state(&seq)?;
        self.seq = Some(seq);
        Ok(crate::episode::compute_action(&state, &next))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceRow {
    pub chain: usize,
    pub task: usize,
    pub step: usize,
    pub state: String,
    pub action: String,
    pub success: bool,
}

/// Runs a chain; returns the number of tasks completed in a row.
pub fn rollout(
    policy: &mut dyn Policy,
    chain: &TaskChain,
    max_steps: usize,
    mut trace: Option<&mut Vec<TraceRow>>,
) -> Result<usize> {
    let palette = chain.palette();
    let mut env = chain.initial_state();
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.5}")).collect::<Vec<_>>().join(" ");
    for (ti, spec) in chain.tasks.iter().enumerate() {
        let start = env.world.clone();
        policy.begin_task(spec, &env)?;
        let mut done = false;
        for step in 0..max_steps {
            let obs = env.render(palette);
            let a = policy.act(&env, &obs)?;
            env = env_step(&env, &a)?.0;
            done = spec.task.satisfied(&start, &env.world);
            if let Some(t) = trace.as_deref_mut() {
                t.push(TraceRow { chain: 0, task: ti, step, state: fmt(&env.state().to_vec()), action: fmt(&a), success: done });
            }
            if done {
                break;
            }
        }
        if !done {
            return Ok(ti);
        }
    }
    Ok(chain.tasks.len())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub counts: Vec<usize>,
    pub rates: [f64; CHAIN_LEN],
    pub avg_len: f64,
    pub avg_rate: f64,
}

pub fn compute_metrics(counts: &[usize]) -> Result<EvalReport> {
    if counts.is_empty() {
        return Err(Error::Empty("no chain results".into()));
    }
    if let Some(c) = counts.iter().find(|&&c| c > CHAIN_LEN) {
        return Err(Error::Input(format!("completed count {c} exceeds chain length {CHAIN_LEN}")));
    }
    let n = counts.len() as f64;
    let rates = std::array::from_fn(|i| counts.iter().filter(|&&c| c > i).count() as f64 / n);
    Ok(report_from_rates(counts.to_vec(), rates))
}

/// Average length and rate from the five in-a-row rates.
pub fn report_from_rates(counts: Vec<usize>, rates: [f64; CHAIN_LEN]) -> EvalReport {
    let avg_len: f64 = rates.iter().sum();
    EvalReport { counts, rates, avg_len, avg_rate: avg_len / CHAIN_LEN as f64 }
}

/// Evaluates independent policy instances on every chain in parallel.
pub fn evaluate<P: Policy>(
    chains: &[TaskChain],
    max_steps: usize,
    make: impl Fn(usize) -> P + Sync,
) -> Result<EvalReport> {
    let idx: Vec<usize> = (0..chains.len()).collect();
    let counts = par::map(&idx, |&i| rollout(&mut make(i), &chains[i], max_steps, None))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    compute_metrics(&counts)
}

/// Like [`evaluate`] but also returns the per-step trace of every chain.
pub fn evaluate_traced<P: Policy>(
    chains: &[TaskChain],
    max_steps: usize,
    make: impl Fn(usize) -> P + Sync,
) -> Result<(EvalReport, Vec<TraceRow>)> {
    let idx: Vec<usize> = (0..chains.len()).collect();
    let runs = par::map(&idx, |&i| {
        let mut t = Vec::new();
        let c = rollout(&mut make(i), &chains[i], max_steps, Some(&mut t))?;
        t.iter_mut().for_each(|r| r.chain = i);
        Ok((c, t))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let counts: Vec<usize> = runs.iter().map(|r| r.0).collect();
    Ok((compute_metrics(&counts)?, runs.into_iter().flat_map(|r| r.1).collect()))
}

#[derive(Serialize)]
struct ReportRow<'a> {
    label: &'a str,
    r1: f64,
    r2: f64,
    r3: f64,
    r4: f64,
    r5: f64,
    avg_len: f64,
    avg_rate: f64,
    chains: usize,
}

/// One CSV row per labelled report.
pub fn write_reports_csv(path: &Path, reports: &[(String, EvalReport)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for (label, r) in reports {
        let [r1, r2, r3, r4, r5] = r.rates;
        w.serialize(ReportRow {
            label,
            r1,
            r2,
            r3,
            r4,
            r5,
            avg_len: r.avg_len,
            avg_rate: r.avg_rate,
            chains: r.counts.len(),
        })
        .map_err(crate::pretrain::csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    crate::io::write_atomic(path, &bytes)
}

pub fn write_trace_csv(path: &Path, rows: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(crate::pretrain::csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    crate::io::write_atomic(path, &bytes)
}

/// Joint limits reached by any joint of `env`.
pub fn at_limits(env: &EnvState) -> Vec<bool> {
    env.joints.iter().zip(JOINT_LIMITS).map(|(&j, (lo, hi))| j == lo || j == hi).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episode::world::{Block, Color, Held, GRASP_RADIUS};
    use crate::episode::TaskKind;
    use proptest::prelude::*;

    fn scene() -> World {
        World {
            blocks: vec![
                Block { color: Color::Red, pos: [-0.4, 0.0] },
                Block { color: Color::Green, pos: [0.2, -0.4] },
                Block { color: Color::Blue, pos: [0.5, 0.1] },
            ],
            drawer: 0.0,
            held: None,
        }
    }

    #[test]
    fn zero_action_only_advances_the_clock() {
        let env = EnvState::new(scene(), [0.1, -0.3]);
        let (next, clamped) = env_step(&env, &[0.0; 7]).unwrap();
        assert!(!clamped);
        assert_eq!(next.steps, 1);
        assert_eq!(EnvState { steps: 0, ..next }, env);
        assert!(env_step(&env, &[f64::NAN, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn closing_near_a_block_binds_it() {
        let env = EnvState::new(scene(), [-0.4 + 0.8 * GRASP_RADIUS, 0.0]);
        let mut close = [0.0; 7];
        close[6] = 1.0;
        let (held, _) = env_step(&env, &close).unwrap();
        assert_eq!(held.world.held, Some(Held::Block(0)));
        let mut mv = [0.0; 7];
        mv[1] = -0.2;
        let (moved, _) = env_step(&held, &mv).unwrap();
        assert_eq!(moved.world.blocks[0].pos, moved.effector());
        let far = EnvState::new(scene(), [-0.4 + 1.2 * GRASP_RADIUS, 0.0]);
        assert_eq!(env_step(&far, &close).unwrap().0.world.held, None);
        let mut open = [0.0; 7];
        open[6] = -0.7;
        assert_eq!(env_step(&held, &open).unwrap().0.world.held, None);
    }

    #[test]
    fn oversized_action_clamps_to_full_extension() {
        let env = EnvState::new(scene(), [0.0, -0.5]);
        let (next, clamped) = env_step(&env, &[100.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(clamped);
        assert_eq!(next.joints[1], JOINT_LIMITS[1].1);
        assert!(at_limits(&next)[1]);
        assert!(next.joints.iter().zip(JOINT_LIMITS).all(|(&j, (lo, hi))| j >= lo && j <= hi));
    }

    #[test]
    fn expert_completes_sampled_chains() {
        let chains = sample_chains(20, 0, &Palette::ALL, false);
        assert!(chains.iter().all(|c| c.tasks.len() == CHAIN_LEN && c.tasks[0].world.held.is_none()));
        let r = evaluate(&chains, DEFAULT_MAX_STEPS, |_| ExpertPolicy::default()).unwrap();
        assert_eq!(r.counts, vec![5; 20]);
        assert_eq!(sample_chains(3, 0, &Palette::ALL, false), chains[..3]);
    }

    #[test]
    fn random_policy_rarely_completes_anything() {
        let chains = sample_chains(100, 1, &Palette::ALL, false);
        let r = evaluate(&chains, DEFAULT_MAX_STEPS, |i| RandomPolicy::new(i as u64)).unwrap();
        let zero = r.counts.iter().filter(|&&c| c == 0).count();
        // Closing the gripper at random near the right block is enough for a
        // pick-up, so a few chains do get one task.
        assert!(zero >= 85, "{zero} of 100 chains had no completed task");
        assert!(r.counts.iter().all(|&c| c <= 1));
    }

    #[test]
    fn no_steps_no_progress() {
        let chains = sample_chains(2, 2, &Palette::ALL, false);
        assert_eq!(rollout(&mut ExpertPolicy::default(), &chains[0], 0, None).unwrap(), 0);
    }

    #[test]
    fn metric_examples() {
        let r = report_from_rates(vec![], [0.951, 0.915, 0.855, 0.800, 0.751]);
        assert!((r.avg_len - 4.272).abs() < 1e-12);
        assert!((r.avg_rate - 0.8544).abs() < 1e-12);
        let five = compute_metrics(&[5, 5, 5]).unwrap();
        assert_eq!((five.rates, five.avg_len), ([1.0; 5], 5.0));
        let three = compute_metrics(&[3]).unwrap();
        assert_eq!((three.rates, three.avg_len), ([1.0, 1.0, 1.0, 0.0, 0.0], 3.0));
        assert!(compute_metrics(&[]).is_err());
        assert!(compute_metrics(&[6]).is_err());
    }

    proptest! {
        #[test]
        fn rates_are_monotone_and_sum_to_mean(counts in proptest::collection::vec(0usize..=5, 1..200)) {
            let r = compute_metrics(&counts).unwrap();
            prop_assert!(r.rates.windows(2).all(|w| w[0] >= w[1]));
            let mean = counts.iter().sum::<usize>() as f64 / counts.len() as f64;
            prop_assert!((r.avg_len - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn model_policy_runs_and_traces() {
        let model = Model::new(crate::testutil::tiny_cfg(), 0).unwrap();
        let chains = sample_chains(2, 3, &Palette::ALL, false);
        let (r, trace) = evaluate_traced(&chains, 12, |_| ModelPolicy::new(&model)).unwrap();
        assert_eq!(r.counts.len(), 2);
        assert!(!trace.is_empty() && trace.iter().all(|t| t.step < 12));
        let dir = tempfile::tempdir().unwrap();
        write_trace_csv(&dir.path().join("trace.csv"), &trace).unwrap();
        write_reports_csv(&dir.path().join("eval.csv"), &[("x".into(), r)]).unwrap();
        let spec = &chains[0].tasks[0];
        assert!(matches!(spec.task, TaskKind::PickUp { .. } | TaskKind::Move { .. } | TaskKind::OpenDrawer | TaskKind::CloseDrawer));
    }
}
