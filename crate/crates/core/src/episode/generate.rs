//! Scripted expert trajectories for the robot arm and the human hand.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::arm::{self, ArmPose};
use super::hand;
use super::task::{Phase, TaskSpec};
use super::world::{render, Effector, World};
use super::{subsample_indices, HumanEpisode, RobotEpisode};
use crate::encoders::{KeypointFrame, RobotState};
use crate::error::{Error, Result};

pub const NATIVE_FPS: f64 = 30.0;
pub const STORED_FPS: f64 = 3.0;
/// Native frames per stored step.
pub const FRAMES_PER_STEP: usize = 10;
/// Expert translation per stored step.
pub const ROBOT_SPEED: f64 = 0.3;
pub const OBS_SIZE: usize = 32;

/// Grid that stored state values are snapped to. With magnitudes below 16,
/// sums and differences of grid values are exact in `f64`.
pub const STATE_GRID: f64 = 1.0 / (1u64 << 24) as f64;

pub fn quantize(v: f64) -> f64 {
    (v / STATE_GRID).round() * STATE_GRID
}

/// Robot state for given joints and gripper, with the pose from forward
/// kinematics, snapped to [`STATE_GRID`].
pub fn robot_state(joints: [f64; 3], gripper: f64) -> RobotState {
    let p = arm::forward(joints);
    RobotState { pose: [p.x, p.y, p.heading, joints[0], joints[1], joints[2]].map(quantize), gripper }
}

/// Joints that put the tool at `p` pointing away from the base.
pub fn joints_at(p: [f64; 2]) -> [f64; 3] {
    arm::inverse(ArmPose { x: p[0], y: p[1], heading: arm::radial_heading(p) }).0
}

fn check_reach(spec: &TaskSpec, plan: &[Phase]) -> Result<()> {
    if !World::reachable(spec.start) {
        return Err(Error::Generation(format!("start {:?} is outside the arm's reach", spec.start)));
    }
    for ph in plan {
        if let Phase::Reach(p) = ph {
            if !World::reachable(*p) {
                return Err(Error::Generation(format!(
                    "{} target {p:?} is outside the arm's reach",
                    spec.template_id()
                )));
            }
        }
    }
    if !spec.task.feasible(&spec.world) {
        return Err(Error::Generation(format!("{} is not feasible in this scene", spec.template_id())));
    }
    Ok(())
}

fn lerp2(a: [f64; 2], b: [f64; 2], t: f64) -> [f64; 2] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t]
}

fn steps_for(d: f64, speed: f64) -> usize {
    ((d / speed) - 1e-9).ceil().max(1.0) as usize
}

fn check_length(spec: &TaskSpec, native: usize) -> Result<()> {
    let stored = (native - 1) / FRAMES_PER_STEP + 1;
    if stored < spec.min_frames || stored > spec.max_frames {
        return Err(Error::Generation(format!(
            "{} episode has {stored} frames, outside [{}, {}]",
            spec.template_id(),
            spec.min_frames,
            spec.max_frames
        )));
    }
    Ok(())
}

/// Native-rate robot trajectory: worlds and states per frame.
pub fn robot_trajectory(spec: &TaskSpec) -> Result<Vec<(World, RobotState)>> {
    let plan = spec.task.plan(&spec.world);
    check_reach(spec, &plan)?;
    let mut world = spec.world.clone();
    let mut p = spec.start;
    let mut gripper = if world.held.is_some() { 1.0 } else { 0.0 };
    let mut out = vec![(world.clone(), robot_state(joints_at(p), gripper))];
    for ph in plan {
        match ph {
            Phase::Reach(target) => {
                let n = steps_for(super::world::dist(p, target), ROBOT_SPEED) * FRAMES_PER_STEP;
                let from = p;
                for s in 1..=n {
                    p = lerp2(from, target, s as f64 / n as f64);
                    world.carry(p);
                    out.push((world.clone(), robot_state(joints_at(p), gripper)));
                }
            }
            Phase::Grip(close) => {
                for s in 1..=FRAMES_PER_STEP {
                    if s == FRAMES_PER_STEP {
                        gripper = if close { 1.0 } else { 0.0 };
                        world.set_grip(close, p);
                    }
                    out.push((world.clone(), robot_state(joints_at(p), gripper)));
                }
            }
        }
    }
    if !spec.task.satisfied(&spec.world, &world) {
        return Err(Error::Generation(format!("expert did not reach the {} goal", spec.template_id())));
    }
    check_length(spec, out.len())?;
    Ok(out)
}

/// Native-rate hand trajectory: worlds and keypoints per frame.
pub fn human_trajectory(spec: &TaskSpec, seed: u64) -> Result<Vec<(World, KeypointFrame)>> {
    let plan = spec.task.plan(&spec.world);
    check_reach(spec, &plan)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let speed = ROBOT_SPEED * rng.random_range(0.8..1.2);
    let tremor = Normal::new(0.0, 0.003).expect("valid normal");
    let mut world = spec.world.clone();
    let mut p = spec.start;
    let mut closure = if world.held.is_some() { 1.0 } else { 0.0 };
    let rest = 0.05;
    let mut out = vec![(world.clone(), hand::pose(p, closure, rest))];
    for (k, ph) in plan.iter().enumerate() {
        match *ph {
            Phase::Reach(target) => {
                let d = super::world::dist(p, target);
                let n = steps_for(d, speed) * FRAMES_PER_STEP;
                let bump = rng.random_range(-0.1..0.1) * d.min(1.0);
                let dir = super::world::unit([target[0] - p[0], target[1] - p[1]]);
                let perp = [-dir[1], dir[0]];
                let preshape = matches!(plan.get(k + 1), Some(Phase::Grip(true)));
                let (from, c0) = (p, closure);
                for s in 1..=n {
                    let tau = s as f64 / n as f64;
                    let e = tau * tau * (3.0 - 2.0 * tau);
                    let arc = bump * (std::f64::consts::PI * e).sin();
                    let mut q = lerp2(from, target, e);
                    q = [q[0] + arc * perp[0], q[1] + arc * perp[1]];
                    if s < n {
                        q = [q[0] + tremor.sample(&mut rng), q[1] + tremor.sample(&mut rng)];
                    }
                    if preshape {
                        closure = c0 + (0.3 - c0) * ((tau - 0.7) / 0.3).max(0.0);
                    }
                    p = q;
                    world.carry(p);
                    let height = rest + 0.1 * (std::f64::consts::PI * tau).sin();
                    out.push((world.clone(), hand::pose(p, closure, height)));
                }
            }
            Phase::Grip(close) => {
                let c0 = closure;
                let c1 = if close { 1.0 } else { 0.0 };
                for s in 1..=FRAMES_PER_STEP {
                    closure = c0 + (c1 - c0) * s as f64 / FRAMES_PER_STEP as f64;
                    if s == FRAMES_PER_STEP {
                        world.set_grip(close, p);
                    }
                    out.push((world.clone(), hand::pose(p, closure, rest)));
                }
            }
        }
    }
    if !spec.task.satisfied(&spec.world, &world) {
        return Err(Error::Generation(format!("hand script did not reach the {} goal", spec.template_id())));
    }
    check_length(spec, out.len())?;
    Ok(out)
}

fn stored_indices(n: usize) -> Result<Vec<usize>> {
    subsample_indices(n, NATIVE_FPS, STORED_FPS)
}

/// Robot expert episode stored at 3 fps.
pub fn generate_robot_episode(spec: &TaskSpec, seed: u64) -> Result<RobotEpisode> {
    let traj = robot_trajectory(spec)?;
    let frames = stored_indices(traj.len())?
        .into_iter()
        .map(|i| {
            let (w, s) = &traj[i];
            let eff = Effector::Robot { joints: [s.pose[3], s.pose[4], s.pose[5]], gripper: s.gripper };
            (render(w, &eff, spec.palette, OBS_SIZE), *s)
        })
        .collect();
    Ok(RobotEpisode {
        episode_id: format!("robot-{seed:016x}"),
        instruction: spec.instruction.clone(),
        frames,
        fps: STORED_FPS,
    })
}

/// Human hand episode stored at 3 fps.
pub fn generate_human_episode(spec: &TaskSpec, seed: u64) -> Result<HumanEpisode> {
    let traj = human_trajectory(spec, seed)?;
    let frames = stored_indices(traj.len())?
        .into_iter()
        .map(|i| {
            let (w, k) = &traj[i];
            (render(w, &Effector::Hand(k), spec.palette, OBS_SIZE), k.clone())
        })
        .collect();
    Ok(HumanEpisode {
        episode_id: format!("human-{seed:016x}"),
        instruction: spec.instruction.clone(),
        frames,
        fps: STORED_FPS,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episode::task::{sample_spec, TaskKind};
    use crate::episode::world::{Block, Color, Palette};

    fn pick_spec() -> TaskSpec {
        let world = World {
            blocks: vec![
                Block { color: Color::Red, pos: [-0.4, 0.0] },
                Block { color: Color::Green, pos: [0.2, -0.4] },
                Block { color: Color::Blue, pos: [0.5, 0.1] },
            ],
            drawer: 0.0,
            held: None,
        };
        TaskSpec::new(TaskKind::PickUp { color: Color::Red }, world, [0.0, -0.6], Palette::A, false)
    }

    #[test]
    fn human_pick_up_ends_with_fingertips_on_block() {
        let spec = pick_spec();
        let ep = generate_human_episode(&spec, 11).unwrap();
        let c = ep.frames.last().unwrap().1.fingertip_centroid();
        assert!(super::super::world::dist([c[0], c[1]], [-0.4, 0.0]) <= super::super::world::GRASP_RADIUS);
        assert!(ep.frames.len() >= spec.min_frames && ep.frames.len() <= spec.max_frames);
        assert_eq!(ep, generate_human_episode(&spec, 11).unwrap());
        assert_ne!(ep.frames, generate_human_episode(&spec, 12).unwrap().frames);
    }

    #[test]
    fn robot_expert_reaches_goal_on_random_specs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for i in 0..100 {
            let spec = sample_spec(&mut rng, &Palette::ALL, false);
            let traj = robot_trajectory(&spec).unwrap();
            assert!(spec.task.satisfied(&spec.world, &traj.last().unwrap().0));
            let ep = generate_robot_episode(&spec, i).unwrap();
            assert!(ep.frames.iter().all(|(_, s)| s.gripper == 0.0 || s.gripper == 1.0));
        }
    }

    #[test]
    fn unreachable_object_is_a_generation_error() {
        let mut spec = pick_spec();
        spec.world.blocks[0].pos = [0.0, 3.0];
        assert!(matches!(generate_robot_episode(&spec, 0), Err(Error::Generation(_))));
        assert!(matches!(generate_human_episode(&spec, 0), Err(Error::Generation(_))));
    }

    #[test]
    fn expert_state_matches_forward_kinematics() {
        let s = robot_state(joints_at([0.3, 0.2]), 0.0);
        assert!((s.pose[0] - 0.3).abs() < 1e-7 && (s.pose[1] - 0.2).abs() < 1e-7);
        assert_eq!(quantize(s.pose[0]), s.pose[0]);
    }
}
