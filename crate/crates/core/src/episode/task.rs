//! Task templates, instructions, goal predicates and scene sampling.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::world::{dist, Block, Color, Held, Palette, World};
use crate::encoders::LanguageInstruction;

pub const MOVE_DISTANCE: f64 = 0.3;
pub const MOVE_SUCCESS: f64 = 0.2;
const MOVE_DRIFT: f64 = 0.15;
const MIN_SEPARATION: f64 = 0.35;
pub const HOME: [f64; 2] = [0.0, -0.55];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Left,
    Right,
    Forward,
    Backward,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Left, Direction::Right, Direction::Forward, Direction::Backward];

    pub fn vector(self) -> [f64; 2] {
        match self {
            Direction::Left => [-1.0, 0.0],
            Direction::Right => [1.0, 0.0],
            Direction::Forward => [0.0, 1.0],
            Direction::Backward => [0.0, -1.0],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Direction::Left => "left",
            Direction::Right => "right",
            Direction::Forward => "forward",
            Direction::Backward => "backward",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "template", rename_all = "snake_case")]
pub enum TaskKind {
    PickUp { color: Color },
    PutDown,
    Move { color: Color, direction: Direction },
    OpenDrawer,
    CloseDrawer,
}

impl TaskKind {
    pub fn template_id(&self) -> &'static str {
        match self {
            TaskKind::PickUp { .. } => "pick_up",
            TaskKind::PutDown => "put_down",
            TaskKind::Move { .. } => "move",
            TaskKind::OpenDrawer => "open_drawer",
            TaskKind::CloseDrawer => "close_drawer",
        }
    }

    /// Every instantiated task in the vocabulary.
    pub fn all() -> Vec<TaskKind> {
        let mut v = Vec::new();
        for c in Color::ALL {
            v.push(TaskKind::PickUp { color: c });
        }
        v.push(TaskKind::PutDown);
        for c in Color::ALL {
            for d in Direction::ALL {
                v.push(TaskKind::Move { color: c, direction: d });
            }
        }
        v.push(TaskKind::OpenDrawer);
        v.push(TaskKind::CloseDrawer);
        v
    }

    /// Instruction text; `unseen` selects the held-out phrasing.
    pub fn instruction(&self, unseen: bool) -> LanguageInstruction {
        let phrasing = if unseen { "unseen" } else { "seen" };
        let (text, slots): (String, Vec<(&str, &str)>) = match *self {
            TaskKind::PickUp { color } => (
                if unseen { format!("grab the {} cube", color.name()) } else { format!("pick up the {} block", color.name()) },
                vec![("color", color.name())],
            ),
            TaskKind::PutDown => {
                ((if unseen { "release the cube" } else { "put down the block" }).to_string(), vec![])
            }
            TaskKind::Move { color, direction } => (
                if unseen {
                    format!("slide the {} cube to the {}", color.name(), direction.name())
                } else {
                    format!("move the {} block {}", color.name(), direction.name())
                },
                vec![("color", color.name()), ("direction", direction.name())],
            ),
            TaskKind::OpenDrawer => {
                ((if unseen { "pull the drawer out" } else { "open the drawer" }).to_string(), vec![])
            }
            TaskKind::CloseDrawer => {
                ((if unseen { "push the drawer in" } else { "close the drawer" }).to_string(), vec![])
            }
        };
        let mut l = LanguageInstruction::new(text, self.template_id()).with_slot("phrasing", phrasing);
        for (k, v) in slots {
            l = l.with_slot(k, v);
        }
        l
    }

    /// Parses an instruction produced by [`TaskKind::instruction`].
    pub fn from_instruction(l: &LanguageInstruction) -> Option<TaskKind> {
        let color = || l.slots.get("color").and_then(|c| Color::parse(c));
        match l.template_id.as_str() {
            "pick_up" => Some(TaskKind::PickUp { color: color()? }),
            "put_down" => Some(TaskKind::PutDown),
            "move" => {
                let d = l.slots.get("direction")?;
                let direction = Direction::ALL.into_iter().find(|x| x.name() == d)?;
                Some(TaskKind::Move { color: color()?, direction })
            }
            "open_drawer" => Some(TaskKind::OpenDrawer),
            "close_drawer" => Some(TaskKind::CloseDrawer),
            _ => None,
        }
    }

    fn move_target(&self, start: &World) -> Option<(usize, [f64; 2])> {
        if let TaskKind::Move { color, direction } = *self {
            let i = start.block_of(color)?;
            let v = direction.vector();
            let p = start.blocks[i].pos;
            return Some((i, [p[0] + MOVE_DISTANCE * v[0], p[1] + MOVE_DISTANCE * v[1]]));
        }
        None
    }

    /// Whether the task makes sense from `world` (not already satisfied,
    /// every waypoint reachable).
    pub fn feasible(&self, world: &World) -> bool {
        let holding = |c: Color| matches!(world.held, Some(Held::Block(i)) if world.blocks[i].color == c);
        match *self {
            TaskKind::PickUp { color } => {
                world.block_of(color).is_some_and(|i| World::reachable(world.blocks[i].pos)) && !holding(color)
            }
            TaskKind::PutDown => matches!(world.held, Some(Held::Block(_))),
            TaskKind::Move { .. } => self.move_target(world).is_some_and(|(i, dest)| {
                World::reachable(world.blocks[i].pos)
                    && World::reachable(dest)
                    && world.free_spot(dest, Some(i), MIN_SEPARATION - 0.05)
            }),
            TaskKind::OpenDrawer => world.drawer <= 0.2 && World::reachable(world.handle()),
            TaskKind::CloseDrawer => {
                world.drawer >= 0.8 && World::reachable(world.handle()) && World::reachable(closed_handle())
            }
        }
    }

    /// Goal predicate on the final world given the world at task start.
    pub fn satisfied(&self, start: &World, now: &World) -> bool {
        match *self {
            TaskKind::PickUp { color } => {
                matches!(now.held, Some(Held::Block(i)) if now.blocks[i].color == color)
            }
            TaskKind::PutDown => now.held.is_none(),
            TaskKind::Move { direction, .. } => {
                let Some((i, _)) = self.move_target(start) else { return false };
                let v = direction.vector();
                let (a, b) = (start.blocks[i].pos, now.blocks[i].pos);
                let d = [b[0] - a[0], b[1] - a[1]];
                let along = d[0] * v[0] + d[1] * v[1];
                let across = (d[0] * v[1] - d[1] * v[0]).abs();
                now.held.is_none() && along >= MOVE_SUCCESS && across <= MOVE_DRIFT
            }
            TaskKind::OpenDrawer => now.drawer >= 0.8 && now.held.is_none(),
            TaskKind::CloseDrawer => now.drawer <= 0.2 && now.held.is_none(),
        }
    }

    /// Expert waypoints from the current world and effector position.
    pub fn plan(&self, world: &World) -> Vec<Phase> {
        let mut out = Vec::new();
        let already = |i: usize| world.held == Some(Held::Block(i));
        let release_other = |out: &mut Vec<Phase>, keep: Option<usize>| {
            if world.held.is_some() && world.held != keep.map(Held::Block) {
                out.push(Phase::Grip(false));
            }
        };
        match *self {
            TaskKind::PickUp { color } => {
                let i = world.block_of(color).expect("feasible task");
                release_other(&mut out, None);
                out.push(Phase::Reach(world.blocks[i].pos));
                out.push(Phase::Grip(true));
            }
            TaskKind::PutDown => out.push(Phase::Grip(false)),
            TaskKind::Move { .. } => {
                let (i, dest) = self.move_target(world).expect("feasible task");
                if !already(i) {
                    release_other(&mut out, None);
                    out.push(Phase::Reach(world.blocks[i].pos));
                    out.push(Phase::Grip(true));
                }
                out.push(Phase::Reach(dest));
                out.push(Phase::Grip(false));
            }
            TaskKind::OpenDrawer | TaskKind::CloseDrawer => {
                release_other(&mut out, None);
                out.push(Phase::Reach(world.handle()));
                out.push(Phase::Grip(true));
                let y = if *self == TaskKind::OpenDrawer {
                    super::world::HANDLE_CLOSED_Y - super::world::DRAWER_TRAVEL
                } else {
                    super::world::HANDLE_CLOSED_Y
                };
                out.push(Phase::Reach([super::world::HANDLE_X, y]));
                out.push(Phase::Grip(false));
            }
        }
        out
    }
}

fn closed_handle() -> [f64; 2] {
    [super::world::HANDLE_X, super::world::HANDLE_CLOSED_Y]
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Phase {
    Reach([f64; 2]),
    Grip(bool),
}

/// Everything needed to script one episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task: TaskKind,
    pub instruction: LanguageInstruction,
    pub world: World,
    pub start: [f64; 2],
    pub palette: Palette,
    /// Frame-count bounds after subsampling.
    pub min_frames: usize,
    pub max_frames: usize,
}

impl TaskSpec {
    pub fn new(task: TaskKind, world: World, start: [f64; 2], palette: Palette, unseen: bool) -> Self {
        Self { task, instruction: task.instruction(unseen), world, start, palette, min_frames: 2, max_frames: 24 }
    }

    pub fn template_id(&self) -> &'static str {
        self.task.template_id()
    }
}

/// Random scene: three blocks, drawer closed or open, optionally holding.
pub fn sample_world(rng: &mut impl Rng) -> (World, [f64; 2]) {
    loop {
        let mut blocks: Vec<Block> = Vec::new();
        let mut ok = true;
        for color in Color::ALL {
            let mut placed = false;
            for _ in 0..100 {
                let p = [rng.random_range(-0.8..0.8), rng.random_range(-0.7..0.2)];
                let w = World { blocks: blocks.clone(), drawer: 0.0, held: None };
                if w.free_spot(p, None, MIN_SEPARATION) {
                    blocks.push(Block { color, pos: p });
                    placed = true;
                    break;
                }
            }
            ok &= placed;
        }
        if !ok {
            continue;
        }
        let drawer = if rng.random_bool(0.5) { 0.0 } else { 1.0 };
        let mut world = World { blocks, drawer, held: None };
        let mut start = [rng.random_range(-0.7..0.7), rng.random_range(-0.8..0.1)];
        if rng.random_bool(0.25) {
            let i = rng.random_range(0..world.blocks.len());
            world.held = Some(Held::Block(i));
            start = world.blocks[i].pos;
        }
        return (world, start);
    }
}

pub fn feasible_tasks(world: &World) -> Vec<TaskKind> {
    TaskKind::all().into_iter().filter(|t| t.feasible(world)).collect()
}

/// A random feasible task in a random scene.
pub fn sample_spec(rng: &mut impl Rng, palettes: &[Palette], unseen: bool) -> TaskSpec {
    loop {
        let (world, start) = sample_world(rng);
        let tasks = feasible_tasks(&world);
        // Draw the template first so rare templates are not swamped by the
        // twelve move variants.
        let mut templates: Vec<&str> = tasks.iter().map(|t| t.template_id()).collect();
        templates.dedup();
        let Some(&template) = templates.choose(rng) else { continue };
        let options: Vec<&TaskKind> = tasks.iter().filter(|t| t.template_id() == template).collect();
        let task = **options.choose(rng).expect("non-empty");
        let palette = *palettes.choose(rng).expect("at least one palette");
        return TaskSpec::new(task, world, start, palette, unseen);
    }
}

/// True when `p` is close enough to grasp what the task targets.
pub fn near(a: [f64; 2], b: [f64; 2]) -> bool {
    dist(a, b) <= super::world::GRASP_RADIUS
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn instructions_round_trip_through_slots() {
        for t in TaskKind::all() {
            for unseen in [false, true] {
                let l = t.instruction(unseen);
                assert_eq!(TaskKind::from_instruction(&l), Some(t));
                assert!(!l.text.is_empty());
            }
        }
        assert_ne!(TaskKind::PutDown.instruction(false).text, TaskKind::PutDown.instruction(true).text);
    }

    #[test]
    fn sampled_specs_are_feasible() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let s = sample_spec(&mut rng, &Palette::ALL, false);
            assert!(s.task.feasible(&s.world), "{s:?}");
        }
    }
}
