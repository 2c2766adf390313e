//! Tabletop scene state shared by the generators and the evaluation
//! environment, plus the top-down renderer.

use serde::{Deserialize, Serialize};

use super::arm;
use crate::encoders::{KeypointFrame, Observation};

pub const GRASP_RADIUS: f64 = 0.15;
pub const BLOCK_HALF: f64 = 0.09;
pub const HANDLE_X: f64 = 0.6;
pub const HANDLE_CLOSED_Y: f64 = 0.6;
pub const DRAWER_TRAVEL: f64 = 0.3;
/// Region where blocks may rest.
pub const BLOCK_REGION: ([f64; 2], [f64; 2]) = ([-0.85, -0.8], [0.85, 0.45]);
/// Closed-drawer footprint; blocks must stay out of it.
pub const DRAWER_FOOTPRINT: ([f64; 2], [f64; 2]) = ([0.35, 0.22], [0.85, 1.0]);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
}

impl Color {
    pub const ALL: [Color; 3] = [Color::Red, Color::Green, Color::Blue];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }

    fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [0.9, 0.1, 0.1],
            Color::Green => [0.1, 0.85, 0.15],
            Color::Blue => [0.15, 0.2, 0.95],
        }
    }
}

/// Render palette standing in for a scene variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Palette {
    A,
    B,
    C,
    D,
}

impl Palette {
    pub const ALL: [Palette; 4] = [Palette::A, Palette::B, Palette::C, Palette::D];

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "A" | "a" => Some(Palette::A),
            "B" | "b" => Some(Palette::B),
            "C" | "c" => Some(Palette::C),
            "D" | "d" => Some(Palette::D),
            _ => None,
        }
    }

    fn table(self) -> [f64; 3] {
        match self {
            Palette::A => [0.55, 0.45, 0.35],
            Palette::B => [0.4, 0.5, 0.45],
            Palette::C => [0.5, 0.5, 0.6],
            Palette::D => [0.65, 0.6, 0.4],
        }
    }

    fn drawer(self) -> [f64; 3] {
        match self {
            Palette::A => [0.35, 0.22, 0.12],
            Palette::B => [0.25, 0.3, 0.35],
            Palette::C => [0.3, 0.25, 0.4],
            Palette::D => [0.45, 0.3, 0.2],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub color: Color,
    pub pos: [f64; 2],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Held {
    Block(usize),
    Handle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub blocks: Vec<Block>,
    /// 0 = closed, 1 = fully open.
    pub drawer: f64,
    pub held: Option<Held>,
}

pub fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

pub fn in_box(p: [f64; 2], (lo, hi): ([f64; 2], [f64; 2])) -> bool {
    p[0] >= lo[0] && p[0] <= hi[0] && p[1] >= lo[1] && p[1] <= hi[1]
}

impl World {
    pub fn handle(&self) -> [f64; 2] {
        [HANDLE_X, HANDLE_CLOSED_Y - self.drawer * DRAWER_TRAVEL]
    }

    pub fn block_of(&self, c: Color) -> Option<usize> {
        self.blocks.iter().position(|b| b.color == c)
    }

    /// Nearest graspable object within [`GRASP_RADIUS`] of `p`.
    pub fn graspable(&self, p: [f64; 2]) -> Option<Held> {
        let mut best: Option<(f64, Held)> = None;
        for (i, b) in self.blocks.iter().enumerate() {
            let d = dist(b.pos, p);
            if d <= GRASP_RADIUS && best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, Held::Block(i)));
            }
        }
        let d = dist(self.handle(), p);
        if d <= GRASP_RADIUS && best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, Held::Handle));
        }
        best.map(|(_, h)| h)
    }

    /// Moves the held object with an effector now at `p`.
    pub fn carry(&mut self, p: [f64; 2]) {
        match self.held {
            Some(Held::Block(i)) => {
                self.blocks[i].pos = [p[0].clamp(-1.0, 1.0), p[1].clamp(-1.0, 1.0)];
            }
            Some(Held::Handle) => {
                let y = p[1].clamp(HANDLE_CLOSED_Y - DRAWER_TRAVEL, HANDLE_CLOSED_Y);
                self.drawer = (HANDLE_CLOSED_Y - y) / DRAWER_TRAVEL;
            }
            None => {}
        }
    }

    /// Applies a gripper transition at `p`.
    pub fn set_grip(&mut self, closed: bool, p: [f64; 2]) {
        if closed {
            if self.held.is_none() {
                self.held = self.graspable(p);
            }
        } else {
            self.held = None;
        }
    }

    /// A block may rest at `p` without overlapping others or the drawer.
    pub fn free_spot(&self, p: [f64; 2], ignore: Option<usize>, min_sep: f64) -> bool {
        in_box(p, BLOCK_REGION)
            && !in_box(p, DRAWER_FOOTPRINT)
            && self
                .blocks
                .iter()
                .enumerate()
                .all(|(i, b)| Some(i) == ignore || dist(b.pos, p) >= min_sep)
    }

    pub fn reachable(p: [f64; 2]) -> bool {
        dist(p, arm::BASE) <= arm::max_reach() - 0.02 && p[0].abs() <= 1.0 && p[1].abs() <= 1.0
    }
}

/// What to draw as the manipulator.
pub enum Effector<'a> {
    Robot { joints: [f64; 3], gripper: f64 },
    Hand(&'a KeypointFrame),
}

const SKIN: [f64; 3] = [0.95, 0.78, 0.62];
const LINK: [f64; 3] = [0.2, 0.2, 0.25];

struct Canvas {
    w: usize,
    h: usize,
    data: Vec<f64>,
}

impl Canvas {
    fn px(&self, i: usize, j: usize) -> [f64; 2] {
        [-1.0 + (j as f64 + 0.5) * 2.0 / self.w as f64, 1.0 - (i as f64 + 0.5) * 2.0 / self.h as f64]
    }

    fn pixel_size(&self) -> f64 {
        2.0 / self.w as f64
    }

    fn blend(&mut self, i: usize, j: usize, rgb: [f64; 3], a: f64) {
        if a <= 0.0 {
            return;
        }
        let a = a.min(1.0);
        let o = (i * self.w + j) * 3;
        for c in 0..3 {
            self.data[o + c] = self.data[o + c] * (1.0 - a) + rgb[c] * a;
        }
    }

    fn fill(&mut self, rgb: [f64; 3]) {
        for px in self.data.chunks_mut(3) {
            px.copy_from_slice(&rgb);
        }
    }

    /// Axis-aligned rectangle with exact area coverage.
    fn rect(&mut self, lo: [f64; 2], hi: [f64; 2], rgb: [f64; 3]) {
        let s = self.pixel_size();
        for i in 0..self.h {
            for j in 0..self.w {
                let c = self.px(i, j);
                let ox = (hi[0].min(c[0] + s / 2.0) - lo[0].max(c[0] - s / 2.0)).max(0.0);
                let oy = (hi[1].min(c[1] + s / 2.0) - lo[1].max(c[1] - s / 2.0)).max(0.0);
                self.blend(i, j, rgb, ox * oy / (s * s));
            }
        }
    }

    /// Shape given by a signed distance, with one-pixel edge ramp.
    fn sdf(&mut self, rgb: [f64; 3], f: impl Fn([f64; 2]) -> f64) {
        let s = self.pixel_size();
        for i in 0..self.h {
            for j in 0..self.w {
                let d = f(self.px(i, j));
                self.blend(i, j, rgb, (0.5 - d / s).clamp(0.0, 1.0));
            }
        }
    }

    fn disc(&mut self, c: [f64; 2], r: f64, rgb: [f64; 3]) {
        self.sdf(rgb, |p| dist(p, c) - r);
    }

    fn segment(&mut self, a: [f64; 2], b: [f64; 2], half: f64, rgb: [f64; 3]) {
        self.sdf(rgb, |p| segment_distance(p, a, b) - half);
    }
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0) };
    dist(p, [a[0] + t * dx, a[1] + t * dy])
}

/// Renders the scene to a `size × size × 3` grid, quantized to 1/256.
pub fn render(world: &World, effector: &Effector<'_>, palette: Palette, size: usize) -> Observation {
    let mut cv = Canvas { w: size, h: size, data: vec![0.0; size * size * 3] };
    cv.fill(palette.table());
    let handle = world.handle();
    cv.rect([0.38, handle[1] + 0.04], [0.82, 1.0], palette.drawer());
    cv.rect([0.5, handle[1] - 0.03], [0.7, handle[1] + 0.03], [0.95, 0.85, 0.2]);
    for b in &world.blocks {
        let (p, h) = (b.pos, BLOCK_HALF);
        cv.rect([p[0] - h, p[1] - h], [p[0] + h, p[1] + h], b.color.rgb());
    }
    match effector {
        Effector::Robot { joints, gripper } => {
            let pts = arm::joint_points(*joints);
            for w in pts.windows(2) {
                cv.segment(w[0], w[1], 0.05, LINK);
            }
            let shade = if *gripper >= 0.5 { 0.05 } else { 0.9 };
            cv.disc(pts[3], 0.07, [shade; 3]);
        }
        Effector::Hand(kp) => {
            let c = &kp.coords;
            let p = |i: usize| [c[i][0], c[i][1]];
            let u = unit([p(0)[0] - super::hand::BODY[0], p(0)[1] - super::hand::BODY[1]]);
            cv.segment(p(0), [p(0)[0] - 1.2 * u[0], p(0)[1] - 1.2 * u[1]], 0.05, SKIN);
            for f in 0..5 {
                let base = 1 + 4 * f;
                cv.segment(p(0), p(base), 0.025, SKIN);
                for k in 0..3 {
                    cv.segment(p(base + k), p(base + k + 1), 0.02, SKIN);
                }
            }
            let palm = [(p(0)[0] + p(9)[0]) / 2.0, (p(0)[1] + p(9)[1]) / 2.0];
            cv.disc(palm, 0.06, SKIN);
        }
    }
    for v in &mut cv.data {
        *v = ((*v * 256.0).round() / 256.0).clamp(0.0, 1.0);
    }
    Observation { width: size, height: size, channels: 3, data: cv.data }
}

pub fn unit(v: [f64; 2]) -> [f64; 2] {
    let n = (v[0] * v[0] + v[1] * v[1]).sqrt();
    if n == 0.0 {
        [0.0, 1.0]
    } else {
        [v[0] / n, v[1] / n]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world() -> World {
        World {
            blocks: vec![
                Block { color: Color::Red, pos: [-0.5, 0.0] },
                Block { color: Color::Green, pos: [0.0, -0.3] },
                Block { color: Color::Blue, pos: [0.4, -0.5] },
            ],
            drawer: 0.0,
            held: None,
        }
    }

    #[test]
    fn grasp_binds_nearest_object_in_radius() {
        let mut w = world();
        w.set_grip(true, [-0.45, 0.05]);
        assert_eq!(w.held, Some(Held::Block(0)));
        w.carry([0.2, 0.1]);
        assert_eq!(w.blocks[0].pos, [0.2, 0.1]);
        w.set_grip(false, [0.2, 0.1]);
        assert_eq!(w.held, None);
        w.set_grip(true, [-0.9, -0.9]);
        assert_eq!(w.held, None);
    }

    #[test]
    fn handle_moves_drawer_within_travel() {
        let mut w = world();
        w.set_grip(true, w.handle());
        assert_eq!(w.held, Some(Held::Handle));
        w.carry([0.6, -2.0]);
        assert!((w.drawer - 1.0).abs() < 1e-12);
    }

    #[test]
    fn render_is_in_range_and_shows_blocks() {
        let w = world();
        let o = render(&w, &Effector::Robot { joints: [1.5, -1.0, 0.0], gripper: 0.0 }, Palette::A, 32);
        o.validate().unwrap();
        // Pixel under the red block centre (x=-0.5 → col 8, y=0 → row 16).
        let px = &o.data[(16 * 32 + 8) * 3..(16 * 32 + 8) * 3 + 3];
        assert!(px[0] > 0.8 && px[1] < 0.2, "{px:?}");
        let d = render(&w, &Effector::Robot { joints: [1.5, -1.0, 0.0], gripper: 0.0 }, Palette::D, 32);
        assert_ne!(o, d);
    }
}
