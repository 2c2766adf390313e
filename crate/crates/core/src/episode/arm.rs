//! Three-link planar arm mounted below the table edge.

use std::f64::consts::PI;

pub const BASE: [f64; 2] = [0.0, -1.25];
pub const LINKS: [f64; 3] = [1.0, 0.9, 0.15];
pub const JOINT_LIMITS: [(f64, f64); 3] = [(-1.0, 4.2), (-3.0, 0.0), (-PI, PI)];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ArmPose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

/// Joint positions: base, elbow, wrist, end effector.
pub fn joint_points(j: [f64; 3]) -> [[f64; 2]; 4] {
    let a1 = j[0];
    let a2 = a1 + j[1];
    let a3 = a2 + j[2];
    let p1 = [BASE[0] + LINKS[0] * a1.cos(), BASE[1] + LINKS[0] * a1.sin()];
    let p2 = [p1[0] + LINKS[1] * a2.cos(), p1[1] + LINKS[1] * a2.sin()];
    let p3 = [p2[0] + LINKS[2] * a3.cos(), p2[1] + LINKS[2] * a3.sin()];
    [BASE, p1, p2, p3]
}

pub fn forward(j: [f64; 3]) -> ArmPose {
    let p = joint_points(j)[3];
    ArmPose { x: p[0], y: p[1], heading: j[0] + j[1] + j[2] }
}

/// Heading that points the tool radially away from the base.
pub fn radial_heading(p: [f64; 2]) -> f64 {
    (p[1] - BASE[1]).atan2(p[0] - BASE[0])
}

pub fn max_reach() -> f64 {
    LINKS.iter().sum()
}

fn wrap(a: f64) -> f64 {
    let mut a = (a + PI).rem_euclid(2.0 * PI) - PI;
    if a <= -PI {
        a += 2.0 * PI;
    }
    a
}

/// Elbow-down inverse kinematics with reach and joint clamping.
///
/// Returns the joints and whether any clamp was applied.
pub fn inverse(target: ArmPose) -> ([f64; 3], bool) {
    let (c, s) = (target.heading.cos(), target.heading.sin());
    let wx = target.x - LINKS[2] * c - BASE[0];
    let wy = target.y - LINKS[2] * s - BASE[1];
    let (l1, l2) = (LINKS[0], LINKS[1]);
    let r = (wx * wx + wy * wy).sqrt();
    let (rmin, rmax) = ((l1 - l2).abs() + 1e-9, l1 + l2);
    let mut clamped = false;
    let rc = if r > rmax {
        clamped = true;
        rmax
    } else if r < rmin {
        clamped = true;
        rmin
    } else {
        r
    };
    let cos2 = ((rc * rc - l1 * l1 - l2 * l2) / (2.0 * l1 * l2)).clamp(-1.0, 1.0);
    let j2 = if rc >= rmax { 0.0 } else { -cos2.acos() };
    let theta = wy.atan2(wx);
    let mut j1 = theta - (l2 * j2.sin()).atan2(l1 + l2 * j2.cos());
    if j1 < JOINT_LIMITS[0].0 {
        j1 += 2.0 * PI;
    }
    let mut j = [j1, j2, wrap(target.heading - j1 - j2)];
    for (v, (lo, hi)) in j.iter_mut().zip(JOINT_LIMITS) {
        if *v < lo || *v > hi {
            clamped = true;
            *v = v.clamp(lo, hi);
        }
    }
    (j, clamped)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_then_forward_recovers_reachable_targets() {
        for &(x, y) in &[(0.0, -0.5), (0.6, 0.6), (-0.85, 0.45), (0.8, -0.75), (0.0, 0.2)] {
            let pose = ArmPose { x, y, heading: radial_heading([x, y]) };
            let (j, clamped) = inverse(pose);
            assert!(!clamped, "({x}, {y}) clamped: {j:?}");
            let back = forward(j);
            assert!((back.x - x).abs() < 1e-9 && (back.y - y).abs() < 1e-9, "{back:?}");
            assert!((wrap(back.heading - pose.heading)).abs() < 1e-9);
        }
    }

    #[test]
    fn unreachable_target_clamps_to_full_extension() {
        let (j, clamped) = inverse(ArmPose { x: 5.0, y: 5.0, heading: 0.8 });
        assert!(clamped);
        assert_eq!(j[1], 0.0);
    }
}
