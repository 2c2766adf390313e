//! 21-node articulated hand: wrist (0) and four joints per finger
//! (thumb 1-4, index 5-8, middle 9-12, ring 13-16, little 17-20).

use super::world::unit;
use crate::encoders::KeypointFrame;

/// Point the forearm extends from.
pub const BODY: [f64; 2] = [0.0, -1.6];
const WRIST_OFFSET: f64 = 0.25;
const KNUCKLE: f64 = 0.1;
const PHALANX: f64 = 0.05;
const CLOSED_RING: f64 = 0.03;
const SPREAD: [f64; 5] = [-0.9, -0.35, 0.0, 0.3, 0.6];

fn rot(u: [f64; 2], a: f64) -> [f64; 2] {
    let (c, s) = (a.cos(), a.sin());
    [u[0] * c - u[1] * s, u[0] * s + u[1] * c]
}

fn add(a: [f64; 2], b: [f64; 2], k: f64) -> [f64; 2] {
    [a[0] + k * b[0], a[1] + k * b[1]]
}

fn lerp(a: [f64; 2], b: [f64; 2], t: f64) -> [f64; 2] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t]
}

/// Hand pose for grasp point `g`, closure in `[0, 1]` and hover height.
///
/// At full closure the five fingertips sit on a ring centred on `g`, so
/// their centroid is `g`.
pub fn pose(g: [f64; 2], closure: f64, height: f64) -> KeypointFrame {
    let c = closure.clamp(0.0, 1.0);
    let u = unit([g[0] - BODY[0], g[1] - BODY[1]]);
    let wrist = add(g, u, -WRIST_OFFSET);
    let mut coords = vec![[wrist[0], wrist[1], height + 0.05]; 21];
    for (f, &spread) in SPREAD.iter().enumerate() {
        let knuckle = add(wrist, rot(u, 0.6 * spread), KNUCKLE);
        let dir = rot(u, spread);
        let tip_closed = add(g, rot(u, f as f64 * std::f64::consts::TAU / 5.0), CLOSED_RING);
        for k in 0..4 {
            let open = add(knuckle, dir, k as f64 * PHALANX);
            let closed = lerp(knuckle, tip_closed, k as f64 / 3.0);
            let p = lerp(open, closed, c);
            let z = height + 0.04 - 0.02 * k as f64 * c;
            coords[1 + 4 * f + k] = [p[0], p[1], z];
        }
    }
    KeypointFrame { coords }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_fingertips_centre_on_grasp_point() {
        let g = [0.3, -0.2];
        let c = pose(g, 1.0, 0.05).fingertip_centroid();
        assert!((c[0] - g[0]).abs() < 1e-12 && (c[1] - g[1]).abs() < 1e-12);
    }

    #[test]
    fn open_hand_spreads_fingers() {
        let g = [0.0, 0.0];
        let open = pose(g, 0.0, 0.1);
        let closed = pose(g, 1.0, 0.1);
        let spread = |k: &KeypointFrame| {
            let c = k.fingertip_centroid();
            [4, 8, 12, 16, 20].iter().map(|&i| (k.coords[i][0] - c[0]).hypot(k.coords[i][1] - c[1])).sum::<f64>()
        };
        assert!(spread(&open) > 2.0 * spread(&closed));
        assert_eq!(open.coords.len(), 21);
    }
}
