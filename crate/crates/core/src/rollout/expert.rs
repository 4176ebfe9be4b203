//! Scripted experts with access to the hidden object state.
//!
//! Each expert is a pure function of the environment state, so a rollout can
//! be replayed from any clone.

use super::env::{EnvKind, ObjectClass, Phase, ToyEnv};

/// Grip used to close and heft (enough for the light object only).
pub const LIGHT_GRIP: f64 = 1.5;
/// Grip after sensing a heavy object.
pub const HEAVY_GRIP: f64 = 6.0;
/// Fingertip height while hefting.
pub const HEFT_Z: f64 = 0.01;
/// Ticks of the slow heft ramp from the table to [`HEFT_Z`].
pub const HEFT_TICKS: usize = 10;
const SETTLE_TICKS: usize = 2;
const AT: f64 = 0.005;

pub fn expert_action(env: &ToyEnv) -> Vec<f64> {
    match env.kind() {
        EnvKind::PickPlace => pickplace(env),
        EnvKind::Insertion => insertion(env),
        EnvKind::Reorient => reorient(env),
    }
}

/// Carry grip the expert settles on for a given object.
pub fn carry_grip(class: ObjectClass) -> f64 {
    match class {
        ObjectClass::Light => LIGHT_GRIP,
        ObjectClass::Heavy => HEAVY_GRIP,
    }
}

fn pickplace(env: &ToyEnv) -> Vec<f64> {
    let s = &env.state;
    let p = &env.params;
    let [gx, gz] = s.gripper.position;
    let [ox, _] = s.object_pos;
    let carry = p.carry_z;
    match s.phase {
        Phase::Done => vec![gx, carry, 0.0],
        Phase::PreGrasp if (ox - s.target_x).abs() < p.place_tol => vec![s.target_x, carry, 0.0],
        Phase::PreGrasp => {
            if (gx - ox).abs() > AT {
                vec![ox, carry, 0.0]
            } else if gz > 0.002 {
                vec![ox, 0.0, 0.0]
            } else {
                vec![ox, 0.0, LIGHT_GRIP]
            }
        }
        Phase::Grasped => {
            let since = s.tick - s.grasp_tick.unwrap_or(s.tick);
            if since < SETTLE_TICKS {
                return vec![gx, 0.0, LIGHT_GRIP];
            }
            if since < SETTLE_TICKS + HEFT_TICKS {
                let k = (since - SETTLE_TICKS + 1) as f64 / HEFT_TICKS as f64;
                return vec![gx, HEFT_Z * k, LIGHT_GRIP];
            }
            let g = carry_grip(s.latent.class);
            if (gx - s.target_x).abs() > AT {
                if gz < carry - 1e-3 {
                    vec![gx, carry, g]
                } else {
                    vec![s.target_x, carry, g]
                }
            } else if gz > 0.002 {
                vec![s.target_x, 0.0, g]
            } else {
                vec![s.target_x, 0.0, 0.0]
            }
        }
    }
}

fn insertion(env: &ToyEnv) -> Vec<f64> {
    let s = &env.state;
    let clear = env.params.surface_z + 0.08;
    let [gx, gz] = s.gripper.position;
    if (gx - s.target_x).abs() > 0.002 {
        if gz < env.params.surface_z + 0.05 {
            vec![gx, clear]
        } else {
            vec![s.target_x, clear]
        }
    } else {
        vec![s.target_x, 0.0]
    }
}

/// Presses at the middle of the rotation window, then turns.
fn reorient(env: &ToyEnv) -> Vec<f64> {
    let (lo, hi) = env.params.rotation_window(env.state.latent.friction_mu);
    let w = if env.state.tick < 3 { 0.0 } else { 0.1 };
    vec![(lo + hi) / 2.0, w]
}
