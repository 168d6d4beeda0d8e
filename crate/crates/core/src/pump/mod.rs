//! Virtual syringe pump: rack-and-pinion kinematics, the device, its wire protocol
//! and the TCP service.

mod device;
mod server;

pub use device::{
    AllowAll, Cmd, CommandFrame, Device, DeviceConfig, DoseAuthorizer, GateAuthorizer, ResponseFrame,
};
pub use server::{
    serve, EventHub, GatewayState, PendingDose, PumpClient, ServerHandle, ServiceConfig,
};

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PumpGeometry {
    pub steps_per_rev: u32,
    pub pinion_radius_mm: f64,
    pub syringe_inner_radius_mm: f64,
    pub plunger_travel_mm: f64,
    pub syringe_capacity_ml: f64,
}

impl Default for PumpGeometry {
    fn default() -> Self {
        PumpGeometry::new(200, 6.0, 7.0, 65.0)
    }
}

impl PumpGeometry {
    /// Geometry with the capacity implied by bore and travel.
    pub fn new(steps_per_rev: u32, pinion_radius_mm: f64, syringe_inner_radius_mm: f64, plunger_travel_mm: f64) -> Self {
        let syringe_capacity_ml = PI * syringe_inner_radius_mm.powi(2) * plunger_travel_mm / 1000.0;
        PumpGeometry { steps_per_rev, pinion_radius_mm, syringe_inner_radius_mm, plunger_travel_mm, syringe_capacity_ml }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.pinion_radius_mm, self.syringe_inner_radius_mm, self.plunger_travel_mm, self.syringe_capacity_ml];
        if self.steps_per_rev == 0 || positive.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::param("pump geometry values must be positive"));
        }
        let implied = PI * self.syringe_inner_radius_mm.powi(2) * self.plunger_travel_mm / 1000.0;
        if (self.syringe_capacity_ml - implied).abs() > 1e-3 * implied {
            return Err(Error::param(format!(
                "capacity {} mL disagrees with bore and travel ({implied:.4} mL)",
                self.syringe_capacity_ml
            )));
        }
        if self.step_mm() > self.plunger_travel_mm {
            return Err(Error::param("one step exceeds the plunger travel"));
        }
        Ok(())
    }

    /// Linear plunger advance per motor step.
    pub fn step_mm(&self) -> f64 {
        2.0 * PI * self.pinion_radius_mm / self.steps_per_rev as f64
    }

    /// Volume displaced per step, the step quantum.
    pub fn step_ml(&self) -> f64 {
        PI * self.syringe_inner_radius_mm.powi(2) * self.step_mm() / 1000.0
    }

    pub fn max_steps(&self) -> u64 {
        (self.plunger_travel_mm / self.step_mm() + 1e-9).floor() as u64
    }
}

/// Nearest whole step count and what rounding left over.
pub fn volume_to_steps(g: &PumpGeometry, v_ml: f64) -> Result<(u64, f64)> {
    if !(v_ml > 0.0) || !v_ml.is_finite() {
        return Err(Error::param(format!("volume {v_ml} mL must be positive")));
    }
    let q = g.step_ml();
    let steps = (v_ml / q).round() as u64;
    Ok((steps, v_ml - steps as f64 * q))
}

pub fn steps_to_volume(g: &PumpGeometry, steps: u64) -> f64 {
    steps as f64 * g.step_ml()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PumpStatus {
    Idle,
    Delivering,
    Fault,
}

/// The plunger position is kept in whole steps; millimetres and volume are derived.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PumpState {
    pub position_steps: u64,
    pub plunger_pos_mm: f64,
    pub remaining_ml: f64,
    pub status: PumpStatus,
    pub last_command_id: Option<String>,
}

impl PumpState {
    pub fn fresh(g: &PumpGeometry) -> Self {
        let mut s = PumpState {
            position_steps: 0,
            plunger_pos_mm: 0.0,
            remaining_ml: 0.0,
            status: PumpStatus::Idle,
            last_command_id: None,
        };
        s.set_position(g, 0);
        s
    }

    pub(crate) fn set_position(&mut self, g: &PumpGeometry, steps: u64) {
        self.position_steps = steps;
        self.plunger_pos_mm = steps as f64 * g.step_mm();
        self.remaining_ml = g.syringe_capacity_ml - steps_to_volume(g, steps);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeliveryResult {
    pub steps: u64,
    pub delivered_ml: f64,
    /// Simulated motor time.
    pub actuation_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ActuateFault {
    TravelLimit { requested_steps: u64, available_steps: u64 },
    NotIdle(PumpStatus),
}

impl ActuateFault {
    pub fn code(&self) -> &'static str {
        match self {
            ActuateFault::TravelLimit { .. } => "travel-limit",
            ActuateFault::NotIdle(PumpStatus::Fault) => "fault",
            ActuateFault::NotIdle(_) => "busy",
        }
    }
}

/// Checks travel before moving: either every step happens or none does.
pub fn check_travel(s: &PumpState, g: &PumpGeometry, steps: u64) -> std::result::Result<(), ActuateFault> {
    if s.status != PumpStatus::Idle {
        return Err(ActuateFault::NotIdle(s.status));
    }
    let available = g.max_steps().saturating_sub(s.position_steps);
    if steps > available {
        return Err(ActuateFault::TravelLimit { requested_steps: steps, available_steps: available });
    }
    Ok(())
}

pub fn actuate(
    s: &PumpState,
    g: &PumpGeometry,
    steps: u64,
    step_time_ms: f64,
) -> std::result::Result<(PumpState, DeliveryResult), ActuateFault> {
    check_travel(s, g, steps)?;
    let mut next = s.clone();
    next.set_position(g, s.position_steps + steps);
    let result = DeliveryResult {
        steps,
        delivered_ml: steps_to_volume(g, steps),
        actuation_ms: steps as f64 * step_time_ms,
    };
    Ok((next, result))
}
