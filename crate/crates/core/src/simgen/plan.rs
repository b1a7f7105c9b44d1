use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// One high-level autopilot instruction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "cmd", rename_all = "snake_case")]
pub enum Command {
    Takeoff,
    Climb { target_ft: f64 },
    Cruise { duration_s: f64 },
    GotoWaypoint { x: f64, y: f64 },
    Loiter { duration_s: f64 },
    Descend { target_ft: f64 },
    Approach,
    Land,
}

impl Command {
    pub fn kind(&self) -> &'static str {
        match self {
            Command::Takeoff => "takeoff",
            Command::Climb { .. } => "climb",
            Command::Cruise { .. } => "cruise",
            Command::GotoWaypoint { .. } => "goto_waypoint",
            Command::Loiter { .. } => "loiter",
            Command::Descend { .. } => "descend",
            Command::Approach => "approach",
            Command::Land => "land",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlightPlan {
    commands: Vec<Command>,
}

impl FlightPlan {
    pub fn new(commands: Vec<Command>) -> Result<Self> {
        if commands.first() != Some(&Command::Takeoff) {
            return Err(Error::invalid("flight plan must start with takeoff"));
        }
        if commands.last() != Some(&Command::Land) || commands.len() < 2 {
            return Err(Error::invalid("flight plan must end with land"));
        }
        for c in &commands[1..commands.len() - 1] {
            match *c {
                Command::Takeoff | Command::Land => {
                    return Err(Error::invalid("takeoff/land only at the ends of a plan"))
                }
                Command::Climb { target_ft } | Command::Descend { target_ft }
                    if !(target_ft.is_finite() && target_ft > 0.0) =>
                {
                    return Err(Error::invalid(format!("target altitude {target_ft}")))
                }
                Command::Cruise { duration_s } | Command::Loiter { duration_s }
                    if !(duration_s.is_finite() && duration_s > 0.0) =>
                {
                    return Err(Error::invalid(format!("duration {duration_s}")))
                }
                Command::GotoWaypoint { x, y } if !(x.is_finite() && y.is_finite()) => {
                    return Err(Error::invalid("waypoint coordinates must be finite"))
                }
                _ => {}
            }
        }
        Ok(Self { commands })
    }

    pub fn commands(&self) -> &[Command] {
        &self.commands
    }
}

/// Bounds on generated plans. Command counts include takeoff and land.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanConstraints {
    pub min_commands: usize,
    pub max_commands: usize,
    pub min_altitude_ft: f64,
    pub max_altitude_ft: f64,
}

impl Default for PlanConstraints {
    fn default() -> Self {
        Self {
            min_commands: 4,
            max_commands: 7,
            min_altitude_ft: 250.0,
            max_altitude_ft: 1200.0,
        }
    }
}

impl PlanConstraints {
    /// Exactly `n` commands.
    pub fn budget(n: usize) -> Self {
        Self {
            min_commands: n,
            max_commands: n,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.min_commands < 3 {
            return Err(Error::invalid("a plan needs takeoff, one command and land (≥ 3)"));
        }
        if self.min_commands > self.max_commands {
            return Err(Error::invalid("min_commands exceeds max_commands"));
        }
        if !(self.min_altitude_ft > 60.0 && self.max_altitude_ft >= self.min_altitude_ft + 100.0) {
            return Err(Error::invalid("altitude band must lie above 60 ft and span ≥ 100 ft"));
        }
        Ok(())
    }
}

/// Rough dead-reckoning of where the aircraft will be, used only to pick
/// waypoints that require a real turn.
struct Nominal {
    x: f64,
    y: f64,
    heading: f64,
    alt: f64,
}

const NOMINAL_SPEED: f64 = 25.0;

/// Fuzz a valid, varied plan. Same seed, same plan.
pub fn generate_flight_plan(seed: u64, constraints: &PlanConstraints) -> Result<FlightPlan> {
    constraints.validate()?;
    let mut rng = rng::stream(seed, "plan", 0);
    let total = rng.random_range(constraints.min_commands..=constraints.max_commands);
    let middle = total - 2;
    let (lo, hi) = (constraints.min_altitude_ft, constraints.max_altitude_ft);

    let mut nom = Nominal {
        x: 0.0,
        y: 400.0,
        heading: 0.0,
        alt: 50.0,
    };
    let mut cmds = vec![Command::Takeoff];
    let mut prev = "takeoff";
    for slot in 0..middle {
        let last_slot = slot + 1 == middle;
        let cmd = if slot == 0 {
            Command::Climb {
                target_ft: rng.random_range(lo.max(300.0).min(hi)..=hi),
            }
        } else if last_slot && nom.alt >= 300.0 && rng.random_bool(0.4) {
            Command::Approach
        } else {
            let mut options = vec!["cruise", "goto_waypoint", "goto_waypoint", "loiter"];
            if nom.alt < hi - 150.0 {
                options.push("climb");
            }
            if nom.alt > lo + 150.0 {
                options.push("descend");
            }
            // consecutive identical modes would be indistinguishable
            options.retain(|k| *k != prev || *k == "goto_waypoint");
            match options[rng.random_range(0..options.len())] {
                "cruise" => Command::Cruise {
                    duration_s: rng.random_range(20.0..70.0),
                },
                "loiter" => Command::Loiter {
                    duration_s: rng.random_range(30.0..80.0),
                },
                "climb" => Command::Climb {
                    target_ft: rng.random_range((nom.alt + 100.0)..=hi),
                },
                "descend" => Command::Descend {
                    target_ft: rng.random_range(lo..=(nom.alt - 100.0)),
                },
                _ => {
                    let turn = rng.random_range(60f64..150.0).to_radians()
                        * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    let dist = rng.random_range(700.0..1500.0);
                    let bearing = nom.heading + turn;
                    Command::GotoWaypoint {
                        x: (nom.x + dist * bearing.sin()).round(),
                        y: (nom.y + dist * bearing.cos()).round(),
                    }
                }
            }
        };
        match cmd {
            Command::Climb { target_ft } | Command::Descend { target_ft } => {
                let run = (target_ft - nom.alt).abs() / 8.0 * NOMINAL_SPEED;
                nom.x += run * nom.heading.sin();
                nom.y += run * nom.heading.cos();
                nom.alt = target_ft;
            }
            Command::Cruise { duration_s } => {
                nom.x += duration_s * NOMINAL_SPEED * nom.heading.sin();
                nom.y += duration_s * NOMINAL_SPEED * nom.heading.cos();
            }
            Command::GotoWaypoint { x, y } => {
                nom.heading = (x - nom.x).atan2(y - nom.y);
                nom.x = x;
                nom.y = y;
            }
            Command::Approach => nom.alt = 150.0,
            _ => {}
        }
        prev = cmd.kind();
        cmds.push(cmd);
    }
    cmds.push(Command::Land);
    FlightPlan::new(cmds)
}
