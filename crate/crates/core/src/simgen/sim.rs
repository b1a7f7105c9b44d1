//! Point-mass aircraft under cascaded P/PI loops.
//!
//! Loops: altitude → vertical speed → pitch → elevator, heading → roll →
//! aileron, airspeed → throttle (PI). Actuator commands reach the surfaces
//! after a transport delay of `actuator_lag` control steps, and the
//! recorded output channels are the surface positions actually applied.

use std::collections::VecDeque;
use std::f64::consts::PI;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::plan::{Command, FlightPlan};
use crate::error::{Error, Result};
use crate::rng;
use crate::trace::{ChangePoint, ChangePointAnnotation, MultivariateTrace, Schema, StateCatalog};

const FT_PER_M: f64 = 3.280_84;
const KT_PER_MPS: f64 = 1.943_844;
const G: f64 = 9.806_65;
pub const CONTROL_PERIOD: f64 = 0.2;

/// Controller modes; each one is a ground-truth state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlightState {
    TakeoffRoll,
    InitialClimb,
    Climb,
    Cruise,
    TurnLeft,
    TurnRight,
    Track,
    LoiterLeft,
    LoiterRight,
    Descend,
    Approach,
    Landing,
    Rollout,
}

/// How finely controller modes map onto catalog states.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CatalogLevel {
    /// 11 states; turn and loiter direction merged.
    #[default]
    Standard,
    /// 13 states; turn and loiter split by direction.
    Directional,
}

impl CatalogLevel {
    pub fn catalog(&self) -> StateCatalog {
        let names: &[&str] = match self {
            CatalogLevel::Standard => &[
                "takeoff_roll",
                "initial_climb",
                "climb",
                "cruise",
                "turn",
                "track",
                "loiter",
                "descend",
                "approach",
                "landing",
                "rollout",
            ],
            CatalogLevel::Directional => &[
                "takeoff_roll",
                "initial_climb",
                "climb",
                "cruise",
                "turn_left",
                "turn_right",
                "track",
                "loiter_left",
                "loiter_right",
                "descend",
                "approach",
                "landing",
                "rollout",
            ],
        };
        StateCatalog::new(names.iter().copied()).expect("static catalog")
    }

    pub fn state_id(&self, s: FlightState) -> usize {
        use FlightState::*;
        match self {
            CatalogLevel::Standard => match s {
                TakeoffRoll => 0,
                InitialClimb => 1,
                Climb => 2,
                Cruise => 3,
                TurnLeft | TurnRight => 4,
                Track => 5,
                LoiterLeft | LoiterRight => 6,
                Descend => 7,
                Approach => 8,
                Landing => 9,
                Rollout => 10,
            },
            CatalogLevel::Directional => match s {
                TakeoffRoll => 0,
                InitialClimb => 1,
                Climb => 2,
                Cruise => 3,
                TurnLeft => 4,
                TurnRight => 5,
                Track => 6,
                LoiterLeft => 7,
                LoiterRight => 8,
                Descend => 9,
                Approach => 10,
                Landing => 11,
                Rollout => 12,
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gains {
    /// altitude error (ft) → vertical speed command (ft/s)
    pub altitude: f64,
    /// vertical speed error (ft/s) → extra pitch (deg)
    pub vertical_speed: f64,
    /// pitch error (rad) → elevator
    pub pitch: f64,
    /// heading error (rad) → roll command (rad)
    pub heading: f64,
    /// roll error (rad) → aileron
    pub roll: f64,
    pub speed_p: f64,
    pub speed_i: f64,
    /// roll (rad) → rudder, turn coordination
    pub rudder: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Speeds {
    pub rotate: f64,
    pub climb: f64,
    pub cruise: f64,
    pub turn: f64,
    pub track: f64,
    pub loiter: f64,
    pub descend: f64,
    pub approach: f64,
    pub landing: f64,
}

/// Mean-reverting gust process per axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindModel {
    /// 1/s
    pub reversion: f64,
    /// longitudinal (m/s), lateral (deg roll), vertical (ft/s), per √s
    pub volatility: [f64; 3],
}

impl WindModel {
    pub fn calm() -> Self {
        Self {
            reversion: 0.1,
            volatility: [0.0; 3],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AircraftParams {
    pub gains: Gains,
    /// Control steps between a command and its effect on the surfaces.
    pub actuator_lag: usize,
    /// Measurement noise stddev per channel, in schema order.
    pub noise: [f64; 10],
    pub wind: WindModel,
    /// m/s
    pub speeds: Speeds,
    /// ft/s
    pub climb_rate: f64,
    /// ft/s
    pub descent_rate: f64,
    pub approach_rate: f64,
    pub landing_rate: f64,
    /// s
    pub pitch_time_constant: f64,
    pub roll_time_constant: f64,
    pub max_bank_deg: f64,
    pub loiter_bank_deg: f64,
    pub takeoff_pitch_deg: f64,
    /// m/s² at full throttle
    pub max_thrust: f64,
    pub drag_coefficient: f64,
    pub flap_drag: f64,
}

impl AircraftParams {
    /// Baseline airframe ("variant A").
    pub fn variant_a() -> Self {
        Self {
            gains: Gains {
                altitude: 0.12,
                vertical_speed: 0.6,
                pitch: 1.5,
                heading: 1.1,
                roll: 1.2,
                speed_p: 0.12,
                speed_i: 0.02,
                rudder: 0.4,
            },
            actuator_lag: 2,
            noise: [0.25, 0.3, 0.4, 3.0, 0.6, 0.01, 0.01, 0.01, 0.01, 0.004],
            wind: WindModel {
                reversion: 0.08,
                volatility: [0.35, 0.6, 0.6],
            },
            speeds: Speeds {
                rotate: 17.0,
                climb: 22.0,
                cruise: 26.0,
                turn: 24.0,
                track: 29.0,
                loiter: 21.0,
                descend: 27.0,
                approach: 20.0,
                landing: 18.0,
            },
            climb_rate: 9.0,
            descent_rate: 8.0,
            approach_rate: 5.0,
            landing_rate: 4.0,
            pitch_time_constant: 0.8,
            roll_time_constant: 0.6,
            max_bank_deg: 30.0,
            loiter_bank_deg: 22.0,
            takeoff_pitch_deg: 9.0,
            max_thrust: 6.0,
            drag_coefficient: 0.0045,
            flap_drag: 0.9,
        }
    }

    /// A related airframe with retuned loops and different rates
    /// ("variant B"). Same schema, same modes.
    pub fn variant_b() -> Self {
        let mut p = Self::variant_a();
        p.gains = Gains {
            altitude: 0.09,
            vertical_speed: 0.8,
            pitch: 1.9,
            heading: 0.8,
            roll: 1.6,
            speed_p: 0.18,
            speed_i: 0.03,
            rudder: 0.6,
        };
        p.actuator_lag = 3;
        p.speeds = Speeds {
            rotate: 20.0,
            climb: 25.0,
            cruise: 30.0,
            turn: 27.0,
            track: 33.0,
            loiter: 24.0,
            descend: 31.0,
            approach: 23.0,
            landing: 21.0,
        };
        p.climb_rate = 12.0;
        p.descent_rate = 10.0;
        p.approach_rate = 6.0;
        p.landing_rate = 5.0;
        p.pitch_time_constant = 1.0;
        p.roll_time_constant = 0.5;
        p.max_bank_deg = 35.0;
        p.loiter_bank_deg = 26.0;
        p.max_thrust = 7.5;
        p.drag_coefficient = 0.0040;
        p
    }

    pub fn validate(&self) -> Result<()> {
        if self.actuator_lag < 1 {
            return Err(Error::invalid("actuator lag must be at least one step"));
        }
        if self.noise.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::invalid("noise stddevs must be finite and ≥ 0"));
        }
        if self.wind.volatility.iter().any(|s| !(s.is_finite() && *s >= 0.0))
            || !(self.wind.reversion > 0.0)
        {
            return Err(Error::invalid("wind model needs positive reversion, volatility ≥ 0"));
        }
        let sp = &self.speeds;
        let speeds = [
            sp.rotate, sp.climb, sp.cruise, sp.turn, sp.track, sp.loiter, sp.descend, sp.approach,
            sp.landing,
        ];
        if speeds.iter().any(|v| !(v.is_finite() && *v > 5.0)) {
            return Err(Error::invalid("speeds must exceed 5 m/s"));
        }
        let positive = [
            self.climb_rate,
            self.descent_rate,
            self.approach_rate,
            self.landing_rate,
            self.pitch_time_constant,
            self.roll_time_constant,
            self.max_bank_deg,
            self.loiter_bank_deg,
            self.max_thrust,
            self.drag_coefficient,
        ];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::invalid("rates, time constants and thrust must be positive"));
        }
        Ok(())
    }

    /// Multiply speeds, rates and gains by independent factors in
    /// `[1 − spread, 1 + spread]`.
    pub fn jittered(&self, spread: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut p = self.clone();
        if spread <= 0.0 {
            return p;
        }
        let mut j = |v: &mut f64| *v *= 1.0 + rng.random_range(-spread..=spread);
        let g = &mut p.gains;
        for v in [
            &mut g.altitude,
            &mut g.vertical_speed,
            &mut g.pitch,
            &mut g.heading,
            &mut g.roll,
            &mut g.speed_p,
        ] {
            j(v);
        }
        let s = &mut p.speeds;
        for v in [
            &mut s.climb,
            &mut s.cruise,
            &mut s.turn,
            &mut s.track,
            &mut s.loiter,
            &mut s.descend,
            &mut s.approach,
            &mut s.landing,
        ] {
            j(v);
        }
        for v in [
            &mut p.climb_rate,
            &mut p.descent_rate,
            &mut p.approach_rate,
            &mut p.landing_rate,
        ] {
            j(v);
        }
        p
    }
}

impl Default for AircraftParams {
    fn default() -> Self {
        Self::variant_a()
    }
}

/// What the active mode asks of the inner loops.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModeTargets {
    pub state: FlightState,
    pub on_ground: bool,
    pub altitude_ft: f64,
    pub heading: f64,
    pub speed: f64,
    pub flaps: f64,
    pub max_climb: f64,
    pub max_descent: f64,
    /// Fixed vertical-speed command (ft/s) instead of altitude hold.
    pub vertical_speed: Option<f64>,
    /// Fixed pitch command (rad) instead of the vertical-speed loop.
    pub pitch: Option<f64>,
    /// Fixed bank (rad) instead of heading hold.
    pub bank: Option<f64>,
    pub throttle: Option<f64>,
    pub brake: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct Actuators {
    elevator: f64,
    aileron: f64,
    rudder: f64,
    throttle: f64,
    flaps: f64,
}

/// Aircraft + autopilot inner loops + sensors. Cloning duplicates the RNG,
/// so a clone replays identical noise.
#[derive(Clone, Debug)]
pub struct FlightSim {
    params: AircraftParams,
    rng: ChaCha8Rng,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub altitude_ft: f64,
    pub airspeed: f64,
    pub pitch: f64,
    pub roll: f64,
    pub vertical_speed: f64,
    speed_integral: f64,
    gust: [f64; 3],
    pending: VecDeque<Actuators>,
    applied: Actuators,
}

fn wrap_angle(a: f64) -> f64 {
    (a + PI).rem_euclid(2.0 * PI) - PI
}

impl FlightSim {
    pub fn new(params: AircraftParams, seed: u64) -> Result<Self> {
        params.validate()?;
        let idle = Actuators::default();
        let pending = std::iter::repeat_n(idle, params.actuator_lag).collect();
        Ok(Self {
            rng: rng::stream(seed, "sim", 0),
            params,
            x: 0.0,
            y: 0.0,
            heading: 0.0,
            altitude_ft: 0.0,
            airspeed: 0.0,
            pitch: 0.0,
            roll: 0.0,
            vertical_speed: 0.0,
            speed_integral: 0.0,
            gust: [0.0; 3],
            pending,
            applied: idle,
        })
    }

    pub fn params(&self) -> &AircraftParams {
        &self.params
    }

    fn gauss(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    fn command(&mut self, m: &ModeTargets) -> Actuators {
        let p = &self.params;
        let g = &p.gains;
        let dt = CONTROL_PERIOD;
        if m.on_ground {
            self.speed_integral = 0.0;
            return Actuators {
                elevator: 0.0,
                aileron: 0.0,
                rudder: (-g.rudder * wrap_angle(m.heading - self.heading)).clamp(-1.0, 1.0),
                throttle: m.throttle.unwrap_or(0.0),
                flaps: m.flaps,
            };
        }
        let v = self.airspeed.max(5.0);
        let pitch_auth = 20f64.to_radians();
        let pitch_cmd = match m.pitch {
            Some(p) => p,
            None => {
                let vs_cmd = m.vertical_speed.unwrap_or_else(|| {
                    (g.altitude * (m.altitude_ft - self.altitude_ft))
                        .clamp(-m.max_descent, m.max_climb)
                });
                let ff = (vs_cmd / FT_PER_M / v).clamp(-0.5, 0.5).asin();
                (ff + (g.vertical_speed * (vs_cmd - self.vertical_speed)).to_radians())
                    .clamp(-12f64.to_radians(), 15f64.to_radians())
            }
        };
        let elevator = (pitch_cmd / pitch_auth + g.pitch * (pitch_cmd - self.pitch)).clamp(-1.0, 1.0);

        let roll_auth = 45f64.to_radians();
        let max_bank = p.max_bank_deg.to_radians();
        let roll_cmd = match m.bank {
            Some(b) => b,
            None => (g.heading * wrap_angle(m.heading - self.heading)).clamp(-max_bank, max_bank),
        };
        let aileron = (roll_cmd / roll_auth + g.roll * (roll_cmd - self.roll)).clamp(-1.0, 1.0);
        let rudder = (g.rudder * self.roll / roll_auth).clamp(-1.0, 1.0);

        let throttle = match m.throttle {
            Some(t) => t,
            None => {
                let err = m.speed - self.airspeed;
                self.speed_integral = (self.speed_integral + err * dt).clamp(-40.0, 40.0);
                let trim = p.drag_coefficient * (1.0 + p.flap_drag * m.flaps) * m.speed * m.speed
                    / p.max_thrust;
                (trim + g.speed_p * err + g.speed_i * self.speed_integral).clamp(0.0, 1.0)
            }
        };
        Actuators {
            elevator,
            aileron,
            rudder,
            throttle,
            flaps: m.flaps,
        }
    }

    /// Advance one control step under `mode`; returns the recorded sample
    /// (schema order) taken at the start of the step.
    pub fn step(&mut self, mode: &ModeTargets) -> [f64; 10] {
        let dt = CONTROL_PERIOD;
        self.applied = self.pending.pop_front().expect("lag ≥ 1");
        let a = self.applied;

        let clean = [
            self.pitch.to_degrees(),
            self.roll.to_degrees(),
            self.heading.rem_euclid(2.0 * PI).to_degrees(),
            self.altitude_ft,
            (self.airspeed + self.gust[0]).max(0.0) * KT_PER_MPS,
            a.elevator,
            a.aileron,
            a.rudder,
            a.throttle,
            a.flaps,
        ];
        let mut sample = [0.0; 10];
        for (i, s) in sample.iter_mut().enumerate() {
            let sd = self.params.noise[i];
            *s = clean[i] + if sd > 0.0 { sd * self.gauss() } else { 0.0 };
        }

        let cmd = self.command(mode);
        self.pending.push_back(cmd);

        // gusts
        let w = self.params.wind;
        for i in 0..3 {
            let shock = if w.volatility[i] > 0.0 {
                w.volatility[i] * dt.sqrt() * self.gauss()
            } else {
                0.0
            };
            self.gust[i] += -w.reversion * self.gust[i] * dt + shock;
        }

        let p = &self.params;
        let drag = p.drag_coefficient * (1.0 + p.flap_drag * a.flaps) * self.airspeed.powi(2);
        if mode.on_ground {
            let brake = if mode.brake { 2.5 } else { 0.0 };
            let accel = p.max_thrust * a.throttle - drag - 0.02 * G - brake;
            self.airspeed = (self.airspeed + accel * dt).max(0.0);
            self.pitch = 0.0;
            self.roll = 0.0;
            self.altitude_ft = 0.0;
            self.vertical_speed = 0.0;
            self.heading += 0.5 * a.rudder * dt * (self.airspeed / 20.0).min(1.0);
        } else {
            let pitch_auth = 20f64.to_radians();
            let roll_auth = 45f64.to_radians();
            self.pitch += dt / p.pitch_time_constant * (a.elevator * pitch_auth - self.pitch);
            self.roll += dt / p.roll_time_constant * (a.aileron * roll_auth - self.roll)
                + (self.gust[1] * dt).to_radians();
            let accel = p.max_thrust * a.throttle - drag - G * self.pitch.sin();
            self.airspeed = (self.airspeed + accel * dt).max(1.0);
            self.heading += G * self.roll.tan() / self.airspeed.max(5.0) * dt;
            self.vertical_speed = self.airspeed * self.pitch.sin() * FT_PER_M + self.gust[2];
            self.altitude_ft = (self.altitude_ft + self.vertical_speed * dt).max(0.0);
        }
        self.heading = self.heading.rem_euclid(2.0 * PI);
        self.x += self.airspeed * self.heading.sin() * dt;
        self.y += self.airspeed * self.heading.cos() * dt;
        sample
    }

    fn finite(&self) -> bool {
        [
            self.x,
            self.y,
            self.heading,
            self.altitude_ft,
            self.airspeed,
            self.pitch,
            self.roll,
            self.vertical_speed,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Which plan command is running and where inside it we are.
struct Sequencer<'a> {
    plan: &'a FlightPlan,
    index: usize,
    state: FlightState,
    steps_in_state: usize,
    hold_altitude: f64,
    hold_heading: f64,
    loiter_bank: f64,
    finished: bool,
}

const MAX_PHASE_STEPS: usize = 4000;

impl<'a> Sequencer<'a> {
    fn new(plan: &'a FlightPlan) -> Self {
        Self {
            plan,
            index: 0,
            state: FlightState::TakeoffRoll,
            steps_in_state: 0,
            hold_altitude: 0.0,
            hold_heading: 0.0,
            loiter_bank: 0.0,
            finished: false,
        }
    }

    fn enter(&mut self, state: FlightState, sim: &FlightSim) {
        self.state = state;
        self.steps_in_state = 0;
        self.hold_altitude = sim.altitude_ft;
        self.hold_heading = sim.heading;
    }

    fn enter_command(&mut self, index: usize, sim: &mut FlightSim) {
        self.index = index;
        let cmd = self.plan.commands()[index];
        let state = match cmd {
            Command::Takeoff => FlightState::TakeoffRoll,
            Command::Climb { .. } => FlightState::Climb,
            Command::Cruise { .. } => FlightState::Cruise,
            Command::GotoWaypoint { x, y } => turn_direction(sim, x, y),
            Command::Loiter { .. } => {
                let left = sim.rng.random_bool(0.5);
                let bank = sim.params.loiter_bank_deg.to_radians();
                self.loiter_bank = if left { -bank } else { bank };
                if left {
                    FlightState::LoiterLeft
                } else {
                    FlightState::LoiterRight
                }
            }
            Command::Descend { .. } => FlightState::Descend,
            Command::Approach => FlightState::Approach,
            Command::Land => FlightState::Landing,
        };
        self.enter(state, sim);
    }

    fn next_command(&mut self, sim: &mut FlightSim) {
        if self.index + 1 >= self.plan.commands().len() {
            self.finished = true;
        } else {
            self.enter_command(self.index + 1, sim);
        }
    }

    /// Evaluate exit conditions of the current state at the start of a step.
    fn update(&mut self, sim: &mut FlightSim) {
        use FlightState::*;
        let p = sim.params.clone();
        let steps = self.steps_in_state;
        let timed_out = steps >= MAX_PHASE_STEPS;
        let cmd = self.plan.commands()[self.index];
        match self.state {
            TakeoffRoll => {
                if sim.airspeed >= p.speeds.rotate || timed_out {
                    self.enter(InitialClimb, sim);
                }
            }
            InitialClimb => {
                if sim.altitude_ft >= 50.0 || timed_out {
                    self.next_command(sim);
                }
            }
            Climb => {
                if let Command::Climb { target_ft } = cmd {
                    if sim.altitude_ft >= target_ft - 15.0 || timed_out {
                        self.next_command(sim);
                    }
                }
            }
            Descend => {
                if let Command::Descend { target_ft } = cmd {
                    if sim.altitude_ft <= target_ft + 15.0 || timed_out {
                        self.next_command(sim);
                    }
                }
            }
            Cruise | LoiterLeft | LoiterRight => {
                if let Command::Cruise { duration_s } | Command::Loiter { duration_s } = cmd {
                    if steps as f64 * CONTROL_PERIOD >= duration_s || timed_out {
                        self.next_command(sim);
                    }
                }
            }
            TurnLeft | TurnRight => {
                if let Command::GotoWaypoint { x, y } = cmd {
                    let err = wrap_angle(bearing(sim, x, y) - sim.heading);
                    if (err.abs() < 4f64.to_radians() && steps >= 10) || timed_out {
                        self.enter(Track, sim);
                    }
                }
            }
            Track => {
                if let Command::GotoWaypoint { x, y } = cmd {
                    let dist = (x - sim.x).hypot(y - sim.y);
                    let err = wrap_angle(bearing(sim, x, y) - sim.heading);
                    if dist < 120.0 || err.abs() > PI / 2.0 || timed_out {
                        self.next_command(sim);
                    }
                }
            }
            Approach => {
                if sim.altitude_ft <= 160.0 || timed_out {
                    self.next_command(sim);
                }
            }
            Landing => {
                if sim.altitude_ft <= 0.5 || timed_out {
                    self.enter(Rollout, sim);
                }
            }
            Rollout => {
                if sim.airspeed < 3.0 || timed_out {
                    self.finished = true;
                }
            }
        }
    }

    fn targets(&self, sim: &FlightSim) -> ModeTargets {
        use FlightState::*;
        let p = &sim.params;
        let cmd = self.plan.commands()[self.index];
        let mut m = ModeTargets {
            state: self.state,
            on_ground: false,
            altitude_ft: self.hold_altitude,
            heading: self.hold_heading,
            speed: p.speeds.cruise,
            flaps: 0.0,
            max_climb: p.climb_rate,
            max_descent: p.descent_rate,
            vertical_speed: None,
            pitch: None,
            bank: None,
            throttle: None,
            brake: false,
        };
        match self.state {
            TakeoffRoll => {
                m.on_ground = true;
                m.throttle = Some(1.0);
                m.flaps = 0.25;
            }
            InitialClimb => {
                m.pitch = Some(p.takeoff_pitch_deg.to_radians());
                m.throttle = Some(1.0);
                m.flaps = 0.25;
                m.bank = Some(0.0);
            }
            Climb => {
                if let Command::Climb { target_ft } = cmd {
                    m.altitude_ft = target_ft;
                }
                m.speed = p.speeds.climb;
            }
            Cruise => {}
            TurnLeft | TurnRight => {
                if let Command::GotoWaypoint { x, y } = cmd {
                    m.heading = bearing(sim, x, y);
                }
                m.speed = p.speeds.turn;
            }
            Track => {
                if let Command::GotoWaypoint { x, y } = cmd {
                    m.heading = bearing(sim, x, y);
                }
                m.speed = p.speeds.track;
            }
            LoiterLeft | LoiterRight => {
                m.bank = Some(self.loiter_bank);
                m.speed = p.speeds.loiter;
            }
            Descend => {
                if let Command::Descend { target_ft } = cmd {
                    m.altitude_ft = target_ft;
                }
                m.speed = p.speeds.descend;
            }
            Approach => {
                m.altitude_ft = 150.0;
                m.max_descent = p.approach_rate;
                m.speed = p.speeds.approach;
                m.flaps = 0.5;
            }
            Landing => {
                m.vertical_speed = Some(-p.landing_rate);
                m.speed = p.speeds.landing;
                m.flaps = 1.0;
            }
            Rollout => {
                m.on_ground = true;
                m.throttle = Some(0.0);
                m.flaps = 1.0;
                m.brake = true;
            }
        }
        m
    }
}

fn bearing(sim: &FlightSim, x: f64, y: f64) -> f64 {
    (x - sim.x).atan2(y - sim.y).rem_euclid(2.0 * PI)
}

fn turn_direction(sim: &FlightSim, x: f64, y: f64) -> FlightState {
    if wrap_angle(bearing(sim, x, y) - sim.heading) < 0.0 {
        FlightState::TurnLeft
    } else {
        FlightState::TurnRight
    }
}

/// Hard cap on flight length, far above any plan the generator emits.
pub const MAX_FLIGHT_STEPS: usize = 40_000;

/// Fly a plan and record the 10-channel trace with its ground-truth modes.
pub fn simulate_flight(
    plan: &FlightPlan,
    params: &AircraftParams,
    level: CatalogLevel,
    seed: u64,
    schema: &Arc<Schema>,
) -> Result<(MultivariateTrace, ChangePointAnnotation)> {
    if schema.len() != 10 {
        return Err(Error::Schema("simulator emits exactly 10 channels".into()));
    }
    let mut sim = FlightSim::new(params.clone(), seed)?;
    let mut seq = Sequencer::new(plan);
    seq.enter_command(0, &mut sim);

    let mut samples = Vec::new();
    let mut entries: Vec<ChangePoint> = Vec::new();
    let mut t = 0;
    loop {
        seq.update(&mut sim);
        if seq.finished {
            break;
        }
        if t >= MAX_FLIGHT_STEPS {
            return Err(Error::Diverged {
                step: t,
                what: "flight never completed its plan".into(),
            });
        }
        let id = level.state_id(seq.state);
        if entries.last().is_none_or(|e| e.state != id) {
            entries.push(ChangePoint { t, state: id });
        }
        let targets = seq.targets(&sim);
        let sample = sim.step(&targets);
        if !sim.finite() || sample.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged {
                step: t,
                what: "non-finite aircraft state".into(),
            });
        }
        samples.extend_from_slice(&sample);
        seq.steps_in_state += 1;
        t += 1;
    }
    let trace = MultivariateTrace::new(schema.clone(), samples, CONTROL_PERIOD)?;
    Ok((trace, ChangePointAnnotation::new(entries)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet() -> AircraftParams {
        let mut p = AircraftParams::variant_a();
        p.noise = [0.0; 10];
        p.wind = WindModel::calm();
        p
    }

    fn schema() -> Arc<Schema> {
        Arc::new(Schema::autopilot())
    }

    #[test]
    fn minimal_plan_visits_states_in_order() {
        let plan = FlightPlan::new(vec![
            Command::Takeoff,
            Command::Climb { target_ft: 300.0 },
            Command::Land,
        ])
        .unwrap();
        let lvl = CatalogLevel::Standard;
        let (trace, ann) =
            simulate_flight(&plan, &AircraftParams::default(), lvl, 3, &schema()).unwrap();
        let states: Vec<usize> = ann.entries().iter().map(|e| e.state).collect();
        let want: Vec<usize> = [
            FlightState::TakeoffRoll,
            FlightState::InitialClimb,
            FlightState::Climb,
            FlightState::Landing,
            FlightState::Rollout,
        ]
        .iter()
        .map(|s| lvl.state_id(*s))
        .collect();
        assert_eq!(states, want);
        assert!(trace.len() > 100);
    }

    #[test]
    fn altitude_monotone_while_climbing_without_disturbances() {
        let plan = FlightPlan::new(vec![
            Command::Takeoff,
            Command::Climb { target_ft: 300.0 },
            Command::Cruise { duration_s: 20.0 },
            Command::Land,
        ])
        .unwrap();
        let lvl = CatalogLevel::Standard;
        let (trace, ann) = simulate_flight(&plan, &quiet(), lvl, 1, &schema()).unwrap();
        let climb = lvl.state_id(FlightState::Climb);
        let e = ann.entries();
        let i = e.iter().position(|c| c.state == climb).unwrap();
        let (start, end) = (e[i].t, e[i + 1].t);
        let alt: Vec<f64> = trace.channel(3).collect();
        for t in start + 1..end {
            assert!(alt[t] >= alt[t - 1], "altitude fell at step {t}: {} → {}", alt[t - 1], alt[t]);
        }
        assert!(alt[end] > 280.0);
    }

    #[test]
    fn same_seed_same_bits() {
        let plan = super::super::generate_flight_plan(5, &Default::default()).unwrap();
        let p = AircraftParams::default();
        let a = simulate_flight(&plan, &p, CatalogLevel::Standard, 9, &schema()).unwrap();
        let b = simulate_flight(&plan, &p, CatalogLevel::Standard, 9, &schema()).unwrap();
        assert_eq!(a, b);
        let c = simulate_flight(&plan, &p, CatalogLevel::Standard, 10, &schema()).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn outputs_ignore_a_mode_switch_for_lag_steps() {
        let params = AircraftParams::default();
        let lag = params.actuator_lag;
        let plan = FlightPlan::new(vec![
            Command::Takeoff,
            Command::Climb { target_ft: 600.0 },
            Command::Cruise { duration_s: 60.0 },
            Command::Land,
        ])
        .unwrap();
        // fly to a cruising state, then fork
        let mut sim = FlightSim::new(params.clone(), 4).unwrap();
        let mut seq = Sequencer::new(&plan);
        seq.enter_command(0, &mut sim);
        while seq.state != FlightState::Cruise || seq.steps_in_state < 50 {
            seq.update(&mut sim);
            let m = seq.targets(&sim);
            sim.step(&m);
            seq.steps_in_state += 1;
        }
        let cruise = seq.targets(&sim);
        let mut descend = cruise;
        descend.state = FlightState::Descend;
        descend.altitude_ft = 250.0;
        descend.speed = params.speeds.descend;
        descend.flaps = 0.5;
        descend.bank = Some(0.3);

        let (mut a, mut b) = (sim.clone(), sim.clone());
        let bound: Vec<f64> = params.noise.iter().map(|s| 4.0 * s).collect();
        for k in 0..lag {
            let sa = a.step(&cruise);
            let sb = b.step(&descend);
            for c in 5..10 {
                assert!((sa[c] - sb[c]).abs() <= bound[c], "channel {c} moved at lag step {k}");
            }
        }
        let sa = a.step(&cruise);
        let sb = b.step(&descend);
        assert!((5..10).any(|c| (sa[c] - sb[c]).abs() > bound[c]));
    }

    #[test]
    fn invalid_params_rejected() {
        let mut p = AircraftParams::default();
        p.actuator_lag = 0;
        assert!(FlightSim::new(p, 0).is_err());
        let mut p = AircraftParams::default();
        p.noise[2] = -1.0;
        assert!(FlightSim::new(p, 0).is_err());
    }
}
