//! Synthetic autopilot: fuzzed flight plans flown by a point-mass aircraft
//! under cascaded control loops, recorded at 5 Hz with mode labels.

mod dataset;
mod plan;
mod sim;

pub use dataset::{generate_dataset, generate_dataset_to, GenConfig, Variant};
pub use plan::{generate_flight_plan, Command, FlightPlan, PlanConstraints};
pub use sim::{
    simulate_flight, AircraftParams, CatalogLevel, FlightSim, FlightState, Gains, ModeTargets,
    Speeds, WindModel, CONTROL_PERIOD, MAX_FLIGHT_STEPS,
};
