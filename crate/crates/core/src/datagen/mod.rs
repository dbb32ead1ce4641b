//! Synthetic traffic: driver profiles, a ring-road microsimulator and
//! trajectory CSV input/output.

mod io;
mod profile;
mod sim;

pub use io::{ingest_csv, resample, write_tracks_csv, EpisodeMeta, IngestOptions, Units, CSV_HEADER, FEET_TO_M};
pub use profile::{make_driver_cohort, make_driver_cohort_with, CohortRanges, DriverProfile, Range};
pub use sim::{
    export_ego_frame, run_ring, simulate_highway, Density, Episode, RingRun, Road, ScenarioConfig, VehicleInit, EGO_ID, LANE_WIDTH,
    SEGMENT_ID_STRIDE, VEHICLE_LENGTH,
};
