use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Driving style of one simulated driver.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DriverProfile {
    /// m/s
    pub desired_speed: f64,
    /// s
    pub time_headway: f64,
    /// m/s^2
    pub max_accel: f64,
    /// m/s^2
    pub comfort_decel: f64,
    /// m
    pub jam_distance: f64,
    /// Weight given to other drivers' gains, in `[0, 1]`.
    pub lane_change_politeness: f64,
    /// Minimum net gain before changing lanes, m/s^2.
    pub lane_change_threshold: f64,
    /// Time to move across one lane, s.
    pub lane_change_duration: f64,
    /// Relative amplitude of the slow desired-speed oscillation.
    pub speed_wander_amplitude: f64,
    /// Period of that oscillation, s.
    pub speed_wander_period: f64,
    pub seed: u64,
}

impl Default for DriverProfile {
    fn default() -> Self {
        Self {
            desired_speed: 30.0,
            time_headway: 1.5,
            max_accel: 1.5,
            comfort_decel: 2.0,
            jam_distance: 2.0,
            lane_change_politeness: 0.3,
            lane_change_threshold: 0.2,
            lane_change_duration: 4.0,
            speed_wander_amplitude: 0.0,
            speed_wander_period: 60.0,
            seed: 0,
        }
    }
}

impl DriverProfile {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("desired_speed", self.desired_speed),
            ("time_headway", self.time_headway),
            ("max_accel", self.max_accel),
            ("comfort_decel", self.comfort_decel),
            ("jam_distance", self.jam_distance),
            ("lane_change_threshold", self.lane_change_threshold),
            ("lane_change_duration", self.lane_change_duration),
            ("speed_wander_period", self.speed_wander_period),
        ];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Config(format!("driver profile: {name} must be > 0, got {v}")));
        }
        if !(0.0..=1.0).contains(&self.lane_change_politeness) {
            return Err(Error::Config("driver profile: politeness must lie in [0, 1]".into()));
        }
        if !(0.0..0.5).contains(&self.speed_wander_amplitude) {
            return Err(Error::Config("driver profile: speed wander amplitude must lie in [0, 0.5)".into()));
        }
        Ok(())
    }
}

/// Closed sampling interval.
pub type Range = (f64, f64);

/// Parameter ranges a cohort is drawn from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CohortRanges {
    pub desired_speed: Range,
    pub time_headway: Range,
    pub max_accel: Range,
    pub comfort_decel: Range,
    pub jam_distance: Range,
    pub lane_change_politeness: Range,
    pub lane_change_threshold: Range,
    pub lane_change_duration: Range,
    pub speed_wander_amplitude: Range,
    pub speed_wander_period: Range,
}

impl CohortRanges {
    /// Background traffic and pretraining drivers.
    pub fn pretraining() -> Self {
        Self {
            desired_speed: (22.0, 34.0),
            time_headway: (1.0, 1.8),
            max_accel: (1.0, 2.0),
            comfort_decel: (1.5, 2.5),
            jam_distance: (1.5, 3.0),
            lane_change_politeness: (0.2, 0.6),
            lane_change_threshold: (0.1, 0.3),
            lane_change_duration: (3.5, 5.0),
            speed_wander_amplitude: (0.02, 0.08),
            speed_wander_period: (30.0, 60.0),
        }
    }

    /// Held-out drivers: wider, partly disjoint ranges so that their style
    /// is not already covered by the pretraining pool.
    pub fn personal() -> Self {
        Self {
            desired_speed: (20.0, 36.0),
            time_headway: (0.7, 2.2),
            max_accel: (0.8, 2.6),
            comfort_decel: (1.5, 3.0),
            jam_distance: (1.5, 3.0),
            lane_change_politeness: (0.0, 0.8),
            lane_change_threshold: (0.05, 0.4),
            lane_change_duration: (2.5, 6.0),
            speed_wander_amplitude: (0.08, 0.16),
            speed_wander_period: (15.0, 30.0),
        }
    }

    fn fields(&self) -> [Range; 10] {
        [
            self.desired_speed,
            self.time_headway,
            self.max_accel,
            self.comfort_decel,
            self.jam_distance,
            self.lane_change_politeness,
            self.lane_change_threshold,
            self.lane_change_duration,
            self.speed_wander_amplitude,
            self.speed_wander_period,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.fields().iter().any(|(lo, hi)| !(lo <= hi && lo.is_finite() && hi.is_finite())) {
            return Err(Error::Config("cohort ranges must satisfy lo <= hi".into()));
        }
        Ok(())
    }
}

/// Draws `n` profiles from the pretraining ranges.
pub fn make_driver_cohort(n: usize, seed: u64) -> Result<Vec<DriverProfile>> {
    make_driver_cohort_with(n, seed, &CohortRanges::pretraining())
}

/// Draws `n` profiles. Desired speed is Latin-hypercube stratified so that
/// even small cohorts span its range; everything else is uniform.
pub fn make_driver_cohort_with(n: usize, seed: u64, ranges: &CohortRanges) -> Result<Vec<DriverProfile>> {
    if n == 0 {
        return Err(Error::Config("cohort size must be >= 1".into()));
    }
    ranges.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut strata: Vec<usize> = (0..n).collect();
    strata.shuffle(&mut rng);
    let draw = |r: Range, rng: &mut ChaCha8Rng| r.0 + (r.1 - r.0) * rng.gen::<f64>();

    let profiles = strata
        .into_iter()
        .map(|stratum| {
            let u = (stratum as f64 + rng.gen::<f64>()) / n as f64;
            let (lo, hi) = ranges.desired_speed;
            DriverProfile {
                desired_speed: lo + (hi - lo) * u,
                time_headway: draw(ranges.time_headway, &mut rng),
                max_accel: draw(ranges.max_accel, &mut rng),
                comfort_decel: draw(ranges.comfort_decel, &mut rng),
                jam_distance: draw(ranges.jam_distance, &mut rng),
                lane_change_politeness: draw(ranges.lane_change_politeness, &mut rng),
                lane_change_threshold: draw(ranges.lane_change_threshold, &mut rng),
                lane_change_duration: draw(ranges.lane_change_duration, &mut rng),
                speed_wander_amplitude: draw(ranges.speed_wander_amplitude, &mut rng),
                speed_wander_period: draw(ranges.speed_wander_period, &mut rng),
                seed: rng.gen(),
            }
        })
        .collect();
    Ok(profiles)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cohort_is_reproducible_and_distinct() {
        let a = make_driver_cohort(5, 11).unwrap();
        assert_eq!(a, make_driver_cohort(5, 11).unwrap());
        assert_ne!(a, make_driver_cohort(5, 12).unwrap());
        for i in 0..5 {
            a[i].validate().unwrap();
            for j in (i + 1)..5 {
                assert_ne!(a[i], a[j]);
            }
        }
    }

    #[test]
    fn desired_speed_spread_exceeds_twenty_percent() {
        for seed in 0..20 {
            for ranges in [CohortRanges::pretraining(), CohortRanges::personal()] {
                let c = make_driver_cohort_with(5, seed, &ranges).unwrap();
                let (lo, hi) = c.iter().fold((f64::MAX, f64::MIN), |(lo, hi), p| {
                    (lo.min(p.desired_speed), hi.max(p.desired_speed))
                });
                assert!((hi - lo) / lo >= 0.2, "seed {seed}: {lo}..{hi}");
            }
        }
    }

    #[test]
    fn empty_cohort_is_rejected() {
        assert!(make_driver_cohort(0, 1).is_err());
    }

    #[test]
    fn bad_profile_is_rejected() {
        let p = DriverProfile {
            lane_change_politeness: 1.5,
            ..Default::default()
        };
        assert!(p.validate().is_err());
        let p = DriverProfile {
            time_headway: 0.0,
            ..Default::default()
        };
        assert!(p.validate().is_err());
    }
}
