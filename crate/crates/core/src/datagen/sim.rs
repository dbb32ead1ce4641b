//! Ring-road microsimulation: IDM car following plus MOBIL lane changes.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::profile::DriverProfile;
use crate::error::{Error, Result};
use crate::graph::{TrackPoint, VehicleTrack, DT};

pub const VEHICLE_LENGTH: f64 = 5.0;
pub const LANE_WIDTH: f64 = 3.7;
/// Hardest braking a lane change may impose on the new follower, m/s^2.
const SAFE_DECEL: f64 = 4.0;
/// Seconds between lane-change decisions of one vehicle.
const DECISION_PERIOD: f64 = 1.0;
/// Seconds after a completed lane change before the next may start.
const LANE_CHANGE_COOLDOWN: f64 = 4.0;
/// Id stride separating the pieces of a track split at the ring seam.
pub const SEGMENT_ID_STRIDE: u64 = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Density {
    Low,
    Medium,
    High,
}

impl Density {
    /// Vehicles per kilometre per lane (ratio 1:2:3).
    pub fn per_km_lane(self) -> f64 {
        match self {
            Density::Low => 10.0,
            Density::Medium => 20.0,
            Density::High => 30.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Density::Low => "low",
            Density::Medium => "medium",
            Density::High => "high",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "low" => Ok(Density::Low),
            "medium" => Ok(Density::Medium),
            "high" => Ok(Density::High),
            other => Err(Error::Config(format!("unknown density `{other}` (low|medium|high)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Road {
    pub lanes: u32,
    /// Ring circumference, m.
    pub length: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioConfig {
    pub lane_count: u32,
    pub road_length: f64,
    pub density: Density,
    /// Recorded seconds (after warm-up).
    pub duration: f64,
    /// Unrecorded seconds simulated first so traffic settles.
    pub warmup: f64,
    pub dt_sim: f64,
    /// Timestamp given to the first recorded point.
    pub t0: f64,
    pub ego: DriverProfile,
    /// Background vehicles draw their profiles from this pool.
    pub background: Vec<DriverProfile>,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            lane_count: 3,
            road_length: 2000.0,
            density: Density::Medium,
            duration: 600.0,
            warmup: 60.0,
            dt_sim: 0.1,
            t0: 0.0,
            ego: DriverProfile::default(),
            background: vec![DriverProfile::default()],
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lane_count < 2 {
            return Err(Error::Config("lane_count must be >= 2".into()));
        }
        if !(self.duration > 0.0) || !(self.warmup >= 0.0) || !(self.road_length > 0.0) {
            return Err(Error::Config("duration and road length must be > 0, warm-up >= 0".into()));
        }
        check_dt(self.dt_sim)?;
        if self.background.is_empty() {
            return Err(Error::Config("background profile pool is empty".into()));
        }
        self.ego.validate()?;
        self.background.iter().try_for_each(DriverProfile::validate)
    }

    pub fn vehicles_per_lane(&self) -> usize {
        (self.density.per_km_lane() * self.road_length / 1000.0).round().max(1.0) as usize
    }
}

fn check_dt(dt: f64) -> Result<()> {
    let ratio = DT / dt;
    if !(dt > 0.0 && dt <= 0.1 + 1e-12) || (ratio - ratio.round()).abs() > 1e-9 {
        return Err(Error::Config(format!("dt_sim must be <= 0.1 s and divide {DT} s, got {dt}")));
    }
    Ok(())
}

/// Initial condition of one vehicle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VehicleInit {
    pub id: u64,
    pub profile: DriverProfile,
    pub lane: u32,
    /// Ring position of the front bumper, m.
    pub x: f64,
    pub speed: f64,
}

/// Positions on the ring, sampled every `DT` after warm-up.
#[derive(Clone, Debug, PartialEq)]
pub struct RingRun {
    pub road: Road,
    pub ids: Vec<u64>,
    /// `[step][vehicle]` samples with `x` in `[0, length)`.
    pub frames: Vec<Vec<TrackPoint>>,
    /// Smallest bumper-to-bumper gap seen in any lane at any step, m.
    pub min_gap: f64,
    pub lane_changes: usize,
}

#[derive(Clone, Copy, Debug)]
struct LaneChange {
    from_y: f64,
    start: f64,
    duration: f64,
}

#[derive(Clone, Debug)]
struct Vehicle {
    profile: DriverProfile,
    x: f64,
    v: f64,
    lane: u32,
    change: Option<LaneChange>,
    next_decision: f64,
    phase: f64,
}

impl Vehicle {
    fn lane_center(lane: u32) -> f64 {
        (lane as f64 + 0.5) * LANE_WIDTH
    }

    fn lateral(&self, t: f64) -> (f64, f64) {
        let to = Self::lane_center(self.lane);
        match self.change {
            Some(c) => {
                let u = ((t - c.start) / c.duration).clamp(0.0, 1.0);
                let y = c.from_y + (to - c.from_y) * 0.5 * (1.0 - (PI * u).cos());
                let vy = (to - c.from_y) * 0.5 * PI / c.duration * (PI * u).sin();
                (y, vy)
            }
            None => (to, 0.0),
        }
    }

    fn desired_speed(&self, t: f64) -> f64 {
        let p = &self.profile;
        p.desired_speed * (1.0 + p.speed_wander_amplitude * (2.0 * PI * t / p.speed_wander_period + self.phase).sin())
    }
}

/// Intelligent-driver acceleration. `leader` is `(gap, leader speed)`.
fn idm(p: &DriverProfile, v0: f64, v: f64, leader: Option<(f64, f64)>) -> f64 {
    let free = 1.0 - (v / v0).powi(4);
    match leader {
        None => p.max_accel * free,
        Some((gap, vl)) => {
            let s_star = p.jam_distance + (v * p.time_headway + v * (v - vl) / (2.0 * (p.max_accel * p.comfort_decel).sqrt())).max(0.0);
            let s = gap.max(0.01);
            p.max_accel * (free - (s_star / s).powi(2))
        }
    }
}

struct World {
    road: Road,
    vehicles: Vec<Vehicle>,
    /// Per lane, vehicle indices sorted by ring position.
    lanes: Vec<Vec<usize>>,
}

impl World {
    fn sort_lanes(&mut self) {
        for l in &mut self.lanes {
            l.clear();
        }
        for (i, v) in self.vehicles.iter().enumerate() {
            self.lanes[v.lane as usize].push(i);
        }
        let vs = &self.vehicles;
        for l in &mut self.lanes {
            l.sort_by(|&a, &b| vs[a].x.total_cmp(&vs[b].x).then(a.cmp(&b)));
        }
    }

    fn ahead(&self, from: f64, to: f64) -> f64 {
        (to - from).rem_euclid(self.road.length)
    }

    /// Leader and follower of a vehicle at `x` in `lane`, skipping `skip`.
    fn neighbors(&self, lane: u32, x: f64, skip: usize) -> (Option<usize>, Option<usize>) {
        let list = &self.lanes[lane as usize];
        let others: Vec<usize> = list.iter().copied().filter(|&j| j != skip).collect();
        if others.is_empty() {
            return (None, None);
        }
        let lead = others
            .iter()
            .copied()
            .min_by(|&a, &b| {
                let da = self.ahead(x, self.vehicles[a].x);
                let db = self.ahead(x, self.vehicles[b].x);
                da.total_cmp(&db).then(a.cmp(&b))
            })
            .expect("non-empty");
        let follow = others
            .iter()
            .copied()
            .min_by(|&a, &b| {
                let da = self.ahead(self.vehicles[a].x, x);
                let db = self.ahead(self.vehicles[b].x, x);
                da.total_cmp(&db).then(a.cmp(&b))
            })
            .expect("non-empty");
        (Some(lead), Some(follow))
    }

    fn gap(&self, follower_x: f64, leader: usize) -> f64 {
        self.ahead(follower_x, self.vehicles[leader].x) - VEHICLE_LENGTH
    }

    fn accel_behind(&self, i: usize, x: f64, leader: Option<usize>, t: f64) -> f64 {
        let v = &self.vehicles[i];
        let lead = leader.filter(|&l| l != i).map(|l| (self.gap(x, l), self.vehicles[l].v));
        idm(&v.profile, v.desired_speed(t), v.v, lead)
    }

    fn leader_in_lane(&self, i: usize) -> Option<usize> {
        let list = &self.lanes[self.vehicles[i].lane as usize];
        if list.len() < 2 {
            return None;
        }
        let pos = list.iter().position(|&j| j == i).expect("vehicle listed in its lane");
        Some(list[(pos + 1) % list.len()])
    }

    fn accelerations(&self, t: f64) -> Vec<f64> {
        (0..self.vehicles.len())
            .map(|i| self.accel_behind(i, self.vehicles[i].x, self.leader_in_lane(i), t))
            .collect()
    }

    /// MOBIL decision for vehicle `i`; returns the chosen adjacent lane.
    fn choose_lane(&self, i: usize, acc: &[f64], t: f64) -> Option<u32> {
        let me = &self.vehicles[i];
        let p = &me.profile;
        let old_leader = self.leader_in_lane(i);
        let (_, old_follower) = self.neighbors(me.lane, me.x, i);
        let mut best: Option<(f64, u32)> = None;
        let candidates = [me.lane.checked_sub(1), Some(me.lane + 1).filter(|&l| l < self.road.lanes)];
        for lane in candidates.into_iter().flatten() {
            let (lead, follow) = self.neighbors(lane, me.x, i);
            if let Some(l) = lead {
                if self.gap(me.x, l) < me.profile.jam_distance {
                    continue;
                }
            }
            if let Some(f) = follow {
                if self.gap(self.vehicles[f].x, i) < self.vehicles[f].profile.jam_distance {
                    continue;
                }
            }
            let new_follower_acc = follow.map(|f| self.accel_behind(f, self.vehicles[f].x, Some(i), t));
            if new_follower_acc.is_some_and(|a| a < -SAFE_DECEL) {
                continue;
            }
            let my_gain = self.accel_behind(i, me.x, lead, t) - acc[i];
            let new_follower_loss = match (follow, new_follower_acc) {
                (Some(f), Some(a)) => a - self.accel_behind(f, self.vehicles[f].x, lead, t),
                _ => 0.0,
            };
            let old_follower_gain = match old_follower.filter(|&f| f != i) {
                Some(f) => self.accel_behind(f, self.vehicles[f].x, old_leader.filter(|&l| l != f), t) - acc[f],
                None => 0.0,
            };
            let incentive = my_gain + p.lane_change_politeness * (new_follower_loss + old_follower_gain);
            if incentive > p.lane_change_threshold && best.is_none_or(|(b, _)| incentive > b) {
                best = Some((incentive, lane));
            }
        }
        best.map(|(_, l)| l)
    }

    fn min_gap(&self) -> f64 {
        let mut min = f64::INFINITY;
        for list in &self.lanes {
            if list.len() < 2 {
                continue;
            }
            for (k, &i) in list.iter().enumerate() {
                let j = list[(k + 1) % list.len()];
                min = min.min(self.gap(self.vehicles[i].x, j));
            }
        }
        min
    }
}

/// Integrates the given vehicles and records every `DT` after `warmup`.
pub fn run_ring(road: Road, init: &[VehicleInit], warmup: f64, duration: f64, dt_sim: f64) -> Result<RingRun> {
    check_dt(dt_sim)?;
    if init.is_empty() {
        return Err(Error::Config("no vehicles to simulate".into()));
    }
    for v in init {
        v.profile.validate()?;
        if v.lane >= road.lanes {
            return Err(Error::Config(format!(
                "vehicle {} starts in lane {} of {}",
                v.id, v.lane, road.lanes
            )));
        }
    }
    for lane in 0..road.lanes {
        let need: f64 = init
            .iter()
            .filter(|v| v.lane == lane)
            .map(|v| VEHICLE_LENGTH + v.profile.jam_distance)
            .sum();
        if need > road.length {
            return Err(Error::Infeasible(format!(
                "lane {lane} needs {need:.0} m at jam spacing but the ring is {:.0} m",
                road.length
            )));
        }
    }

    let mut world = World {
        road,
        vehicles: init
            .iter()
            .map(|v| {
                let mut rng = ChaCha8Rng::seed_from_u64(v.profile.seed ^ v.id.wrapping_mul(0x9E37_79B9_7F4A_7C15));
                Vehicle {
                    profile: v.profile,
                    x: v.x.rem_euclid(road.length),
                    v: v.speed.max(0.0),
                    lane: v.lane,
                    change: None,
                    next_decision: rng.gen_range(0.0..DECISION_PERIOD),
                    phase: rng.gen_range(0.0..2.0 * PI),
                }
            })
            .collect(),
        lanes: vec![Vec::new(); road.lanes as usize],
    };
    world.sort_lanes();

    let per_sample = (DT / dt_sim).round() as usize;
    let warm_steps = (warmup / dt_sim).round() as usize;
    let samples = (duration / DT).round() as usize;
    let total = warm_steps + samples.saturating_sub(1) * per_sample + 1;

    let mut run = RingRun {
        road,
        ids: init.iter().map(|v| v.id).collect(),
        frames: Vec::with_capacity(samples),
        min_gap: world.min_gap(),
        lane_changes: 0,
    };

    for step in 0..total {
        let t = step as f64 * dt_sim;
        if step >= warm_steps && (step - warm_steps).is_multiple_of(per_sample) {
            run.frames.push(
                world
                    .vehicles
                    .iter()
                    .map(|v| {
                        let (y, vy) = v.lateral(t);
                        TrackPoint {
                            t,
                            x: v.x,
                            y,
                            speed: v.v.hypot(vy),
                            lane: v.lane,
                        }
                    })
                    .collect(),
            );
        }
        if step + 1 == total {
            break;
        }

        for v in &mut world.vehicles {
            if let Some(c) = v.change {
                if t >= c.start + c.duration {
                    v.change = None;
                    v.next_decision = t + LANE_CHANGE_COOLDOWN;
                }
            }
        }

        let acc = world.accelerations(t);
        let mut changed = false;
        for i in 0..world.vehicles.len() {
            let v = &world.vehicles[i];
            if v.change.is_some() || t < v.next_decision {
                continue;
            }
            world.vehicles[i].next_decision = t + DECISION_PERIOD;
            if let Some(lane) = world.choose_lane(i, &acc, t) {
                let (from_y, _) = world.vehicles[i].lateral(t);
                let v = &mut world.vehicles[i];
                v.change = Some(LaneChange {
                    from_y,
                    start: t,
                    duration: v.profile.lane_change_duration,
                });
                v.lane = lane;
                world.sort_lanes();
                run.lane_changes += 1;
                changed = true;
            }
        }
        let acc = if changed { world.accelerations(t) } else { acc };

        for (v, a) in world.vehicles.iter_mut().zip(acc) {
            let v_new = v.v + a * dt_sim;
            let dx = if v_new >= 0.0 {
                0.5 * (v.v + v_new) * dt_sim
            } else {
                // Stops inside the step.
                -v.v * v.v / (2.0 * a)
            };
            v.v = v_new.max(0.0);
            v.x = (v.x + dx).rem_euclid(road.length);
        }
        world.sort_lanes();
        run.min_gap = run.min_gap.min(world.min_gap());
    }
    Ok(run)
}

/// Episode output in the ego-centred frame; see [`simulate_highway`].
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub tracks: Vec<VehicleTrack>,
    pub ego_id: u64,
    pub min_gap: f64,
    pub lane_changes: usize,
}

/// Ego vehicle id in every simulated episode.
pub const EGO_ID: u64 = 0;

/// Places the scenario's vehicles on the ring and simulates it.
///
/// The ego starts in the middle lane; background vehicles are spread
/// evenly over all lanes with jittered spacing and random profiles from the
/// pool. Exported `x` is the ego's odometer plus every other vehicle's ring
/// offset from the ego, wrapped to `[-L/2, L/2)`, so the seam sits opposite
/// the ego and never crosses its neighborhood. A vehicle passing through
/// the seam continues under a new id (`id + k * SEGMENT_ID_STRIDE`).
pub fn simulate_highway(scenario: &ScenarioConfig) -> Result<Episode> {
    scenario.validate()?;
    let road = Road {
        lanes: scenario.lane_count,
        length: scenario.road_length,
    };
    let per_lane = scenario.vehicles_per_lane();
    let total = per_lane * scenario.lane_count as usize;
    if total as u64 >= SEGMENT_ID_STRIDE {
        return Err(Error::Config(format!("at most {} vehicles supported", SEGMENT_ID_STRIDE - 1)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let ego_lane = scenario.lane_count / 2;
    let spacing = scenario.road_length / per_lane as f64;
    let mut init = Vec::with_capacity(total);
    let mut next_id = EGO_ID + 1;
    for lane in 0..scenario.lane_count {
        let offset = rng.gen_range(0.0..spacing);
        for k in 0..per_lane {
            let is_ego = lane == ego_lane && k == 0;
            let profile = if is_ego {
                scenario.ego
            } else {
                let mut p = scenario.background[rng.gen_range(0..scenario.background.len())];
                p.seed ^= rng.gen::<u64>();
                p
            };
            let x = if is_ego {
                0.0
            } else {
                let base = if lane == ego_lane { 0.0 } else { offset };
                base + k as f64 * spacing + rng.gen_range(-0.15..0.15) * spacing
            };
            let speed =
                (0.8 * profile.desired_speed).min((spacing - VEHICLE_LENGTH - profile.jam_distance).max(0.0) / profile.time_headway);
            let id = if is_ego {
                EGO_ID
            } else {
                next_id += 1;
                next_id - 1
            };
            init.push(VehicleInit {
                id,
                profile,
                lane,
                x,
                speed,
            });
        }
    }
    let run = run_ring(road, &init, scenario.warmup, scenario.duration, scenario.dt_sim)?;
    Ok(Episode {
        tracks: export_ego_frame(&run, EGO_ID, scenario.t0)?,
        ego_id: EGO_ID,
        min_gap: run.min_gap,
        lane_changes: run.lane_changes,
    })
}

/// Unrolls a ring run into the ego-centred frame described at
/// [`simulate_highway`], with timestamps starting at `t0`.
pub fn export_ego_frame(run: &RingRun, ego_id: u64, t0: f64) -> Result<Vec<VehicleTrack>> {
    let ego = run
        .ids
        .iter()
        .position(|&id| id == ego_id)
        .ok_or_else(|| Error::Config(format!("ego {ego_id} not in run")))?;
    let l = run.road.length;
    let wrap = |d: f64| (d + 0.5 * l).rem_euclid(l) - 0.5 * l;

    let mut odometer = 0.0;
    let mut prev_ego = run.frames.first().map(|f| f[ego].x).unwrap_or(0.0);
    let mut segment = vec![0u64; run.ids.len()];
    let mut prev_rel: Vec<Option<f64>> = vec![None; run.ids.len()];
    let mut tracks: Vec<VehicleTrack> = Vec::new();
    let mut open: Vec<usize> = vec![usize::MAX; run.ids.len()];

    for (k, frame) in run.frames.iter().enumerate() {
        let ego_x = frame[ego].x;
        odometer += wrap(ego_x - prev_ego);
        prev_ego = ego_x;
        let t = t0 + k as f64 * DT;
        for (i, p) in frame.iter().enumerate() {
            let rel = if i == ego { 0.0 } else { wrap(p.x - ego_x) };
            if let Some(prev) = prev_rel[i] {
                if (rel - prev).abs() > 0.5 * l {
                    segment[i] += 1;
                    open[i] = usize::MAX;
                }
            }
            prev_rel[i] = Some(rel);
            if open[i] == usize::MAX {
                open[i] = tracks.len();
                tracks.push(VehicleTrack {
                    vehicle_id: run.ids[i] + segment[i] * SEGMENT_ID_STRIDE,
                    points: Vec::new(),
                });
            }
            tracks[open[i]].points.push(TrackPoint {
                t,
                x: odometer + rel,
                ..*p
            });
        }
    }
    tracks.sort_by_key(|t| (t.vehicle_id, t.points[0].t.to_bits()));
    Ok(tracks)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn road() -> Road {
        Road { lanes: 3, length: 2000.0 }
    }

    fn mean_speed(run: &RingRun, i: usize) -> f64 {
        run.frames.iter().map(|f| f[i].speed).sum::<f64>() / run.frames.len() as f64
    }

    #[test]
    fn free_road_reaches_desired_speed() {
        let p = DriverProfile {
            desired_speed: 30.0,
            ..Default::default()
        };
        let init = [VehicleInit {
            id: 0,
            profile: p,
            lane: 1,
            x: 0.0,
            speed: 10.0,
        }];
        let run = run_ring(road(), &init, 0.0, 60.0, 0.1).unwrap();
        let v = run.frames.last().unwrap()[0].speed;
        assert!((v - 30.0).abs() / 30.0 < 0.01, "{v}");
    }

    #[test]
    fn follower_never_collides_with_slow_leader() {
        let fast = DriverProfile {
            desired_speed: 32.0,
            lane_change_threshold: 1e9,
            ..Default::default()
        };
        let slow = DriverProfile {
            desired_speed: 15.0,
            lane_change_threshold: 1e9,
            ..Default::default()
        };
        let init = [
            VehicleInit {
                id: 0,
                profile: fast,
                lane: 0,
                x: 0.0,
                speed: 30.0,
            },
            VehicleInit {
                id: 1,
                profile: slow,
                lane: 0,
                x: 60.0,
                speed: 15.0,
            },
        ];
        let run = run_ring(road(), &init, 0.0, 300.0, 0.1).unwrap();
        assert!(run.min_gap > 0.0, "{}", run.min_gap);
        let last = run.frames.last().unwrap();
        assert!((last[0].speed - last[1].speed).abs() < 0.5);
    }

    #[test]
    fn higher_desired_speed_drives_faster() {
        let scenario = |v0: f64| ScenarioConfig {
            density: Density::Low,
            duration: 300.0,
            ego: DriverProfile {
                desired_speed: v0,
                ..Default::default()
            },
            background: vec![DriverProfile {
                desired_speed: 27.0,
                ..Default::default()
            }],
            seed: 4,
            ..Default::default()
        };
        let mean = |e: &Episode| {
            let t = e.tracks.iter().find(|t| t.vehicle_id == EGO_ID).unwrap();
            t.points.iter().map(|p| p.speed).sum::<f64>() / t.points.len() as f64
        };
        let fast = simulate_highway(&scenario(30.0)).unwrap();
        let slow = simulate_highway(&scenario(25.0)).unwrap();
        assert!(mean(&fast) > mean(&slow));
    }

    #[test]
    fn cohort_extremes_differ_by_more_than_one_mps() {
        let pool = super::super::make_driver_cohort(5, 3).unwrap();
        let (lo, hi) = (
            pool.iter().min_by(|a, b| a.desired_speed.total_cmp(&b.desired_speed)).unwrap(),
            pool.iter().max_by(|a, b| a.desired_speed.total_cmp(&b.desired_speed)).unwrap(),
        );
        let init = [
            VehicleInit {
                id: 0,
                profile: *lo,
                lane: 0,
                x: 0.0,
                speed: 20.0,
            },
            VehicleInit {
                id: 1,
                profile: *hi,
                lane: 2,
                x: 500.0,
                speed: 20.0,
            },
        ];
        let run = run_ring(road(), &init, 30.0, 120.0, 0.1).unwrap();
        assert!(mean_speed(&run, 1) - mean_speed(&run, 0) > 1.0);
    }

    #[test]
    fn dense_traffic_is_collision_free_and_deterministic() {
        for density in [Density::Low, Density::Medium, Density::High] {
            let scenario = ScenarioConfig {
                density,
                duration: 120.0,
                background: super::super::make_driver_cohort(10, 1).unwrap(),
                seed: 9,
                ..Default::default()
            };
            let a = simulate_highway(&scenario).unwrap();
            assert!(a.min_gap > 0.0, "{density:?}: {}", a.min_gap);
            assert!(a.lane_changes > 0, "{density:?}");
            assert_eq!(a, simulate_highway(&scenario).unwrap());
            for t in &a.tracks {
                t.validate(DT).unwrap();
                assert!(t.points.iter().all(|p| p.lane < 3 && p.speed >= 0.0));
            }
        }
    }

    #[test]
    fn infeasible_density_is_reported() {
        let scenario = ScenarioConfig {
            road_length: 50.0,
            density: Density::High,
            ..Default::default()
        };
        let init: Vec<VehicleInit> = (0..20)
            .map(|i| VehicleInit {
                id: i,
                profile: DriverProfile::default(),
                lane: 0,
                x: i as f64,
                speed: 0.0,
            })
            .collect();
        assert!(run_ring(road(), &init[..1], 0.0, 1.0, 0.1).is_ok());
        let tiny = Road { lanes: 2, length: 100.0 };
        assert!(matches!(run_ring(tiny, &init, 0.0, 1.0, 0.1), Err(Error::Infeasible(_))));
        assert!(simulate_highway(&scenario).is_ok() || matches!(simulate_highway(&scenario), Err(Error::Infeasible(_))));
    }

    #[test]
    fn rejects_coarse_integration_step() {
        let init = [VehicleInit {
            id: 0,
            profile: DriverProfile::default(),
            lane: 0,
            x: 0.0,
            speed: 0.0,
        }];
        assert!(run_ring(road(), &init, 0.0, 1.0, 0.2).is_err());
        assert!(run_ring(road(), &init, 0.0, 1.0, 0.03).is_err());
    }

    #[test]
    fn export_splits_at_seam_and_keeps_ego_continuous() {
        let slow = DriverProfile {
            desired_speed: 10.0,
            lane_change_threshold: 1e9,
            ..Default::default()
        };
        let fast = DriverProfile {
            desired_speed: 35.0,
            lane_change_threshold: 1e9,
            ..Default::default()
        };
        let init = [
            VehicleInit {
                id: EGO_ID,
                profile: fast,
                lane: 0,
                x: 0.0,
                speed: 35.0,
            },
            VehicleInit {
                id: 1,
                profile: slow,
                lane: 1,
                x: 10.0,
                speed: 10.0,
            },
        ];
        let run = run_ring(Road { lanes: 2, length: 500.0 }, &init, 0.0, 60.0, 0.1).unwrap();
        let tracks = export_ego_frame(&run, EGO_ID, 100.0).unwrap();
        let ego = tracks.iter().find(|t| t.vehicle_id == EGO_ID).unwrap();
        assert_eq!(ego.points[0].t, 100.0);
        assert!(ego.points.windows(2).all(|w| w[1].x > w[0].x));
        // The ego laps the slow car, which crosses the seam behind it.
        assert!(tracks.iter().any(|t| t.vehicle_id == 1 + SEGMENT_ID_STRIDE));
        for t in &tracks {
            t.validate(DT).unwrap();
            for w in t.points.windows(2) {
                assert!((w[1].x - w[0].x).abs() < 30.0);
            }
        }
    }
}
