//! Trajectory CSV files (`vehicle_id,t,x,y,speed,lane`) and the metadata
//! sidecar written next to each simulated episode.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::{TrackPoint, VehicleTrack, DT};

pub const CSV_HEADER: [&str; 6] = ["vehicle_id", "t", "x", "y", "speed", "lane"];
pub const FEET_TO_M: f64 = 0.3048;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Units {
    Meters,
    Feet,
}

impl Units {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "m" | "meters" => Ok(Units::Meters),
            "feet" | "ft" => Ok(Units::Feet),
            other => Err(Error::Config(format!("unknown units `{other}` (m|feet)"))),
        }
    }

    fn factor(self) -> f64 {
        match self {
            Units::Meters => 1.0,
            Units::Feet => FEET_TO_M,
        }
    }
}

/// Writes tracks with shortest round-trip float formatting, so reading the
/// file back reproduces every value bit for bit.
pub fn write_tracks_csv(path: impl AsRef<Path>, tracks: &[VehicleTrack]) -> Result<()> {
    let mut out = CSV_HEADER.join(",");
    out.push('\n');
    for t in tracks {
        for p in &t.points {
            let _ = writeln!(out, "{},{},{},{},{},{}", t.vehicle_id, p.t, p.x, p.y, p.speed, p.lane);
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Episode sidecar (`ego_id=`, `seed=`, `density=` plus optional extras).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpisodeMeta {
    pub entries: Vec<(String, String)>,
}

impl EpisodeMeta {
    pub fn new(ego_id: u64, seed: u64, density: &str) -> Self {
        Self {
            entries: vec![
                ("ego_id".into(), ego_id.to_string()),
                ("seed".into(), seed.to_string()),
                ("density".into(), density.into()),
            ],
        }
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.entries.push((key.into(), value.to_string()));
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn ego_id(&self) -> Option<u64> {
        self.get("ego_id")?.parse().ok()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let text: String = self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        fs::write(path, text)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg: "expected key=value".into(),
            })?;
            entries.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(Self { entries })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IngestOptions {
    pub units: Units,
    /// Resample onto the `DT` grid by linear interpolation.
    pub resample: bool,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            units: Units::Meters,
            resample: true,
        }
    }
}

struct Row {
    line: usize,
    t: f64,
    x: f64,
    y: f64,
    speed: Option<f64>,
    lane: u32,
}

/// Reads a trajectory CSV. Columns are located by header name; `speed` may
/// be missing or blank, in which case it is derived from positions.
pub fn ingest_csv(path: impl AsRef<Path>, options: IngestOptions) -> Result<Vec<VehicleTrack>> {
    let path = path.as_ref();
    let name = path.display().to_string();
    let perr = |line: usize, msg: String| Error::Parse {
        path: name.clone(),
        line,
        msg,
    };

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| perr(0, e.to_string()))?;
    let headers = reader.headers().map_err(|e| perr(1, e.to_string()))?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let mut idx = [0usize; 5];
    for (slot, name) in idx.iter_mut().zip(["vehicle_id", "t", "x", "y", "lane"]) {
        *slot = col(name).ok_or_else(|| perr(1, format!("missing column `{name}`")))?;
    }
    let [c_id, c_t, c_x, c_y, c_lane] = idx;
    let c_speed = col("speed");
    let k = options.units.factor();

    let mut by_id: BTreeMap<u64, Vec<Row>> = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            perr(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let field = |c: usize| record.get(c).unwrap_or("");
        let num = |c: usize, what: &str| -> Result<f64> {
            let v: f64 = field(c)
                .parse()
                .map_err(|_| perr(line, format!("cannot parse {what} `{}`", field(c))))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(perr(line, format!("non-finite {what}")))
            }
        };
        let id: u64 = field(c_id)
            .parse()
            .map_err(|_| perr(line, format!("cannot parse vehicle_id `{}`", field(c_id))))?;
        let lane: u32 = field(c_lane)
            .parse()
            .map_err(|_| perr(line, format!("cannot parse lane `{}`", field(c_lane))))?;
        let speed = match c_speed.map(field) {
            None | Some("") => None,
            Some(_) => Some(num(c_speed.expect("present"), "speed")? * k),
        };
        let row = Row {
            line,
            t: num(c_t, "t")?,
            x: num(c_x, "x")? * k,
            y: num(c_y, "y")? * k,
            speed,
            lane,
        };
        let rows = by_id.entry(id).or_default();
        if let Some(prev) = rows.last() {
            if row.t <= prev.t {
                return Err(perr(
                    line,
                    format!(
                        "vehicle {id}: timestamp {} does not increase (previous {} on line {})",
                        row.t, prev.t, prev.line
                    ),
                ));
            }
        }
        rows.push(row);
    }

    let mut tracks = Vec::with_capacity(by_id.len());
    for (id, rows) in by_id {
        let points = to_points(&rows);
        let points = if options.resample { resample(&points) } else { points };
        if !points.is_empty() {
            tracks.push(VehicleTrack { vehicle_id: id, points });
        }
    }
    Ok(tracks)
}

fn to_points(rows: &[Row]) -> Vec<TrackPoint> {
    let n = rows.len();
    (0..n)
        .map(|i| {
            let speed = rows[i].speed.unwrap_or_else(|| {
                if n < 2 {
                    return 0.0;
                }
                let (a, b) = (i.saturating_sub(1), (i + 1).min(n - 1));
                let (ra, rb) = (&rows[a], &rows[b]);
                (rb.x - ra.x).hypot(rb.y - ra.y) / (rb.t - ra.t)
            });
            TrackPoint {
                t: rows[i].t,
                x: rows[i].x,
                y: rows[i].y,
                speed,
                lane: rows[i].lane,
            }
        })
        .collect()
}

/// Linear interpolation onto multiples of `DT` inside the track's span.
/// Lanes are taken from the latest raw point at or before each grid time.
pub fn resample(points: &[TrackPoint]) -> Vec<TrackPoint> {
    let (Some(first), Some(last)) = (points.first(), points.last()) else {
        return Vec::new();
    };
    let k0 = (first.t / DT - 1e-9).ceil() as i64;
    let k1 = (last.t / DT + 1e-9).floor() as i64;
    let mut out = Vec::with_capacity((k1 - k0 + 1).max(0) as usize);
    let mut seg = 0;
    for k in k0..=k1 {
        let t = k as f64 * DT;
        while seg + 1 < points.len() && points[seg + 1].t <= t + 1e-9 {
            seg += 1;
        }
        let a = points[seg];
        let p = if (a.t - t).abs() <= 1e-9 || seg + 1 == points.len() {
            TrackPoint { t, ..a }
        } else {
            let b = points[seg + 1];
            let w = (t - a.t) / (b.t - a.t);
            let lerp = |u: f64, v: f64| u + (v - u) * w;
            TrackPoint {
                t,
                x: lerp(a.x, b.x),
                y: lerp(a.y, b.y),
                speed: lerp(a.speed, b.speed),
                lane: a.lane,
            }
        };
        out.push(p);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(content: &str) -> tempfile::NamedTempFile {
        let f = tempfile::NamedTempFile::new().unwrap();
        fs::write(f.path(), content).unwrap();
        f
    }

    #[test]
    fn direct_row_mapping() {
        let f = write("vehicle_id,t,x,y,speed,lane\n7,12.5,330.1,10.2,29.8,2\n");
        let tracks = ingest_csv(f.path(), IngestOptions::default()).unwrap();
        assert_eq!(tracks.len(), 1);
        assert_eq!(tracks[0].vehicle_id, 7);
        assert_eq!(
            tracks[0].points,
            vec![TrackPoint {
                t: 12.5,
                x: 330.1,
                y: 10.2,
                speed: 29.8,
                lane: 2
            }]
        );
    }

    #[test]
    fn feet_are_converted() {
        let f = write("vehicle_id,t,x,y,speed,lane\n1,0,100,10,50,0\n");
        let opts = IngestOptions {
            units: Units::Feet,
            resample: false,
        };
        let p = ingest_csv(f.path(), opts).unwrap()[0].points[0];
        assert!((p.x - 30.48).abs() < 1e-12);
        assert!((p.speed - 15.24).abs() < 1e-12);
    }

    #[test]
    fn ten_hertz_linear_track_resamples_exactly() {
        let mut s = String::from("vehicle_id,t,x,y,lane\n");
        for i in 0..=50 {
            let t = i as f64 * 0.1;
            s.push_str(&format!("3,{t},{},{},1\n", 5.0 + 20.0 * t, 1.0 - 0.5 * t));
        }
        let tracks = ingest_csv(write(&s).path(), IngestOptions::default()).unwrap();
        let pts = &tracks[0].points;
        assert_eq!(pts.len(), 11);
        assert_eq!((pts[0].t, pts[10].t), (0.0, 5.0));
        for p in pts {
            assert!((p.x - (5.0 + 20.0 * p.t)).abs() < 1e-9);
            assert!((p.y - (1.0 - 0.5 * p.t)).abs() < 1e-9);
            assert!((p.speed - 20.0f64.hypot(0.5)).abs() < 1e-9);
        }
    }

    #[test]
    fn errors_carry_line_numbers() {
        let f = write("vehicle_id,t,x,y,speed,lane\n1,0,0,0,1,0\n1,0.5,abc,0,1,0\n");
        let e = ingest_csv(f.path(), IngestOptions::default()).unwrap_err().to_string();
        assert!(e.contains(":3:") && e.contains("abc"), "{e}");

        let f = write("vehicle_id,t,x,y,speed,lane\n1,1.0,0,0,1,0\n2,0,0,0,1,0\n1,0.5,1,0,1,0\n");
        let e = ingest_csv(f.path(), IngestOptions::default()).unwrap_err().to_string();
        assert!(e.contains(":4:") && e.contains("does not increase"), "{e}");

        let f = write("vehicle_id,t,x,speed,lane\n1,0,0,1,0\n");
        let e = ingest_csv(f.path(), IngestOptions::default()).unwrap_err().to_string();
        assert!(e.contains("missing column `y`"), "{e}");
    }

    #[test]
    fn csv_round_trip_is_bitwise() {
        let tracks = vec![VehicleTrack {
            vehicle_id: 4,
            points: (0..5)
                .map(|k| TrackPoint {
                    t: 10.0 + k as f64 * DT,
                    x: 1.0 / 3.0 + k as f64 * 12.345678901234567,
                    y: 5.55,
                    speed: 24.691357802469134,
                    lane: 1,
                })
                .collect(),
        }];
        let f = tempfile::NamedTempFile::new().unwrap();
        write_tracks_csv(f.path(), &tracks).unwrap();
        assert_eq!(ingest_csv(f.path(), IngestOptions::default()).unwrap(), tracks);
    }

    #[test]
    fn resampling_preserves_endpoints_on_grid() {
        let pts: Vec<TrackPoint> = [0.0, 0.3, 0.5, 1.2, 1.5]
            .iter()
            .map(|&t| TrackPoint {
                t,
                x: t * t,
                y: 0.0,
                speed: 1.0,
                lane: 0,
            })
            .collect();
        let r = resample(&pts);
        assert_eq!(r.first().unwrap().x, 0.0);
        assert_eq!(r.last().unwrap().x, 2.25);
        assert_eq!(r.len(), 4);
    }

    #[test]
    fn metadata_round_trip() {
        let f = tempfile::NamedTempFile::new().unwrap();
        let m = EpisodeMeta::new(0, 42, "high").with("driver", "d3");
        m.write(f.path()).unwrap();
        let r = EpisodeMeta::read(f.path()).unwrap();
        assert_eq!(r, m);
        assert_eq!(r.ego_id(), Some(0));
        assert_eq!(r.get("density"), Some("high"));
    }
}
