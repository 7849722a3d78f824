//! Frame-level event lists and the DCASE metadata CSV format.
//!
//! One row per active event per 100 ms label frame:
//! `frame_idx,class_idx,track_idx,azimuth_deg,elevation_deg`.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, Result, SeldError};

/// Number of sound classes.
pub const NUM_CLASSES: usize = 13;
/// Tracks per class in the multi-ACCDOA format.
pub const NUM_TRACKS: usize = 3;
/// Label frame length in seconds.
pub const LABEL_HOP_S: f64 = 0.1;

pub type Doa = [f64; 3];

/// Unit vector for azimuth/elevation in degrees (x front, y left, z up).
pub fn doa_to_vector(azimuth_deg: f64, elevation_deg: f64) -> Doa {
    let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
    [el.cos() * az.cos(), el.cos() * az.sin(), el.sin()]
}

/// Azimuth in `[-180, 180)` and elevation in `[-90, 90]`, degrees.
pub fn vector_to_doa(v: Doa) -> (f64, f64) {
    let r = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if r == 0.0 {
        return (0.0, 0.0);
    }
    let el = (v[2] / r).clamp(-1.0, 1.0).asin().to_degrees();
    let mut az = v[1].atan2(v[0]).to_degrees();
    if az >= 180.0 {
        az -= 360.0;
    }
    (az, el)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub frame: usize,
    pub class: usize,
    pub track: usize,
    pub azimuth: f64,
    pub elevation: f64,
}

impl Event {
    pub fn doa(&self) -> Doa {
        doa_to_vector(self.azimuth, self.elevation)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventList {
    events: Vec<Event>,
}

impl EventList {
    pub fn new() -> Self {
        Self::default()
    }

    /// Validated construction; rows are kept in (frame, class, track) order.
    pub fn from_events(events: Vec<Event>, num_classes: usize) -> Result<Self> {
        let mut list = Self { events };
        list.validate(num_classes)?;
        list.sort();
        Ok(list)
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.events {
            if e.class >= num_classes {
                return Err(SeldError::Events(format!("class {} out of range (K={num_classes})", e.class)));
            }
            if !(-180.0..180.0).contains(&e.azimuth) {
                return Err(SeldError::Events(format!("azimuth {} outside [-180, 180)", e.azimuth)));
            }
            if !(-90.0..=90.0).contains(&e.elevation) {
                return Err(SeldError::Events(format!("elevation {} outside [-90, 90]", e.elevation)));
            }
            if !seen.insert((e.frame, e.class, e.track)) {
                return Err(SeldError::Events(format!(
                    "duplicate (frame {}, class {}, track {})",
                    e.frame, e.class, e.track
                )));
            }
        }
        Ok(())
    }

    pub fn sort(&mut self) {
        self.events.sort_by_key(|e| (e.frame, e.class, e.track));
    }

    pub fn push(&mut self, e: Event) {
        self.events.push(e);
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// One past the last active frame.
    pub fn n_frames(&self) -> usize {
        self.events.iter().map(|e| e.frame + 1).max().unwrap_or(0)
    }

    /// Events grouped by frame.
    pub fn by_frame(&self) -> BTreeMap<usize, Vec<Event>> {
        let mut m: BTreeMap<usize, Vec<Event>> = BTreeMap::new();
        for e in &self.events {
            m.entry(e.frame).or_default().push(*e);
        }
        m
    }

    /// Events in `[start, end)` with frames re-based to `start`.
    pub fn window(&self, start: usize, end: usize) -> Self {
        Self {
            events: self
                .events
                .iter()
                .filter(|e| e.frame >= start && e.frame < end)
                .map(|e| Event {
                    frame: e.frame - start,
                    ..*e
                })
                .collect(),
        }
    }

    pub fn parse_csv(text: &str, origin: &str) -> Result<Self> {
        let mut events = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| SeldError::Csv {
                path: origin.to_string(),
                line: i + 1,
                msg,
            };
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() < 5 {
                return Err(err(format!("expected 5 fields, got {}", fields.len())));
            }
            if i == 0 && fields[0].parse::<f64>().is_err() {
                continue; // header row
            }
            let int = |s: &str, what: &str| s.parse::<usize>().map_err(|_| err(format!("bad {what} `{s}`")));
            let num = |s: &str, what: &str| s.parse::<f64>().map_err(|_| err(format!("bad {what} `{s}`")));
            events.push(Event {
                frame: int(fields[0], "frame_idx")?,
                class: int(fields[1], "class_idx")?,
                track: int(fields[2], "track_idx")?,
                azimuth: num(fields[3], "azimuth")?,
                elevation: num(fields[4], "elevation")?,
            });
        }
        let mut list = Self { events };
        list.sort();
        Ok(list)
    }

    pub fn read_csv(path: impl AsRef<Path>, num_classes: usize) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let list = Self::parse_csv(&text, &path.display().to_string())?;
        list.validate(num_classes)?;
        Ok(list)
    }

    /// DCASE rows with integer degrees.
    pub fn to_csv_string(&self) -> String {
        let mut sorted = self.events.clone();
        sorted.sort_by_key(|e| (e.frame, e.class, e.track));
        let mut out = String::new();
        for e in &sorted {
            let (az, el) = integer_doa(e.azimuth, e.elevation);
            let _ = writeln!(out, "{},{},{},{},{}", e.frame, e.class, e.track, az, el);
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv_string()).map_err(io_err(path))
    }
}

/// Rounds to whole degrees, keeping azimuth inside `[-180, 180)`.
pub fn integer_doa(azimuth: f64, elevation: f64) -> (i64, i64) {
    let mut az = azimuth.round() as i64;
    if az >= 180 {
        az -= 360;
    }
    (az, (elevation.round() as i64).clamp(-90, 90))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spherical_to_cartesian() {
        let v = doa_to_vector(45.0, 45.0);
        assert!((v[0] - 0.5).abs() < 1e-12 && (v[1] - 0.5).abs() < 1e-12);
        assert!((v[2] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        let (az, el) = vector_to_doa(doa_to_vector(-120.0, 30.0));
        assert!((az + 120.0).abs() < 1e-9 && (el - 30.0).abs() < 1e-9);
    }

    #[test]
    fn csv_round_trip_and_header() {
        let text = "frame,class,track,azi,ele\n3,2,0,-180,10\n1,0,0,45,-90\n";
        let l = EventList::parse_csv(text, "t").unwrap();
        assert_eq!(l.len(), 2);
        assert_eq!(l.events()[0].frame, 1);
        assert_eq!(l.to_csv_string(), "1,0,0,45,-90\n3,2,0,-180,10\n");
        assert_eq!(EventList::parse_csv(&l.to_csv_string(), "t").unwrap(), l);
    }

    #[test]
    fn validation_rejects_bad_rows() {
        let e = Event {
            frame: 0,
            class: 13,
            track: 0,
            azimuth: 0.0,
            elevation: 0.0,
        };
        assert!(EventList::from_events(vec![e], NUM_CLASSES).is_err());
        let ok = Event { class: 1, ..e };
        assert!(EventList::from_events(vec![ok, ok], NUM_CLASSES).is_err());
        assert!(EventList::from_events(vec![Event { azimuth: 180.0, ..ok }], NUM_CLASSES).is_err());
    }

    #[test]
    fn malformed_csv_reports_line() {
        let err = EventList::parse_csv("0,1,0,10,5\n1,x,0,1,1\n", "f.csv").unwrap_err().to_string();
        assert!(err.starts_with("f.csv:2:"), "{err}");
    }

    #[test]
    fn rounding_wraps_azimuth() {
        assert_eq!(integer_doa(179.6, 0.2), (-180, 0));
    }
}
