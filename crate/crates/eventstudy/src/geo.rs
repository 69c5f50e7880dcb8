//! Geodesic distances between municipality centroids and buffer-based
//! assignment of municipalities to opening events.
//!
//! Distances use the spherical haversine formula. At the ≤50 km scale of the
//! buffer analysis, the error of the spherical model relative to an
//! ellipsoidal one is below 0.5% and immaterial to buffer classification.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean Earth radius in kilometers used for all spherical computations.
pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// Geographic centroid of a municipality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Centroid {
    pub municipality_id: String,
    pub state_id: String,
    /// Latitude in degrees, in [-90, 90].
    pub lat: f64,
    /// Longitude in degrees, in [-180, 180].
    pub lon: f64,
}

impl Centroid {
    pub fn validate(&self) -> Result<()> {
        if !self.lat.is_finite() || self.lat < -90.0 || self.lat > 90.0 {
            return Err(Error::Validation(format!(
                "municipality {}: latitude {} out of [-90, 90]",
                self.municipality_id, self.lat
            )));
        }
        if !self.lon.is_finite() || self.lon < -180.0 || self.lon > 180.0 {
            return Err(Error::Validation(format!(
                "municipality {}: longitude {} out of [-180, 180]",
                self.municipality_id, self.lon
            )));
        }
        Ok(())
    }
}

/// One university opening: the hosting municipality and the calendar year.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpeningEvent {
    pub municipality_id: String,
    pub state_id: String,
    pub opening_year: i32,
}

/// Distance band of a municipality relative to its nearest opening event.
///
/// `Band(i)` means the distance is within `radii[i]` but beyond `radii[i-1]`.
/// The ordering is by increasing distance, which gives the monotonicity
/// property used in tests: a larger distance never maps to a smaller class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BufferClass {
    /// The municipality hosts the event itself.
    Host,
    /// Within `radii[index]` kilometers of the event centroid.
    Band(usize),
    /// Beyond the largest configured radius.
    Outside,
}

impl BufferClass {
    /// Classify a distance against ordered radii. Boundaries are inclusive:
    /// a distance exactly equal to `radii[i]` falls in band `i`.
    pub fn classify(distance_km: f64, radii: &[f64]) -> BufferClass {
        for (i, r) in radii.iter().enumerate() {
            if distance_km <= *r {
                return BufferClass::Band(i);
            }
        }
        BufferClass::Outside
    }

    /// Human-readable label, e.g. `host`, `within_10km`, `ring_25_50km`,
    /// `outside`. The last band is labelled as a ring when at least two
    /// radii are configured, matching its role as the placebo sample.
    pub fn label(&self, radii: &[f64]) -> String {
        match self {
            BufferClass::Host => "host".to_string(),
            BufferClass::Outside => "outside".to_string(),
            BufferClass::Band(i) => {
                if *i + 1 == radii.len() && radii.len() >= 2 {
                    format!("ring_{}_{}km", fmt_km(radii[*i - 1]), fmt_km(radii[*i]))
                } else {
                    format!("within_{}km", fmt_km(radii[*i]))
                }
            }
        }
    }

    /// True for the host and every band except the outermost ring; these are
    /// the municipalities that enter the main estimation sample.
    pub fn in_analysis_sample(&self, radii: &[f64]) -> bool {
        match self {
            BufferClass::Host => true,
            BufferClass::Band(i) => radii.len() < 2 || *i + 1 < radii.len(),
            BufferClass::Outside => false,
        }
    }

    /// True only for the outermost band, the placebo ring.
    pub fn in_ring(&self, radii: &[f64]) -> bool {
        matches!(self, BufferClass::Band(i) if *i + 1 == radii.len() && radii.len() >= 2)
    }
}

fn fmt_km(r: f64) -> String {
    if r.fract() == 0.0 {
        format!("{}", r as i64)
    } else {
        format!("{r}")
    }
}

/// Nearest-event assignment for one municipality.
#[derive(Debug, Clone, PartialEq)]
pub struct EventAssignment {
    pub municipality_id: String,
    pub event_municipality_id: String,
    pub distance_km: f64,
    pub buffer_class: BufferClass,
    pub opening_year: i32,
    pub event_state_id: String,
}

/// Per-municipality treatment geography: nearest event, distance and buffer
/// class for every municipality in the input.
#[derive(Debug, Clone)]
pub struct EventMap {
    pub radii: Vec<f64>,
    assignments: BTreeMap<String, EventAssignment>,
}

impl EventMap {
    pub fn get(&self, municipality_id: &str) -> Option<&EventAssignment> {
        self.assignments.get(municipality_id)
    }

    pub fn assignments(&self) -> impl Iterator<Item = &EventAssignment> {
        self.assignments.values()
    }

    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    /// Municipality ids in the main analysis sample (host plus inner bands).
    pub fn analysis_municipalities(&self) -> Vec<&str> {
        self.assignments()
            .filter(|a| a.buffer_class.in_analysis_sample(&self.radii))
            .map(|a| a.municipality_id.as_str())
            .collect()
    }

    /// Municipality ids in the placebo ring.
    pub fn ring_municipalities(&self) -> Vec<&str> {
        self.assignments()
            .filter(|a| a.buffer_class.in_ring(&self.radii))
            .map(|a| a.municipality_id.as_str())
            .collect()
    }
}

/// Great-circle distance in kilometers between two centroids.
///
/// Symmetric, nonnegative and zero iff the coordinates coincide. Uses the
/// haversine formulation, which is numerically stable for small separations.
pub fn haversine_km(a: &Centroid, b: &Centroid) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    Ok(haversine_unchecked(a.lat, a.lon, b.lat, b.lon))
}

pub(crate) fn haversine_unchecked(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let lat1 = lat1.to_radians();
    let lat2 = lat2.to_radians();
    let dlat = lat2 - lat1;
    let dlon = (lon2 - lon1).to_radians();

    let s = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * s.sqrt().min(1.0).asin() * EARTH_RADIUS_KM
}

/// Assign every municipality to its nearest opening event and classify it
/// into a buffer band.
///
/// `radii` must be strictly increasing. Ties in nearest-event distance are
/// broken by the smaller event municipality id so runs are reproducible. A
/// municipality lying within the smallest radius of two distinct events is
/// an error: the design assumes no municipality is affected by more than
/// one event, and a violation must be surfaced rather than silently
/// resolved.
pub fn assign_events(
    centroids: &[Centroid],
    events: &[OpeningEvent],
    radii: &[f64],
) -> Result<EventMap> {
    validate_radii(radii)?;
    if events.is_empty() {
        return Err(Error::Validation("no opening events given".into()));
    }
    for c in centroids {
        c.validate()?;
    }
    let mut seen = BTreeMap::new();
    for c in centroids {
        if seen.insert(c.municipality_id.as_str(), ()).is_some() {
            return Err(Error::Validation(format!(
                "duplicate municipality id {} in centroids",
                c.municipality_id
            )));
        }
    }

    // Each event must have a centroid, and at most one event per municipality.
    let mut event_centroids: Vec<(&OpeningEvent, &Centroid)> = Vec::with_capacity(events.len());
    let mut event_munis = BTreeMap::new();
    for ev in events {
        if event_munis.insert(ev.municipality_id.as_str(), ()).is_some() {
            return Err(Error::Validation(format!(
                "more than one event for municipality {}",
                ev.municipality_id
            )));
        }
        let c = centroids
            .iter()
            .find(|c| c.municipality_id == ev.municipality_id)
            .ok_or_else(|| {
                Error::Validation(format!(
                    "event municipality {} has no centroid",
                    ev.municipality_id
                ))
            })?;
        event_centroids.push((ev, c));
    }

    let smallest = radii[0];
    let mut assignments = BTreeMap::new();
    for c in centroids {
        let mut best: Option<(&OpeningEvent, f64)> = None;
        let mut within_smallest: Vec<(&str, f64)> = Vec::new();
        for (ev, ec) in &event_centroids {
            let d = if ev.municipality_id == c.municipality_id {
                0.0
            } else {
                haversine_unchecked(c.lat, c.lon, ec.lat, ec.lon)
            };
            if d <= smallest {
                within_smallest.push((ev.municipality_id.as_str(), d));
            }
            best = match best {
                None => Some((ev, d)),
                Some((bev, bd)) => {
                    if d < bd || (d == bd && ev.municipality_id < bev.municipality_id) {
                        Some((ev, d))
                    } else {
                        Some((bev, bd))
                    }
                }
            };
        }
        if within_smallest.len() > 1 {
            let names: Vec<String> = within_smallest
                .iter()
                .map(|(id, d)| format!("{id} ({d:.3} km)"))
                .collect();
            return Err(Error::Overlap(format!(
                "municipality {} lies within {smallest} km of {} events: {}",
                c.municipality_id,
                within_smallest.len(),
                names.join(", ")
            )));
        }
        let (ev, d) = best.expect("at least one event");
        let class = if ev.municipality_id == c.municipality_id {
            BufferClass::Host
        } else {
            BufferClass::classify(d, radii)
        };
        assignments.insert(
            c.municipality_id.clone(),
            EventAssignment {
                municipality_id: c.municipality_id.clone(),
                event_municipality_id: ev.municipality_id.clone(),
                distance_km: d,
                buffer_class: class,
                opening_year: ev.opening_year,
                event_state_id: ev.state_id.clone(),
            },
        );
    }

    Ok(EventMap {
        radii: radii.to_vec(),
        assignments,
    })
}

pub(crate) fn validate_radii(radii: &[f64]) -> Result<()> {
    if radii.is_empty() {
        return Err(Error::Config("at least one buffer radius is required".into()));
    }
    for w in radii.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::Config(format!(
                "buffer radii must be strictly increasing, got {} after {}",
                w[1], w[0]
            )));
        }
    }
    if radii[0] <= 0.0 || radii.iter().any(|r| !r.is_finite()) {
        return Err(Error::Config("buffer radii must be positive and finite".into()));
    }
    Ok(())
}

// --- CSV interfaces -------------------------------------------------------

/// Read `centroids.csv` (`municipality_id,state_id,lat,lon`).
pub fn read_centroids_csv<R: Read>(reader: R) -> Result<Vec<Centroid>> {
    let mut rdr = csv::Reader::from_reader(reader);
    expect_headers(&mut rdr, &["municipality_id", "state_id", "lat", "lon"])?;
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<Centroid>().enumerate() {
        let c: Centroid =
            row.map_err(|e| Error::Validation(format!("centroids.csv row {}: {e}", i + 2)))?;
        c.validate()?;
        out.push(c);
    }
    Ok(out)
}

/// Read `events.csv` (`municipality_id,state_id,opening_year`).
pub fn read_events_csv<R: Read>(reader: R) -> Result<Vec<OpeningEvent>> {
    let mut rdr = csv::Reader::from_reader(reader);
    expect_headers(&mut rdr, &["municipality_id", "state_id", "opening_year"])?;
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<OpeningEvent>().enumerate() {
        let ev: OpeningEvent =
            row.map_err(|e| Error::Validation(format!("events.csv row {}: {e}", i + 2)))?;
        out.push(ev);
    }
    Ok(out)
}

pub fn write_centroids_csv<W: Write>(writer: W, centroids: &[Centroid]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["municipality_id", "state_id", "lat", "lon"])?;
    for c in centroids {
        w.write_record(&[
            c.municipality_id.clone(),
            c.state_id.clone(),
            c.lat.to_string(),
            c.lon.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_events_csv<W: Write>(writer: W, events: &[OpeningEvent]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["municipality_id", "state_id", "opening_year"])?;
    for ev in events {
        w.write_record(&[
            ev.municipality_id.clone(),
            ev.state_id.clone(),
            ev.opening_year.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Write `eventmap.csv`
/// (`municipality_id,event_municipality_id,distance_km,buffer_class,opening_year`).
pub fn write_eventmap_csv<W: Write>(writer: W, map: &EventMap) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "municipality_id",
        "event_municipality_id",
        "distance_km",
        "buffer_class",
        "opening_year",
    ])?;
    for a in map.assignments() {
        w.write_record(&[
            a.municipality_id.clone(),
            a.event_municipality_id.clone(),
            a.distance_km.to_string(),
            a.buffer_class.label(&map.radii),
            a.opening_year.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn expect_headers<R: Read>(rdr: &mut csv::Reader<R>, expected: &[&str]) -> Result<()> {
    let headers = rdr.headers()?.clone();
    let got: Vec<&str> = headers.iter().collect();
    if got != expected {
        return Err(Error::Validation(format!(
            "unexpected header: got {got:?}, expected {expected:?}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(id: &str, lat: f64, lon: f64) -> Centroid {
        Centroid {
            municipality_id: id.into(),
            state_id: "S1".into(),
            lat,
            lon,
        }
    }

    fn ev(id: &str, year: i32) -> OpeningEvent {
        OpeningEvent {
            municipality_id: id.into(),
            state_id: "S1".into(),
            opening_year: year,
        }
    }

    #[test]
    fn identical_points_have_zero_distance() {
        let a = c("A", -12.5, -41.2);
        assert_eq!(haversine_km(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn half_great_circle() {
        let a = c("A", 0.0, 0.0);
        let b = c("B", 0.0, 180.0);
        let d = haversine_km(&a, &b).unwrap();
        assert!((d - 20015.09).abs() <= 0.01, "got {d}");
    }

    #[test]
    fn one_degree_arc_on_equator() {
        let a = c("A", 0.0, 0.0);
        let b = c("B", 0.0, 1.0);
        let d = haversine_km(&a, &b).unwrap();
        assert!((d - 111.195).abs() <= 0.001, "got {d}");
    }

    #[test]
    fn out_of_range_coordinates_error() {
        let a = c("A", 91.0, 0.0);
        let b = c("B", 0.0, 0.0);
        assert!(matches!(haversine_km(&a, &b), Err(Error::Validation(_))));
        let a = c("A", 0.0, 181.0);
        assert!(matches!(haversine_km(&a, &b), Err(Error::Validation(_))));
    }

    #[test]
    fn host_is_assigned_to_its_own_event() {
        let cents = vec![c("H", -10.0, -40.0), c("B", -10.0, -40.3)];
        let map = assign_events(&cents, &[ev("H", 2010)], &[10.0, 25.0, 50.0]).unwrap();
        let h = map.get("H").unwrap();
        assert_eq!(h.distance_km, 0.0);
        assert_eq!(h.buffer_class, BufferClass::Host);
        assert_eq!(h.opening_year, 2010);
    }

    #[test]
    fn far_municipality_is_outside() {
        // One degree of longitude on the equator is ~111.195 km, beyond the
        // largest radius of 50 km.
        let cents = vec![c("H", 0.0, 0.0), c("B", 0.0, 1.0)];
        let map = assign_events(&cents, &[ev("H", 2010)], &[10.0, 25.0, 50.0]).unwrap();
        assert_eq!(map.get("B").unwrap().buffer_class, BufferClass::Outside);
    }

    #[test]
    fn overlapping_events_error() {
        // 8 km on the equator is about 0.0719 degrees of longitude.
        let deg = 8.0 / 111.195;
        let cents = vec![c("E1", 0.0, 0.0), c("E2", 0.0, 2.0 * deg), c("M", 0.0, deg)];
        let events = vec![ev("E1", 2009), ev("E2", 2012)];
        let err = assign_events(&cents, &events, &[10.0, 25.0, 50.0]).unwrap_err();
        assert!(matches!(err, Error::Overlap(_)), "got {err:?}");
    }

    #[test]
    fn nearest_event_ties_break_by_municipality_id() {
        // Two events equidistant from M (by symmetry of the construction),
        // far enough apart that nothing is inside the 10 km radius of both.
        let cents = vec![c("E1", 0.0, 0.0), c("E2", 0.0, 0.4), c("M", 0.0, 0.2)];
        let events = vec![ev("E2", 2012), ev("E1", 2009)];
        let map = assign_events(&cents, &events, &[10.0, 25.0, 50.0]).unwrap();
        assert_eq!(map.get("M").unwrap().event_municipality_id, "E1");
    }

    #[test]
    fn classification_boundaries_are_inclusive() {
        let radii = [10.0, 25.0, 50.0];
        let eps = 1e-9;
        assert_eq!(BufferClass::classify(10.0, &radii), BufferClass::Band(0));
        assert_eq!(BufferClass::classify(10.0 + eps, &radii), BufferClass::Band(1));
        assert_eq!(BufferClass::classify(25.0, &radii), BufferClass::Band(1));
        assert_eq!(BufferClass::classify(25.0 + eps, &radii), BufferClass::Band(2));
        assert_eq!(BufferClass::classify(50.0, &radii), BufferClass::Band(2));
        assert_eq!(BufferClass::classify(50.0 + eps, &radii), BufferClass::Outside);
    }

    #[test]
    fn class_labels() {
        let radii = [10.0, 25.0, 50.0];
        assert_eq!(BufferClass::Host.label(&radii), "host");
        assert_eq!(BufferClass::Band(0).label(&radii), "within_10km");
        assert_eq!(BufferClass::Band(1).label(&radii), "within_25km");
        assert_eq!(BufferClass::Band(2).label(&radii), "ring_25_50km");
        assert_eq!(BufferClass::Outside.label(&radii), "outside");
        assert!(BufferClass::Band(2).in_ring(&radii));
        assert!(!BufferClass::Band(1).in_ring(&radii));
        assert!(BufferClass::Band(1).in_analysis_sample(&radii));
        assert!(!BufferClass::Band(2).in_analysis_sample(&radii));
    }

    #[test]
    fn eventmap_csv_roundtrip_shape() {
        let cents = vec![c("H", 0.0, 0.0), c("B", 0.0, 0.1)];
        let map = assign_events(&cents, &[ev("H", 2010)], &[10.0, 25.0, 50.0]).unwrap();
        let mut buf = Vec::new();
        write_eventmap_csv(&mut buf, &map).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "municipality_id,event_municipality_id,distance_km,buffer_class,opening_year"
        );
        assert_eq!(lines.count(), 2);
    }
}
