//! Synthetic panels from a behavioral effort-choice model with a staggered
//! cost shock.
//!
//! A student choosing effort `e` is admitted with probability
//! `phi(e) = 1 - exp(-a e)` (increasing, concave) at cost
//! `c(e) = c0 e² / 2` (increasing, convex). Graduates earn the high wage,
//! others the low wage, and attending costs `K`. Optimal effort solves the
//! first-order condition
//!
//! ```text
//! phi'(e*) (w_hi - w_lo - K) = c'(e*)
//! ```
//!
//! An opening lowers `K` from `cost_far` to
//! `min(cost_far, cost_near + cost_km_gradient * d)` starting
//! `anticipation_years` before the opening year, raising optimal effort.
//! Effort maps linearly into the outcome z-score, so the implied
//! per-period effect path is analytic and returned alongside the data.
//!
//! The truth path is in the generator's own z-units, before the pipeline's
//! per-year standardization. That standardization divides by the
//! cross-sectional year SD, roughly
//! `sqrt(noise_sd² + fe_sd_municipality²)`; with the default
//! `noise_sd = 1.0` the divisor is ~1.005, so estimates on standardized
//! outcomes are attenuated by ~0.5% relative to the truth path. Keep the
//! combined signal SD near one when comparing the two.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{assign_events, Centroid, EventMap, OpeningEvent, EARTH_RADIUS_KM};
use crate::panel::{Cat, Codebook, Dataset, Interner, StudentRecord};

/// Parameters of the effort-choice data generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DgpConfig {
    /// Wage if the student graduates from university.
    pub wage_graduate: f64,
    /// Wage otherwise.
    pub wage_other: f64,
    /// Attendance cost before an opening (or far from any university).
    pub cost_far: f64,
    /// Attendance cost at the opening municipality once the university opens.
    pub cost_near: f64,
    /// Per-kilometer cost gradient after the opening; the effective cost is
    /// capped at `cost_far` (students keep their previous option, so an
    /// opening never raises costs).
    pub cost_km_gradient: f64,
    /// Concavity of the admission probability, `phi(e) = 1 - exp(-a e)`.
    pub phi_scale: f64,
    /// Convexity of the effort cost, `c(e) = c0 e² / 2`.
    pub cost_curvature: f64,
    /// Years before the opening at which costs already fall (announcement).
    pub anticipation_years: i32,
    /// Outcome z-units per unit of optimal effort.
    pub effect_scale: f64,
    pub fe_sd_municipality: f64,
    pub fe_sd_year: f64,
    pub noise_sd: f64,
    pub n_municipalities: usize,
    pub n_events: usize,
    pub year_start: i32,
    pub n_years: usize,
    pub students_per_cell: usize,
    /// Opening years cycled over events.
    pub opening_years: Vec<i32>,
    pub buffer_radii: Vec<f64>,
    /// Share of non-host municipalities placed in the outer (placebo) ring.
    pub ring_share: f64,
    pub absent_rate: f64,
    pub zero_essay_rate: f64,
    pub missing_covariate_rate: f64,
    /// Raw-grade location and scale: grade = center + scale * z.
    pub grade_center: f64,
    pub grade_scale: f64,
    pub seed: u64,
}

impl Default for DgpConfig {
    fn default() -> Self {
        DgpConfig {
            wage_graduate: 2.0,
            wage_other: 0.0,
            cost_far: 1.0,
            cost_near: 0.5,
            cost_km_gradient: 0.0,
            phi_scale: 1.0,
            cost_curvature: 1.0,
            anticipation_years: 2,
            // Calibrated so the default post-opening effect is 0.038
            // z-units: 0.038 / (e*(net 1.5) - e*(net 1.0)).
            effect_scale: 0.038 / 0.158_718_067_356_442_45,
            fe_sd_municipality: 0.10,
            fe_sd_year: 0.05,
            noise_sd: 1.0,
            n_municipalities: 113,
            n_events: 8,
            year_start: 2004,
            n_years: 15,
            students_per_cell: 600,
            opening_years: vec![2009, 2010, 2012, 2013],
            buffer_radii: vec![10.0, 25.0, 50.0],
            ring_share: 0.25,
            absent_rate: 0.01,
            zero_essay_rate: 0.01,
            missing_covariate_rate: 0.01,
            grade_center: 500.0,
            grade_scale: 100.0,
            seed: 42,
        }
    }
}

impl DgpConfig {
    pub fn validate(&self) -> Result<()> {
        let premium_ok = self.wage_graduate.is_finite()
            && self.wage_other.is_finite()
            && self.wage_graduate > self.wage_other;
        if !premium_ok {
            return Err(Error::Config(format!(
                "wage_graduate ({}) must exceed wage_other ({})",
                self.wage_graduate, self.wage_other
            )));
        }
        if self.cost_far < 0.0 || self.cost_near < 0.0 || self.cost_near > self.cost_far {
            return Err(Error::Config(format!(
                "costs must satisfy 0 <= cost_near <= cost_far, got near {} far {}",
                self.cost_near, self.cost_far
            )));
        }
        if self.cost_km_gradient < 0.0 {
            return Err(Error::Config("cost_km_gradient must be nonnegative".into()));
        }
        if self.phi_scale <= 0.0 || self.cost_curvature <= 0.0 {
            return Err(Error::Config(
                "phi_scale and cost_curvature must be positive".into(),
            ));
        }
        if self.anticipation_years < 0 {
            return Err(Error::Config("anticipation_years must be nonnegative".into()));
        }
        if self.n_events == 0 || self.n_events > self.n_municipalities {
            return Err(Error::Config(format!(
                "n_events ({}) must be in [1, n_municipalities ({})]",
                self.n_events, self.n_municipalities
            )));
        }
        if self.n_years < 2 || self.students_per_cell == 0 {
            return Err(Error::Config(
                "need at least two years and one student per cell".into(),
            ));
        }
        if self.opening_years.is_empty() {
            return Err(Error::Config("opening_years must be nonempty".into()));
        }
        let year_end = self.year_start + self.n_years as i32 - 1;
        for &o in &self.opening_years {
            if o < self.year_start || o > year_end {
                return Err(Error::Config(format!(
                    "opening year {o} outside panel years [{}, {year_end}]",
                    self.year_start
                )));
            }
        }
        crate::geo::validate_radii(&self.buffer_radii)?;
        for (name, v) in [
            ("ring_share", self.ring_share),
            ("absent_rate", self.absent_rate),
            ("zero_essay_rate", self.zero_essay_rate),
            ("missing_covariate_rate", self.missing_covariate_rate),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {v}")));
            }
        }
        if self.grade_scale <= 0.0 || self.noise_sd < 0.0 {
            return Err(Error::Config("grade_scale must be positive, noise_sd nonnegative".into()));
        }
        Ok(())
    }

    /// Net premium of attending: wage premium minus the effective cost.
    fn net_premium(&self, k_effective: f64) -> f64 {
        self.wage_graduate - self.wage_other - k_effective
    }

    /// Post-opening attendance cost at distance `d`, capped at the
    /// pre-opening cost.
    pub fn cost_after_opening(&self, distance_km: f64) -> f64 {
        (self.cost_near + self.cost_km_gradient * distance_km).min(self.cost_far)
    }
}

/// Optimal effort and the implied admission probability.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct EffortSolution {
    pub effort: f64,
    pub admission_prob: f64,
}

/// Solve the first-order condition
/// `a exp(-a e) (w_hi - w_lo - K) = c0 e` by bisection.
///
/// At the corner `w_hi - w_lo - K <= 0` no effort pays: `e* = 0`. Otherwise
/// the root is bracketed by `[0, a (w_hi - w_lo - K) / c0]` and bisection
/// drives the FOC residual below 1e-10.
pub fn optimal_effort(config: &DgpConfig, k_effective: f64) -> EffortSolution {
    let a = config.phi_scale;
    let c0 = config.cost_curvature;
    let b = config.net_premium(k_effective);
    if b <= 0.0 {
        return EffortSolution {
            effort: 0.0,
            admission_prob: 0.0,
        };
    }
    let foc = |e: f64| a * (-a * e).exp() * b - c0 * e;
    let mut lo = 0.0f64;
    let mut hi = a * b / c0;
    debug_assert!(foc(lo) > 0.0 && foc(hi) <= 0.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if foc(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-14 * (1.0 + hi) {
            break;
        }
    }
    let e = 0.5 * (lo + hi);
    debug_assert!(foc(e).abs() <= 1e-10 * (1.0 + a * b));
    EffortSolution {
        effort: e,
        admission_prob: 1.0 - (-a * e).exp(),
    }
}

/// The analytic effect path implied by a configuration.
#[derive(Debug, Clone, Serialize)]
pub struct TruthPath {
    pub anticipation_years: i32,
    /// Post-opening effect in z-units at the mean analysis-sample distance.
    pub post_effect: f64,
    pub mean_distance_km: f64,
    /// Per-relative-time effects over the observable window.
    pub beta: Vec<TruthPoint>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TruthPoint {
    pub k: i32,
    pub beta: f64,
}

impl TruthPath {
    pub fn beta_at(&self, k: i32) -> Option<f64> {
        self.beta.iter().find(|p| p.k == k).map(|p| p.beta)
    }
}

/// A generated world: student records plus the geography they live on and
/// the analytic truth path.
#[derive(Debug, Clone)]
pub struct SimulatedData {
    pub dataset: Dataset,
    pub centroids: Vec<Centroid>,
    pub events: Vec<OpeningEvent>,
    pub event_map: EventMap,
    pub truth: TruthPath,
}

fn mix_seed(base: u64, salt: u64, a: u64, b: u64) -> u64 {
    // splitmix64 over the combined words; cheap and stable across platforms.
    let mut z = base
        .wrapping_add(salt.wrapping_mul(0x9E3779B97F4A7C15))
        .wrapping_add(a.wrapping_mul(0xBF58476D1CE4E5B9))
        .wrapping_add(b.wrapping_mul(0x94D049BB133111EB));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Destination point at `distance_km` and `bearing` radians from a start.
fn destination(lat: f64, lon: f64, distance_km: f64, bearing: f64) -> (f64, f64) {
    let delta = distance_km / EARTH_RADIUS_KM;
    let phi1 = lat.to_radians();
    let lambda1 = lon.to_radians();
    let phi2 = (phi1.sin() * delta.cos() + phi1.cos() * delta.sin() * bearing.cos()).asin();
    let lambda2 = lambda1
        + (bearing.sin() * delta.sin() * phi1.cos())
            .atan2(delta.cos() - phi1.sin() * phi2.sin());
    (phi2.to_degrees(), lambda2.to_degrees())
}

/// Generate a synthetic world: geography, staggered openings, student
/// records and the analytic truth path. Deterministic for a given config;
/// cells are generated from per-cell derived seeds in canonical
/// (municipality, year) order.
pub fn simulate_panel(config: &DgpConfig) -> Result<SimulatedData> {
    config.validate()?;
    let n_events = config.n_events;
    let n_munis = config.n_municipalities;
    let states = ["S1", "S2", "S3", "S4", "S5"];

    // Hosts sit on a coarse grid, ~330 km apart, so 50 km buffers never
    // overlap. Non-hosts are scattered around their event at a drawn
    // distance and bearing.
    let mut centroids = Vec::with_capacity(n_munis);
    let mut events = Vec::with_capacity(n_events);
    let mut muni_ids = Vec::with_capacity(n_munis);
    for e in 0..n_events {
        let id = format!("M{:04}", e + 1);
        let state = states[e % states.len()].to_string();
        let lat = -27.0 + 3.0 * (e / 4) as f64;
        let lon = -55.0 + 3.0 * (e % 4) as f64;
        centroids.push(Centroid {
            municipality_id: id.clone(),
            state_id: state.clone(),
            lat,
            lon,
        });
        events.push(OpeningEvent {
            municipality_id: id.clone(),
            state_id: state,
            opening_year: config.opening_years[e % config.opening_years.len()],
        });
        muni_ids.push(id);
    }
    let radii = &config.buffer_radii;
    let inner_max = if radii.len() >= 2 {
        radii[radii.len() - 2]
    } else {
        radii[0]
    };
    let ring_max = *radii.last().unwrap();
    let mut geo_rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, 1, 0, 0));
    for m in n_events..n_munis {
        let id = format!("M{:04}", m + 1);
        let event_idx = (m - n_events) % n_events;
        let host = &centroids[event_idx];
        let in_ring = geo_rng.random::<f64>() < config.ring_share;
        // Stay 0.1 km clear of classification thresholds.
        let d = if in_ring {
            geo_rng.random_range(inner_max + 0.1..ring_max - 0.1)
        } else {
            geo_rng.random_range(1.0..inner_max - 0.1)
        };
        let bearing = geo_rng.random_range(0.0..std::f64::consts::TAU);
        let (lat, lon) = destination(host.lat, host.lon, d, bearing);
        centroids.push(Centroid {
            municipality_id: id.clone(),
            state_id: host.state_id.clone(),
            lat,
            lon,
        });
        muni_ids.push(id);
    }
    let event_map = assign_events(&centroids, &events, radii)?;

    // Truth path at the mean analysis-sample distance.
    let analysis: Vec<&str> = event_map.analysis_municipalities();
    let mean_distance = analysis
        .iter()
        .map(|m| event_map.get(m).unwrap().distance_km)
        .sum::<f64>()
        / analysis.len().max(1) as f64;
    let effort_far = optimal_effort(config, config.cost_far);
    let effort_near_mean = optimal_effort(config, config.cost_after_opening(mean_distance));
    let post_effect = config.effect_scale * (effort_near_mean.effort - effort_far.effort);
    let year_end = config.year_start + config.n_years as i32 - 1;
    let k_lo = config.year_start - config.opening_years.iter().max().unwrap();
    let k_hi = year_end - config.opening_years.iter().min().unwrap();
    let beta = (k_lo..=k_hi)
        .map(|k| TruthPoint {
            k,
            beta: if k >= -config.anticipation_years {
                post_effect
            } else {
                0.0
            },
        })
        .collect();
    let truth = TruthPath {
        anticipation_years: config.anticipation_years,
        post_effect,
        mean_distance_km: mean_distance,
        beta,
    };

    // Municipality and year effects.
    let mut fe_rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, 2, 0, 0));
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let muni_fe: Vec<f64> = (0..n_munis)
        .map(|_| config.fe_sd_municipality * normal.sample(&mut fe_rng))
        .collect();
    let year_fe: Vec<f64> = (0..config.n_years)
        .map(|_| config.fe_sd_year * normal.sample(&mut fe_rng))
        .collect();

    let mut dataset = Dataset {
        records: Vec::with_capacity(n_munis * config.n_years * config.students_per_cell),
        students: Interner::default(),
        municipalities: Interner::default(),
        states: Interner::default(),
        codebook: Codebook::default(),
    };

    for (m, muni_id) in muni_ids.iter().enumerate() {
        let assignment = event_map.get(muni_id).expect("assigned");
        let muni_idx = dataset.municipalities.intern(muni_id);
        let state_idx = dataset
            .states
            .intern(&centroids[m].state_id);
        let cost_after = config.cost_after_opening(assignment.distance_km);
        for (yi, year) in (config.year_start..=year_end).enumerate() {
            let treated = year >= assignment.opening_year - config.anticipation_years;
            let cost = if treated { cost_after } else { config.cost_far };
            let effort = optimal_effort(config, cost);
            let signal = config.effect_scale * effort.effort + muni_fe[m] + year_fe[yi];

            let mut rng =
                ChaCha8Rng::seed_from_u64(mix_seed(config.seed, 3, m as u64, year as u64));
            for i in 0..config.students_per_cell {
                let z = signal + config.noise_sd * normal.sample(&mut rng);
                let mean_grade = config.grade_center + config.grade_scale * z;
                // Four area scores with exactly the intended mean.
                let mut noise = [0.0f64; 4];
                let mut nsum = 0.0;
                for v in noise.iter_mut() {
                    *v = 30.0 * normal.sample(&mut rng);
                    nsum += *v;
                }
                let area_grades = [
                    (mean_grade + noise[0] - nsum / 4.0).max(0.0),
                    (mean_grade + noise[1] - nsum / 4.0).max(0.0),
                    (mean_grade + noise[2] - nsum / 4.0).max(0.0),
                    (mean_grade + noise[3] - nsum / 4.0).max(0.0),
                ];

                let essay = 200.0 + 700.0 * rng.random::<f64>();
                let zero_essay = rng.random::<f64>() < config.zero_essay_rate;
                let absent = rng.random::<f64>() < config.absent_rate;
                let absent_day1 = absent && rng.random::<bool>();

                let missing = |rng: &mut ChaCha8Rng, cat: Cat| -> Cat {
                    if rng.random::<f64>() < config.missing_covariate_rate {
                        Cat::MISSING
                    } else {
                        cat
                    }
                };
                let sex = Cat(if rng.random::<f64>() < 0.45 { 0 } else { 1 });
                let race = Cat(pick(&mut rng, &[0.25, 0.10, 0.45, 0.05, 0.15]));
                let income = Cat(pick(
                    &mut rng,
                    &[0.28, 0.24, 0.16, 0.10, 0.07, 0.05, 0.06, 0.04],
                ));
                let father = Cat(if rng.random::<f64>() < 0.21 { 1 } else { 0 });
                let mother = Cat(if rng.random::<f64>() < 0.36 { 1 } else { 0 });
                let marital = Cat(pick(&mut rng, &[0.85, 0.12, 0.03]));
                let age = (18.2 + 2.5 * normal.sample(&mut rng)).clamp(14.0, 60.0).round();

                let student_id = dataset
                    .students
                    .intern(&format!("{muni_id}Y{year}N{i:04}"));
                let sex = missing(&mut rng, sex);
                let race = missing(&mut rng, race);
                let income = missing(&mut rng, income);
                let father = missing(&mut rng, father);
                let mother = missing(&mut rng, mother);
                let marital = missing(&mut rng, marital);
                dataset.records.push(StudentRecord {
                    student_id,
                    municipality_id: muni_idx,
                    state_id: state_idx,
                    year,
                    area_grades,
                    essay_grade: if zero_essay { 0.0 } else { essay },
                    present_day1: !absent_day1,
                    present_day2: !(absent && !absent_day1),
                    sex,
                    race,
                    family_income: income,
                    father_hs: father,
                    mother_hs: mother,
                    marital_status: marital,
                    age: Some(age),
                });
            }
        }
    }

    Ok(SimulatedData {
        dataset,
        centroids,
        events,
        event_map,
        truth,
    })
}

fn pick(rng: &mut ChaCha8Rng, weights: &[f64]) -> u8 {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i as u8;
        }
    }
    (weights.len() - 1) as u8
}
