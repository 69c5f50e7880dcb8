//! Student-level records: ingestion, validation, filtering, per-year
//! standardization and municipality-year peer means.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Categorical code interned against the codebook. `MISSING` is an explicit
/// level so rows with absent socioeconomic fields are kept, not dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Cat(pub u8);

impl Cat {
    pub const MISSING: Cat = Cat(u8::MAX);

    pub fn is_missing(&self) -> bool {
        *self == Cat::MISSING
    }
}

/// Declared codes for one categorical column.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ColumnCodes {
    /// Reference level omitted when the column is one-hot encoded.
    pub reference: String,
    /// Code -> human-readable label, in code order.
    pub levels: BTreeMap<String, String>,
}

impl ColumnCodes {
    fn index_of(&self, code: &str) -> Option<u8> {
        self.levels.keys().position(|k| k == code).map(|i| i as u8)
    }

    pub fn code_at(&self, idx: u8) -> Option<&str> {
        self.levels.keys().nth(idx as usize).map(|s| s.as_str())
    }
}

/// Mapping between raw categorical codes and labels, plus the reference
/// level used when encoding each column. Pinned per run via JSON so control
/// encodings are reproducible.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Codebook {
    pub columns: BTreeMap<String, ColumnCodes>,
    /// Income bracket codes counted as "above six minimum wages" by the
    /// derived `income_gt6` covariate.
    pub high_income_codes: Vec<String>,
}

pub const CATEGORICAL_COLUMNS: [&str; 6] = [
    "sex",
    "race",
    "family_income",
    "father_hs",
    "mother_hs",
    "marital_status",
];

impl Default for Codebook {
    fn default() -> Self {
        fn col(reference: &str, pairs: &[(&str, &str)]) -> ColumnCodes {
            ColumnCodes {
                reference: reference.to_string(),
                levels: pairs
                    .iter()
                    .map(|(c, l)| (c.to_string(), l.to_string()))
                    .collect(),
            }
        }
        let mut columns = BTreeMap::new();
        columns.insert("sex".into(), col("2", &[("1", "male"), ("2", "female")]));
        columns.insert(
            "race".into(),
            col(
                "1",
                &[
                    ("1", "white"),
                    ("2", "black"),
                    ("3", "brown"),
                    ("4", "asian"),
                    ("5", "indigenous"),
                ],
            ),
        );
        columns.insert(
            "family_income".into(),
            col(
                "1",
                &[
                    ("1", "up to 1 minimum wage"),
                    ("2", "1 to 2 minimum wages"),
                    ("3", "2 to 3 minimum wages"),
                    ("4", "3 to 4 minimum wages"),
                    ("5", "4 to 5 minimum wages"),
                    ("6", "5 to 6 minimum wages"),
                    ("7", "6 to 10 minimum wages"),
                    ("8", "more than 10 minimum wages"),
                ],
            ),
        );
        columns.insert("father_hs".into(), col("0", &[("0", "no"), ("1", "yes")]));
        columns.insert("mother_hs".into(), col("0", &[("0", "no"), ("1", "yes")]));
        columns.insert(
            "marital_status".into(),
            col("1", &[("1", "single"), ("2", "married"), ("3", "other")]),
        );
        Codebook {
            columns,
            high_income_codes: vec!["7".into(), "8".into()],
        }
    }
}

impl Codebook {
    pub fn from_json<R: Read>(reader: R) -> Result<Codebook> {
        let cb: Codebook = serde_json::from_reader(reader)?;
        for col in CATEGORICAL_COLUMNS {
            let codes = cb
                .columns
                .get(col)
                .ok_or_else(|| Error::Config(format!("codebook missing column {col}")))?;
            if codes.index_of(&codes.reference).is_none() {
                return Err(Error::Config(format!(
                    "codebook column {col}: reference code {} not among levels",
                    codes.reference
                )));
            }
            if codes.levels.len() > 64 {
                return Err(Error::Config(format!(
                    "codebook column {col}: too many levels ({})",
                    codes.levels.len()
                )));
            }
        }
        Ok(cb)
    }

    fn intern(&self, column: &str, raw: &str, row: usize) -> Result<Cat> {
        if raw.is_empty() {
            return Ok(Cat::MISSING);
        }
        let codes = self
            .columns
            .get(column)
            .ok_or_else(|| Error::Config(format!("codebook missing column {column}")))?;
        codes.index_of(raw).map(Cat).ok_or_else(|| {
            Error::Validation(format!(
                "row {row}: column {column}: code {raw:?} not in codebook"
            ))
        })
    }
}

/// Interning table for opaque string identifiers.
#[derive(Debug, Clone, Default)]
pub struct Interner {
    names: Vec<String>,
    index: HashMap<String, u32>,
}

impl Interner {
    pub fn intern(&mut self, name: &str) -> u32 {
        if let Some(&i) = self.index.get(name) {
            return i;
        }
        let i = self.names.len() as u32;
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), i);
        i
    }

    pub fn get(&self, name: &str) -> Option<u32> {
        self.index.get(name).copied()
    }

    pub fn name(&self, i: u32) -> &str {
        &self.names[i as usize]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// One validated exam-taker observation.
#[derive(Debug, Clone)]
pub struct StudentRecord {
    pub student_id: u32,
    pub municipality_id: u32,
    pub state_id: u32,
    pub year: i32,
    /// Four area scores; NaN marks a missing score (absentees).
    pub area_grades: [f64; 4],
    /// NaN marks a missing essay score.
    pub essay_grade: f64,
    pub present_day1: bool,
    pub present_day2: bool,
    pub sex: Cat,
    pub race: Cat,
    pub family_income: Cat,
    pub father_hs: Cat,
    pub mother_hs: Cat,
    pub marital_status: Cat,
    pub age: Option<f64>,
}

/// Records plus the identifier tables and codebook they were interned with.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub records: Vec<StudentRecord>,
    pub students: Interner,
    pub municipalities: Interner,
    pub states: Interner,
    pub codebook: Codebook,
}

pub const STUDENTS_CSV_HEADER: [&str; 18] = [
    "student_id",
    "municipality_id",
    "state_id",
    "year",
    "grade_lang",
    "grade_human",
    "grade_nat",
    "grade_math",
    "essay_grade",
    "present_day1",
    "present_day2",
    "sex",
    "race",
    "age",
    "family_income",
    "father_hs",
    "mother_hs",
    "marital_status",
];

/// Accepted observation years for ingestion.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValidationConfig {
    pub year_min: i32,
    pub year_max: i32,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        ValidationConfig {
            year_min: 1998,
            year_max: 2030,
        }
    }
}

/// Counts emitted alongside ingestion and filtering.
#[derive(Debug, Clone, Default, Serialize)]
pub struct IngestReport {
    pub rows_read: usize,
    pub rows_kept: usize,
    /// Rows dropped by `filter_records`, keyed by reason.
    pub dropped: BTreeMap<String, usize>,
    /// Missing-value counts per socioeconomic column.
    pub missing_by_column: BTreeMap<String, usize>,
}

/// Streaming single-pass ingestion of `students.csv`. Structural problems
/// (bad numbers, unknown codes, out-of-range years) are fatal and name the
/// offending row; missing socioeconomic fields become the explicit missing
/// level.
pub fn ingest_students_csv<R: Read>(
    reader: R,
    codebook: &Codebook,
    validation: &ValidationConfig,
) -> Result<(Dataset, IngestReport)> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let got: Vec<&str> = headers.iter().collect();
    if got != STUDENTS_CSV_HEADER {
        return Err(Error::Validation(format!(
            "students.csv header mismatch: got {got:?}"
        )));
    }

    let mut ds = Dataset {
        records: Vec::new(),
        students: Interner::default(),
        municipalities: Interner::default(),
        states: Interner::default(),
        codebook: codebook.clone(),
    };
    let mut report = IngestReport::default();

    let mut raw = csv::StringRecord::new();
    let mut row_no = 1usize; // header row
    while rdr.read_record(&mut raw)? {
        row_no += 1;
        report.rows_read += 1;
        let rec = parse_record(&raw, row_no, codebook, validation, &mut ds)?;
        for (col, cat) in [
            ("sex", rec.sex),
            ("race", rec.race),
            ("family_income", rec.family_income),
            ("father_hs", rec.father_hs),
            ("mother_hs", rec.mother_hs),
            ("marital_status", rec.marital_status),
        ] {
            if cat.is_missing() {
                *report.missing_by_column.entry(col.to_string()).or_insert(0) += 1;
            }
        }
        if rec.age.is_none() {
            *report.missing_by_column.entry("age".to_string()).or_insert(0) += 1;
        }
        ds.records.push(rec);
    }
    report.rows_kept = ds.records.len();
    Ok((ds, report))
}

fn parse_record(
    raw: &csv::StringRecord,
    row: usize,
    codebook: &Codebook,
    validation: &ValidationConfig,
    ds: &mut Dataset,
) -> Result<StudentRecord> {
    let field = |i: usize| raw.get(i).unwrap_or("");
    let year: i32 = field(3)
        .parse()
        .map_err(|_| Error::Validation(format!("row {row}: bad year {:?}", field(3))))?;
    if year < validation.year_min || year > validation.year_max {
        return Err(Error::Validation(format!(
            "row {row}: year {year} outside [{}, {}]",
            validation.year_min, validation.year_max
        )));
    }
    let grade = |i: usize, name: &str| -> Result<f64> {
        let s = field(i);
        if s.is_empty() {
            return Ok(f64::NAN);
        }
        let v: f64 = s
            .parse()
            .map_err(|_| Error::Validation(format!("row {row}: bad {name} {s:?}")))?;
        if !v.is_finite() || v < 0.0 {
            return Err(Error::Validation(format!(
                "row {row}: {name} must be nonnegative, got {v}"
            )));
        }
        Ok(v)
    };
    let flag = |i: usize, name: &str| -> Result<bool> {
        match field(i) {
            "1" | "true" => Ok(true),
            "0" | "false" => Ok(false),
            other => Err(Error::Validation(format!(
                "row {row}: bad {name} flag {other:?}"
            ))),
        }
    };
    let age = match field(13) {
        "" => None,
        s => {
            let v: f64 = s
                .parse()
                .map_err(|_| Error::Validation(format!("row {row}: bad age {s:?}")))?;
            if !(5.0..=120.0).contains(&v) {
                return Err(Error::Validation(format!("row {row}: implausible age {v}")));
            }
            Some(v)
        }
    };

    Ok(StudentRecord {
        student_id: ds.students.intern(field(0)),
        municipality_id: ds.municipalities.intern(field(1)),
        state_id: ds.states.intern(field(2)),
        year,
        area_grades: [
            grade(4, "grade_lang")?,
            grade(5, "grade_human")?,
            grade(6, "grade_nat")?,
            grade(7, "grade_math")?,
        ],
        essay_grade: grade(8, "essay_grade")?,
        present_day1: flag(9, "present_day1")?,
        present_day2: flag(10, "present_day2")?,
        sex: codebook.intern("sex", field(11), row)?,
        race: codebook.intern("race", field(12), row)?,
        family_income: codebook.intern("family_income", field(14), row)?,
        father_hs: codebook.intern("father_hs", field(15), row)?,
        mother_hs: codebook.intern("mother_hs", field(16), row)?,
        marital_status: codebook.intern("marital_status", field(17), row)?,
        age,
    })
}

pub fn write_students_csv<W: Write>(writer: W, ds: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(STUDENTS_CSV_HEADER)?;
    let cat_str = |col: &str, c: Cat| -> String {
        if c.is_missing() {
            String::new()
        } else {
            ds.codebook.columns[col].code_at(c.0).unwrap_or("").to_string()
        }
    };
    let grade_str = |g: f64| if g.is_nan() { String::new() } else { g.to_string() };
    for r in &ds.records {
        w.write_record(&[
            ds.students.name(r.student_id).to_string(),
            ds.municipalities.name(r.municipality_id).to_string(),
            ds.states.name(r.state_id).to_string(),
            r.year.to_string(),
            grade_str(r.area_grades[0]),
            grade_str(r.area_grades[1]),
            grade_str(r.area_grades[2]),
            grade_str(r.area_grades[3]),
            grade_str(r.essay_grade),
            if r.present_day1 { "1" } else { "0" }.to_string(),
            if r.present_day2 { "1" } else { "0" }.to_string(),
            cat_str("sex", r.sex),
            cat_str("race", r.race),
            r.age.map(|a| a.to_string()).unwrap_or_default(),
            cat_str("family_income", r.family_income),
            cat_str("father_hs", r.father_hs),
            cat_str("mother_hs", r.mother_hs),
            cat_str("marital_status", r.marital_status),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Sample filter configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    /// Observation years removed entirely from the sample.
    pub excluded_years: Vec<i32>,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            excluded_years: vec![2011, 2012],
        }
    }
}

/// Retain rows present on both exam days with a positive essay grade,
/// dropping excluded years. Total: never fails, idempotent.
pub fn filter_records(
    records: Vec<StudentRecord>,
    config: &FilterConfig,
    report: &mut IngestReport,
) -> Vec<StudentRecord> {
    let mut kept = Vec::with_capacity(records.len());
    for r in records {
        // A NaN essay grade counts as missing and is dropped too.
        let essay_positive = r.essay_grade > 0.0;
        let reason = if config.excluded_years.contains(&r.year) {
            Some("excluded_year")
        } else if !r.present_day1 || !r.present_day2 {
            Some("absent")
        } else if !essay_positive {
            Some("essay_zero_or_missing")
        } else {
            None
        };
        match reason {
            Some(reason) => *report.dropped.entry(reason.to_string()).or_insert(0) += 1,
            None => kept.push(r),
        }
    }
    report.rows_kept = kept.len();
    kept
}

/// Per-year moments used for standardization (population SD convention).
#[derive(Debug, Clone, Serialize)]
pub struct YearMoments {
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
}

/// Standardize the mean multiple-choice grade within each exam year:
/// `z = (grade - year mean) / year sd`, population (divide-by-n) standard
/// deviation. A year with fewer than two rows or zero variance is a
/// degenerate-scale error naming the year.
pub fn standardize(records: &[StudentRecord]) -> Result<(Vec<f64>, BTreeMap<i32, YearMoments>)> {
    let mut raw = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let m = (r.area_grades[0] + r.area_grades[1] + r.area_grades[2] + r.area_grades[3]) / 4.0;
        if !m.is_finite() {
            return Err(Error::Data(format!(
                "record {i}: non-finite mean area grade (missing scores in a retained row)"
            )));
        }
        raw.push(m);
    }

    // Two passes: moments per year, then the transform.
    let mut sums: BTreeMap<i32, (usize, f64)> = BTreeMap::new();
    for (r, m) in records.iter().zip(&raw) {
        let e = sums.entry(r.year).or_insert((0, 0.0));
        e.0 += 1;
        e.1 += m;
    }
    let mut sq: BTreeMap<i32, f64> = BTreeMap::new();
    for (r, m) in records.iter().zip(&raw) {
        let (n, s) = sums[&r.year];
        let d = m - s / n as f64;
        *sq.entry(r.year).or_insert(0.0) += d * d;
    }

    let mut moments = BTreeMap::new();
    for (&year, &(n, s)) in &sums {
        if n < 2 {
            return Err(Error::DegenerateScale {
                year,
                detail: format!("only {n} row(s)"),
            });
        }
        let mean = s / n as f64;
        let var = sq[&year] / n as f64;
        let sd = var.sqrt();
        if sd <= 1e-12 * mean.abs().max(1.0) {
            return Err(Error::DegenerateScale {
                year,
                detail: "zero variance".into(),
            });
        }
        moments.insert(year, YearMoments { n, mean, sd });
    }

    let out = records
        .iter()
        .zip(&raw)
        .map(|(r, m)| {
            let mm = &moments[&r.year];
            (m - mm.mean) / mm.sd
        })
        .collect();
    Ok((out, moments))
}

/// Arithmetic mean of a municipality-year group excluding the target row.
/// Undefined (`None`) for singleton groups.
pub fn leave_one_out_mean(values: &[f64], target: usize) -> Option<f64> {
    let n = values.len();
    if n < 2 || target >= n {
        return None;
    }
    let sum: f64 = values.iter().sum();
    Some((sum - values[target]) / (n - 1) as f64)
}

/// One analysis-ready row: standardized outcome, peer means, keys and
/// controls.
#[derive(Debug, Clone)]
pub struct PanelRow {
    pub student_id: u32,
    pub municipality_id: u32,
    pub state_id: u32,
    pub year: i32,
    /// Standardized mean multiple-choice grade, z-units.
    pub outcome: f64,
    /// Leave-one-out municipality-year mean of `outcome`.
    pub peer_mean: f64,
    /// Full municipality-year mean of `outcome`.
    pub muni_year_mean: f64,
    pub sex: Cat,
    pub race: Cat,
    pub family_income: Cat,
    pub father_hs: Cat,
    pub mother_hs: Cat,
    pub marital_status: Cat,
    pub age: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Panel {
    pub rows: Vec<PanelRow>,
    pub students: Interner,
    pub municipalities: Interner,
    pub states: Interner,
    pub codebook: Codebook,
    /// Rows dropped because their municipality-year cell had a single
    /// observation (peer mean undefined).
    pub singletons_dropped: usize,
    pub year_moments: BTreeMap<i32, YearMoments>,
    /// How the outcome was standardized, echoed in output metadata.
    pub standardization: String,
}

/// Build the analysis panel from filtered records: standardize, compute
/// municipality-year means and leave-one-out peer means, drop singleton
/// cells. Row order follows the input record order.
pub fn build_panel(dataset: Dataset, filter: &FilterConfig) -> Result<(Panel, IngestReport)> {
    let Dataset {
        records,
        students,
        municipalities,
        states,
        codebook,
    } = dataset;
    let mut report = IngestReport {
        rows_read: records.len(),
        ..IngestReport::default()
    };
    let records = filter_records(records, filter, &mut report);
    if records.is_empty() {
        return Err(Error::Sample("no records remain after filtering".into()));
    }
    let (outcomes, year_moments) = standardize(&records)?;

    let mut cell_sums: HashMap<(u32, i32), (usize, f64)> = HashMap::new();
    for (r, &z) in records.iter().zip(&outcomes) {
        let e = cell_sums.entry((r.municipality_id, r.year)).or_insert((0, 0.0));
        e.0 += 1;
        e.1 += z;
    }

    let mut rows = Vec::with_capacity(records.len());
    let mut singletons = 0usize;
    for (r, &z) in records.iter().zip(&outcomes) {
        let (n, sum) = cell_sums[&(r.municipality_id, r.year)];
        if n < 2 {
            singletons += 1;
            continue;
        }
        rows.push(PanelRow {
            student_id: r.student_id,
            municipality_id: r.municipality_id,
            state_id: r.state_id,
            year: r.year,
            outcome: z,
            peer_mean: (sum - z) / (n - 1) as f64,
            muni_year_mean: sum / n as f64,
            sex: r.sex,
            race: r.race,
            family_income: r.family_income,
            father_hs: r.father_hs,
            mother_hs: r.mother_hs,
            marital_status: r.marital_status,
            age: r.age,
        });
    }
    report.rows_kept = rows.len();
    if singletons > 0 {
        report
            .dropped
            .insert("singleton_municipality_year".into(), singletons);
    }

    Ok((
        Panel {
            rows,
            students,
            municipalities,
            states,
            codebook,
            singletons_dropped: singletons,
            year_moments,
            standardization: "per-year, population SD, over the loaded sample".into(),
        },
        report,
    ))
}

/// Observable characteristics usable as balance-regression outcomes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Covariate {
    Male,
    White,
    Age,
    FatherHs,
    MotherHs,
    IncomeGt6,
}

pub const BALANCE_COVARIATES: [&str; 6] =
    ["male", "white", "age", "father_hs", "mother_hs", "income_gt6"];

impl Covariate {
    pub fn parse(name: &str) -> Result<Covariate> {
        match name {
            "male" => Ok(Covariate::Male),
            "white" => Ok(Covariate::White),
            "age" => Ok(Covariate::Age),
            "father_hs" => Ok(Covariate::FatherHs),
            "mother_hs" => Ok(Covariate::MotherHs),
            "income_gt6" => Ok(Covariate::IncomeGt6),
            other => Err(Error::Spec(format!(
                "unknown covariate {other:?}; expected one of {BALANCE_COVARIATES:?}"
            ))),
        }
    }

    /// Covariate value for one row; `None` when the underlying field is
    /// missing (those rows are dropped from that covariate's regression).
    pub fn value(&self, row: &PanelRow, codebook: &Codebook) -> Option<f64> {
        let level = |col: &str, cat: Cat| -> Option<String> {
            if cat.is_missing() {
                None
            } else {
                codebook.columns[col].code_at(cat.0).map(str::to_string)
            }
        };
        match self {
            Covariate::Male => level("sex", row.sex).map(|c| if c == "1" { 1.0 } else { 0.0 }),
            Covariate::White => level("race", row.race).map(|c| if c == "1" { 1.0 } else { 0.0 }),
            Covariate::Age => row.age,
            Covariate::FatherHs => {
                level("father_hs", row.father_hs).map(|c| if c == "1" { 1.0 } else { 0.0 })
            }
            Covariate::MotherHs => {
                level("mother_hs", row.mother_hs).map(|c| if c == "1" { 1.0 } else { 0.0 })
            }
            Covariate::IncomeGt6 => level("family_income", row.family_income)
                .map(|c| if codebook.high_income_codes.contains(&c) { 1.0 } else { 0.0 }),
        }
    }
}
