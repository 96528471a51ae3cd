//! Marginal measures: validation, convex order, grid projection and the
//! even-power growth family used to budget quadratic variation.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Construction tolerance for masses and means.
pub const CONSTRUCTION_TOL: f64 = 1e-12;
/// Validation tolerance: inputs deviating by more than this are rejected.
pub const VALIDATION_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeasureError {
    #[error("measure has no atoms")]
    Empty,
    #[error("atom at {value} has negative mass {mass}")]
    NegativeMass { value: f64, mass: f64 },
    #[error("atom values and masses must be finite (got value {value}, mass {mass})")]
    NonFinite { value: f64, mass: f64 },
    #[error("masses sum to {total}, expected 1")]
    MassNotOne { total: f64 },
    #[error("measure is not centered: mean {mean}")]
    NotCentered { mean: f64 },
    #[error("means differ: {left} vs {right}")]
    MeanMismatch { left: f64, right: f64 },
    #[error("atom {value} is not on the grid of pitch {pitch}")]
    OffGrid { value: f64, pitch: f64 },
    #[error("grid pitch must be positive, got {0}")]
    BadPitch(f64),
    #[error("could not parse measure: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub value: f64,
    pub mass: f64,
}

/// A probability measure with finitely many atoms, stored with strictly
/// increasing values.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure {
    atoms: Vec<Atom>,
    centered: bool,
}

impl DiscreteMeasure {
    /// Validate raw `(value, mass)` pairs and bring them to canonical form.
    ///
    /// Duplicate values are merged, zero-mass atoms dropped and the masses
    /// renormalized once the total is within [`VALIDATION_TOL`] of one.
    pub fn new<I>(raw: I) -> Result<Self, MeasureError>
    where
        I: IntoIterator<Item = (f64, f64)>,
    {
        let mut merged: Vec<(f64, f64)> = Vec::new();
        for (value, mass) in raw {
            if !value.is_finite() || !mass.is_finite() {
                return Err(MeasureError::NonFinite { value, mass });
            }
            if mass < 0.0 {
                return Err(MeasureError::NegativeMass { value, mass });
            }
            merged.push((value, mass));
        }
        if merged.is_empty() {
            return Err(MeasureError::Empty);
        }
        merged.sort_by(|a, b| a.0.total_cmp(&b.0));
        let total: f64 = merged.iter().map(|a| a.1).sum();
        if (total - 1.0).abs() > VALIDATION_TOL {
            return Err(MeasureError::MassNotOne { total });
        }
        let mut atoms: Vec<Atom> = Vec::with_capacity(merged.len());
        for (value, mass) in merged {
            match atoms.last_mut() {
                Some(last) if last.value == value => last.mass += mass,
                _ => atoms.push(Atom { value, mass }),
            }
        }
        atoms.retain(|a| a.mass > 0.0);
        if atoms.is_empty() {
            return Err(MeasureError::Empty);
        }
        for a in &mut atoms {
            a.mass /= total;
        }
        Ok(Self {
            atoms,
            centered: false,
        })
    }

    /// As [`DiscreteMeasure::new`], additionally demanding a zero mean.
    pub fn centered<I>(raw: I) -> Result<Self, MeasureError>
    where
        I: IntoIterator<Item = (f64, f64)>,
    {
        let mut m = Self::new(raw)?;
        let mean = m.mean();
        if mean.abs() > VALIDATION_TOL {
            return Err(MeasureError::NotCentered { mean });
        }
        m.centered = true;
        Ok(m)
    }

    pub fn dirac(value: f64) -> Self {
        Self {
            atoms: vec![Atom { value, mass: 1.0 }],
            centered: value == 0.0,
        }
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn is_centered(&self) -> bool {
        self.centered
    }

    pub fn mean(&self) -> f64 {
        self.atoms.iter().map(|a| a.value * a.mass).sum()
    }

    pub fn variance(&self) -> f64 {
        let mean = self.mean();
        self.atoms
            .iter()
            .map(|a| (a.value - mean).powi(2) * a.mass)
            .sum()
    }

    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.atoms.iter().map(|a| f(a.value) * a.mass).sum()
    }

    /// Mass sitting exactly at `value` (zero if no atom there).
    pub fn mass_at(&self, value: f64) -> f64 {
        match self
            .atoms
            .binary_search_by(|a| a.value.total_cmp(&value))
        {
            Ok(i) => self.atoms[i].mass,
            Err(_) => 0.0,
        }
    }

    /// Potential `U(k) = ∫ |x - k| dμ(x)`.
    pub fn potential(&self, k: f64) -> f64 {
        self.integrate(|x| (x - k).abs())
    }

    pub fn from_csv_str(text: &str) -> Result<Self, MeasureError> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let headers = reader
            .headers()
            .map_err(|e| MeasureError::Parse(e.to_string()))?
            .clone();
        if headers.len() != 2 || &headers[0] != "value" || &headers[1] != "mass" {
            return Err(MeasureError::Parse(format!(
                "expected header `value,mass`, found `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut raw = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| MeasureError::Parse(e.to_string()))?;
            let value = parse_f64(&record[0])?;
            let mass = parse_f64(&record[1])?;
            raw.push((value, mass));
        }
        Self::new(raw)
    }

    pub fn from_json_str(text: &str) -> Result<Self, MeasureError> {
        let file: MeasureFile =
            serde_json::from_str(text).map_err(|e| MeasureError::Parse(e.to_string()))?;
        Self::new(file.atoms.into_iter().map(|[v, m]| (v, m)))
    }

    /// Load a measure from a `.csv` or `.json` file (decided by extension,
    /// falling back to sniffing the first non-blank character).
    pub fn load(path: &Path) -> Result<Self, MeasureError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| MeasureError::Parse(format!("{}: {e}", path.display())))?;
        let is_json = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => true,
            Some("csv") => false,
            _ => text.trim_start().starts_with('{'),
        };
        if is_json {
            Self::from_json_str(&text)
        } else {
            Self::from_csv_str(&text)
        }
    }

    pub fn to_file(&self) -> MeasureFile {
        MeasureFile {
            atoms: self.atoms.iter().map(|a| [a.value, a.mass]).collect(),
        }
    }
}

impl fmt::Display for DiscreteMeasure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .atoms
            .iter()
            .map(|a| format!("{}@{}", a.mass, a.value))
            .collect();
        write!(f, "[{}]", parts.join(", "))
    }
}

fn parse_f64(s: &str) -> Result<f64, MeasureError> {
    s.parse::<f64>()
        .map_err(|e| MeasureError::Parse(format!("`{s}`: {e}")))
}

/// JSON shape `{"atoms": [[value, mass], ...]}`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MeasureFile {
    pub atoms: Vec<[f64; 2]>,
}

/// Summary returned by [`validate_measure`].
#[derive(Debug, Clone, PartialEq)]
pub struct ValidatedMeasure {
    pub measure: DiscreteMeasure,
    pub mean: f64,
    pub variance: f64,
}

pub fn validate_measure(
    raw: &[(f64, f64)],
    require_centered: bool,
) -> Result<ValidatedMeasure, MeasureError> {
    let measure = if require_centered {
        DiscreteMeasure::centered(raw.iter().copied())?
    } else {
        DiscreteMeasure::new(raw.iter().copied())?
    };
    Ok(ValidatedMeasure {
        mean: measure.mean(),
        variance: measure.variance(),
        measure,
    })
}

/// Outcome of a convex-order test `μ ⪯ ν`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvexOrder {
    pub holds: bool,
    /// Strike with the largest potential excess `U_μ(k) - U_ν(k)` when the
    /// order fails.
    pub witness: Option<f64>,
    /// `max_k U_μ(k) - U_ν(k)` over the joint atoms (≤ 0 when the order holds).
    pub excess: f64,
}

/// Decide `μ ⪯ ν` by comparing potentials at every atom of either measure,
/// which is exact for finitely supported measures with equal means.
pub fn check_convex_order(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
) -> Result<ConvexOrder, MeasureError> {
    let (m1, m2) = (mu.mean(), nu.mean());
    if (m1 - m2).abs() > VALIDATION_TOL {
        return Err(MeasureError::MeanMismatch {
            left: m1,
            right: m2,
        });
    }
    let mut strikes: Vec<f64> = mu
        .atoms()
        .iter()
        .chain(nu.atoms())
        .map(|a| a.value)
        .collect();
    strikes.sort_by(f64::total_cmp);
    strikes.dedup();

    let mut worst = f64::NEG_INFINITY;
    let mut witness = None;
    for &k in &strikes {
        let excess = mu.potential(k) - nu.potential(k);
        let tol = CONSTRUCTION_TOL * (1.0 + k.abs());
        if excess > worst {
            worst = excess;
            if excess > tol {
                witness = Some(k);
            }
        }
    }
    Ok(ConvexOrder {
        holds: witness.is_none(),
        witness,
        excess: worst,
    })
}

/// Split every off-grid atom between its two neighbouring grid points so that
/// its barycenter is preserved. The result dominates `mu` in convex order.
pub fn project_to_grid(mu: &DiscreteMeasure, pitch: f64) -> Result<DiscreteMeasure, MeasureError> {
    if !(pitch > 0.0) || !pitch.is_finite() {
        return Err(MeasureError::BadPitch(pitch));
    }
    let mut masses: BTreeMap<i64, f64> = BTreeMap::new();
    for a in mu.atoms() {
        let (lo, frac) = grid_split(a.value, pitch);
        if frac == 0.0 {
            *masses.entry(lo).or_insert(0.0) += a.mass;
        } else {
            *masses.entry(lo).or_insert(0.0) += a.mass * (1.0 - frac);
            *masses.entry(lo + 1).or_insert(0.0) += a.mass * frac;
        }
    }
    let atoms = masses
        .into_iter()
        .filter(|(_, m)| *m > 0.0)
        .map(|(k, m)| Atom {
            value: k as f64 * pitch,
            mass: m,
        })
        .collect();
    Ok(DiscreteMeasure {
        atoms,
        centered: mu.centered,
    })
}

/// Lower grid index and fractional position of `x` inside its cell; points
/// within rounding distance of a grid point snap onto it.
fn grid_split(x: f64, pitch: f64) -> (i64, f64) {
    let scaled = x / pitch;
    let nearest = scaled.round();
    if (scaled - nearest).abs() <= 1e-9 * (1.0 + scaled.abs()) {
        return (nearest as i64, 0.0);
    }
    let lo = scaled.floor();
    let frac = (x - lo * pitch) / pitch;
    (lo as i64, frac)
}

/// Masses of a grid-supported measure indexed by integer grid position.
#[derive(Debug, Clone, PartialEq)]
pub struct GridMeasure {
    pitch: f64,
    masses: BTreeMap<i64, f64>,
}

impl GridMeasure {
    /// Requires every atom to lie on `pitch · Z` (use [`project_to_grid`] first).
    pub fn new(mu: &DiscreteMeasure, pitch: f64) -> Result<Self, MeasureError> {
        if !(pitch > 0.0) || !pitch.is_finite() {
            return Err(MeasureError::BadPitch(pitch));
        }
        let mut masses = BTreeMap::new();
        for a in mu.atoms() {
            let (k, frac) = grid_split(a.value, pitch);
            if frac != 0.0 {
                return Err(MeasureError::OffGrid {
                    value: a.value,
                    pitch,
                });
            }
            *masses.entry(k).or_insert(0.0) += a.mass;
        }
        Ok(Self { pitch, masses })
    }

    pub fn pitch(&self) -> f64 {
        self.pitch
    }

    pub fn mass(&self, k: i64) -> f64 {
        self.masses.get(&k).copied().unwrap_or(0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (i64, f64)> + '_ {
        self.masses.iter().map(|(k, m)| (*k, *m))
    }

    pub fn support_radius(&self) -> i64 {
        self.masses.keys().map(|k| k.abs()).max().unwrap_or(0)
    }

    pub fn variance(&self) -> f64 {
        let mean: f64 = self.iter().map(|(k, m)| k as f64 * self.pitch * m).sum();
        self.iter()
            .map(|(k, m)| (k as f64 * self.pitch - mean).powi(2) * m)
            .sum()
    }

    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.iter().map(|(k, m)| f(k as f64 * self.pitch) * m).sum()
    }
}

/// Member of the strictly convex growth family used for compensators.
///
/// Only the even-power family `φ_i(x) = x^{2i}` is provided; it is smooth,
/// vanishes at the origin and `φ_{i+1} / φ_i = x²` diverges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhiSpec {
    #[serde(default)]
    pub family: PhiFamily,
    pub i: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhiFamily {
    #[default]
    EvenPower,
}

impl PhiSpec {
    pub fn even_power(i: u32) -> Self {
        assert!(i >= 1, "growth family index starts at 1");
        Self {
            family: PhiFamily::EvenPower,
            i,
        }
    }

    pub fn value(&self, x: f64) -> f64 {
        phi_eval(*self, x).0
    }

    pub fn second_derivative(&self, x: f64) -> f64 {
        phi_eval(*self, x).2
    }

    /// One-step compensator of `φ(B)` for the symmetric `±h` walk:
    /// `½(φ(x+h) + φ(x-h)) - φ(x)`, expanded so that no cancellation occurs.
    pub fn lattice_increment(&self, x: f64, h: f64) -> f64 {
        let p = 2 * self.i as i32;
        let mut total = 0.0;
        let mut binom = 1.0f64;
        // Σ_{j≥1} C(p, 2j) x^{p-2j} h^{2j}
        for j in 1..=p {
            binom *= (p - j + 1) as f64 / j as f64;
            if j % 2 == 0 {
                total += binom * x.powi(p - j) * h.powi(j);
            }
        }
        total
    }
}

/// `(φ_i(x), φ_i'(x), φ_i''(x))` for the even-power family.
pub fn phi_eval(spec: PhiSpec, x: f64) -> (f64, f64, f64) {
    match spec.family {
        PhiFamily::EvenPower => {
            let p = 2 * spec.i as i32;
            let pf = p as f64;
            (
                x.powi(p),
                pf * x.powi(p - 1),
                pf * (pf - 1.0) * x.powi(p - 2),
            )
        }
    }
}
