//! Atomic probability measures on R^d, norms, and CSV/JSON ingestion.
//!
//! Every measure in this crate is a finite list of weighted point masses:
//! empirical measures have uniform weights, population measures are dense
//! samples or quadrature rules. Duplicate atoms are kept as separate entries.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance on the total mass of a measure.
pub const WEIGHT_SUM_TOL: f64 = 1e-12;

/// Relative tolerance of the collinearity test used by [`line_mass_sup`].
pub const COLLINEARITY_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    #[default]
    Euclidean,
    L1,
    Linf,
}

impl std::str::FromStr for NormKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "euclidean" | "l2" | "2" => Ok(NormKind::Euclidean),
            "l1" | "1" => Ok(NormKind::L1),
            "linf" | "inf" | "max" => Ok(NormKind::Linf),
            other => Err(Error::Value(format!("unknown norm `{other}`"))),
        }
    }
}

pub fn norm(v: &[f64], kind: NormKind) -> f64 {
    match kind {
        NormKind::Euclidean => euclidean(v),
        NormKind::L1 => v.iter().map(|x| x.abs()).sum(),
        NormKind::Linf => v.iter().fold(0.0, |m, x| f64::max(m, x.abs())),
    }
}

/// Euclidean norm, scaled to avoid overflow for large coordinates.
pub fn euclidean(v: &[f64]) -> f64 {
    let scale = v.iter().fold(0.0, |m: f64, x| m.max(x.abs()));
    if scale == 0.0 || !scale.is_finite() {
        return scale;
    }
    let s: f64 = v.iter().map(|x| (x / scale) * (x / scale)).sum();
    scale * s.sqrt()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn distance(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc.sqrt()
}

/// Weighted point masses in R^d. Immutable once built.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AtomicMeasure {
    dim: usize,
    atoms: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

#[derive(Deserialize)]
struct RawMeasure {
    dim: usize,
    atoms: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

impl<'de> Deserialize<'de> for AtomicMeasure {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let raw = RawMeasure::deserialize(de)?;
        let m = AtomicMeasure::new(raw.atoms, raw.weights).map_err(serde::de::Error::custom)?;
        if m.dim != raw.dim {
            return Err(serde::de::Error::custom(format!(
                "declared dim {} but atoms have length {}",
                raw.dim, m.dim
            )));
        }
        Ok(m)
    }
}

impl AtomicMeasure {
    /// Builds a measure from atoms and weights that already sum to one.
    pub fn new(atoms: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        let m = Self::unchecked_sum(atoms, weights)?;
        let total: f64 = m.weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::Value(format!("weights sum to {total}, expected 1")));
        }
        Ok(m)
    }

    /// Builds a measure from arbitrary nonnegative masses, rescaling them to sum to one.
    pub fn from_masses(atoms: Vec<Vec<f64>>, masses: Vec<f64>) -> Result<Self> {
        let mut m = Self::unchecked_sum(atoms, masses)?;
        let total: f64 = m.weights.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::Value(format!("total mass {total} is not positive")));
        }
        m.weights.iter_mut().for_each(|w| *w /= total);
        Ok(m)
    }

    /// Empirical measure: weight 1/n on each atom.
    pub fn uniform(atoms: Vec<Vec<f64>>) -> Result<Self> {
        let n = atoms.len();
        if n == 0 {
            return Err(Error::Empty);
        }
        // Skips the sum check: n copies of 1/n can drift past the tolerance for large n.
        Self::unchecked_sum(atoms, vec![1.0 / n as f64; n])
    }

    pub fn dirac(point: Vec<f64>) -> Result<Self> {
        Self::new(vec![point], vec![1.0])
    }

    fn unchecked_sum(atoms: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::Empty);
        }
        if atoms.len() != weights.len() {
            return Err(Error::Format(format!(
                "{} atoms but {} weights",
                atoms.len(),
                weights.len()
            )));
        }
        let dim = atoms[0].len();
        if dim == 0 {
            return Err(Error::Value("atoms must have positive dimension".into()));
        }
        for (i, a) in atoms.iter().enumerate() {
            if a.len() != dim {
                return Err(Error::Format(format!(
                    "atom {i} has length {}, expected {dim}",
                    a.len()
                )));
            }
            if a.iter().any(|x| !x.is_finite()) {
                return Err(Error::Value(format!("atom {i} has a non-finite coordinate")));
            }
        }
        if let Some(w) = weights.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
            return Err(Error::Value(format!("invalid weight {w}")));
        }
        Ok(Self { dim, atoms, weights })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn atoms(&self) -> &[Vec<f64>] {
        &self.atoms
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], f64)> + '_ {
        self.atoms.iter().map(Vec::as_slice).zip(self.weights.iter().copied())
    }

    pub fn max_weight(&self) -> f64 {
        self.weights.iter().copied().fold(0.0, f64::max)
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for (x, w) in self.iter() {
            for (mk, xk) in m.iter_mut().zip(x) {
                *mk += w * xk;
            }
        }
        m
    }

    /// Coordinatewise weighted median (lower median per coordinate).
    pub fn coordinatewise_median(&self) -> Vec<f64> {
        (0..self.dim)
            .map(|k| {
                let mut col: Vec<(f64, f64)> = self.iter().map(|(x, w)| (x[k], w)).collect();
                col.sort_by(|a, b| a.0.total_cmp(&b.0));
                let mut acc = 0.0;
                for (v, w) in &col {
                    acc += w;
                    if acc >= 0.5 - WEIGHT_SUM_TOL {
                        return *v;
                    }
                }
                col.last().map(|c| c.0).unwrap_or(0.0)
            })
            .collect()
    }

    /// Largest distance between two atoms.
    pub fn diameter(&self) -> f64 {
        let mut d: f64 = 0.0;
        for (i, a) in self.atoms.iter().enumerate() {
            for b in &self.atoms[i + 1..] {
                d = d.max(distance(a, b));
            }
        }
        d
    }

    /// Applies `x -> scale * x + shift` to every atom.
    pub fn affine(&self, scale: f64, shift: &[f64]) -> Result<Self> {
        if shift.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: shift.len() });
        }
        let atoms = self
            .atoms
            .iter()
            .map(|a| a.iter().zip(shift).map(|(x, t)| scale * x + t).collect())
            .collect();
        Self::new(atoms, self.weights.clone())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Writes the measure as CSV with a `x0,..,x{d-1},weight` header.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        let mut header: Vec<String> = (0..self.dim).map(|k| format!("x{k}")).collect();
        header.push("weight".into());
        wtr.write_record(&header).map_err(csv_err)?;
        for (x, w) in self.iter() {
            let row: Vec<String> = x.iter().chain(std::iter::once(&w)).map(|v| v.to_string()).collect();
            wtr.write_record(&row).map_err(csv_err)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("{other:?}")),
    }
}

/// Reads an atomic measure from a CSV file.
pub fn load_measure(path: impl AsRef<Path>) -> Result<AtomicMeasure> {
    let file = std::fs::File::open(path)?;
    parse_csv(file)
}

/// Parses CSV rows of decimal floats. A first row that does not parse as
/// numbers is a header; a header whose last column is `weight` marks that
/// column as (unnormalized) atom masses. Without it, weights are uniform.
pub fn parse_csv<R: Read>(input: R) -> Result<AtomicMeasure> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(input);

    let mut weighted = false;
    let mut width: Option<usize> = None;
    let mut atoms = Vec::new();
    let mut masses = Vec::new();

    for (line, record) in rdr.records().enumerate() {
        let record = record.map_err(csv_err)?;
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        if line == 0 && record.iter().any(|f| f.parse::<f64>().is_err()) {
            weighted = record
                .iter()
                .last()
                .is_some_and(|f| f.eq_ignore_ascii_case("weight"));
            width = Some(record.len());
            continue;
        }
        match width {
            Some(w) if w != record.len() => {
                return Err(Error::Format(format!(
                    "row {} has {} fields, expected {w}",
                    line + 1,
                    record.len()
                )))
            }
            None => width = Some(record.len()),
            _ => {}
        }
        let mut values = Vec::with_capacity(record.len());
        for f in record.iter() {
            let v: f64 = f
                .parse()
                .map_err(|_| Error::Format(format!("row {}: `{f}` is not a number", line + 1)))?;
            if !v.is_finite() {
                return Err(Error::Value(format!("row {}: non-finite value `{f}`", line + 1)));
            }
            values.push(v);
        }
        if weighted {
            let w = values.pop().expect("width checked");
            if values.is_empty() {
                return Err(Error::Format("weight column without coordinates".into()));
            }
            masses.push(w);
        } else {
            masses.push(1.0);
        }
        atoms.push(values);
    }

    if atoms.is_empty() {
        return Err(Error::Empty);
    }
    if weighted {
        AtomicMeasure::from_masses(atoms, masses)
    } else {
        AtomicMeasure::uniform(atoms)
    }
}

/// A quantile direction: a vector with Euclidean norm strictly below one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileDirection {
    vector: Vec<f64>,
    #[serde(default)]
    norm_kind: NormKind,
}

impl QuantileDirection {
    pub fn new(vector: Vec<f64>) -> Result<Self> {
        Self::with_norm(vector, NormKind::Euclidean)
    }

    /// The ‖·‖ < 1 check always uses the euclidean norm; `norm_kind` only
    /// records which norm the objective is evaluated with.
    pub fn with_norm(vector: Vec<f64>, norm_kind: NormKind) -> Result<Self> {
        if vector.iter().any(|x| !x.is_finite()) {
            return Err(Error::Value("direction has a non-finite coordinate".into()));
        }
        let n = euclidean(&vector);
        if n >= 1.0 {
            return Err(Error::InvalidDirection(n));
        }
        Ok(Self { vector, norm_kind })
    }

    /// The zero direction, i.e. the geometric median.
    pub fn zero(dim: usize) -> Self {
        Self { vector: vec![0.0; dim], norm_kind: NormKind::Euclidean }
    }

    pub fn vector(&self) -> &[f64] {
        &self.vector
    }

    pub fn norm_kind(&self) -> NormKind {
        self.norm_kind
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn magnitude(&self) -> f64 {
        euclidean(&self.vector)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LineWitness {
    /// A single atom carrying the maximal mass (all other lines carry less).
    Atom { index: usize, point: Vec<f64> },
    /// The affine line `point + t * direction`.
    Line { point: Vec<f64>, direction: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineMass {
    pub mass: f64,
    pub witness: LineWitness,
}

impl LineMass {
    /// Whether the measure is concentrated on one affine line.
    pub fn concentrated_on_line(&self) -> bool {
        self.mass >= 1.0 - WEIGHT_SUM_TOL
    }
}

/// Euclidean norm of the wedge product `d ∧ e` via the Lagrange identity
/// summed over coordinate pairs, which avoids the cancellation in
/// `|d|²|e|² - <d,e>²`.
fn wedge_norm(d: &[f64], e: &[f64]) -> f64 {
    let mut acc = 0.0;
    for a in 0..d.len() {
        for b in a + 1..d.len() {
            let c = d[a] * e[b] - d[b] * e[a];
            acc += c * c;
        }
    }
    acc.sqrt()
}

pub(crate) fn collinear(origin: &[f64], dir: &[f64], dir_norm: f64, p: &[f64]) -> bool {
    let e: Vec<f64> = p.iter().zip(origin).map(|(x, o)| x - o).collect();
    let en = euclidean(&e);
    if en == 0.0 {
        return true;
    }
    wedge_norm(dir, &e) <= COLLINEARITY_TOL * dir_norm * en
}

/// Supremum over affine lines `L` of `mu(L)`, attained on a line through two
/// distinct support points or, when the support is a single point, on that atom.
pub fn line_mass_sup(mu: &AtomicMeasure) -> LineMass {
    // Merge coincident atoms: the line mass only depends on positions.
    let mut support: Vec<(Vec<f64>, f64, usize)> = Vec::new();
    {
        let mut order: Vec<usize> = (0..mu.len()).collect();
        order.sort_by(|&i, &j| {
            mu.atoms[i]
                .iter()
                .zip(&mu.atoms[j])
                .map(|(a, b)| a.total_cmp(b))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        for i in order {
            match support.last_mut() {
                Some((p, w, _)) if *p == mu.atoms[i] => *w += mu.weights[i],
                _ => support.push((mu.atoms[i].clone(), mu.weights[i], i)),
            }
        }
    }

    let (heavy, _) = support
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bw), (i, s)| if s.1 > bw { (i, s.1) } else { (bi, bw) });
    let mut best = LineMass {
        mass: support[heavy].1,
        witness: LineWitness::Atom { index: support[heavy].2, point: support[heavy].0.clone() },
    };
    let m = support.len();
    if m == 1 {
        return best;
    }

    let total: f64 = support.iter().map(|s| s.1).sum();
    let mut covered = vec![false; m];
    for i in 0..m {
        covered.iter_mut().for_each(|c| *c = false);
        for j in i + 1..m {
            if covered[j] {
                continue;
            }
            let origin = &support[i].0;
            let dir: Vec<f64> = support[j].0.iter().zip(origin).map(|(a, b)| a - b).collect();
            let dn = euclidean(&dir);
            let mut mass = support[i].1;
            for (k, s) in support.iter().enumerate() {
                if k == i {
                    continue;
                }
                if collinear(origin, &dir, dn, &s.0) {
                    mass += s.1;
                    if k > i {
                        covered[k] = true;
                    }
                }
            }
            if mass > best.mass {
                best = LineMass {
                    mass,
                    witness: LineWitness::Line { point: origin.clone(), direction: dir },
                };
                if mass >= total - WEIGHT_SUM_TOL {
                    best.mass = best.mass.min(1.0);
                    return best;
                }
            }
        }
    }
    best.mass = best.mass.min(1.0);
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(v: &[[f64; 2]]) -> Vec<Vec<f64>> {
        v.iter().map(|p| p.to_vec()).collect()
    }

    #[test]
    fn uniform_default_weights() {
        let m = parse_csv("1,0\n-1,0\n".as_bytes()).unwrap();
        assert_eq!(m.dim(), 2);
        assert_eq!(m.weights(), &[0.5, 0.5]);
    }

    #[test]
    fn weight_column_is_renormalized() {
        let m = parse_csv("x,y,weight\n0,0,3\n1,1,1\n".as_bytes()).unwrap();
        assert_eq!(m.dim(), 2);
        assert_eq!(m.weights(), &[0.75, 0.25]);
        assert_eq!(m.atoms()[1], vec![1.0, 1.0]);
    }

    #[test]
    fn header_without_weight_is_skipped() {
        let m = parse_csv("a,b\n1,2\n3,4\n".as_bytes()).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.weights(), &[0.5, 0.5]);
    }

    #[test]
    fn ragged_rows_rejected() {
        let err = parse_csv("1,0\n1,0,5\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err:?}");
    }

    #[test]
    fn non_finite_rejected() {
        let err = parse_csv("1,0\nNaN,0\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Value(_)), "{err:?}");
        let err = parse_csv("1,inf\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Value(_)), "{err:?}");
    }

    #[test]
    fn empty_rejected() {
        assert!(matches!(parse_csv("".as_bytes()), Err(Error::Empty)));
        assert!(matches!(parse_csv("x,y\n".as_bytes()), Err(Error::Empty)));
    }

    #[test]
    fn norms() {
        assert_eq!(norm(&[3.0, 4.0], NormKind::Euclidean), 5.0);
        assert_eq!(norm(&[1.0, -2.0], NormKind::Linf), 2.0);
        assert_eq!(norm(&[1.0, -2.0], NormKind::L1), 3.0);
        assert_eq!(norm(&[0.0, 0.0], NormKind::Euclidean), 0.0);
    }

    #[test]
    fn direction_must_be_inside_unit_ball() {
        assert!(QuantileDirection::new(vec![0.6, 0.79]).is_ok());
        assert!(matches!(
            QuantileDirection::new(vec![0.6, 0.8]),
            Err(Error::InvalidDirection(_))
        ));
    }

    #[test]
    fn weights_must_sum_to_one() {
        assert!(AtomicMeasure::new(pts(&[[0.0, 0.0], [1.0, 0.0]]), vec![0.5, 0.6]).is_err());
        assert!(AtomicMeasure::new(pts(&[[0.0, 0.0], [0.0, 0.0]]), vec![0.5, 0.5]).is_ok());
        assert!(AtomicMeasure::new(vec![vec![0.0, 0.0], vec![1.0]], vec![0.5, 0.5]).is_err());
        assert!(AtomicMeasure::new(pts(&[[0.0, 0.0]]), vec![-1.0]).is_err());
    }

    #[test]
    fn json_round_trip_and_validation() {
        let m = AtomicMeasure::from_masses(pts(&[[0.1, 0.2], [3.0, -1.5]]), vec![1.0, 2.0]).unwrap();
        let back = AtomicMeasure::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(m, back);
        assert!(AtomicMeasure::from_json(r#"{"dim":3,"atoms":[[1,2]],"weights":[1]}"#).is_err());
    }

    #[test]
    fn line_mass_four_point_cross() {
        let m = AtomicMeasure::uniform(pts(&[[-1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])).unwrap();
        let lm = line_mass_sup(&m);
        assert_eq!(lm.mass, 0.5);
        assert!(!lm.concentrated_on_line());
        assert!(matches!(lm.witness, LineWitness::Line { .. }));
    }

    #[test]
    fn line_mass_single_atom_and_pair() {
        let lm = line_mass_sup(&AtomicMeasure::dirac(vec![2.0, 3.0]).unwrap());
        assert_eq!(lm.mass, 1.0);
        assert!(matches!(lm.witness, LineWitness::Atom { index: 0, .. }));

        let lm = line_mass_sup(&AtomicMeasure::uniform(pts(&[[-1.0, 0.0], [1.0, 0.0]])).unwrap());
        assert_eq!(lm.mass, 1.0);
        assert!(lm.concentrated_on_line());
    }

    #[test]
    fn line_mass_counts_duplicates() {
        let m = AtomicMeasure::uniform(pts(&[[0.0, 0.0], [0.0, 0.0], [1.0, 1.0], [5.0, -3.0], [2.0, 7.0]]))
            .unwrap();
        let lm = line_mass_sup(&m);
        assert!((lm.mass - 0.6).abs() < 1e-15);
    }

    #[test]
    fn line_mass_oblique_line_in_3d() {
        let m = AtomicMeasure::uniform(vec![
            vec![0.0, 0.0, 0.0],
            vec![1.0, 2.0, 3.0],
            vec![2.0, 4.0, 6.0],
            vec![-1.0, -2.0, -3.0],
            vec![1.0, 0.0, 0.0],
        ])
        .unwrap();
        assert!((line_mass_sup(&m).mass - 0.8).abs() < 1e-15);
    }

    #[test]
    fn coordinatewise_median_and_mean() {
        let m = AtomicMeasure::uniform(pts(&[[0.0, 5.0], [1.0, -1.0], [10.0, 2.0]])).unwrap();
        assert_eq!(m.coordinatewise_median(), vec![1.0, 2.0]);
        let mean = m.mean();
        assert!((mean[0] - 11.0 / 3.0).abs() < 1e-15 && (mean[1] - 2.0).abs() < 1e-15);
    }
}
