//! Dataset model, CSV ingestion and the known experimental design.
//!
//! Data live one row per unit in a delimited text file. Columns are mapped by
//! name through a [`ColumnSchema`]; positional layouts are not supported. Rows
//! are grouped by cluster id in order of first appearance, and file order is
//! preserved within each cluster.
//!
//! All probabilities over treatment vectors are handled in log space: a
//! 15-unit cluster at `p = 0.5` already has vector probabilities near `3e-5`
//! and clusters of a hundred units underflow in linear space.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::allocation::{AllocationPolicy, SolvedPolicy};
use crate::error::{Error, Result};
use crate::numeric::compensated_sum;

/// All units of one cluster. Covariates are stored row-major (`n x K`).
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterData {
    pub id: String,
    covariates: Vec<f64>,
    n_covariates: usize,
    pub treatment: Vec<u8>,
    pub outcome: Vec<f64>,
    /// Per-unit design probabilities, present when the design is read from a column.
    pub design_p: Option<Vec<f64>>,
}

impl ClusterData {
    pub fn new(
        id: impl Into<String>,
        covariates: Vec<f64>,
        n_covariates: usize,
        treatment: Vec<u8>,
        outcome: Vec<f64>,
    ) -> Result<Self> {
        let n = treatment.len();
        if n == 0 {
            return Err(Error::invalid("cluster must contain at least one unit"));
        }
        if outcome.len() != n {
            return Err(Error::DimensionMismatch { expected: n, found: outcome.len() });
        }
        if covariates.len() != n * n_covariates {
            return Err(Error::DimensionMismatch {
                expected: n * n_covariates,
                found: covariates.len(),
            });
        }
        if treatment.iter().any(|&a| a > 1) {
            return Err(Error::invalid("treatment must be 0 or 1"));
        }
        if outcome.iter().chain(&covariates).any(|v| !v.is_finite()) {
            return Err(Error::invalid("outcomes and covariates must be finite"));
        }
        Ok(Self {
            id: id.into(),
            covariates,
            n_covariates,
            treatment,
            outcome,
            design_p: None,
        })
    }

    pub fn with_design_probabilities(mut self, p: Vec<f64>) -> Result<Self> {
        if p.len() != self.len() {
            return Err(Error::DimensionMismatch { expected: self.len(), found: p.len() });
        }
        self.design_p = Some(p);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.treatment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.treatment.is_empty()
    }

    pub fn n_covariates(&self) -> usize {
        self.n_covariates
    }

    /// Covariate row of unit `j`.
    pub fn row(&self, j: usize) -> &[f64] {
        &self.covariates[j * self.n_covariates..(j + 1) * self.n_covariates]
    }

    pub fn covariate(&self, j: usize, k: usize) -> f64 {
        self.covariates[j * self.n_covariates + k]
    }

    pub fn covariates(&self) -> &[f64] {
        &self.covariates
    }

    /// Copy of this cluster with a new outcome vector.
    pub fn with_outcomes(&self, outcome: Vec<f64>) -> Result<Self> {
        if outcome.len() != self.len() {
            return Err(Error::DimensionMismatch { expected: self.len(), found: outcome.len() });
        }
        Ok(Self { outcome, ..self.clone() })
    }
}

/// Cluster-indexed units. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    clusters: Vec<ClusterData>,
    covariate_names: Vec<String>,
}

impl Dataset {
    pub fn new(clusters: Vec<ClusterData>, covariate_names: Vec<String>) -> Result<Self> {
        if clusters.is_empty() {
            return Err(Error::EmptyFile);
        }
        let k = covariate_names.len();
        let mut seen = HashSet::new();
        for c in &clusters {
            if c.n_covariates != k {
                return Err(Error::DimensionMismatch { expected: k, found: c.n_covariates });
            }
            if !seen.insert(c.id.as_str()) {
                return Err(Error::DuplicateCluster(c.id.clone()));
            }
        }
        Ok(Self { clusters, covariate_names })
    }

    pub fn clusters(&self) -> &[ClusterData] {
        &self.clusters
    }

    pub fn cluster(&self, i: usize) -> &ClusterData {
        &self.clusters[i]
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.covariate_names.iter().position(|c| c == name)
    }

    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn n_units(&self) -> usize {
        self.clusters.iter().map(ClusterData::len).sum()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    /// Dataset made of the clusters at `indices` (repeats allowed). Cluster
    /// ids are suffixed with the draw position so they stay unique.
    pub fn resample(&self, indices: &[usize]) -> Dataset {
        let clusters = indices
            .iter()
            .enumerate()
            .map(|(pos, &i)| {
                let mut c = self.clusters[i].clone();
                c.id = format!("{}#{pos}", c.id);
                c
            })
            .collect();
        Dataset { clusters, covariate_names: self.covariate_names.clone() }
    }

    /// Same dataset with outcomes transformed unit by unit.
    pub fn map_outcomes(&self, f: impl Fn(f64) -> f64) -> Dataset {
        let clusters = self
            .clusters
            .iter()
            .map(|c| ClusterData { outcome: c.outcome.iter().map(|&y| f(y)).collect(), ..c.clone() })
            .collect();
        Dataset { clusters, covariate_names: self.covariate_names.clone() }
    }
}

/// The known randomization mechanism: independent Bernoulli assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DesignPropensity {
    /// Every unit treated independently with the same probability.
    ConstantBernoulli { p: f64 },
    /// Unit-specific probabilities read from a data column.
    PerUnitBernoulli { column: String },
}

impl DesignPropensity {
    /// Treatment probability of unit `j` of `cluster`.
    pub fn unit_probability(&self, cluster: &ClusterData, j: usize) -> Result<f64> {
        let p = match self {
            DesignPropensity::ConstantBernoulli { p } => *p,
            DesignPropensity::PerUnitBernoulli { column } => {
                let ps = cluster
                    .design_p
                    .as_ref()
                    .ok_or_else(|| Error::MissingDesignColumn(column.clone()))?;
                *ps.get(j).ok_or(Error::IndexOutOfRange { index: j, len: ps.len() })?
            }
        };
        if p > 0.0 && p < 1.0 {
            Ok(p)
        } else {
            Err(Error::PositivityViolation { p })
        }
    }

    /// Log-probability of unit `j`'s observed treatment under the design.
    pub fn log_unit_prob(&self, cluster: &ClusterData, j: usize) -> Result<f64> {
        let p = self.unit_probability(cluster, j)?;
        Ok(if cluster.treatment[j] == 1 { p.ln() } else { (-p).ln_1p() })
    }
}

/// `ln f(A_i | X_i)`: log-probability of the observed treatment vector of a
/// cluster under the design.
pub fn log_design_prob(cluster: &ClusterData, design: &DesignPropensity) -> Result<f64> {
    let terms = (0..cluster.len())
        .map(|j| design.log_unit_prob(cluster, j))
        .collect::<Result<Vec<_>>>()?;
    Ok(compensated_sum(terms))
}

/// Column-name mapping for CSV input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnSchema {
    pub cluster: String,
    pub treatment: String,
    pub outcome: String,
    pub covariates: Vec<String>,
    /// Optional within-cluster unit identifier; used to reject duplicates.
    #[serde(default)]
    pub unit: Option<String>,
    /// Column holding per-unit design probabilities, if any.
    #[serde(default)]
    pub design_probability: Option<String>,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
}

fn default_delimiter() -> char {
    ','
}

impl ColumnSchema {
    pub fn new(
        cluster: &str,
        treatment: &str,
        outcome: &str,
        covariates: &[&str],
    ) -> Self {
        Self {
            cluster: cluster.into(),
            treatment: treatment.into(),
            outcome: outcome.into(),
            covariates: covariates.iter().map(|s| s.to_string()).collect(),
            unit: None,
            design_probability: None,
            delimiter: ',',
        }
    }

    /// The layout written by [`write_dataset`] for a dataset with these covariates.
    pub fn canonical(covariates: &[String]) -> Self {
        Self {
            cluster: "cluster".into(),
            treatment: "treatment".into(),
            outcome: "outcome".into(),
            covariates: covariates.to_vec(),
            unit: Some("unit".into()),
            design_probability: None,
            delimiter: ',',
        }
    }

    fn delimiter_byte(&self) -> Result<u8> {
        u8::try_from(self.delimiter)
            .ok()
            .filter(u8::is_ascii)
            .ok_or_else(|| Error::invalid(format!("delimiter {:?} is not ASCII", self.delimiter)))
    }
}

pub fn load_dataset(path: impl AsRef<Path>, schema: &ColumnSchema) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| Error::Io { path: path.into(), source })?;
    read_dataset(file, schema)
}

/// Parses a dataset from any reader. Lines starting with `#` are comments.
pub fn read_dataset<R: Read>(reader: R, schema: &ColumnSchema) -> Result<Dataset> {
    if schema.covariates.is_empty() {
        return Err(Error::invalid("at least one covariate column is required"));
    }
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter_byte()?)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Csv { row: 1, message: e.to_string() })?
        .clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let cluster_col = col(&schema.cluster)?;
    let treat_col = col(&schema.treatment)?;
    let outcome_col = col(&schema.outcome)?;
    let cov_cols = schema.covariates.iter().map(|c| col(c)).collect::<Result<Vec<_>>>()?;
    let unit_col = schema.unit.as_deref().map(col).transpose()?;
    let design_col = schema.design_probability.as_deref().map(col).transpose()?;

    struct Builder {
        covariates: Vec<f64>,
        treatment: Vec<u8>,
        outcome: Vec<f64>,
        design_p: Vec<f64>,
        units: HashSet<String>,
    }

    let k = cov_cols.len();
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Builder> = HashMap::new();

    for record in rdr.records() {
        let record = record.map_err(|e| Error::Csv {
            row: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let row = record.position().map_or(0, |p| p.line());
        let field = |idx: usize| record.get(idx).unwrap_or("");
        let number = |idx: usize, name: &str| -> Result<f64> {
            let v: f64 = field(idx)
                .parse()
                .map_err(|_| Error::NonNumeric { row, column: name.to_string() })?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::NonFinite { row, column: name.to_string() })
            }
        };

        let treatment = match field(treat_col) {
            "0" => 0u8,
            "1" => 1u8,
            other => match other.parse::<f64>() {
                Ok(0.0) => 0,
                Ok(1.0) => 1,
                Ok(_) => return Err(Error::NonBinaryTreatment { row }),
                Err(_) => {
                    return Err(Error::NonNumeric { row, column: schema.treatment.clone() })
                }
            },
        };
        let outcome = number(outcome_col, &schema.outcome)?;
        let mut covs = Vec::with_capacity(k);
        for (&c, name) in cov_cols.iter().zip(&schema.covariates) {
            covs.push(number(c, name)?);
        }
        let design_p = match (design_col, &schema.design_probability) {
            (Some(c), Some(name)) => Some(number(c, name)?),
            _ => None,
        };

        let id = field(cluster_col).to_string();
        let group = groups.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            Builder {
                covariates: Vec::new(),
                treatment: Vec::new(),
                outcome: Vec::new(),
                design_p: Vec::new(),
                units: HashSet::new(),
            }
        });
        if let Some(uc) = unit_col {
            let unit = field(uc).to_string();
            if !group.units.insert(unit.clone()) {
                return Err(Error::DuplicateUnit { cluster: id, unit });
            }
        }
        group.covariates.extend(covs);
        group.treatment.push(treatment);
        group.outcome.push(outcome);
        if let Some(p) = design_p {
            group.design_p.push(p);
        }
    }

    if order.is_empty() {
        return Err(Error::EmptyFile);
    }
    let clusters = order
        .into_iter()
        .map(|id| {
            let g = groups.remove(&id).expect("every ordered id has a group");
            let c = ClusterData::new(id, g.covariates, k, g.treatment, g.outcome)?;
            if design_col.is_some() {
                c.with_design_probabilities(g.design_p)
            } else {
                Ok(c)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(clusters, schema.covariates.clone())
}

/// Writes the canonical CSV layout (`cluster,unit,treatment,outcome,<covariates>`
/// plus `design_p` when present). Floats use the shortest representation
/// that round-trips exactly. `comments` are emitted first as `# ` lines.
pub fn write_dataset<W: Write>(writer: W, dataset: &Dataset, comments: &[String]) -> Result<()> {
    let io_err = |e: std::io::Error| Error::Io { path: "<writer>".into(), source: e };
    let mut writer = writer;
    for c in comments {
        writeln!(writer, "# {c}").map_err(io_err)?;
    }
    let has_design = dataset.clusters.iter().any(|c| c.design_p.is_some());
    let mut wtr = csv::Writer::from_writer(writer);
    let csv_err = |e: csv::Error| Error::Csv { row: 0, message: e.to_string() };
    let mut header = vec!["cluster".to_string(), "unit".into(), "treatment".into(), "outcome".into()];
    header.extend(dataset.covariate_names.iter().cloned());
    if has_design {
        header.push("design_p".into());
    }
    wtr.write_record(&header).map_err(csv_err)?;
    for c in &dataset.clusters {
        for j in 0..c.len() {
            let mut rec = vec![
                c.id.clone(),
                j.to_string(),
                c.treatment[j].to_string(),
                c.outcome[j].to_string(),
            ];
            rec.extend(c.row(j).iter().map(f64::to_string));
            if has_design {
                rec.push(c.design_p.as_ref().map_or(String::new(), |p| p[j].to_string()));
            }
            wtr.write_record(&rec).map_err(csv_err)?;
        }
    }
    wtr.flush().map_err(io_err)
}

pub fn save_dataset(path: impl AsRef<Path>, dataset: &Dataset, comments: &[String]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|source| Error::Io { path: path.into(), source })?;
    write_dataset(std::io::BufWriter::new(file), dataset, comments)
}

/// Thresholds for [`validate_assumptions`].
#[derive(Debug, Clone, Copy)]
pub struct ValidationOptions {
    /// Flag clusters whose weight exceeds this multiple of the mean cluster weight.
    pub max_relative_weight: f64,
    /// Flag hypothetical propensities within this distance of 0 or 1.
    pub propensity_tolerance: f64,
}

impl Default for ValidationOptions {
    fn default() -> Self {
        Self { max_relative_weight: 50.0, propensity_tolerance: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "flag", rename_all = "kebab-case")]
pub enum ValidationFlag {
    DesignPositivity { cluster: String, unit: usize, p: f64 },
    ExtremeWeight { policy: usize, cluster: String, relative_weight: f64 },
    NearDegeneratePropensity { policy: usize, cluster: String, unit: usize, p: f64 },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub flags: Vec<ValidationFlag>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.flags.is_empty()
    }
}

/// Report-only positivity diagnostics for a set of policies.
///
/// Under a Bernoulli design with every `p` in `(0, 1)` positivity holds by
/// construction, so what is reported are near-violations: clusters carrying
/// a disproportionate share of the weight, and hypothetical propensities that
/// are numerically 0 or 1.
pub fn validate_assumptions(
    dataset: &Dataset,
    design: &DesignPropensity,
    policies: &[AllocationPolicy],
    options: &ValidationOptions,
) -> ValidationReport {
    let mut report = ValidationReport::default();
    let mut design_ok = true;
    for c in dataset.clusters() {
        for j in 0..c.len() {
            if let Err(e) = design.unit_probability(c, j) {
                design_ok = false;
                let p = match e {
                    Error::PositivityViolation { p } => p,
                    _ => f64::NAN,
                };
                report.flags.push(ValidationFlag::DesignPositivity { cluster: c.id.clone(), unit: j, p });
            }
        }
    }
    if !design_ok {
        return report;
    }

    for (pi, policy) in policies.iter().enumerate() {
        let solved = SolvedPolicy::solve(dataset, policy);
        let tol = options.propensity_tolerance;
        for (c, sc) in dataset.clusters().iter().zip(solved.clusters()) {
            for (j, &p) in sc.propensities().iter().enumerate() {
                if p < tol || p > 1.0 - tol {
                    report.flags.push(ValidationFlag::NearDegeneratePropensity {
                        policy: pi,
                        cluster: c.id.clone(),
                        unit: j,
                        p,
                    });
                }
            }
        }
        let log_w: Vec<f64> = dataset
            .clusters()
            .iter()
            .zip(solved.clusters())
            .map(|(c, sc)| {
                sc.log_prob(&c.treatment).expect("lengths match")
                    - log_design_prob(c, design).expect("design checked above")
            })
            .collect();
        // relative weights are computed against the largest log weight to avoid overflow
        let max = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let rel: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
        let mean = compensated_sum(rel.iter().copied()) / rel.len() as f64;
        for (c, r) in dataset.clusters().iter().zip(&rel) {
            let relative_weight = r / mean;
            if relative_weight > options.max_relative_weight {
                report.flags.push(ValidationFlag::ExtremeWeight {
                    policy: pi,
                    cluster: c.id.clone(),
                    relative_weight,
                });
            }
        }
    }
    report
}
