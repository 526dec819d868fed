//! Observations and the matched-pairs sample, with CSV input and output.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One experimental unit: outcome, baseline covariates, treatment flag and
/// (optionally) the identifier of the pair it was matched into.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub y: f64,
    pub x: Vec<f64>,
    pub treated: bool,
    pub pair_id: Option<u64>,
}

impl Observation {
    pub fn new(y: f64, x: Vec<f64>, treated: bool) -> Self {
        Self {
            y,
            x,
            treated,
            pair_id: None,
        }
    }

    pub fn with_pair(mut self, pair_id: u64) -> Self {
        self.pair_id = Some(pair_id);
        self
    }
}

/// A validated matched-pairs sample of `2n` units.
///
/// `pairs` holds observation indices; the order of the list is the pair
/// order used by the gradient bootstrap and can be changed with
/// [`crate::design::reorder_pairs`].
#[derive(Debug, Clone, PartialEq)]
pub struct MatchedSample {
    observations: Vec<Observation>,
    pairs: Option<Vec<(usize, usize)>>,
}

impl MatchedSample {
    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn pairs(&self) -> Option<&[(usize, usize)]> {
        self.pairs.as_deref()
    }

    pub fn require_pairs(&self) -> Result<&[(usize, usize)]> {
        self.pairs()
            .ok_or_else(|| Error::MissingPairs("pair identities are not available".into()))
    }

    /// Number of pairs (half the number of units).
    pub fn n(&self) -> usize {
        self.observations.len() / 2
    }

    pub fn covariate_dim(&self) -> usize {
        self.observations[0].x.len()
    }

    pub fn treated_outcomes(&self) -> Vec<f64> {
        self.arm_outcomes(true)
    }

    pub fn control_outcomes(&self) -> Vec<f64> {
        self.arm_outcomes(false)
    }

    fn arm_outcomes(&self, treated: bool) -> Vec<f64> {
        self.observations
            .iter()
            .filter(|o| o.treated == treated)
            .map(|o| o.y)
            .collect()
    }

    /// Same units, new pair order. Every pair of `order` must already be a pair of `self`.
    pub(crate) fn with_pair_order(&self, pairs: Vec<(usize, usize)>) -> Self {
        Self {
            observations: self.observations.clone(),
            pairs: Some(pairs),
        }
    }

    /// Drops the pair structure, as when pair identities are unknown to the analyst.
    pub fn without_pairs(&self) -> Self {
        let observations = self
            .observations
            .iter()
            .cloned()
            .map(|mut o| {
                o.pair_id = None;
                o
            })
            .collect();
        Self {
            observations,
            pairs: None,
        }
    }
}

/// Checks the matched-pairs structure and builds the pair list from `pair_id`.
///
/// Pair identifiers must be present on every observation or on none; the list
/// of pairs is ordered by ascending identifier.
pub fn validate_sample(raw: Vec<Observation>, require_pairs: bool) -> Result<MatchedSample> {
    if raw.is_empty() {
        return Err(Error::EmptyInput);
    }
    let dim = raw[0].x.len();
    for (index, obs) in raw.iter().enumerate() {
        if !obs.y.is_finite() {
            return Err(Error::InvalidObservation {
                index,
                reason: format!("outcome {} is not finite", obs.y),
            });
        }
        if obs.x.is_empty() {
            return Err(Error::InvalidObservation {
                index,
                reason: "no covariates".into(),
            });
        }
        if obs.x.len() != dim {
            return Err(Error::InvalidObservation {
                index,
                reason: format!("{} covariates, expected {dim}", obs.x.len()),
            });
        }
        if obs.x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidObservation {
                index,
                reason: "covariate is not finite".into(),
            });
        }
    }

    let treated = raw.iter().filter(|o| o.treated).count();
    let control = raw.len() - treated;
    if treated != control {
        return Err(Error::UnbalancedTreatment { treated, control });
    }

    let with_id = raw.iter().filter(|o| o.pair_id.is_some()).count();
    let pairs = if with_id == 0 {
        if require_pairs {
            return Err(Error::MissingPairs("no pair identifiers in the data".into()));
        }
        None
    } else if with_id < raw.len() {
        return Err(Error::MissingPairs(format!(
            "{} of {} observations lack a pair identifier",
            raw.len() - with_id,
            raw.len()
        )));
    } else {
        let mut groups: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
        for (i, obs) in raw.iter().enumerate() {
            groups.entry(obs.pair_id.unwrap()).or_default().push(i);
        }
        let mut pairs = Vec::with_capacity(groups.len());
        for (pair_id, members) in groups {
            if members.len() != 2 {
                return Err(Error::BadPair {
                    pair_id,
                    reason: format!("{} members, expected 2", members.len()),
                });
            }
            if raw[members[0]].treated == raw[members[1]].treated {
                return Err(Error::BadPair {
                    pair_id,
                    reason: "pair must hold exactly one treated unit".into(),
                });
            }
            pairs.push((members[0], members[1]));
        }
        Some(pairs)
    };

    Ok(MatchedSample {
        observations: raw,
        pairs,
    })
}

/// Unit indices by role, following the pair order of the sample.
///
/// `treated[j]` / `control[j]` are the units of pair `j`. Block `k` covers
/// pairs `2k` and `2k+1` (zero-based) and lists, in order, the first treated,
/// first control, second treated and second control unit. With an odd pair
/// count the last pair belongs to no block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoleIndex {
    pub treated: Vec<usize>,
    pub control: Vec<usize>,
    pub blocks: Vec<[usize; 4]>,
}

pub fn pair_roles(sample: &MatchedSample) -> Result<RoleIndex> {
    let pairs = sample.require_pairs()?;
    let obs = sample.observations();
    let (treated, control): (Vec<usize>, Vec<usize>) = pairs
        .iter()
        .map(|&(u, v)| if obs[u].treated { (u, v) } else { (v, u) })
        .unzip();
    let blocks = (0..pairs.len() / 2)
        .map(|k| {
            [
                treated[2 * k],
                control[2 * k],
                treated[2 * k + 1],
                control[2 * k + 1],
            ]
        })
        .collect();
    Ok(RoleIndex {
        treated,
        control,
        blocks,
    })
}

/// Names of the CSV columns that make up an observation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnMap {
    pub outcome: String,
    pub treatment: String,
    pub covariates: Vec<String>,
    pub pair: Option<String>,
}

pub fn load_csv(path: impl AsRef<Path>, schema: &ColumnMap) -> Result<MatchedSample> {
    let file = std::fs::File::open(path)?;
    read_csv(file, schema)
}

/// Parses observations from CSV and validates them. Row numbers in errors
/// count data rows from 1 (the header is not counted).
pub fn read_csv<R: Read>(reader: R, schema: &ColumnMap) -> Result<MatchedSample> {
    if schema.covariates.is_empty() {
        return Err(Error::Config("at least one covariate column is required".into()));
    }
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Config(format!("column `{name}` not found in header")))
    };
    let y_col = find(&schema.outcome)?;
    let a_col = find(&schema.treatment)?;
    let x_cols = schema
        .covariates
        .iter()
        .map(|c| find(c))
        .collect::<Result<Vec<_>>>()?;
    let pair_col = schema.pair.as_deref().map(find).transpose()?;

    let mut raw = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let row = i + 1;
        let cell = |col: usize| -> Result<&str> {
            match record.get(col) {
                Some(s) if !s.is_empty() => Ok(s),
                _ => Err(Error::Parse {
                    row,
                    column: headers[col].to_string(),
                    message: "missing value".into(),
                }),
            }
        };
        let real = |col: usize| -> Result<f64> {
            let s = cell(col)?;
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Parse {
                    row,
                    column: headers[col].to_string(),
                    message: format!("`{s}` is not a finite number"),
                })
        };
        let y = real(y_col)?;
        let treated = match cell(a_col)? {
            "1" => true,
            "0" => false,
            other => {
                return Err(Error::Parse {
                    row,
                    column: headers[a_col].to_string(),
                    message: format!("treatment `{other}` is not 0 or 1"),
                })
            }
        };
        let x = x_cols.iter().map(|&c| real(c)).collect::<Result<Vec<_>>>()?;
        let pair_id = match pair_col {
            Some(c) => {
                let s = cell(c)?;
                Some(s.parse::<u64>().map_err(|_| Error::Parse {
                    row,
                    column: headers[c].to_string(),
                    message: format!("pair id `{s}` is not a nonnegative integer"),
                })?)
            }
            None => None,
        };
        raw.push(Observation {
            y,
            x,
            treated,
            pair_id,
        });
    }
    validate_sample(raw, false)
}

/// Writes the sample with the column names of `schema`. Pair ids are written
/// only when the schema names a pair column and the observations carry them.
pub fn write_csv<W: Write>(writer: W, sample: &MatchedSample, schema: &ColumnMap) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec![schema.outcome.clone(), schema.treatment.clone()];
    header.extend(schema.covariates.iter().cloned());
    if let Some(p) = &schema.pair {
        header.push(p.clone());
    }
    wtr.write_record(&header)?;
    for obs in sample.observations() {
        let mut rec = vec![
            format_real(obs.y),
            if obs.treated { "1" } else { "0" }.to_string(),
        ];
        rec.extend(obs.x.iter().map(|&v| format_real(v)));
        if schema.pair.is_some() {
            rec.push(obs.pair_id.map(|p| p.to_string()).unwrap_or_default());
        }
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Shortest representation that parses back to the same `f64`.
pub fn format_real(v: f64) -> String {
    format!("{v:?}")
}
