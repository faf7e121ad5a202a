//! JSON schema for system description files and result bundles.
//!
//! A system document carries `{dims, f, B, G, Gamma, M, h, E, K}` with
//! matrices as row-major nested arrays and coefficient fields as
//! `{"kind": ..., "params": ...}`. Extension-interface (custom) fields are
//! deliberately not serializable.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::coeff::CoefficientField;
use crate::error::{Error, Result};
use crate::gramian::{GramianPair, LipschitzData, Provenance};
use crate::lyapunov::CertifyReport;
use crate::system::StochasticSystem;

pub fn mat_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

pub fn rows_to_mat(rows: &[Vec<f64>], context: &str) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map(|r| r.len()).unwrap_or(0);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Serialization(format!(
            "{context}: ragged matrix rows"
        )));
    }
    let mut m = DMatrix::zeros(nrows, ncols);
    for (i, row) in rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::Serialization(format!(
                    "{context}: non-finite entry at ({i}, {j})"
                )));
            }
            m[(i, j)] = v;
        }
    }
    Ok(m)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Dims {
    pub n: usize,
    pub m: usize,
    pub p: usize,
    pub q: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FieldSchema {
    pub kind: String,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub params: serde_json::Value,
}

impl FieldSchema {
    pub fn from_field(field: &CoefficientField) -> Result<Self> {
        let schema = match field {
            CoefficientField::Affine { a } => FieldSchema {
                kind: "affine".into(),
                params: serde_json::json!({ "a": mat_to_rows(a) }),
            },
            CoefficientField::CubicDrift { a } => FieldSchema {
                kind: "cubic-drift".into(),
                params: serde_json::json!({ "a": mat_to_rows(a) }),
            },
            CoefficientField::Sine { .. } => FieldSchema {
                kind: "sine".into(),
                params: serde_json::Value::Null,
            },
            CoefficientField::Square { .. } => FieldSchema {
                kind: "square".into(),
                params: serde_json::Value::Null,
            },
            CoefficientField::Zero { .. } => FieldSchema {
                kind: "zero".into(),
                params: serde_json::Value::Null,
            },
            CoefficientField::Sum { members } => {
                let members: Result<Vec<FieldSchema>> =
                    members.iter().map(FieldSchema::from_field).collect();
                FieldSchema {
                    kind: "sum".into(),
                    params: serde_json::json!({ "members": members? }),
                }
            }
            CoefficientField::Composed { left, inner, right } => FieldSchema {
                kind: "composed".into(),
                params: serde_json::json!({
                    "left": mat_to_rows(left),
                    "inner": FieldSchema::from_field(inner)?,
                    "right": mat_to_rows(right),
                }),
            },
            CoefficientField::Custom { name, .. } => {
                return Err(Error::Serialization(format!(
                    "custom field `{name}` is not serializable"
                )))
            }
        };
        Ok(schema)
    }

    /// Reconstruct a field with the expected dimensions.
    pub fn to_field(&self, in_dim: usize, out_dim: usize) -> Result<CoefficientField> {
        let matrix_param = |name: &str| -> Result<DMatrix<f64>> {
            let rows: Vec<Vec<f64>> = serde_json::from_value(
                self.params
                    .get(name)
                    .cloned()
                    .ok_or_else(|| Error::Serialization(format!("missing param `{name}`")))?,
            )
            .map_err(|e| Error::Serialization(e.to_string()))?;
            rows_to_mat(&rows, name)
        };
        let check = |field: CoefficientField| -> Result<CoefficientField> {
            if field.dims() != (in_dim, out_dim) {
                return Err(Error::Serialization(format!(
                    "field `{}` has dims {:?}, expected ({in_dim}, {out_dim})",
                    self.kind,
                    field.dims()
                )));
            }
            Ok(field)
        };
        match self.kind.as_str() {
            "affine" | "linear" => check(CoefficientField::affine(matrix_param("a")?)),
            "cubic-drift" => check(CoefficientField::cubic_drift(matrix_param("a")?)),
            "sine" => {
                if in_dim != out_dim {
                    return Err(Error::Serialization("sine requires square dims".into()));
                }
                Ok(CoefficientField::sine(in_dim))
            }
            "square" => {
                if in_dim != out_dim {
                    return Err(Error::Serialization("square requires square dims".into()));
                }
                Ok(CoefficientField::square(in_dim))
            }
            "zero" => Ok(CoefficientField::zero(in_dim, out_dim)),
            "sum" => {
                let members: Vec<FieldSchema> = serde_json::from_value(
                    self.params
                        .get("members")
                        .cloned()
                        .ok_or_else(|| Error::Serialization("missing `members`".into()))?,
                )
                .map_err(|e| Error::Serialization(e.to_string()))?;
                let fields: Result<Vec<CoefficientField>> = members
                    .iter()
                    .map(|m| m.to_field(in_dim, out_dim))
                    .collect();
                CoefficientField::sum(fields?)
            }
            "composed" => {
                let left = matrix_param("left")?;
                let right = matrix_param("right")?;
                let inner_schema: FieldSchema = serde_json::from_value(
                    self.params
                        .get("inner")
                        .cloned()
                        .ok_or_else(|| Error::Serialization("missing `inner`".into()))?,
                )
                .map_err(|e| Error::Serialization(e.to_string()))?;
                if left.nrows() != out_dim || right.ncols() != in_dim {
                    return Err(Error::Serialization(
                        "composed field dims inconsistent".into(),
                    ));
                }
                let inner = inner_schema.to_field(right.nrows(), left.ncols())?;
                Ok(inner.compose(&left, &right))
            }
            other => Err(Error::Serialization(format!("unknown field kind `{other}`"))),
        }
    }
}

/// On-disk system description.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SystemSchema {
    pub dims: Dims,
    pub f: FieldSchema,
    #[serde(rename = "B")]
    pub b: Vec<Vec<f64>>,
    #[serde(rename = "G")]
    pub g: Vec<FieldSchema>,
    #[serde(rename = "Gamma")]
    pub gamma: Vec<FieldSchema>,
    #[serde(rename = "M")]
    pub m_mats: Vec<Vec<Vec<f64>>>,
    pub h: FieldSchema,
    #[serde(rename = "E")]
    pub e: Vec<Vec<f64>>,
    #[serde(rename = "K")]
    pub k: Vec<Vec<f64>>,
}

impl SystemSchema {
    pub fn from_system(sys: &StochasticSystem) -> Result<Self> {
        Ok(Self {
            dims: Dims {
                n: sys.n,
                m: sys.m,
                p: sys.p,
                q: sys.q,
            },
            f: FieldSchema::from_field(&sys.f)?,
            b: mat_to_rows(&sys.b),
            g: sys
                .g
                .iter()
                .map(FieldSchema::from_field)
                .collect::<Result<_>>()?,
            gamma: sys
                .gamma
                .iter()
                .map(FieldSchema::from_field)
                .collect::<Result<_>>()?,
            m_mats: sys.m_mats.iter().map(mat_to_rows).collect(),
            h: FieldSchema::from_field(&sys.h)?,
            e: mat_to_rows(&sys.e),
            k: mat_to_rows(&sys.k),
        })
    }

    pub fn to_system(&self) -> Result<StochasticSystem> {
        let Dims { n, m, p, q } = self.dims;
        let f = self.f.to_field(n, n)?;
        let h = self.h.to_field(n, p)?;
        let g: Result<Vec<CoefficientField>> =
            self.g.iter().map(|s| s.to_field(n, n)).collect();
        let gamma: Result<Vec<CoefficientField>> =
            self.gamma.iter().map(|s| s.to_field(n, n)).collect();
        let m_mats: Result<Vec<DMatrix<f64>>> = self
            .m_mats
            .iter()
            .map(|rows| rows_to_mat(rows, "M"))
            .collect();
        let b = rows_to_mat(&self.b, "B")?;
        let e = rows_to_mat(&self.e, "E")?;
        let k = rows_to_mat(&self.k, "K")?;
        if b.ncols() != m || k.nrows() != q {
            return Err(Error::Serialization(
                "dims block disagrees with matrix shapes".into(),
            ));
        }
        StochasticSystem::new(f, b, g?, gamma?, m_mats?, h, e, k)
    }
}

/// Serialized Gramian bundle.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GramiansJson {
    #[serde(rename = "P")]
    pub p: Vec<Vec<f64>>,
    #[serde(rename = "Q")]
    pub q: Vec<Vec<f64>>,
    pub provenance: Provenance,
    pub epsilons: EpsilonsJson,
    pub lipschitz_data: Option<LipschitzData>,
    pub certify_reports: CertifyPairJson,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpsilonsJson {
    pub eps_p: Option<f64>,
    pub eps_q: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CertifyPairJson {
    pub reach: CertifyReport,
    pub obs: CertifyReport,
}

impl GramiansJson {
    pub fn from_pair(gp: &GramianPair) -> Self {
        Self {
            p: mat_to_rows(&gp.p),
            q: mat_to_rows(&gp.q),
            provenance: gp.provenance,
            epsilons: EpsilonsJson {
                eps_p: gp.eps_p,
                eps_q: gp.eps_q,
            },
            lipschitz_data: gp.lipschitz.clone(),
            certify_reports: CertifyPairJson {
                reach: gp.reach_report.clone(),
                obs: gp.obs_report.clone(),
            },
        }
    }
}

/// Balanced realization bundle: the transformed system plus `{S, S_inv,
/// Sigma}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BalancedJson {
    pub system: SystemSchema,
    #[serde(rename = "S")]
    pub s: Vec<Vec<f64>>,
    #[serde(rename = "S_inv")]
    pub s_inv: Vec<Vec<f64>>,
    #[serde(rename = "Sigma")]
    pub sigma: Vec<f64>,
}

impl BalancedJson {
    pub fn from_balanced(bal: &crate::balancing::BalancedRealization) -> Result<Self> {
        Ok(Self {
            system: SystemSchema::from_system(&bal.system)?,
            s: mat_to_rows(&bal.s),
            s_inv: mat_to_rows(&bal.s_inv),
            sigma: bal.sigma.as_slice().to_vec(),
        })
    }
}

/// Reduced system bundle.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReducedJson {
    pub r: usize,
    pub system: SystemSchema,
    pub sigma1: Vec<f64>,
    pub sigma2: Vec<f64>,
}

impl ReducedJson {
    pub fn from_reduced(red: &crate::balancing::ReducedSystem) -> Result<Self> {
        Ok(Self {
            r: red.r,
            system: SystemSchema::from_system(&red.system)?,
            sigma1: red.sigma1.as_slice().to_vec(),
            sigma2: red.sigma2.as_slice().to_vec(),
        })
    }
}

pub fn vec_to_dvector(v: &[f64]) -> DVector<f64> {
    DVector::from_row_slice(v)
}
