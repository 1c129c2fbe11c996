//! Tabular schema: the ordered feature contract shared by datasets,
//! the model, and the explainers.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::DataError;

/// One feature column: either categorical with a fixed category list,
/// or numeric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: FeatureKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FeatureKind {
    Categorical { categories: Vec<String> },
    Numeric,
}

impl FeatureSpec {
    pub fn categorical(name: &str, categories: &[&str]) -> Self {
        FeatureSpec {
            name: name.to_string(),
            kind: FeatureKind::Categorical {
                categories: categories.iter().map(|c| c.to_string()).collect(),
            },
        }
    }

    pub fn numeric(name: &str) -> Self {
        FeatureSpec {
            name: name.to_string(),
            kind: FeatureKind::Numeric,
        }
    }

    pub fn is_categorical(&self) -> bool {
        matches!(self.kind, FeatureKind::Categorical { .. })
    }

    pub fn categories(&self) -> Option<&[String]> {
        match &self.kind {
            FeatureKind::Categorical { categories } => Some(categories),
            FeatureKind::Numeric => None,
        }
    }

    /// Width of this feature in the encoded matrix.
    pub fn encoded_width(&self) -> usize {
        match &self.kind {
            FeatureKind::Categorical { categories } => categories.len(),
            FeatureKind::Numeric => 1,
        }
    }
}

/// Ordered feature descriptors plus the label and circle-id columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularSchema {
    pub features: Vec<FeatureSpec>,
    pub label_column: Option<String>,
    pub circle_column: Option<String>,
}

/// Per-feature slice of the encoded matrix.
#[derive(Debug, Clone, Copy)]
pub struct FeatureSpan {
    pub feature: usize,
    pub start: usize,
    pub width: usize,
}

impl TabularSchema {
    pub fn new(
        features: Vec<FeatureSpec>,
        label_column: Option<String>,
        circle_column: Option<String>,
    ) -> Result<Self, DataError> {
        let schema = TabularSchema {
            features,
            label_column,
            circle_column,
        };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.features.len() < 2 {
            return Err(DataError::InvalidSchema {
                reason: format!("need at least 2 features, got {}", self.features.len()),
            });
        }
        let mut names: Vec<&str> = self.features.iter().map(|f| f.name.as_str()).collect();
        if let Some(l) = &self.label_column {
            names.push(l);
        }
        if let Some(c) = &self.circle_column {
            names.push(c);
        }
        let mut sorted = names.clone();
        sorted.sort_unstable();
        if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
            return Err(DataError::InvalidSchema {
                reason: format!("duplicate column name '{}'", w[0]),
            });
        }
        for f in &self.features {
            if let Some(cats) = f.categories() {
                if cats.is_empty() {
                    return Err(DataError::InvalidSchema {
                        reason: format!("feature '{}' has an empty category list", f.name),
                    });
                }
                let mut s = cats.to_vec();
                s.sort_unstable();
                if s.windows(2).any(|w| w[0] == w[1]) {
                    return Err(DataError::InvalidSchema {
                        reason: format!("feature '{}' has duplicate categories", f.name),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn feature_count(&self) -> usize {
        self.features.len()
    }

    /// Total width of the one-hot + numeric encoding.
    pub fn encoded_width(&self) -> usize {
        self.features.iter().map(FeatureSpec::encoded_width).sum()
    }

    /// Column spans of each feature in the encoded matrix, in feature order.
    pub fn spans(&self) -> Vec<FeatureSpan> {
        let mut spans = Vec::with_capacity(self.features.len());
        let mut start = 0;
        for (i, f) in self.features.iter().enumerate() {
            let width = f.encoded_width();
            spans.push(FeatureSpan {
                feature: i,
                start,
                width,
            });
            start += width;
        }
        spans
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.name == name)
    }

    pub fn feature_names(&self) -> Vec<String> {
        self.features.iter().map(|f| f.name.clone()).collect()
    }

    pub fn categorical_indices(&self) -> Vec<usize> {
        self.features
            .iter()
            .enumerate()
            .filter(|(_, f)| f.is_categorical())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn numeric_indices(&self) -> Vec<usize> {
        self.features
            .iter()
            .enumerate()
            .filter(|(_, f)| !f.is_categorical())
            .map(|(i, _)| i)
            .collect()
    }

    /// Canonical JSON form: compact, fields in declaration order.
    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string(self).expect("schema serialization cannot fail")
    }

    /// SHA-256 hex digest of the canonical JSON. Identifies the schema in
    /// checkpoints and output artifacts.
    pub fn digest(&self) -> String {
        let hash = Sha256::digest(self.to_canonical_json().as_bytes());
        hash.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn from_json(json: &str) -> Result<Self, DataError> {
        let schema: TabularSchema =
            serde_json::from_str(json).map_err(|e| DataError::InvalidSchema {
                reason: format!("bad schema JSON: {e}"),
            })?;
        schema.validate()?;
        Ok(schema)
    }
}

/// The 21-feature credit layout used as the out-of-the-box demo schema.
/// Category lists are illustrative; real deployments supply their own
/// schema file.
pub fn demo_schema() -> TabularSchema {
    let features = vec![
        FeatureSpec::categorical("business_scale", &["micro", "small", "medium", "large"]),
        FeatureSpec::categorical(
            "business_nature",
            &["private", "state_owned", "foreign", "joint_venture"],
        ),
        FeatureSpec::categorical(
            "company_type",
            &["llc", "corporation", "partnership", "sole_proprietor"],
        ),
        FeatureSpec::categorical("status", &["active", "dormant", "restructuring"]),
        FeatureSpec::categorical("technological_enterprise", &["yes", "no"]),
        FeatureSpec::categorical("government_platform_finance", &["yes", "no"]),
        FeatureSpec::categorical("prohibited_industry", &["yes", "no"]),
        FeatureSpec::categorical("listed_company", &["yes", "no"]),
        FeatureSpec::categorical("small_and_micro_enterprises", &["yes", "no"]),
        FeatureSpec::categorical("platform_type", &["core", "supplier", "buyer", "logistics"]),
        FeatureSpec::numeric("years_relationship_with_bank"),
        FeatureSpec::categorical("bank_early_warning", &["none", "watch", "alert"]),
        FeatureSpec::categorical(
            "guarantee_type",
            &["credit", "mortgage", "pledge", "guarantee"],
        ),
        FeatureSpec::categorical("revolving_credit_facility", &["yes", "no"]),
        FeatureSpec::categorical("repayment_method", &["bullet", "installment", "revolving"]),
        FeatureSpec::categorical(
            "rate_adjustment_frequency",
            &["fixed", "monthly", "quarterly", "yearly"],
        ),
        FeatureSpec::categorical("credit_rating", &["aaa", "aa", "a", "bbb", "bb", "b"]),
        FeatureSpec::numeric("deposit_balance"),
        FeatureSpec::numeric("average_daily_deposit_balance"),
        FeatureSpec::numeric("credit_balance"),
        FeatureSpec::numeric("average_daily_credit_balance"),
    ];
    TabularSchema::new(
        features,
        Some("label".to_string()),
        Some("circle_id".to_string()),
    )
    .expect("demo schema is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn demo_schema_has_21_features() {
        let s = demo_schema();
        assert_eq!(s.feature_count(), 21);
        assert_eq!(s.categorical_indices().len(), 16);
        assert_eq!(s.numeric_indices().len(), 5);
    }

    #[test]
    fn encoded_width_sums_categories_and_numerics() {
        let s = TabularSchema::new(
            vec![
                FeatureSpec::categorical("a", &["x", "y", "z"]),
                FeatureSpec::numeric("b"),
                FeatureSpec::categorical("c", &["p", "q"]),
            ],
            None,
            None,
        )
        .unwrap();
        assert_eq!(s.encoded_width(), 6);
        let spans = s.spans();
        assert_eq!(spans[1].start, 3);
        assert_eq!(spans[2].start, 4);
    }

    #[test]
    fn duplicate_names_rejected() {
        let r = TabularSchema::new(
            vec![FeatureSpec::numeric("a"), FeatureSpec::numeric("a")],
            None,
            None,
        );
        assert!(r.is_err());
    }

    #[test]
    fn json_round_trip_preserves_digest() {
        let s = demo_schema();
        let json = s.to_canonical_json();
        let back = TabularSchema::from_json(&json).unwrap();
        assert_eq!(s.digest(), back.digest());
        assert_eq!(s, back);
    }

    #[test]
    fn schema_json_shape_matches_contract() {
        let s = TabularSchema::new(
            vec![
                FeatureSpec::categorical("a", &["x", "y"]),
                FeatureSpec::numeric("b"),
            ],
            Some("label".into()),
            None,
        )
        .unwrap();
        let v: serde_json::Value = serde_json::from_str(&s.to_canonical_json()).unwrap();
        assert_eq!(v["features"][0]["kind"], "categorical");
        assert_eq!(v["features"][0]["categories"][1], "y");
        assert_eq!(v["features"][1]["kind"], "numeric");
        assert_eq!(v["label_column"], "label");
        assert!(v["circle_column"].is_null());
    }
}
