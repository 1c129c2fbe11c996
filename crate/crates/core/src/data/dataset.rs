//! Dataset container: raw rows, CSV ingestion, one-hot/standardized
//! encoding, and the stratified source split.

use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::numcore::Matrix;

use super::schema::{FeatureKind, TabularSchema};
use super::DataError;

/// One cell of a raw row: a category index into the schema's list, or a
/// numeric value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Cell {
    Category(u32),
    Number(f64),
}

pub type Row = Vec<Cell>;

/// Standardization statistics for one numeric feature.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NumericStats {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone)]
struct EncodedData {
    matrix: Matrix,
    /// Stats actually used, one per numeric feature in feature order.
    stats: Vec<NumericStats>,
}

/// Feature matrix plus optional labels and circle ids for one domain.
///
/// Labels, when present, are carried through splits and subsets but the
/// training loop only ever consumes them from the labeled source stream;
/// synthetic batches are constructed without them.
#[derive(Debug, Clone)]
pub struct DomainDataset {
    schema: Arc<TabularSchema>,
    rows: Vec<Row>,
    circle_ids: Vec<String>,
    labels: Option<Vec<u8>>,
    label_column_missing: bool,
    encoded: Option<EncodedData>,
}

impl DomainDataset {
    pub fn from_rows(
        schema: Arc<TabularSchema>,
        rows: Vec<Row>,
        labels: Option<Vec<u8>>,
        circle_ids: Vec<String>,
    ) -> Result<Self, DataError> {
        if let Some(l) = &labels {
            if l.len() != rows.len() {
                return Err(DataError::LengthMismatch {
                    what: "labels",
                    expected: rows.len(),
                    got: l.len(),
                });
            }
            if let Some(&bad) = l.iter().find(|&&v| v > 1) {
                return Err(DataError::InvalidLabel {
                    value: bad.to_string(),
                });
            }
        }
        if !circle_ids.is_empty() && circle_ids.len() != rows.len() {
            return Err(DataError::LengthMismatch {
                what: "circle ids",
                expected: rows.len(),
                got: circle_ids.len(),
            });
        }
        for (r, row) in rows.iter().enumerate() {
            validate_row(&schema, r, row)?;
        }
        Ok(DomainDataset {
            schema,
            rows,
            circle_ids,
            labels,
            label_column_missing: false,
            encoded: None,
        })
    }

    /// Parses a CSV file against the schema. Feature columns are required;
    /// missing label/circle columns are tolerated (the corresponding data
    /// is absent and, for labels, a warning flag is set).
    pub fn load_csv(path: impl AsRef<Path>, schema: Arc<TabularSchema>) -> Result<Self, DataError> {
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .flexible(false)
            .from_path(path.as_ref())
            .map_err(|e| DataError::Io {
                path: path.as_ref().display().to_string(),
                reason: e.to_string(),
            })?;

        let headers = reader
            .headers()
            .map_err(|e| DataError::Io {
                path: path.as_ref().display().to_string(),
                reason: e.to_string(),
            })?
            .clone();
        let col_of = |name: &str| headers.iter().position(|h| h == name);

        let mut feature_cols = Vec::with_capacity(schema.features.len());
        for f in &schema.features {
            let idx = col_of(&f.name).ok_or_else(|| DataError::MissingColumn {
                column: f.name.clone(),
            })?;
            feature_cols.push(idx);
        }
        let label_col = schema.label_column.as_deref().and_then(col_of);
        let circle_col = schema.circle_column.as_deref().and_then(col_of);
        let label_column_missing = schema.label_column.is_some() && label_col.is_none();

        let mut rows = Vec::new();
        let mut labels: Vec<u8> = Vec::new();
        let mut circle_ids: Vec<String> = Vec::new();
        for (line, record) in reader.records().enumerate() {
            let record = record.map_err(|e| DataError::Io {
                path: path.as_ref().display().to_string(),
                reason: e.to_string(),
            })?;
            let mut row = Vec::with_capacity(schema.features.len());
            for (f, &col) in schema.features.iter().zip(&feature_cols) {
                let raw = record.get(col).unwrap_or("");
                let cell = match &f.kind {
                    FeatureKind::Categorical { categories } => {
                        let idx = categories.iter().position(|c| c == raw).ok_or_else(|| {
                            DataError::UnknownCategory {
                                row: line,
                                column: f.name.clone(),
                                value: raw.to_string(),
                            }
                        })?;
                        Cell::Category(idx as u32)
                    }
                    FeatureKind::Numeric => {
                        let v: f64 = raw.trim().parse().map_err(|_| DataError::BadNumeric {
                            row: line,
                            column: f.name.clone(),
                            value: raw.to_string(),
                        })?;
                        if !v.is_finite() {
                            return Err(DataError::BadNumeric {
                                row: line,
                                column: f.name.clone(),
                                value: raw.to_string(),
                            });
                        }
                        Cell::Number(v)
                    }
                };
                row.push(cell);
            }
            if let Some(col) = label_col {
                let raw = record.get(col).unwrap_or("");
                match raw {
                    "0" => labels.push(0),
                    "1" => labels.push(1),
                    other => {
                        return Err(DataError::InvalidLabel {
                            value: other.to_string(),
                        })
                    }
                }
            }
            if let Some(col) = circle_col {
                circle_ids.push(record.get(col).unwrap_or("").to_string());
            }
            rows.push(row);
        }

        let labels = if label_col.is_some() { Some(labels) } else { None };
        let mut ds = DomainDataset::from_rows(schema, rows, labels, circle_ids)?;
        ds.label_column_missing = label_column_missing;
        Ok(ds)
    }

    /// Writes rows as CSV. An optional `# {json}` provenance comment goes
    /// first; readers built on [`DomainDataset::load_csv`] skip it.
    pub fn write_csv(
        &self,
        path: impl AsRef<Path>,
        provenance_comment: Option<&str>,
        include_labels: bool,
    ) -> Result<(), DataError> {
        let io_err = |e: String| DataError::Io {
            path: path.as_ref().display().to_string(),
            reason: e,
        };
        let mut file = std::fs::File::create(path.as_ref()).map_err(|e| io_err(e.to_string()))?;
        if let Some(comment) = provenance_comment {
            writeln!(file, "# {comment}").map_err(|e| io_err(e.to_string()))?;
        }
        let mut w = csv::Writer::from_writer(file);

        let mut header: Vec<String> = self.schema.feature_names();
        let write_labels = include_labels && self.labels.is_some();
        if write_labels {
            header.push(self.schema.label_column.clone().unwrap_or("label".into()));
        }
        let write_circles = !self.circle_ids.is_empty();
        if write_circles {
            header.push(
                self.schema
                    .circle_column
                    .clone()
                    .unwrap_or("circle_id".into()),
            );
        }
        w.write_record(&header).map_err(|e| io_err(e.to_string()))?;

        for (i, row) in self.rows.iter().enumerate() {
            let mut record: Vec<String> = Vec::with_capacity(header.len());
            for (f, cell) in self.schema.features.iter().zip(row) {
                record.push(match (cell, &f.kind) {
                    (Cell::Category(idx), FeatureKind::Categorical { categories }) => {
                        categories[*idx as usize].clone()
                    }
                    (Cell::Number(v), _) => format!("{v}"),
                    (Cell::Category(_), FeatureKind::Numeric) => unreachable!("validated row"),
                });
            }
            if write_labels {
                record.push(self.labels.as_ref().unwrap()[i].to_string());
            }
            if write_circles {
                record.push(self.circle_ids[i].clone());
            }
            w.write_record(&record).map_err(|e| io_err(e.to_string()))?;
        }
        w.flush().map_err(|e| io_err(e.to_string()))?;
        Ok(())
    }

    pub fn schema(&self) -> &Arc<TabularSchema> {
        &self.schema
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Row] {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &Row {
        &self.rows[i]
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    pub fn circle_ids(&self) -> &[String] {
        &self.circle_ids
    }

    /// True when the schema declares a label column the file did not carry.
    pub fn label_column_missing(&self) -> bool {
        self.label_column_missing
    }

    /// Standardization statistics computed from this dataset's raw rows
    /// (population variance), one entry per numeric feature.
    pub fn own_stats(&self) -> Vec<NumericStats> {
        let numeric = self.schema.numeric_indices();
        numeric
            .iter()
            .map(|&f| {
                let values: Vec<f64> = self
                    .rows
                    .iter()
                    .map(|row| match row[f] {
                        Cell::Number(v) => v,
                        Cell::Category(_) => unreachable!("validated row"),
                    })
                    .collect();
                let n = values.len().max(1) as f64;
                let mean = values.iter().sum::<f64>() / n;
                let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                NumericStats {
                    mean,
                    std: var.sqrt(),
                }
            })
            .collect()
    }

    /// Builds the encoded matrix: categorical features one-hot, numeric
    /// standardized to `(v − mean)/std`. With `stats_source`, that
    /// dataset's statistics are used (targets share the source input
    /// space); otherwise this dataset's own. A zero std maps to 0.
    pub fn encode(&mut self, stats_source: Option<&DomainDataset>) -> Result<(), DataError> {
        let stats = match stats_source {
            Some(src) => {
                if src.schema.as_ref() != self.schema.as_ref() {
                    return Err(DataError::SchemaMismatch);
                }
                src.stats_in_use()
            }
            None => self.own_stats(),
        };
        self.encode_with_stats(stats)
    }

    /// Stats backing this dataset's encoding: the ones already applied if
    /// encoded, else freshly computed.
    pub fn stats_in_use(&self) -> Vec<NumericStats> {
        match &self.encoded {
            Some(e) => e.stats.clone(),
            None => self.own_stats(),
        }
    }

    pub fn encode_with_stats(&mut self, stats: Vec<NumericStats>) -> Result<(), DataError> {
        let numeric = self.schema.numeric_indices();
        if stats.len() != numeric.len() {
            return Err(DataError::LengthMismatch {
                what: "numeric stats",
                expected: numeric.len(),
                got: stats.len(),
            });
        }
        let width = self.schema.encoded_width();
        let spans = self.schema.spans();
        let mut matrix = Matrix::zeros(self.rows.len(), width);
        for (r, row) in self.rows.iter().enumerate() {
            let out = matrix.row_mut(r);
            let mut stat_idx = 0;
            for (span, cell) in spans.iter().zip(row) {
                match cell {
                    Cell::Category(idx) => {
                        out[span.start + *idx as usize] = 1.0;
                    }
                    Cell::Number(v) => {
                        let s = &stats[stat_idx];
                        out[span.start] = if s.std > 0.0 { (v - s.mean) / s.std } else { 0.0 };
                    }
                }
                if !self.schema.features[span.feature].is_categorical() {
                    stat_idx += 1;
                }
            }
        }
        self.encoded = Some(EncodedData { matrix, stats });
        Ok(())
    }

    pub fn encoded_matrix(&self) -> Result<&Matrix, DataError> {
        self.encoded
            .as_ref()
            .map(|e| &e.matrix)
            .ok_or(DataError::NotEncoded)
    }

    pub fn is_encoded(&self) -> bool {
        self.encoded.is_some()
    }

    /// Recovers the raw row behind one encoded row, inverting one-hot
    /// lookup exactly and standardization via the stored stats.
    pub fn decode_encoded_row(&self, r: usize) -> Result<Row, DataError> {
        let enc = self.encoded.as_ref().ok_or(DataError::NotEncoded)?;
        let spans = self.schema.spans();
        let row = enc.matrix.row(r);
        let mut out = Vec::with_capacity(spans.len());
        let mut stat_idx = 0;
        for span in &spans {
            if self.schema.features[span.feature].is_categorical() {
                let slice = &row[span.start..span.start + span.width];
                let idx = slice
                    .iter()
                    .position(|&v| v == 1.0)
                    .expect("one-hot group has exactly one 1");
                out.push(Cell::Category(idx as u32));
            } else {
                let s = &enc.stats[stat_idx];
                out.push(Cell::Number(row[span.start] * s.std + s.mean));
                stat_idx += 1;
            }
        }
        Ok(out)
    }

    /// New dataset holding the given row indices (raw level; re-encode
    /// afterwards).
    pub fn subset(&self, indices: &[usize]) -> DomainDataset {
        DomainDataset {
            schema: Arc::clone(&self.schema),
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
            circle_ids: if self.circle_ids.is_empty() {
                Vec::new()
            } else {
                indices.iter().map(|&i| self.circle_ids[i].clone()).collect()
            },
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            label_column_missing: self.label_column_missing,
            encoded: None,
        }
    }

    /// Stratified train/validation split of a labeled dataset. Both
    /// partitions preserve the minority rate within ±1 sample per class;
    /// deterministic for a fixed seed.
    pub fn split_source(
        &self,
        train_fraction: f64,
        seed: u64,
    ) -> Result<(DomainDataset, DomainDataset), DataError> {
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(DataError::InvalidFraction {
                value: train_fraction,
            });
        }
        let labels = self.labels.as_ref().ok_or(DataError::MissingLabels)?;
        let mut pos: Vec<usize> = Vec::new();
        let mut neg: Vec<usize> = Vec::new();
        for (i, &l) in labels.iter().enumerate() {
            if l == 1 {
                pos.push(i)
            } else {
                neg.push(i)
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        pos.shuffle(&mut rng);
        neg.shuffle(&mut rng);

        let take = |n: usize| -> usize { (train_fraction * n as f64).round() as usize };
        let n_train_pos = take(pos.len());
        let n_train_neg = take(neg.len());
        if n_train_pos == 0 || n_train_pos == pos.len() {
            return Err(DataError::TooFewMinority {
                minority: pos.len(),
            });
        }

        let mut train_idx: Vec<usize> = pos[..n_train_pos]
            .iter()
            .chain(&neg[..n_train_neg])
            .copied()
            .collect();
        let mut val_idx: Vec<usize> = pos[n_train_pos..]
            .iter()
            .chain(&neg[n_train_neg..])
            .copied()
            .collect();
        train_idx.sort_unstable();
        val_idx.sort_unstable();
        Ok((self.subset(&train_idx), self.subset(&val_idx)))
    }

    /// Row indices per circle id, in first-appearance order.
    pub fn circles(&self) -> Vec<(String, Vec<usize>)> {
        let mut order: Vec<String> = Vec::new();
        let mut map: std::collections::HashMap<&str, Vec<usize>> = std::collections::HashMap::new();
        for (i, id) in self.circle_ids.iter().enumerate() {
            if !map.contains_key(id.as_str()) {
                order.push(id.clone());
            }
            map.entry(id.as_str()).or_default().push(i);
        }
        order
            .into_iter()
            .map(|id| {
                let rows = map.remove(id.as_str()).unwrap();
                (id, rows)
            })
            .collect()
    }

    /// Raw numeric values of one feature column.
    pub fn numeric_column(&self, feature: usize) -> Vec<f64> {
        self.rows
            .iter()
            .map(|row| match row[feature] {
                Cell::Number(v) => v,
                Cell::Category(_) => unreachable!("validated row"),
            })
            .collect()
    }

    /// SHA-256 hex digest of schema and contents; identifies the dataset
    /// in provenance records.
    pub fn content_digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(self.schema.to_canonical_json().as_bytes());
        for row in &self.rows {
            for cell in row {
                match cell {
                    Cell::Category(idx) => {
                        h.update([0u8]);
                        h.update(idx.to_le_bytes());
                    }
                    Cell::Number(v) => {
                        h.update([1u8]);
                        h.update(v.to_le_bytes());
                    }
                }
            }
        }
        if let Some(labels) = &self.labels {
            h.update(labels);
        }
        for id in &self.circle_ids {
            h.update(id.as_bytes());
            h.update([0xffu8]);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Category counts of one categorical feature over the schema's list.
    pub fn category_counts(&self, feature: usize) -> Vec<usize> {
        let n_cats = self.schema.features[feature]
            .categories()
            .map(|c| c.len())
            .unwrap_or(0);
        let mut counts = vec![0usize; n_cats];
        for row in &self.rows {
            if let Cell::Category(idx) = row[feature] {
                counts[idx as usize] += 1;
            }
        }
        counts
    }
}

fn validate_row(schema: &TabularSchema, r: usize, row: &Row) -> Result<(), DataError> {
    if row.len() != schema.features.len() {
        return Err(DataError::LengthMismatch {
            what: "row cells",
            expected: schema.features.len(),
            got: row.len(),
        });
    }
    for (f, cell) in schema.features.iter().zip(row) {
        match (&f.kind, cell) {
            (FeatureKind::Categorical { categories }, Cell::Category(idx)) => {
                if *idx as usize >= categories.len() {
                    return Err(DataError::UnknownCategory {
                        row: r,
                        column: f.name.clone(),
                        value: format!("#{idx}"),
                    });
                }
            }
            (FeatureKind::Numeric, Cell::Number(v)) => {
                if !v.is_finite() {
                    return Err(DataError::BadNumeric {
                        row: r,
                        column: f.name.clone(),
                        value: v.to_string(),
                    });
                }
            }
            _ => {
                return Err(DataError::CellKindMismatch {
                    row: r,
                    column: f.name.clone(),
                })
            }
        }
    }
    Ok(())
}

/// Reads the `# {json}` provenance comment from the head of a CSV file,
/// if present.
pub fn read_csv_provenance(path: impl AsRef<Path>) -> Option<serde_json::Value> {
    let file = std::fs::File::open(path).ok()?;
    let mut line = String::new();
    std::io::BufReader::new(file).read_line(&mut line).ok()?;
    let rest = line.strip_prefix("# ")?;
    serde_json::from_str(rest.trim()).ok()
}
