use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};

/// Load a `label,f0,f1,...` CSV. Without an explicit `class_count` the
/// count is one more than the largest label (at least 2).
pub fn load_csv(path: &Path, class_count: Option<usize>) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.get(0) != Some("label") || headers.len() < 2 {
        return Err(Error::Parse(format!(
            "{}: header must be `label,f0,f1,...`",
            path.display()
        )));
    }
    let dim = headers.len() - 1;
    let mut labels = Vec::new();
    let mut features = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let parse_err = |what: &str| Error::Parse(format!("{}: row {}: bad {what}", path.display(), row + 1));
        labels.push(record[0].trim().parse::<usize>().map_err(|_| parse_err("label"))?);
        for field in record.iter().skip(1) {
            features.push(field.trim().parse::<f64>().map_err(|_| parse_err("feature"))?);
        }
    }
    let classes = class_count.unwrap_or_else(|| labels.iter().max().map_or(2, |&m| (m + 1).max(2)));
    Dataset::new(features, vec![dim], labels, classes, path.display().to_string())
}

pub fn write_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["label".to_string()];
    header.extend((0..dataset.feature_len()).map(|j| format!("f{j}")));
    w.write_record(&header)?;
    for i in 0..dataset.len() {
        let mut rec = vec![dataset.label(i).to_string()];
        rec.extend(dataset.example(i).iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
