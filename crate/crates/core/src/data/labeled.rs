//! A folder of images plus a `labels.csv` with a `filename,label` header.
//! Label `0` is normal and `1` anomalous.

use std::collections::HashSet;

use rayon::prelude::*;

use super::{list_images, load_image, shuffle, Dataset, DatasetSpec, Sample};
use crate::error::{Error, Result};

pub const LABEL_FILE: &str = "labels.csv";

struct LabelRow {
    filename: String,
    anomalous: bool,
}

fn read_labels(path: &std::path::Path) -> Result<Vec<LabelRow>> {
    if !path.is_file() {
        return Err(Error::MissingPath(path.to_path_buf()));
    }
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.len() != 2 || &headers[0] != "filename" || &headers[1] != "label" {
        return Err(Error::Labels(format!(
            "expected header `filename,label`, got `{}`",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let anomalous = match rec[1].trim() {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::Labels(format!(
                    "row {}: label must be 0 or 1, got `{other}`",
                    i + 2
                )))
            }
        };
        rows.push(LabelRow {
            filename: rec[0].trim().to_string(),
            anomalous,
        });
    }
    Ok(rows)
}

/// The first `spec.train_normals` normal images (after a seeded shuffle) form
/// the training split; every other image goes to the test split.
pub fn load_labeled_folder(spec: &DatasetSpec) -> Result<Dataset> {
    let root = spec
        .root
        .as_ref()
        .ok_or_else(|| Error::Config("the labeled_folder layout needs a data root".into()))?;
    if !root.is_dir() {
        return Err(Error::MissingPath(root.clone()));
    }
    let rows = read_labels(&root.join(LABEL_FILE))?;
    let mut seen = HashSet::new();
    for r in &rows {
        if !seen.insert(r.filename.as_str()) {
            return Err(Error::Labels(format!("`{}` is listed twice", r.filename)));
        }
        if !root.join(&r.filename).is_file() {
            return Err(Error::Labels(format!("`{}` is labeled but does not exist", r.filename)));
        }
    }
    for p in list_images(root)? {
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if !seen.contains(name) {
            return Err(Error::Labels(format!("`{name}` has no label row")));
        }
    }

    let mut normals: Vec<&LabelRow> = rows.iter().filter(|r| !r.anomalous).collect();
    let anomalies: Vec<&LabelRow> = rows.iter().filter(|r| r.anomalous).collect();
    if normals.len() < spec.train_normals {
        return Err(Error::Split(format!(
            "{} normal images, but {} are needed for training",
            normals.len(),
            spec.train_normals
        )));
    }
    shuffle(&mut normals, spec.seed);
    let (train_rows, test_normals) = normals.split_at(spec.train_normals);
    let mut notices = Vec::new();
    if anomalies.is_empty() {
        notices.push("every image is labeled normal; the test split has a single class".to_string());
    }
    let side = spec.image_side;
    let load = |r: &&LabelRow| -> Result<Sample> {
        Ok(Sample {
            image: load_image(&root.join(&r.filename), side)?,
            label: r.anomalous,
            mask: None,
            id: r.filename.clone(),
        })
    };
    let train = train_rows.par_iter().map(load).collect::<Result<Vec<_>>>()?;
    let test_rows: Vec<&LabelRow> = test_normals.iter().copied().chain(anomalies).collect();
    let test = test_rows.par_iter().map(load).collect::<Result<Vec<_>>>()?;
    Ok(Dataset { train, test, notices })
}
