//! `<root>/<class>/{train/good, test/<defect>, ground_truth/<defect>}`.

use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;

use super::{list_images, load_image, load_mask, shuffle, Dataset, DatasetSpec, Sample};
use crate::error::{Error, Result};

fn stem(p: &Path) -> String {
    p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string()
}

pub fn load_mvtec(spec: &DatasetSpec) -> Result<Dataset> {
    let root = spec
        .root
        .as_ref()
        .ok_or_else(|| Error::Config("the mvtec layout needs a data root".into()))?;
    let class_dir = root.join(&spec.class_name);
    if !class_dir.is_dir() {
        return Err(Error::MissingPath(class_dir));
    }
    let side = spec.image_side;

    let mut train_files = list_images(&class_dir.join("train").join("good"))?;
    if train_files.is_empty() {
        return Err(Error::MissingPath(class_dir.join("train").join("good").join("*.png")));
    }
    shuffle(&mut train_files, spec.seed);
    let train = train_files
        .par_iter()
        .map(|p| {
            Ok(Sample {
                image: load_image(p, side)?,
                label: false,
                mask: None,
                id: format!("train/good/{}", stem(p)),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let test_dir = class_dir.join("test");
    if !test_dir.is_dir() {
        return Err(Error::MissingPath(test_dir));
    }
    let mut defect_types: Vec<String> = std::fs::read_dir(&test_dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .filter_map(|e| e.file_name().to_str().map(str::to_string))
        .collect();
    defect_types.sort();

    let mut jobs = Vec::new();
    for defect in &defect_types {
        for p in list_images(&test_dir.join(defect))? {
            let mask_path = (defect != "good").then(|| {
                class_dir
                    .join("ground_truth")
                    .join(defect)
                    .join(format!("{}_mask.png", stem(&p)))
            });
            jobs.push((defect.clone(), p, mask_path));
        }
    }
    let test = jobs
        .par_iter()
        .map(|(defect, p, mask_path)| {
            let image = load_image(p, side)?;
            let mask = match mask_path {
                Some(m) => load_mask(m, side)?,
                None => Array2::from_elem((side, side), false),
            };
            Ok(Sample {
                image,
                label: defect != "good",
                mask: Some(mask),
                id: format!("test/{defect}/{}", stem(p)),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let anomalous = test.iter().filter(|s| s.label).count();
    log::info!(
        "{}: {} train, {} good + {} defective test images",
        spec.class_name,
        train.len(),
        test.len() - anomalous,
        anomalous
    );
    Ok(Dataset {
        train,
        test,
        notices: Vec::new(),
    })
}
