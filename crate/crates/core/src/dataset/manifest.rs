use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{AttributeSpec, DatasetManifest, Mask, SampleRecord};
use crate::error::{Error, Result, ValidationIssue};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    attributes: Vec<AttributeSpec>,
    class_names: [String; 2],
    samples: Vec<SampleEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleEntry {
    id: String,
    class: u8,
    attrs: BTreeMap<String, String>,
    image_path: PathBuf,
    #[serde(default)]
    mask_paths: BTreeMap<String, PathBuf>,
}

/// Writes `manifest.json`, `images/<id>.png` and `masks/<id>__<feature>.png`
/// under `root`. Returns the manifest path.
pub fn export_dataset(manifest: &DatasetManifest, root: &Path) -> Result<PathBuf> {
    let images = root.join("images");
    let masks = root.join("masks");
    for dir in [&images, &masks] {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut entries = Vec::with_capacity(manifest.samples.len());
    for s in &manifest.samples {
        let image_rel = PathBuf::from("images").join(format!("{}.png", s.id));
        let path = root.join(&image_rel);
        s.image.save(&path).map_err(|e| Error::image(&path, e))?;
        let mut mask_paths = BTreeMap::new();
        for (feature, mask) in &s.masks {
            let rel = PathBuf::from("masks").join(format!("{}__{}.png", s.id, feature));
            let path = root.join(&rel);
            mask.to_gray().save(&path).map_err(|e| Error::image(&path, e))?;
            mask_paths.insert(feature.clone(), rel);
        }
        entries.push(SampleEntry {
            id: s.id.clone(),
            class: s.class_label,
            attrs: manifest
                .attributes
                .iter()
                .zip(&s.attributes)
                .map(|(a, i)| (a.name.clone(), a.instance_label(*i).to_string()))
                .collect(),
            image_path: image_rel,
            mask_paths,
        });
    }
    let file = ManifestFile {
        attributes: manifest.attributes.clone(),
        class_names: manifest.class_names.clone(),
        samples: entries,
    };
    let path = root.join("manifest.json");
    let json = serde_json::to_string_pretty(&file)?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Loads and validates a manifest; image and mask paths resolve against
/// `root`. Every problem is collected before failing, so the error lists
/// all offending sample ids at once.
pub fn import_dataset(root: &Path, manifest_path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let file: ManifestFile = serde_json::from_str(&text)?;
    for a in &file.attributes {
        a.validate()?;
    }

    let mut issues = Vec::new();
    let mut samples = Vec::with_capacity(file.samples.len());
    let mut seen = BTreeSet::new();
    let mut maskless = 0usize;
    for entry in file.samples {
        let mut issue = |problem: String| {
            issues.push(ValidationIssue {
                sample_id: entry.id.clone(),
                problem,
            })
        };
        if !seen.insert(entry.id.clone()) {
            issue("duplicate id".into());
        }
        if entry.class > 1 {
            issue(format!("class {} outside {{0, 1}}", entry.class));
        }
        let mut attributes = Vec::with_capacity(file.attributes.len());
        for spec in &file.attributes {
            match entry.attrs.get(&spec.name) {
                None => issue(format!("missing value for attribute {}", spec.name)),
                Some(v) => match spec.parse_instance(v) {
                    Some(i) => attributes.push(i),
                    None => issue(format!(
                        "value {v:?} for attribute {} not among declared instances {:?}",
                        spec.name, spec.instances
                    )),
                },
            }
        }
        for key in entry.attrs.keys() {
            if !file.attributes.iter().any(|a| &a.name == key) {
                issue(format!("undeclared attribute {key}"));
            }
        }

        let image_path = root.join(&entry.image_path);
        let image = if image_path.is_file() {
            match image::open(&image_path) {
                Ok(img) => Some(img.to_rgb8()),
                Err(e) => {
                    issue(format!("unreadable image {}: {e}", image_path.display()));
                    None
                }
            }
        } else {
            issue(format!("missing image file {}", image_path.display()));
            None
        };

        let mut masks = BTreeMap::new();
        for (feature, rel) in &entry.mask_paths {
            let path = root.join(rel);
            if !path.is_file() {
                issue(format!("missing mask file {}", path.display()));
                continue;
            }
            match image::open(&path) {
                Ok(m) => {
                    let mask = Mask::from_gray(&m.to_luma8());
                    if let Some(img) = &image {
                        if (mask.width(), mask.height()) != img.dimensions() {
                            issue(format!(
                                "mask {feature} is {}x{} but image is {}x{}",
                                mask.width(),
                                mask.height(),
                                img.width(),
                                img.height()
                            ));
                            continue;
                        }
                    }
                    masks.insert(feature.clone(), mask);
                }
                Err(e) => issue(format!("unreadable mask {}: {e}", path.display())),
            }
        }
        if masks.is_empty() {
            maskless += 1;
        }

        if let Some(image) = image {
            if attributes.len() == file.attributes.len() {
                samples.push(SampleRecord {
                    id: entry.id,
                    class_label: entry.class,
                    attributes,
                    image,
                    masks,
                });
            }
        }
    }

    if !issues.is_empty() {
        return Err(Error::Validation(issues));
    }
    if maskless > 0 {
        log::warn!(
            "{maskless} imported sample(s) carry no masks; they are excluded from automatic verdicts"
        );
    }
    log::warn!(
        "imported data is not screened for stylized images or images showing both instances of an attribute; review manually"
    );
    Ok(DatasetManifest {
        attributes: file.attributes,
        class_names: file.class_names,
        samples,
    })
}

#[derive(Serialize, Deserialize)]
struct SplitFile {
    ids: Vec<String>,
}

pub fn write_split(path: &Path, ids: &[String]) -> Result<()> {
    let json = serde_json::to_string_pretty(&SplitFile { ids: ids.to_vec() })?;
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn read_split(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str::<SplitFile>(&text)?.ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic_dataset, SyntheticConfig};

    fn dataset() -> DatasetManifest {
        generate_synthetic_dataset(&SyntheticConfig {
            per_subgroup: 2,
            attribute_count: 1,
            seed: 5,
            ..SyntheticConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn export_then_import_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let ds = dataset();
        let path = export_dataset(&ds, dir.path()).unwrap();
        let back = import_dataset(dir.path(), &path).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn unknown_instance_and_missing_file_are_reported_by_id() {
        let dir = tempfile::tempdir().unwrap();
        let path = export_dataset(&dataset(), dir.path()).unwrap();
        let mut json: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        json["samples"][0]["attrs"]["disc_color"] = "C".into();
        json["samples"][1]["image_path"] = "images/nope.png".into();
        fs::write(&path, json.to_string()).unwrap();
        match import_dataset(dir.path(), &path) {
            Err(Error::Validation(issues)) => {
                let ids: Vec<_> = issues.iter().map(|i| i.sample_id.as_str()).collect();
                assert_eq!(ids, ["s00000", "s00001"]);
                assert!(issues[0].problem.contains("\"C\""));
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn mask_dimension_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = export_dataset(&dataset(), dir.path()).unwrap();
        image::GrayImage::new(8, 8)
            .save(dir.path().join("masks/s00002__disc.png"))
            .unwrap();
        let err = import_dataset(dir.path(), &path).unwrap_err();
        assert!(err.to_string().contains("s00002"), "{err}");
    }

    #[test]
    fn maskless_samples_import_fine() {
        let dir = tempfile::tempdir().unwrap();
        let path = export_dataset(&dataset(), dir.path()).unwrap();
        let mut json: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        json["samples"][3]
            .as_object_mut()
            .unwrap()
            .remove("mask_paths");
        fs::write(&path, json.to_string()).unwrap();
        let ds = import_dataset(dir.path(), &path).unwrap();
        assert!(!ds.samples[3].has_masks());
        assert!(ds.samples[2].has_masks());
    }
}
