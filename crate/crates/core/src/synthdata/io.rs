//! Dataset directory layout:
//!
//! - `meta.json`: counts, image size, palette names, rho, seed
//! - `images.bin`: concatenated row-major `H x W x 3` bytes, train then test
//! - `labels.csv`: `index,split,class_label,bg_group`, one row per image in file order

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::render::DatasetSpec;
use super::{Dataset, LabeledExample, Split};
use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    /// Group names by index, "others" last.
    pub palette: Vec<String>,
    pub rho: f64,
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    /// Generating spec, when the data is synthetic.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<DatasetSpec>,
}

impl DatasetMeta {
    pub fn from_spec(spec: &DatasetSpec) -> Self {
        Self {
            num_classes: spec.num_classes,
            height: spec.height,
            width: spec.width,
            palette: spec.palette.names(),
            rho: spec.rho,
            seed: spec.seed,
            n_train: spec.n_train,
            n_test: spec.n_test,
            spec: Some(spec.clone()),
        }
    }

    fn image_bytes(&self) -> usize {
        self.height * self.width * CHANNELS
    }
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut meta = ds.meta.clone();
    meta.n_train = ds.train.len();
    meta.n_test = ds.test.len();
    let meta_path = dir.join("meta.json");
    fs::write(&meta_path, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&meta_path, e))?;

    let mut bytes = Vec::with_capacity((meta.n_train + meta.n_test) * meta.image_bytes());
    let labels_path = dir.join("labels.csv");
    let mut w = csv::Writer::from_path(&labels_path).map_err(|e| csv_io(&labels_path, e))?;
    w.write_record(["index", "split", "class_label", "bg_group"])
        .map_err(|e| csv_io(&labels_path, e))?;
    for (split, examples) in [(Split::Train, &ds.train), (Split::Test, &ds.test)] {
        for (i, ex) in examples.iter().enumerate() {
            if ex.image.height() != meta.height || ex.image.width() != meta.width {
                return Err(Error::invalid(format!("{} example {i} has the wrong size", split.tag())));
            }
            bytes.extend(ex.image.to_bytes());
            let group = meta
                .palette
                .get(ex.bg_group)
                .ok_or_else(|| Error::invalid(format!("bg_group {} outside palette", ex.bg_group)))?;
            w.write_record([i.to_string().as_str(), split.tag(), &ex.class_label.to_string(), group])
                .map_err(|e| csv_io(&labels_path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(&labels_path, e))?;
    let img_path = dir.join("images.bin");
    fs::write(&img_path, bytes).map_err(|e| Error::io(&img_path, e))?;
    Ok(())
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    Error::format(path, e.to_string())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join("meta.json");
    let raw = fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: DatasetMeta =
        serde_json::from_slice(&raw).map_err(|e| Error::format(&meta_path, format!("corrupt header: {e}")))?;
    if meta.height == 0 || meta.width == 0 || meta.num_classes == 0 || meta.palette.is_empty() {
        return Err(Error::format(&meta_path, "corrupt header: zero-sized field"));
    }

    let img_path = dir.join("images.bin");
    let bytes = fs::read(&img_path).map_err(|e| Error::io(&img_path, e))?;
    let total = meta.n_train + meta.n_test;
    let per = meta.image_bytes();
    if bytes.len() != total * per {
        return Err(Error::format(
            &img_path,
            format!("length mismatch: {} bytes, expected {total} x {per}", bytes.len()),
        ));
    }

    let labels_path = dir.join("labels.csv");
    let mut rdr = csv::Reader::from_path(&labels_path).map_err(|e| csv_io(&labels_path, e))?;
    let mut train = Vec::with_capacity(meta.n_train);
    let mut test = Vec::with_capacity(meta.n_test);
    for (row_no, rec) in rdr.records().enumerate() {
        let row = row_no + 1;
        let rec = rec.map_err(|e| Error::Parse { row, msg: e.to_string() })?;
        if rec.len() != 4 {
            return Err(Error::Parse {
                row,
                msg: format!("expected 4 fields, got {}", rec.len()),
            });
        }
        let parse = |i: usize, what: &str| -> Result<usize> {
            rec[i].trim().parse().map_err(|_| Error::Parse {
                row,
                msg: format!("bad {what} {:?}", &rec[i]),
            })
        };
        let index = parse(0, "index")?;
        let class_label = parse(2, "class_label")?;
        let bg_group = meta
            .palette
            .iter()
            .position(|n| n == rec[3].trim())
            .ok_or_else(|| Error::Parse {
                row,
                msg: format!("unknown group {:?}", &rec[3]),
            })?;
        if class_label >= meta.num_classes {
            return Err(Error::Parse {
                row,
                msg: format!("class {class_label} out of range"),
            });
        }
        let split = match rec[1].trim() {
            "train" => &mut train,
            "test" => &mut test,
            other => {
                return Err(Error::Parse {
                    row,
                    msg: format!("unknown split {other:?}"),
                })
            }
        };
        if index != split.len() {
            return Err(Error::Parse {
                row,
                msg: format!("index {index} out of order"),
            });
        }
        let k = row_no;
        if k >= total {
            return Err(Error::format(&labels_path, "length mismatch: more label rows than images"));
        }
        let image = Image::from_bytes(meta.height, meta.width, &bytes[k * per..(k + 1) * per])?;
        split.push(LabeledExample {
            image,
            class_label,
            bg_group,
        });
    }
    if train.len() != meta.n_train || test.len() != meta.n_test {
        return Err(Error::format(
            &labels_path,
            format!(
                "length mismatch: {} train / {} test rows, header says {} / {}",
                train.len(),
                test.len(),
                meta.n_train,
                meta.n_test
            ),
        ));
    }
    Ok(Dataset { meta, train, test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::generate_dataset;

    fn small() -> Dataset {
        let spec = DatasetSpec::new(2, 3, 4, 6, 0.8, 4).unwrap().with_size(8, 8).unwrap();
        generate_dataset(&spec).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ds = small();
        save_dataset(&ds, dir.path()).unwrap();
        let bin = fs::metadata(dir.path().join("images.bin")).unwrap().len();
        assert_eq!(bin as usize, 10 * 8 * 8 * 3);
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn truncated_images_is_length_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&small(), dir.path()).unwrap();
        let p = dir.path().join("images.bin");
        let mut b = fs::read(&p).unwrap();
        b.truncate(b.len() - 5);
        fs::write(&p, b).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("length mismatch"), "{err}");
    }

    #[test]
    fn corrupt_header_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&small(), dir.path()).unwrap();
        fs::write(dir.path().join("meta.json"), b"{not json").unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Format { .. })));
    }
}
