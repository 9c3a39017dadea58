//! Background-group annotation files: CSV with header `index,class_label,bg_group`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use super::palette::Palette;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Annotation {
    /// Class label as written in the file (an integer or a class name).
    pub class_label: String,
    pub bg_group: usize,
}

/// Example index to (class label, background group).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnnotationTable {
    palette: Vec<String>,
    rows: BTreeMap<usize, Annotation>,
}

/// Accepted group names and optional aliases (e.g. "grey" -> "gray").
#[derive(Clone, Debug)]
pub struct AnnotationOptions {
    pub palette: Vec<String>,
    pub aliases: BTreeMap<String, String>,
}

impl Default for AnnotationOptions {
    fn default() -> Self {
        Self {
            palette: Palette::default_eight().names(),
            aliases: BTreeMap::new(),
        }
    }
}

impl AnnotationTable {
    pub fn new(palette: Vec<String>) -> Self {
        Self {
            palette,
            rows: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, index: usize, class_label: String, bg_group: usize) -> Result<()> {
        if bg_group >= self.palette.len() {
            return Err(Error::invalid(format!("group {bg_group} outside the palette")));
        }
        if self.rows.contains_key(&index) {
            return Err(Error::invalid(format!("duplicate index {index}")));
        }
        self.rows.insert(index, Annotation { class_label, bg_group });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&Annotation> {
        self.rows.get(&index)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Annotation)> {
        self.rows.iter().map(|(&i, a)| (i, a))
    }

    pub fn palette(&self) -> &[String] {
        &self.palette
    }

    pub fn group_name(&self, g: usize) -> &str {
        &self.palette[g]
    }

    pub fn others_index(&self) -> Option<usize> {
        self.palette.iter().position(|n| n == super::OTHERS)
    }
}

pub fn read_annotations<R: Read>(reader: R, opts: &AnnotationOptions) -> Result<AnnotationTable> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse {
            row: 0,
            msg: e.to_string(),
        })?
        .clone();
    let col = |name: &str| -> Result<usize> {
        headers.iter().position(|h| h.trim() == name).ok_or_else(|| Error::Parse {
            row: 0,
            msg: format!("missing column {name:?}"),
        })
    };
    let (ci, cc, cg) = (col("index")?, col("class_label")?, col("bg_group")?);

    let mut table = AnnotationTable::new(opts.palette.clone());
    for (n, rec) in rdr.records().enumerate() {
        let row = n + 1;
        let rec = rec.map_err(|e| Error::Parse { row, msg: e.to_string() })?;
        let field = |i: usize| -> Result<&str> {
            rec.get(i).map(str::trim).ok_or_else(|| Error::Parse {
                row,
                msg: "missing field".into(),
            })
        };
        let index: usize = field(ci)?.parse().map_err(|_| Error::Parse {
            row,
            msg: format!("bad index {:?}", rec.get(ci).unwrap_or("")),
        })?;
        let class_label = field(cc)?.to_string();
        if class_label.is_empty() {
            return Err(Error::Parse {
                row,
                msg: "empty class_label".into(),
            });
        }
        let raw = field(cg)?;
        let name = opts.aliases.get(raw).map(String::as_str).unwrap_or(raw);
        let bg_group = opts.palette.iter().position(|p| p == name).ok_or_else(|| Error::Parse {
            row,
            msg: format!("unknown group {raw:?}"),
        })?;
        if table.rows.contains_key(&index) {
            return Err(Error::Parse {
                row,
                msg: format!("duplicate index {index}"),
            });
        }
        table.rows.insert(index, Annotation { class_label, bg_group });
    }
    Ok(table)
}

pub fn write_annotations<W: Write>(table: &AnnotationTable, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let err = |e: csv::Error| Error::invalid(format!("CSV write failed: {e}"));
    w.write_record(["index", "class_label", "bg_group"]).map_err(err)?;
    for (i, a) in table.iter() {
        w.write_record([i.to_string().as_str(), &a.class_label, table.group_name(a.bg_group)])
            .map_err(err)?;
    }
    w.flush().map_err(|e| Error::invalid(format!("CSV write failed: {e}")))?;
    Ok(())
}

pub fn load_annotations(path: &Path, opts: &AnnotationOptions) -> Result<AnnotationTable> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_annotations(f, opts)
}

pub fn save_annotations(table: &AnnotationTable, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_annotations(table, f)
}
