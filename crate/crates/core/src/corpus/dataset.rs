use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;

use super::{Completeness, Image, ImageSample, TextAnnotation};
use crate::error::{Error, Result};
use crate::geometry::Point;

/// One line of a dataset index.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DatasetRecord {
    /// Image location relative to the index file's directory.
    pub image_path: String,
    pub completeness: Completeness,
    pub annotations: Vec<TextAnnotation>,
}

fn images_dir_name(index: &Path) -> String {
    let stem = index
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("dataset");
    format!("{stem}_images")
}

fn base_dir(index: &Path) -> PathBuf {
    index.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Writes PNG images next to `index` and a JSON-lines index referencing them.
pub fn write_dataset(samples: &[ImageSample], index: &Path) -> Result<Vec<DatasetRecord>> {
    let base = base_dir(index);
    let dir_name = images_dir_name(index);
    fs::create_dir_all(base.join(&dir_name))?;
    let mut out = BufWriter::new(fs::File::create(index)?);
    let mut records = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let rel = format!("{dir_name}/{i:06}.png");
        s.image.save_png(&base.join(&rel))?;
        let rec = DatasetRecord {
            image_path: rel,
            completeness: s.completeness,
            annotations: s.annotations.clone(),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
        records.push(rec);
    }
    out.flush()?;
    Ok(records)
}

fn field_err(line: usize, field: &str, message: impl Into<String>) -> Error {
    Error::Record {
        line,
        field: field.to_string(),
        message: message.into(),
    }
}

fn parse_point(v: &Value, line: usize) -> Result<Point> {
    let arr = v
        .as_array()
        .filter(|a| a.len() == 2)
        .ok_or_else(|| field_err(line, "polygon", "each point must be [x, y]"))?;
    let x = arr[0]
        .as_f64()
        .ok_or_else(|| field_err(line, "polygon", "x must be a number"))?;
    let y = arr[1]
        .as_f64()
        .ok_or_else(|| field_err(line, "polygon", "y must be a number"))?;
    Ok(Point::new(x, y))
}

fn parse_annotation(v: &Value, line: usize) -> Result<TextAnnotation> {
    let obj = v
        .as_object()
        .ok_or_else(|| field_err(line, "annotations", "each annotation must be an object"))?;
    let poly = obj
        .get("polygon")
        .ok_or_else(|| field_err(line, "polygon", "missing"))?
        .as_array()
        .ok_or_else(|| field_err(line, "polygon", "must be an array of points"))?;
    let polygon = poly
        .iter()
        .map(|p| parse_point(p, line))
        .collect::<Result<Vec<_>>>()?;
    let text = match obj.get("text") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(_) => return Err(field_err(line, "text", "must be a string or null")),
    };
    let ignore = match obj.get("ignore") {
        None => false,
        Some(Value::Bool(b)) => *b,
        Some(_) => return Err(field_err(line, "ignore", "must be a boolean")),
    };
    let ann = TextAnnotation {
        polygon,
        text,
        ignore,
    };
    ann.validate()
        .map_err(|e| field_err(line, "polygon", e.to_string()))?;
    Ok(ann)
}

fn parse_record(text: &str, line: usize) -> Result<DatasetRecord> {
    let v: Value =
        serde_json::from_str(text).map_err(|e| field_err(line, "<record>", e.to_string()))?;
    let obj = v
        .as_object()
        .ok_or_else(|| field_err(line, "<record>", "must be a JSON object"))?;
    let image_path = obj
        .get("image_path")
        .ok_or_else(|| field_err(line, "image_path", "missing"))?
        .as_str()
        .ok_or_else(|| field_err(line, "image_path", "must be a string"))?
        .to_string();
    let completeness = match obj.get("completeness").and_then(Value::as_str) {
        Some("full") => Completeness::Full,
        Some("partial") => Completeness::Partial,
        Some(other) => {
            return Err(field_err(
                line,
                "completeness",
                format!("unknown value `{other}`"),
            ));
        }
        None => return Err(field_err(line, "completeness", "missing or not a string")),
    };
    let anns = obj
        .get("annotations")
        .ok_or_else(|| field_err(line, "annotations", "missing"))?
        .as_array()
        .ok_or_else(|| field_err(line, "annotations", "must be an array"))?;
    let annotations = anns
        .iter()
        .map(|a| parse_annotation(a, line))
        .collect::<Result<Vec<_>>>()?;
    if completeness == Completeness::Full
        && annotations.iter().any(|a| !a.ignore && a.text.is_none())
    {
        return Err(field_err(
            line,
            "text",
            "required for non-ignore annotations of full samples",
        ));
    }
    Ok(DatasetRecord {
        image_path,
        completeness,
        annotations,
    })
}

/// Parses an index without loading images.
pub fn read_index(index: &Path) -> Result<Vec<DatasetRecord>> {
    let reader = BufReader::new(fs::File::open(index)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_record(&line, i + 1)?);
    }
    Ok(out)
}

/// Reads an index and the images it references.
pub fn read_dataset(index: &Path) -> Result<Vec<ImageSample>> {
    let base = base_dir(index);
    read_index(index)?
        .into_iter()
        .map(|r| {
            Ok(ImageSample {
                image: Image::load(&base.join(&r.image_path))?,
                annotations: r.annotations,
                completeness: r.completeness,
            })
        })
        .collect()
}
