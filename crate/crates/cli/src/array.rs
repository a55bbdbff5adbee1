//! Raw little-endian `f32` arrays with a JSON sidecar header, plus PGM/PPM
//! export.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayHeader {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub order: String,
}

impl ArrayHeader {
    pub fn new(shape: Vec<usize>) -> Self {
        Self {
            shape,
            dtype: "f32".into(),
            order: "row-major".into(),
        }
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    pub shape: Vec<usize>,
    pub data: DVector<f64>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn read_array(path: &Path) -> Result<Array> {
    let header_path = sidecar_path(path);
    let text = fs::read_to_string(&header_path)
        .with_context(|| format!("reading array header {}", header_path.display()))?;
    let header: ArrayHeader = serde_json::from_str(&text)
        .with_context(|| format!("parsing array header {}", header_path.display()))?;
    if header.dtype != "f32" {
        bail!(crate::exit::ConfigError(format!(
            "{}: unsupported dtype {:?}, only \"f32\" is supported",
            header_path.display(),
            header.dtype
        )));
    }
    if header.order != "row-major" {
        bail!(crate::exit::ConfigError(format!(
            "{}: unsupported order {:?}, only \"row-major\" is supported",
            header_path.display(),
            header.order
        )));
    }
    if header.shape.is_empty() || header.is_empty() {
        bail!(crate::exit::ConfigError(format!(
            "{}: shape {:?} holds no elements",
            header_path.display(),
            header.shape
        )));
    }
    let bytes = fs::read(path).with_context(|| format!("reading array {}", path.display()))?;
    if bytes.len() != 4 * header.len() {
        bail!(crate::exit::ConfigError(format!(
            "{}: payload has {} bytes, shape {:?} needs {}",
            path.display(),
            bytes.len(),
            header.shape,
            4 * header.len()
        )));
    }
    let data = DVector::from_iterator(
        header.len(),
        bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64),
    );
    Ok(Array {
        shape: header.shape,
        data,
    })
}

/// Write the payload and its sidecar; returns both paths.
pub fn write_array(path: &Path, shape: &[usize], data: &[f64]) -> Result<[PathBuf; 2]> {
    let header = ArrayHeader::new(shape.to_vec());
    if header.len() != data.len() {
        bail!(
            "internal: shape {:?} does not match {} values",
            shape,
            data.len()
        );
    }
    let mut bytes = Vec::with_capacity(4 * data.len());
    for &v in data {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))?;
    let header_path = sidecar_path(path);
    fs::write(&header_path, serde_json::to_string(&header)? + "\n")
        .with_context(|| format!("writing {}", header_path.display()))?;
    Ok([path.to_path_buf(), header_path])
}

/// 8-bit grayscale image of `values`, scaled so the maximum maps to 255.
/// Written as binary PPM when the extension is `.ppm`, PGM otherwise.
pub fn write_image(path: &Path, values: &[f64], height: usize, width: usize) -> Result<()> {
    if values.len() != height * width {
        bail!("internal: image size mismatch");
    }
    let max = values.iter().copied().fold(0.0, f64::max);
    let gray: Vec<u8> = values
        .iter()
        .map(|&v| {
            if max > 0.0 {
                (v / max * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        })
        .collect();
    let color = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm"));
    let mut out = format!("{}\n{width} {height}\n255\n", if color { "P6" } else { "P5" }).into_bytes();
    if color {
        out.extend(gray.iter().flat_map(|&g| [g, g, g]));
    } else {
        out.extend_from_slice(&gray);
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}
