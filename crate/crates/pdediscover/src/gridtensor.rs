//! The on-disk dataset format: a text header carrying the grid, followed by
//! the field values as little-endian f64 and an explicit presence mask.
//! Missing entries additionally hold a NaN sentinel in the payload so real
//! data can never be misread as missing, and vice versa.
//!
//! ```text
//! GRIDTENSOR v1
//! kind 1d|2d
//! ncomp N
//! x <coords>          (strictly increasing)
//! y <coords>          (2d only)
//! t <coords>
//! data
//! <S*T*N little-endian f64>
//! mask
//! <S*T*N bytes, 1 = present>
//! end
//! ```
//!
//! Coordinates are printed with Rust's shortest round-trip float formatting,
//! so write-then-read is lossless and repeated writes are byte-identical.

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::sampler::ObservationSet;
use crate::tensor::Tensor3;

#[derive(Debug, Error)]
pub enum GridTensorError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed grid tensor file: {0}")]
    Malformed(String),
    #[error("axis coordinates must be strictly increasing ({0})")]
    NonIncreasingAxis(String),
    #[error("payload length {found} does not match header dims {expect}")]
    LengthMismatch { found: usize, expect: usize },
}

/// Spatial axis description: a line of x coordinates, or an x/y product grid
/// ordered x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub enum AxisSpec {
    OneD { xs: Vec<f64> },
    TwoD { xs: Vec<f64>, ys: Vec<f64> },
}

impl AxisSpec {
    pub fn n_locations(&self) -> usize {
        match self {
            AxisSpec::OneD { xs } => xs.len(),
            AxisSpec::TwoD { xs, ys } => xs.len() * ys.len(),
        }
    }

    pub fn is_2d(&self) -> bool {
        matches!(self, AxisSpec::TwoD { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridTensorFile {
    pub axis: AxisSpec,
    pub times: Vec<f64>,
    pub tensor: Tensor3,
    pub mask: Vec<bool>,
}

fn check_increasing(name: &str, coords: &[f64]) -> Result<(), GridTensorError> {
    if coords.is_empty() {
        return Err(GridTensorError::NonIncreasingAxis(format!("{name} axis is empty")));
    }
    for w in coords.windows(2) {
        if !(w[1] > w[0]) {
            return Err(GridTensorError::NonIncreasingAxis(format!(
                "{name} axis: {} then {}",
                w[0], w[1]
            )));
        }
    }
    Ok(())
}

impl GridTensorFile {
    pub fn new(
        axis: AxisSpec,
        times: Vec<f64>,
        tensor: Tensor3,
        mask: Vec<bool>,
    ) -> Result<Self, GridTensorError> {
        match &axis {
            AxisSpec::OneD { xs } => check_increasing("x", xs)?,
            AxisSpec::TwoD { xs, ys } => {
                check_increasing("x", xs)?;
                check_increasing("y", ys)?;
            }
        }
        check_increasing("t", &times)?;
        let (s, t, n) = tensor.dims();
        if s != axis.n_locations() || t != times.len() {
            return Err(GridTensorError::Malformed(format!(
                "tensor dims {s}x{t}x{n} do not match the {} locations and {} times",
                axis.n_locations(),
                times.len()
            )));
        }
        if mask.len() != tensor.values().len() {
            return Err(GridTensorError::LengthMismatch {
                found: mask.len(),
                expect: tensor.values().len(),
            });
        }
        Ok(Self { axis, times, tensor, mask })
    }

    pub fn complete(
        axis: AxisSpec,
        times: Vec<f64>,
        tensor: Tensor3,
    ) -> Result<Self, GridTensorError> {
        let mask = vec![true; tensor.values().len()];
        Self::new(axis, times, tensor, mask)
    }

    pub fn from_observations(
        axis: AxisSpec,
        times: Vec<f64>,
        obs: &ObservationSet,
    ) -> Result<Self, GridTensorError> {
        Self::new(axis, times, obs.data().clone(), obs.mask().to_vec())
    }

    pub fn n_components(&self) -> usize {
        self.tensor.dims().2
    }

    /// Convert into an observation set (masked entries are never read).
    pub fn observation_set(&self) -> Result<ObservationSet, GridTensorError> {
        ObservationSet::with_mask(self.tensor.clone(), self.mask.clone())
            .map_err(|e| GridTensorError::Malformed(e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<(), GridTensorError> {
        let io_err = |source| GridTensorError::Io { path: path.display().to_string(), source };
        let mut out: Vec<u8> = Vec::new();
        let fmt_coords = |coords: &[f64]| -> String {
            coords.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(" ")
        };
        out.extend_from_slice(b"GRIDTENSOR v1\n");
        match &self.axis {
            AxisSpec::OneD { xs } => {
                out.extend_from_slice(b"kind 1d\n");
                out.extend_from_slice(format!("ncomp {}\n", self.n_components()).as_bytes());
                out.extend_from_slice(format!("x {}\n", fmt_coords(xs)).as_bytes());
            }
            AxisSpec::TwoD { xs, ys } => {
                out.extend_from_slice(b"kind 2d\n");
                out.extend_from_slice(format!("ncomp {}\n", self.n_components()).as_bytes());
                out.extend_from_slice(format!("x {}\n", fmt_coords(xs)).as_bytes());
                out.extend_from_slice(format!("y {}\n", fmt_coords(ys)).as_bytes());
            }
        }
        out.extend_from_slice(format!("t {}\n", fmt_coords(&self.times)).as_bytes());
        out.extend_from_slice(b"data\n");
        for (v, m) in self.tensor.values().iter().zip(&self.mask) {
            let stored = if *m { *v } else { f64::NAN };
            out.extend_from_slice(&stored.to_le_bytes());
        }
        out.extend_from_slice(b"\nmask\n");
        out.extend(self.mask.iter().map(|m| u8::from(*m)));
        out.extend_from_slice(b"\nend\n");
        let mut f = fs::File::create(path).map_err(io_err)?;
        f.write_all(&out).map_err(io_err)
    }

    pub fn read(path: &Path) -> Result<Self, GridTensorError> {
        let bytes = fs::read(path)
            .map_err(|source| GridTensorError::Io { path: path.display().to_string(), source })?;
        let bad = |m: &str| GridTensorError::Malformed(m.to_string());

        // Header: text lines up to and including "data".
        let mut pos = 0usize;
        let next_line = |pos: &mut usize| -> Result<String, GridTensorError> {
            let start = *pos;
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            if *pos >= bytes.len() {
                return Err(bad("unexpected end of header"));
            }
            let line = String::from_utf8(bytes[start..*pos].to_vec())
                .map_err(|_| bad("header is not utf-8"))?;
            *pos += 1;
            Ok(line)
        };

        if next_line(&mut pos)? != "GRIDTENSOR v1" {
            return Err(bad("missing GRIDTENSOR v1 magic"));
        }
        let kind_line = next_line(&mut pos)?;
        let kind = kind_line
            .strip_prefix("kind ")
            .ok_or_else(|| bad("expected `kind` line"))?
            .to_string();
        let ncomp: usize = next_line(&mut pos)?
            .strip_prefix("ncomp ")
            .ok_or_else(|| bad("expected `ncomp` line"))?
            .parse()
            .map_err(|_| bad("ncomp is not an integer"))?;
        let parse_coords = |line: &str, tag: &str| -> Result<Vec<f64>, GridTensorError> {
            let body = line
                .strip_prefix(&format!("{tag} "))
                .ok_or_else(|| bad(&format!("expected `{tag}` line")))?;
            body.split_whitespace()
                .map(|w| w.parse::<f64>().map_err(|_| bad(&format!("bad {tag} coordinate `{w}`"))))
                .collect()
        };
        let axis = match kind.as_str() {
            "1d" => AxisSpec::OneD { xs: parse_coords(&next_line(&mut pos)?, "x")? },
            "2d" => {
                let xs = parse_coords(&next_line(&mut pos)?, "x")?;
                let ys = parse_coords(&next_line(&mut pos)?, "y")?;
                AxisSpec::TwoD { xs, ys }
            }
            other => return Err(bad(&format!("unknown axis kind `{other}`"))),
        };
        let times = parse_coords(&next_line(&mut pos)?, "t")?;
        if next_line(&mut pos)? != "data" {
            return Err(bad("expected `data` marker"));
        }

        let s = axis.n_locations();
        let t = times.len();
        let total = s * t * ncomp;
        let data_end = pos + total * 8;
        if bytes.len() < data_end {
            return Err(GridTensorError::LengthMismatch {
                found: bytes.len().saturating_sub(pos) / 8,
                expect: total,
            });
        }
        let mut values = Vec::with_capacity(total);
        for k in 0..total {
            let start = pos + k * 8;
            let arr: [u8; 8] = bytes[start..start + 8].try_into().expect("slice length 8");
            values.push(f64::from_le_bytes(arr));
        }
        pos = data_end;
        let expect_marker = |marker: &[u8], pos: &mut usize| -> Result<(), GridTensorError> {
            if bytes.len() < *pos + marker.len() || &bytes[*pos..*pos + marker.len()] != marker {
                return Err(bad(&format!(
                    "expected `{}` marker",
                    String::from_utf8_lossy(marker)
                )));
            }
            *pos += marker.len();
            Ok(())
        };
        expect_marker(b"\nmask\n", &mut pos)?;
        if bytes.len() < pos + total {
            return Err(GridTensorError::LengthMismatch {
                found: bytes.len().saturating_sub(pos),
                expect: total,
            });
        }
        let mask: Vec<bool> = bytes[pos..pos + total].iter().map(|b| *b != 0).collect();
        pos += total;
        expect_marker(b"\nend\n", &mut pos)?;

        let tensor = Tensor3::new(s, t, ncomp, values)
            .map_err(|e| GridTensorError::Malformed(e.to_string()))?;
        Self::new(axis, times, tensor, mask)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_with_mask_is_lossless() {
        let xs: Vec<f64> = (0..5).map(|i| -1.0 + 0.37 * i as f64).collect();
        let ys: Vec<f64> = (0..3).map(|i| 0.1 * i as f64).collect();
        let times: Vec<f64> = (0..4).map(|i| i as f64 / 3.0).collect();
        let tensor = Tensor3::from_fn(15, 4, 2, |s, t, n| {
            ((s * 7 + t * 3 + n) as f64 * 0.123).sin() / 3.0
        });
        let mut mask = vec![true; tensor.values().len()];
        mask[3] = false;
        mask[77] = false;
        let file = GridTensorFile::new(
            AxisSpec::TwoD { xs: xs.clone(), ys: ys.clone() },
            times,
            tensor,
            mask,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.gt");
        file.write(&path).unwrap();
        let back = GridTensorFile::read(&path).unwrap();
        assert_eq!(back.axis, file.axis);
        assert_eq!(back.times, file.times);
        assert_eq!(back.mask, file.mask);
        for (i, (a, b)) in back.tensor.values().iter().zip(file.tensor.values()).enumerate() {
            if file.mask[i] {
                assert_eq!(a.to_bits(), b.to_bits());
            } else {
                assert!(a.is_nan());
            }
        }

        // Writes are byte-identical.
        let path2 = dir.path().join("t2.gt");
        file.write(&path2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn validation_rejects_bad_axes_and_lengths() {
        let tensor = Tensor3::zeros(3, 2, 1);
        let err = GridTensorFile::complete(
            AxisSpec::OneD { xs: vec![0.0, 0.0, 1.0] },
            vec![0.0, 1.0],
            tensor.clone(),
        );
        assert!(matches!(err, Err(GridTensorError::NonIncreasingAxis(_))));
        let err2 = GridTensorFile::complete(
            AxisSpec::OneD { xs: vec![0.0, 0.5, 1.0] },
            vec![0.0, 1.0, 2.0],
            tensor,
        );
        assert!(err2.is_err());
    }

    #[test]
    fn read_rejects_truncation() {
        let tensor = Tensor3::zeros(3, 2, 1);
        let file = GridTensorFile::complete(
            AxisSpec::OneD { xs: vec![0.0, 0.5, 1.0] },
            vec![0.0, 1.0],
            tensor,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.gt");
        file.write(&path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 10);
        fs::write(&path, bytes).unwrap();
        assert!(GridTensorFile::read(&path).is_err());
    }
}
