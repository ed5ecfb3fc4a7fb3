//! File formats.
//!
//! `.hsi`: ASCII magic `HSI1`, then `h`, `w`, `c` as little-endian `u32`, then
//! `h*w*c` little-endian `f32` values stored band-sequential (all of band 0 in
//! row-major order, then band 1, ...).
//!
//! Masks are binary PGM (`P5`); any nonzero byte marks an anomaly on load and
//! anomalies are written as 255. Maps are written either as CSV (`h` lines of
//! `w` comma-separated scores, shortest round-trip decimal) or as an 8-bit PGM
//! min-max stretched with `floor(255 * (s - min) / (max - min))`.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::cube::{AnomalyMap, GroundTruth, HsiCube};
use crate::error::{io_err, Error, Result};
use crate::superpixel::SegmentLabels;

pub const HSI_MAGIC: &[u8; 4] = b"HSI1";
const HSI_HEADER_LEN: usize = 16;

pub fn encode_cube(cube: &HsiCube) -> Result<Vec<u8>> {
    let (h, w, c) = (cube.height(), cube.width(), cube.bands());
    let mut out = Vec::with_capacity(HSI_HEADER_LEN + h * w * c * 4);
    out.extend_from_slice(HSI_MAGIC);
    for dim in [h, w, c] {
        let dim = u32::try_from(dim)
            .map_err(|_| Error::Dimensions(format!("dimension {dim} exceeds u32")))?;
        out.extend_from_slice(&dim.to_le_bytes());
    }
    let data = cube.data();
    for b in 0..c {
        for p in 0..h * w {
            let v = data[p * c + b] as f32;
            if !v.is_finite() {
                return Err(Error::NonFinite { offset: out.len() });
            }
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_cube(bytes: &[u8]) -> Result<HsiCube> {
    if bytes.len() < 4 || &bytes[..4] != HSI_MAGIC {
        let found = String::from_utf8_lossy(&bytes[..bytes.len().min(4)]).into_owned();
        return Err(Error::BadMagic {
            expected: "HSI1".into(),
            found,
        });
    }
    if bytes.len() < HSI_HEADER_LEN {
        return Err(Error::Truncated {
            offset: bytes.len(),
            expected: HSI_HEADER_LEN,
            found: bytes.len(),
        });
    }
    let dim = |i: usize| {
        let off = 4 + 4 * i;
        u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize
    };
    let (h, w, c) = (dim(0), dim(1), dim(2));
    if h == 0 || w == 0 || c == 0 {
        return Err(Error::Malformed {
            what: "hsi header",
            offset: 4,
            reason: format!("zero dimension in {h}x{w}x{c}"),
        });
    }
    let count = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(c))
        .ok_or_else(|| Error::Malformed {
            what: "hsi header",
            offset: 4,
            reason: "dimension product overflows".into(),
        })?;
    let expected = HSI_HEADER_LEN + count * 4;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            offset: bytes.len(),
            expected,
            found: bytes.len(),
        });
    }
    let n = h * w;
    let mut data = vec![0.0; count];
    for b in 0..c {
        for p in 0..n {
            let off = HSI_HEADER_LEN + (b * n + p) * 4;
            let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::NonFinite { offset: off });
            }
            data[p * c + b] = v as f64;
        }
    }
    HsiCube::new(h, w, c, data)
}

pub fn load_cube(path: impl AsRef<Path>) -> Result<HsiCube> {
    let path = path.as_ref();
    decode_cube(&fs::read(path).map_err(io_err(path))?)
}

pub fn save_cube(cube: &HsiCube, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_cube(cube)?).map_err(io_err(path))
}

/// Parses a binary PGM, returning `(height, width, pixels)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        let found = String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned();
        return Err(Error::BadMagic {
            expected: "P5".into(),
            found,
        });
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // skip whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Malformed {
                what: "pgm header",
                offset: pos,
                reason: "expected an unsigned integer".into(),
            });
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|e| Error::Malformed {
                what: "pgm header",
                offset: start,
                reason: format!("{e}"),
            })?;
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 || maxval == 0 || maxval > 255 {
        return Err(Error::Malformed {
            what: "pgm header",
            offset: pos,
            reason: format!("unsupported geometry {width}x{height} maxval {maxval}"),
        });
    }
    // exactly one whitespace byte separates the header from the raster
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Malformed {
            what: "pgm header",
            offset: pos,
            reason: "missing whitespace before raster".into(),
        });
    }
    pos += 1;
    let expected = pos + width * height;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            offset: bytes.len(),
            expected,
            found: bytes.len(),
        });
    }
    Ok((height, width, bytes[pos..expected].to_vec()))
}

pub fn encode_pgm(height: usize, width: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<GroundTruth> {
    let path = path.as_ref();
    let (h, w, px) = decode_pgm(&fs::read(path).map_err(io_err(path))?)?;
    GroundTruth::new(h, w, px.into_iter().map(|v| v != 0).collect())
}

pub fn save_mask(gt: &GroundTruth, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let px: Vec<u8> = gt.mask().iter().map(|&m| if m { 255 } else { 0 }).collect();
    fs::write(path, encode_pgm(gt.height(), gt.width(), &px)).map_err(io_err(path))
}

/// Min-max stretch of the scores to 8-bit gray levels (constant map → all 0).
pub fn quantize_map(map: &AnomalyMap) -> Vec<u8> {
    let s = map.scores();
    let lo = s.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    s.iter()
        .map(|&v| {
            if range > 0.0 {
                (255.0 * (v - lo) / range).floor().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        })
        .collect()
}

pub fn save_map_pgm(map: &AnomalyMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_pgm(map.height(), map.width(), &quantize_map(map));
    fs::write(path, bytes).map_err(io_err(path))
}

fn write_grid<T: std::fmt::Display>(width: usize, values: &[T]) -> String {
    let mut out = String::new();
    for row in values.chunks(width) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

pub fn map_to_csv(map: &AnomalyMap) -> String {
    write_grid(map.width(), map.scores())
}

pub fn save_map_csv(map: &AnomalyMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, map_to_csv(map)).map_err(io_err(path))
}

pub fn parse_map_csv(text: &str) -> Result<AnomalyMap> {
    let mut scores = Vec::new();
    let mut width = None;
    let mut height = 0;
    let mut offset = 0;
    for line in text.lines() {
        let line_len = line.len() + 1;
        if line.trim().is_empty() {
            offset += line_len;
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Malformed {
                what: "map csv",
                offset,
                reason: e.to_string(),
            })?;
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(Error::Malformed {
                    what: "map csv",
                    offset,
                    reason: format!("row has {} columns, expected {w}", row.len()),
                })
            }
            _ => {}
        }
        scores.extend(row);
        height += 1;
        offset += line_len;
    }
    AnomalyMap::new(height, width.unwrap_or(0), scores)
}

pub fn load_map_csv(path: impl AsRef<Path>) -> Result<AnomalyMap> {
    let path = path.as_ref();
    parse_map_csv(&fs::read_to_string(path).map_err(io_err(path))?)
}

pub fn labels_to_csv(labels: &SegmentLabels) -> String {
    write_grid(labels.width(), labels.labels())
}

pub fn save_labels_csv(labels: &SegmentLabels, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, labels_to_csv(labels)).map_err(io_err(path))
}

/// Writes `contents` to `path`, creating parent directories.
pub fn write_text(path: impl AsRef<Path>, contents: &str) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(contents.as_bytes()).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cube_roundtrip_small() {
        let cube = HsiCube::new(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let back = decode_cube(&encode_cube(&cube).unwrap()).unwrap();
        assert_eq!(back, cube);
    }

    #[test]
    fn payload_is_band_sequential() {
        let cube = HsiCube::new(1, 2, 2, vec![1.0, 10.0, 2.0, 20.0]).unwrap();
        let bytes = encode_cube(&cube).unwrap();
        let vals: Vec<f32> = bytes[16..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        assert_eq!(vals, vec![1.0, 2.0, 10.0, 20.0]);
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode_cube(&HsiCube::zeros(1, 1, 1).unwrap()).unwrap();
        bytes[3] = b'X';
        assert!(matches!(decode_cube(&bytes), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn truncated_payload() {
        let bytes = encode_cube(&HsiCube::zeros(2, 2, 1).unwrap()).unwrap();
        match decode_cube(&bytes[..bytes.len() - 1]) {
            Err(Error::Truncated { expected, .. }) => assert_eq!(expected, 32),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_finite_names_offset() {
        let mut bytes = encode_cube(&HsiCube::zeros(1, 2, 1).unwrap()).unwrap();
        bytes[20..24].copy_from_slice(&f32::NAN.to_le_bytes());
        match decode_cube(&bytes) {
            Err(Error::NonFinite { offset }) => assert_eq!(offset, 20),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn pgm_quantization() {
        let map = AnomalyMap::new(1, 4, vec![0.0, 1.0, 2.0, 4.0]).unwrap();
        assert_eq!(quantize_map(&map), vec![0, 63, 127, 255]);
        let flat = AnomalyMap::new(2, 2, vec![7.0; 4]).unwrap();
        assert_eq!(quantize_map(&flat), vec![0; 4]);
    }

    #[test]
    fn pgm_roundtrip_and_nonzero_is_anomaly() {
        let bytes = encode_pgm(1, 3, &[0, 1, 255]);
        let (h, w, px) = decode_pgm(&bytes).unwrap();
        assert_eq!((h, w, px), (1, 3, vec![0, 1, 255]));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gt.pgm");
        std::fs::write(&path, &bytes).unwrap();
        assert_eq!(load_mask(&path).unwrap().mask(), &[false, true, true]);
    }

    #[test]
    fn pgm_header_with_comment() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[3, 0]);
        assert_eq!(decode_pgm(&bytes).unwrap(), (1, 2, vec![3, 0]));
    }

    #[test]
    fn map_csv_roundtrip_full_precision() {
        let map = AnomalyMap::new(2, 2, vec![0.1, 1.0 / 3.0, 2.5e-17, 12.0]).unwrap();
        let csv = map_to_csv(&map);
        assert_eq!(csv.lines().count(), 2);
        assert_eq!(parse_map_csv(&csv).unwrap(), map);
    }

    #[test]
    fn io_error_carries_path() {
        let err = load_cube("/nonexistent/scene.hsi").unwrap_err();
        assert!(err.to_string().contains("/nonexistent/scene.hsi"));
    }
}
