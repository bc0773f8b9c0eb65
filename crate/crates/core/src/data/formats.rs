//! Readers for the on-disk digit formats: IDX (MNIST), LIBSVM text (USPS)
//! and MATLAB level-5 `.mat` (SVHN).

use std::io::Read;
use std::path::{Path, PathBuf};

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use image::imageops::{self, FilterType};
use image::GrayImage;
use ndarray::{Array4, Axis};

use crate::{Error, Result};

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

/// Finds `file` (optionally compressed) under one of `subdirs` of `root`.
pub(super) fn locate(root: &Path, subdirs: &[&str], file: &str) -> Result<PathBuf> {
    for dir in subdirs {
        for suffix in ["", ".gz", ".bz2"] {
            let candidate = root.join(dir).join(format!("{file}{suffix}"));
            if candidate.is_file() {
                return Ok(candidate);
            }
        }
    }
    Err(Error::ingest(
        root.join(subdirs[0]).join(file),
        "file not found (also looked for .gz/.bz2 variants and alternative directories)",
    ))
}

/// Reads a file, transparently inflating gzip or bzip2 content.
pub(super) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let inflated = if raw.starts_with(&[0x1f, 0x8b]) {
        flate2::read::GzDecoder::new(raw.as_slice()).read_to_end(&mut out)
    } else if raw.starts_with(b"BZh") {
        bzip2::read::BzDecoder::new(raw.as_slice()).read_to_end(&mut out)
    } else {
        return Ok(raw);
    };
    inflated.map_err(|e| Error::ingest(path, format!("decompression failed: {e}")))?;
    Ok(out)
}

fn idx_header(bytes: &[u8], path: &Path, magic: u32, dims: usize) -> Result<Vec<usize>> {
    let header = 4 + 4 * dims;
    if bytes.len() < header {
        return Err(Error::ingest(path, "truncated IDX header"));
    }
    let found = BigEndian::read_u32(&bytes[..4]);
    if found != magic {
        return Err(Error::ingest(
            path,
            format!("bad IDX magic {found:#010x}, expected {magic:#010x}"),
        ));
    }
    let shape: Vec<usize> = (0..dims)
        .map(|i| BigEndian::read_u32(&bytes[4 + 4 * i..]) as usize)
        .collect();
    let expected = header + shape.iter().product::<usize>();
    if bytes.len() != expected {
        return Err(Error::ingest(
            path,
            format!(
                "IDX payload is {} bytes, header implies {}",
                bytes.len(),
                expected
            ),
        ));
    }
    Ok(shape)
}

/// Grayscale images as `(n, 1, rows, cols)`.
pub(super) fn read_idx_images(path: &Path) -> Result<Array4<u8>> {
    let bytes = read_bytes(path)?;
    let shape = idx_header(&bytes, path, IDX_IMAGES, 3)?;
    let data = bytes[16..].to_vec();
    Array4::from_shape_vec((shape[0], 1, shape[1], shape[2]), data)
        .map_err(|e| Error::ingest(path, e.to_string()))
}

pub(super) fn read_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = read_bytes(path)?;
    idx_header(&bytes, path, IDX_LABELS, 1)?;
    let labels: Vec<usize> = bytes[8..].iter().map(|&b| usize::from(b)).collect();
    if let Some(bad) = labels.iter().find(|&&l| l >= 10) {
        return Err(Error::ingest(path, format!("label {bad} is not a digit")));
    }
    Ok(labels)
}

/// USPS in LIBSVM format: `label idx:value ...`, labels 1..=10 for digits 0..=9,
/// 256 features in `[-1, 1]` describing a 16x16 image.
pub(super) fn read_usps(path: &Path) -> Result<(Array4<u8>, Vec<usize>)> {
    const SIDE: usize = 16;
    let bytes = read_bytes(path)?;
    let text = String::from_utf8(bytes).map_err(|_| Error::ingest(path, "not UTF-8 text"))?;
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = |what: &str| Error::ingest(path, format!("line {}: {what}", lineno + 1));
        let mut fields = line.split_whitespace();
        let label: f64 = fields
            .next()
            .unwrap_or("")
            .parse()
            .map_err(|_| bad("bad label"))?;
        let label = label.round() as i64 - 1;
        if !(0..10).contains(&label) {
            return Err(bad("label outside 1..=10"));
        }
        // Absent features are zeros in [-1, 1] space, i.e. mid-gray.
        let mut image = [0.0f64; SIDE * SIDE];
        for field in fields {
            let (idx, value) = field
                .split_once(':')
                .ok_or_else(|| bad("feature without `:`"))?;
            let idx: usize = idx.parse().map_err(|_| bad("bad feature index"))?;
            let value: f64 = value.parse().map_err(|_| bad("bad feature value"))?;
            if idx == 0 || idx > SIDE * SIDE {
                return Err(bad("feature index outside 1..=256"));
            }
            image[idx - 1] = value;
        }
        pixels.extend(
            image
                .iter()
                .map(|v| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8),
        );
        labels.push(label as usize);
    }
    if labels.is_empty() {
        return Err(Error::ingest(path, "no samples"));
    }
    let images = Array4::from_shape_vec((labels.len(), 1, SIDE, SIDE), pixels)
        .map_err(|e| Error::ingest(path, e.to_string()))?;
    Ok((images, labels))
}

/// SVHN `{X: uint8[32,32,3,N], y: [N,1]}` with digit 0 stored as label 10.
pub(super) fn read_svhn(path: &Path) -> Result<(Array4<u8>, Vec<usize>)> {
    let bytes = read_bytes(path)?;
    let arrays = read_mat(&bytes).map_err(|reason| Error::ingest(path, reason))?;
    let find = |name: &str| {
        arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::ingest(path, format!("variable `{name}` not found")))
    };
    let x = find("X")?;
    let y = find("y")?;
    let (h, w, c, n) = match x.dims[..] {
        [h, w, c, n] => (h, w, c, n),
        [h, w, c] => (h, w, c, 1),
        _ => {
            return Err(Error::ingest(
                path,
                format!("X has shape {:?}, expected 4-D", x.dims),
            ))
        }
    };
    if c != 3 {
        return Err(Error::ingest(
            path,
            format!("X has {c} channels, expected 3"),
        ));
    }
    let MatData::U8(data) = &x.data else {
        return Err(Error::ingest(path, "X is not uint8"));
    };
    let labels: Vec<usize> = y
        .data
        .to_f64()
        .into_iter()
        .map(|v| match v.round() as i64 {
            10 => Ok(0),
            d @ 0..=9 => Ok(d as usize),
            d => Err(Error::ingest(path, format!("label {d} is not a digit"))),
        })
        .collect::<Result<_>>()?;
    if labels.len() != n {
        return Err(Error::ingest(
            path,
            format!("{} labels for {n} images", labels.len()),
        ));
    }
    // MATLAB stores column-major: X(h, w, c, n) sits at h + H*(w + W*(c + C*n)).
    let images = Array4::from_shape_fn((n, c, h, w), |(i, ch, y, x)| {
        data[y + h * (x + w * (ch + c * i))]
    });
    Ok((images, labels))
}

/// Resizes every channel of every image to `size x size` with a bilinear filter.
pub(super) fn resize_batch(images: &Array4<u8>, size: usize) -> Array4<u8> {
    let (n, c, h, w) = images.dim();
    if h == size && w == size {
        return images.clone();
    }
    let mut out = Array4::<u8>::zeros((n, c, size, size));
    for (src, mut dst) in images.outer_iter().zip(out.outer_iter_mut()) {
        for (plane, mut target) in src.axis_iter(Axis(0)).zip(dst.axis_iter_mut(Axis(0))) {
            let buf: Vec<u8> = plane.iter().copied().collect();
            let img =
                GrayImage::from_raw(w as u32, h as u32, buf).expect("buffer matches dimensions");
            let resized = imageops::resize(&img, size as u32, size as u32, FilterType::Triangle);
            for (t, v) in target.iter_mut().zip(resized.into_raw()) {
                *t = v;
            }
        }
    }
    out
}

// ---- MATLAB level-5 ----

const MI_INT8: u32 = 1;
const MI_UINT8: u32 = 2;
const MI_INT16: u32 = 3;
const MI_UINT16: u32 = 4;
const MI_INT32: u32 = 5;
const MI_UINT32: u32 = 6;
const MI_SINGLE: u32 = 7;
const MI_DOUBLE: u32 = 9;
const MI_INT64: u32 = 12;
const MI_UINT64: u32 = 13;
const MI_MATRIX: u32 = 14;
const MI_COMPRESSED: u32 = 15;

/// Numeric classes we can read (char, cell, struct, object and sparse are skipped).
const NUMERIC_CLASSES: std::ops::RangeInclusive<u8> = 6..=15;

#[derive(Debug, Clone, PartialEq)]
pub(super) enum MatData {
    U8(Vec<u8>),
    F64(Vec<f64>),
}

impl MatData {
    pub(super) fn to_f64(&self) -> Vec<f64> {
        match self {
            MatData::U8(v) => v.iter().map(|&b| f64::from(b)).collect(),
            MatData::F64(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub(super) struct MatArray {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: MatData,
}

#[derive(Clone, Copy)]
enum Endian {
    Little,
    Big,
}

impl Endian {
    fn u32(self, b: &[u8]) -> u32 {
        match self {
            Endian::Little => LittleEndian::read_u32(b),
            Endian::Big => BigEndian::read_u32(b),
        }
    }
}

struct Element<'a> {
    kind: u32,
    data: &'a [u8],
}

/// Reads one tagged element starting at `pos`; returns it and the offset after it.
fn element(
    bytes: &[u8],
    pos: usize,
    endian: Endian,
) -> std::result::Result<(Element<'_>, usize), String> {
    if pos + 8 > bytes.len() {
        return Err(format!("truncated element tag at byte {pos}"));
    }
    let first = endian.u32(&bytes[pos..]);
    if first >> 16 != 0 {
        // Small data element: type and size packed into one word, data in the next four bytes.
        let kind = first & 0xffff;
        let len = (first >> 16) as usize;
        if len > 4 {
            return Err(format!("small element claims {len} bytes"));
        }
        return Ok((
            Element {
                kind,
                data: &bytes[pos + 4..pos + 4 + len],
            },
            pos + 8,
        ));
    }
    let len = endian.u32(&bytes[pos + 4..]) as usize;
    let start = pos + 8;
    let end = start
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or("element runs past end of file")?;
    let next = if first == MI_COMPRESSED {
        end
    } else {
        start + len.div_ceil(8) * 8
    };
    Ok((
        Element {
            kind: first,
            data: &bytes[start..end],
        },
        next.min(bytes.len()),
    ))
}

fn numeric(el: &Element<'_>, endian: Endian) -> std::result::Result<MatData, String> {
    let d = el.data;
    let width = match el.kind {
        MI_INT8 | MI_UINT8 => 1,
        MI_INT16 | MI_UINT16 => 2,
        MI_INT32 | MI_UINT32 | MI_SINGLE => 4,
        MI_DOUBLE | MI_INT64 | MI_UINT64 => 8,
        other => return Err(format!("unsupported numeric data type {other}")),
    };
    if !d.len().is_multiple_of(width) {
        return Err("numeric payload not a multiple of its element width".into());
    }
    if el.kind == MI_UINT8 {
        return Ok(MatData::U8(d.to_vec()));
    }
    let chunks = d.chunks_exact(width);
    let values = match (el.kind, endian) {
        (MI_INT8, _) => chunks.map(|b| f64::from(b[0] as i8)).collect(),
        (MI_INT16, Endian::Little) => chunks
            .map(|b| f64::from(LittleEndian::read_i16(b)))
            .collect(),
        (MI_INT16, Endian::Big) => chunks.map(|b| f64::from(BigEndian::read_i16(b))).collect(),
        (MI_UINT16, Endian::Little) => chunks
            .map(|b| f64::from(LittleEndian::read_u16(b)))
            .collect(),
        (MI_UINT16, Endian::Big) => chunks.map(|b| f64::from(BigEndian::read_u16(b))).collect(),
        (MI_INT32, Endian::Little) => chunks
            .map(|b| f64::from(LittleEndian::read_i32(b)))
            .collect(),
        (MI_INT32, Endian::Big) => chunks.map(|b| f64::from(BigEndian::read_i32(b))).collect(),
        (MI_UINT32, _) => chunks.map(|b| f64::from(endian.u32(b))).collect(),
        (MI_SINGLE, Endian::Little) => chunks
            .map(|b| f64::from(LittleEndian::read_f32(b)))
            .collect(),
        (MI_SINGLE, Endian::Big) => chunks.map(|b| f64::from(BigEndian::read_f32(b))).collect(),
        (MI_DOUBLE, Endian::Little) => chunks.map(LittleEndian::read_f64).collect(),
        (MI_DOUBLE, Endian::Big) => chunks.map(BigEndian::read_f64).collect(),
        (MI_INT64, Endian::Little) => chunks.map(|b| LittleEndian::read_i64(b) as f64).collect(),
        (MI_INT64, Endian::Big) => chunks.map(|b| BigEndian::read_i64(b) as f64).collect(),
        (MI_UINT64, Endian::Little) => chunks.map(|b| LittleEndian::read_u64(b) as f64).collect(),
        (MI_UINT64, Endian::Big) => chunks.map(|b| BigEndian::read_u64(b) as f64).collect(),
        _ => unreachable!(),
    };
    Ok(MatData::F64(values))
}

fn matrix(data: &[u8], endian: Endian) -> std::result::Result<Option<MatArray>, String> {
    let (flags, pos) = element(data, 0, endian)?;
    if flags.kind != MI_UINT32 || flags.data.len() < 4 {
        return Err("malformed array flags".into());
    }
    let class = (endian.u32(flags.data) & 0xff) as u8;
    if !NUMERIC_CLASSES.contains(&class) {
        return Ok(None);
    }
    let (dims_el, pos) = element(data, pos, endian)?;
    let dims = match numeric(&dims_el, endian)? {
        MatData::F64(v) => v.into_iter().map(|d| d as usize).collect::<Vec<_>>(),
        MatData::U8(v) => v.into_iter().map(usize::from).collect(),
    };
    let (name_el, pos) = element(data, pos, endian)?;
    let name = String::from_utf8_lossy(name_el.data).into_owned();
    let (real, _) = element(data, pos, endian)?;
    let values = numeric(&real, endian)?;
    let count = match &values {
        MatData::U8(v) => v.len(),
        MatData::F64(v) => v.len(),
    };
    if count != dims.iter().product::<usize>() {
        return Err(format!(
            "`{name}` holds {count} values but has dims {dims:?}"
        ));
    }
    Ok(Some(MatArray {
        name,
        dims,
        data: values,
    }))
}

fn elements(
    bytes: &[u8],
    mut pos: usize,
    endian: Endian,
    out: &mut Vec<MatArray>,
) -> std::result::Result<(), String> {
    while pos + 8 <= bytes.len() {
        let (el, next) = element(bytes, pos, endian)?;
        match el.kind {
            MI_COMPRESSED => {
                let mut inflated = Vec::new();
                flate2::read::ZlibDecoder::new(el.data)
                    .read_to_end(&mut inflated)
                    .map_err(|e| format!("cannot inflate compressed element: {e}"))?;
                elements(&inflated, 0, endian, out)?;
            }
            MI_MATRIX => {
                if let Some(array) = matrix(el.data, endian)? {
                    out.push(array);
                }
            }
            _ => {}
        }
        pos = next;
    }
    Ok(())
}

/// Parses every numeric variable in a level-5 MAT file.
pub(super) fn read_mat(bytes: &[u8]) -> std::result::Result<Vec<MatArray>, String> {
    if bytes.len() < 128 {
        return Err("too short for a MAT-file header".into());
    }
    if bytes[..128].windows(10).any(|w| w == b"MATLAB 7.3") {
        return Err("MAT v7.3 (HDF5) files are not supported; re-save with -v7".into());
    }
    let endian = match &bytes[126..128] {
        b"IM" => Endian::Little,
        b"MI" => Endian::Big,
        _ => return Err("missing MAT-file endian indicator".into()),
    };
    let mut out = Vec::new();
    elements(bytes, 128, endian, &mut out)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &Path, name: &str, bytes: &[u8]) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, bytes).unwrap();
        p
    }

    fn idx(magic: u32, dims: &[u32], payload: &[u8]) -> Vec<u8> {
        let mut v = magic.to_be_bytes().to_vec();
        for d in dims {
            v.extend(d.to_be_bytes());
        }
        v.extend(payload);
        v
    }

    #[test]
    fn idx_round_trip_plain_and_gzip() {
        let dir = tempfile::tempdir().unwrap();
        let payload: Vec<u8> = (0..2 * 3 * 4).map(|i| i as u8).collect();
        let bytes = idx(IDX_IMAGES, &[2, 3, 4], &payload);
        let plain = write(dir.path(), "imgs", &bytes);
        let mut gz = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
        gz.write_all(&bytes).unwrap();
        let zipped = write(dir.path(), "imgs.gz", &gz.finish().unwrap());
        let a = read_idx_images(&plain).unwrap();
        assert_eq!(a.dim(), (2, 1, 3, 4));
        assert_eq!(a[[1, 0, 2, 3]], 23);
        assert_eq!(a, read_idx_images(&zipped).unwrap());
    }

    #[test]
    fn idx_errors_name_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let wrong_magic = write(dir.path(), "labels", &idx(IDX_IMAGES, &[1], &[3]));
        let err = read_idx_labels(&wrong_magic).unwrap_err().to_string();
        assert!(err.contains("labels") && err.contains("magic"), "{err}");
        let short = write(dir.path(), "short", &idx(IDX_LABELS, &[4], &[1, 2]));
        assert!(matches!(read_idx_labels(&short), Err(Error::Ingest { .. })));
        assert_eq!(
            read_idx_labels(&write(dir.path(), "ok", &idx(IDX_LABELS, &[2], &[7, 0]))).unwrap(),
            vec![7, 0]
        );
    }

    #[test]
    fn usps_libsvm_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(dir.path(), "usps", b"1 1:-1 2:1 256:0.0\n10 3:-1\n");
        let (imgs, labels) = read_usps(&path).unwrap();
        assert_eq!(labels, vec![0, 9]);
        assert_eq!(imgs.dim(), (2, 1, 16, 16));
        assert_eq!(imgs[[0, 0, 0, 0]], 0);
        assert_eq!(imgs[[0, 0, 0, 1]], 255);
        assert_eq!(imgs[[0, 0, 0, 2]], 128);
        assert_eq!(imgs[[1, 0, 0, 2]], 0);
        let bad = write(dir.path(), "bad", b"11 1:0\n");
        assert!(read_usps(&bad).is_err());
    }

    #[test]
    fn usps_bzip2() {
        let dir = tempfile::tempdir().unwrap();
        let mut enc = bzip2::write::BzEncoder::new(Vec::new(), bzip2::Compression::default());
        enc.write_all(b"3 5:1\n").unwrap();
        let path = write(dir.path(), "usps.bz2", &enc.finish().unwrap());
        let (imgs, labels) = read_usps(&path).unwrap();
        assert_eq!(labels, vec![2]);
        assert_eq!(imgs[[0, 0, 0, 4]], 255);
    }

    #[test]
    fn locate_reports_missing_path() {
        let dir = tempfile::tempdir().unwrap();
        let err = locate(dir.path(), &["mnist"], "train-images-idx3-ubyte").unwrap_err();
        assert!(err.to_string().contains("train-images-idx3-ubyte"));
    }

    #[test]
    fn resize_keeps_constant_images_constant() {
        let imgs = Array4::from_elem((2, 1, 28, 28), 77u8);
        let out = resize_batch(&imgs, 32);
        assert_eq!(out.dim(), (2, 1, 32, 32));
        assert!(out.iter().all(|&v| v == 77));
        assert_eq!(resize_batch(&out, 32), out);
    }

    #[test]
    fn svhn_mat_fixtures() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
        for file in ["svhn_tiny.mat", "svhn_tiny_z.mat"] {
            let (imgs, labels) = read_svhn(&dir.join(file)).unwrap();
            assert_eq!(labels, vec![0, 1, 2, 9, 0], "{file}");
            assert_eq!(imgs.dim(), (5, 3, 32, 32));
            for (n, c, y, x) in [(0, 0, 0, 0), (4, 2, 31, 3), (2, 1, 7, 30)] {
                assert_eq!(
                    usize::from(imgs[[n, c, y, x]]),
                    (y + 2 * x + 5 * c + 7 * n) % 256,
                    "{file}"
                );
            }
        }
    }

    #[test]
    fn mat_rejects_garbage() {
        assert!(read_mat(&[0u8; 64]).is_err());
        let mut header = vec![b' '; 128];
        header[126..].copy_from_slice(b"XX");
        assert!(read_mat(&header).is_err());
    }
}
