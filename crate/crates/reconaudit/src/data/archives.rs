//! Benchmark archive ingestion: IDX (MNIST family), CIFAR-10 binary tarball,
//! and SVHN's MAT container.
//!
//! Archives are fetched into the cache on first use (via `curl` or `wget` if
//! one is on PATH) and parsed into the normalized representation. Parsers are
//! exercised offline against fixture bytes, so CI never downloads anything.

use super::{DatasetName, DatasetSpec, Split};
use crate::{Error, Result};
use flate2::read::{GzDecoder, ZlibDecoder};
use std::io::Read;
use std::path::Path;
use std::process::Command;

struct Source {
    file: &'static str,
    url: &'static str,
}

fn sources(name: DatasetName, split: Split) -> Vec<Source> {
    const MNIST_BASE: &str = "https://ossci-datasets.s3.amazonaws.com/mnist";
    const FASHION_BASE: &str = "http://fashion-mnist.s3-website.eu-central-1.amazonaws.com";
    match (name, split) {
        (DatasetName::Mnist, Split::Train) => vec![
            Source { file: "train-images-idx3-ubyte.gz", url: MNIST_BASE },
            Source { file: "train-labels-idx1-ubyte.gz", url: MNIST_BASE },
        ],
        (DatasetName::Mnist, Split::Test) => vec![
            Source { file: "t10k-images-idx3-ubyte.gz", url: MNIST_BASE },
            Source { file: "t10k-labels-idx1-ubyte.gz", url: MNIST_BASE },
        ],
        (DatasetName::FashionMnist, Split::Train) => vec![
            Source { file: "train-images-idx3-ubyte.gz", url: FASHION_BASE },
            Source { file: "train-labels-idx1-ubyte.gz", url: FASHION_BASE },
        ],
        (DatasetName::FashionMnist, Split::Test) => vec![
            Source { file: "t10k-images-idx3-ubyte.gz", url: FASHION_BASE },
            Source { file: "t10k-labels-idx1-ubyte.gz", url: FASHION_BASE },
        ],
        (DatasetName::Cifar10, _) => vec![Source {
            file: "cifar-10-binary.tar.gz",
            url: "https://www.cs.toronto.edu/~kriz",
        }],
        (DatasetName::Svhn, Split::Train) => vec![Source {
            file: "train_32x32.mat",
            url: "http://ufldl.stanford.edu/housenumbers",
        }],
        (DatasetName::Svhn, Split::Test) => vec![Source {
            file: "test_32x32.mat",
            url: "http://ufldl.stanford.edu/housenumbers",
        }],
        (DatasetName::SyntheticShapes, _) => vec![],
    }
}

fn data_err(spec: &DatasetSpec, message: impl Into<String>) -> Error {
    Error::Data {
        dataset: spec.name.to_string(),
        message: message.into(),
    }
}

/// Download `file` into `dir` when absent, trying curl then wget.
pub fn fetch_if_missing(dir: &Path, file: &str, base_url: &str, dataset: &str) -> Result<()> {
    let target = dir.join(file);
    if target.exists() {
        return Ok(());
    }
    std::fs::create_dir_all(dir)?;
    let url = format!("{base_url}/{file}");
    let tmp = dir.join(format!("{file}.partial"));
    let attempts: [(&str, Vec<&str>); 2] = [
        ("curl", vec!["--fail", "-L", "-sS", "-o", tmp.to_str().unwrap(), &url]),
        ("wget", vec!["-q", "-O", tmp.to_str().unwrap(), &url]),
    ];
    for (bin, args) in attempts {
        match Command::new(bin).args(&args).status() {
            Ok(status) if status.success() => {
                std::fs::rename(&tmp, &target)?;
                return Ok(());
            }
            _ => {
                let _ = std::fs::remove_file(&tmp);
            }
        }
    }
    Err(Error::Data {
        dataset: dataset.to_string(),
        message: format!(
            "could not download {url}; place the file at {} and retry",
            target.display()
        ),
    })
}

/// Parse raw archives for `spec` into (pixels, labels), downloading first if
/// needed.
pub(super) fn ingest(spec: &DatasetSpec, dir: &Path) -> Result<(Vec<u8>, Vec<u8>)> {
    for src in sources(spec.name, spec.split) {
        fetch_if_missing(dir, src.file, src.url, &spec.name.to_string())?;
    }
    match spec.name {
        DatasetName::Mnist | DatasetName::FashionMnist => {
            let (imgs, labs) = match spec.split {
                Split::Train => ("train-images-idx3-ubyte.gz", "train-labels-idx1-ubyte.gz"),
                Split::Test => ("t10k-images-idx3-ubyte.gz", "t10k-labels-idx1-ubyte.gz"),
            };
            let pixels = parse_idx_images(&gunzip(&std::fs::read(dir.join(imgs))?)?, spec)?;
            let labels = parse_idx_labels(&gunzip(&std::fs::read(dir.join(labs))?)?, spec)?;
            Ok((pixels, labels))
        }
        DatasetName::Cifar10 => {
            let tarball = gunzip(&std::fs::read(dir.join("cifar-10-binary.tar.gz"))?)?;
            parse_cifar_tar(&tarball, spec)
        }
        DatasetName::Svhn => {
            let file = match spec.split {
                Split::Train => "train_32x32.mat",
                Split::Test => "test_32x32.mat",
            };
            parse_svhn_mat(&std::fs::read(dir.join(file))?, spec)
        }
        DatasetName::SyntheticShapes => unreachable!("synthetic data never hits archives"),
    }
}

fn gunzip(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    GzDecoder::new(bytes).read_to_end(&mut out)?;
    Ok(out)
}

// ---- IDX ----------------------------------------------------------------

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().unwrap())
}

pub(super) fn parse_idx_images(bytes: &[u8], spec: &DatasetSpec) -> Result<Vec<u8>> {
    if bytes.len() < 16 || be_u32(bytes, 0) != 0x0000_0803 {
        return Err(data_err(spec, "bad IDX image magic"));
    }
    let n = be_u32(bytes, 4) as usize;
    let rows = be_u32(bytes, 8) as usize;
    let cols = be_u32(bytes, 12) as usize;
    let (_, h, w) = spec.image_shape;
    if rows != h || cols != w {
        return Err(data_err(spec, format!("IDX images are {rows}x{cols}, expected {h}x{w}")));
    }
    let body = &bytes[16..];
    if body.len() != n * rows * cols {
        return Err(data_err(spec, "IDX image payload truncated"));
    }
    Ok(body.to_vec())
}

pub(super) fn parse_idx_labels(bytes: &[u8], spec: &DatasetSpec) -> Result<Vec<u8>> {
    if bytes.len() < 8 || be_u32(bytes, 0) != 0x0000_0801 {
        return Err(data_err(spec, "bad IDX label magic"));
    }
    let n = be_u32(bytes, 4) as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(data_err(spec, "IDX label payload truncated"));
    }
    Ok(body.to_vec())
}

// ---- CIFAR-10 -----------------------------------------------------------

/// Minimal ustar walk: 512-byte headers, size in octal at offset 124.
fn tar_entries(bytes: &[u8]) -> Vec<(String, &[u8])> {
    let mut out = Vec::new();
    let mut off = 0usize;
    while off + 512 <= bytes.len() {
        let header = &bytes[off..off + 512];
        if header.iter().all(|&b| b == 0) {
            break;
        }
        let name_end = header[..100].iter().position(|&b| b == 0).unwrap_or(100);
        let name = String::from_utf8_lossy(&header[..name_end]).into_owned();
        let size_field = &header[124..136];
        let size_str = String::from_utf8_lossy(size_field);
        let size = usize::from_str_radix(size_str.trim_matches(['\0', ' ']), 8).unwrap_or(0);
        let start = off + 512;
        if start + size <= bytes.len() {
            out.push((name, &bytes[start..start + size]));
        }
        off = start + size.div_ceil(512) * 512;
    }
    out
}

pub(super) fn parse_cifar_tar(tarball: &[u8], spec: &DatasetSpec) -> Result<(Vec<u8>, Vec<u8>)> {
    let wanted: Vec<String> = match spec.split {
        Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
        Split::Test => vec!["test_batch.bin".to_string()],
    };
    let entries = tar_entries(tarball);
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for want in &wanted {
        let body = entries
            .iter()
            .find(|(name, _)| name.ends_with(want))
            .map(|(_, body)| *body)
            .ok_or_else(|| data_err(spec, format!("{want} missing from tarball")))?;
        const REC: usize = 1 + 3072;
        if body.len() % REC != 0 {
            return Err(data_err(spec, format!("{want} has a partial record")));
        }
        for rec in body.chunks_exact(REC) {
            labels.push(rec[0]);
            pixels.extend_from_slice(&rec[1..]);
        }
    }
    Ok((pixels, labels))
}

// ---- SVHN (MAT level 5) ---------------------------------------------------

const MI_INT8: u32 = 1;
const MI_UINT8: u32 = 2;
const MI_INT32: u32 = 5;
const MI_UINT32: u32 = 6;
const MI_DOUBLE: u32 = 9;
const MI_COMPRESSED: u32 = 15;
const MI_MATRIX: u32 = 14;

struct MatElement {
    ty: u32,
    data: Vec<u8>,
}

/// Read one (possibly small-format) data element at `off`; returns the
/// element and the offset just past its padding.
fn read_element(bytes: &[u8], off: usize) -> Option<(MatElement, usize)> {
    if off + 8 > bytes.len() {
        return None;
    }
    let ty_field = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let small_size = ty_field >> 16;
    if small_size != 0 {
        // small data element: 2-byte type, 2-byte size, 4 bytes of payload
        let ty = ty_field & 0xffff;
        let size = small_size as usize;
        let data = bytes.get(off + 4..off + 4 + size)?.to_vec();
        return Some((MatElement { ty, data }, off + 8));
    }
    let ty = ty_field;
    let size = u32::from_le_bytes(bytes[off + 4..off + 8].try_into().unwrap()) as usize;
    let data = bytes.get(off + 8..off + 8 + size)?.to_vec();
    let padded = size.div_ceil(8) * 8;
    Some((MatElement { ty, data }, off + 8 + padded))
}

struct MatArray {
    dims: Vec<usize>,
    /// Numeric payload widened to f64, column-major as stored.
    values: Vec<f64>,
}

fn parse_matrix(data: &[u8], spec: &DatasetSpec) -> Result<MatArray> {
    // sub-elements: array flags, dimensions, name, real part
    let (_flags, off) = read_element(data, 0).ok_or_else(|| data_err(spec, "MAT: missing flags"))?;
    let (dims_el, off) = read_element(data, off).ok_or_else(|| data_err(spec, "MAT: missing dims"))?;
    if dims_el.ty != MI_INT32 {
        return Err(data_err(spec, "MAT: dimensions not int32"));
    }
    let dims: Vec<usize> = dims_el
        .data
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let (_name, off) = read_element(data, off).ok_or_else(|| data_err(spec, "MAT: missing name"))?;
    let (real, _) = read_element(data, off).ok_or_else(|| data_err(spec, "MAT: missing data"))?;
    let values: Vec<f64> = match real.ty {
        MI_UINT8 => real.data.iter().map(|&b| f64::from(b)).collect(),
        MI_INT8 => real.data.iter().map(|&b| f64::from(b as i8)).collect(),
        MI_INT32 => real
            .data
            .chunks_exact(4)
            .map(|c| f64::from(i32::from_le_bytes(c.try_into().unwrap())))
            .collect(),
        MI_UINT32 => real
            .data
            .chunks_exact(4)
            .map(|c| f64::from(u32::from_le_bytes(c.try_into().unwrap())))
            .collect(),
        MI_DOUBLE => real
            .data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        other => return Err(data_err(spec, format!("MAT: unsupported element type {other}"))),
    };
    Ok(MatArray { dims, values })
}

pub(super) fn parse_svhn_mat(bytes: &[u8], spec: &DatasetSpec) -> Result<(Vec<u8>, Vec<u8>)> {
    if bytes.len() < 128 {
        return Err(data_err(spec, "MAT file shorter than its header"));
    }
    let mut arrays: Vec<MatArray> = Vec::new();
    let mut off = 128usize;
    while let Some((el, next)) = read_element(bytes, off) {
        let payload = match el.ty {
            MI_COMPRESSED => {
                let mut out = Vec::new();
                ZlibDecoder::new(el.data.as_slice())
                    .read_to_end(&mut out)
                    .map_err(|e| data_err(spec, format!("MAT: zlib: {e}")))?;
                out
            }
            MI_MATRIX => el.data.clone(),
            _ => {
                off = next;
                continue;
            }
        };
        let matrix_data = if el.ty == MI_COMPRESSED {
            let (inner, _) = read_element(&payload, 0)
                .ok_or_else(|| data_err(spec, "MAT: empty compressed element"))?;
            if inner.ty != MI_MATRIX {
                off = next;
                continue;
            }
            inner.data
        } else {
            payload
        };
        arrays.push(parse_matrix(&matrix_data, spec)?);
        off = next;
    }

    let x = arrays
        .iter()
        .find(|a| a.dims.len() == 4)
        .ok_or_else(|| data_err(spec, "MAT: no 4-d image array found"))?;
    let y = arrays
        .iter()
        .find(|a| a.dims.len() == 2 && a.dims.iter().product::<usize>() == a.dims[0].max(a.dims[1]))
        .ok_or_else(|| data_err(spec, "MAT: no label vector found"))?;

    let (h, w, c, n) = (x.dims[0], x.dims[1], x.dims[2], x.dims[3]);
    let (sc, sh, sw) = spec.image_shape;
    if (c, h, w) != (sc, sh, sw) {
        return Err(data_err(spec, format!("MAT images are {c}x{h}x{w}, expected {sc}x{sh}x{sw}")));
    }
    if y.values.len() != n {
        return Err(data_err(spec, "MAT label count does not match images"));
    }

    // column major [h, w, c, n] -> row major [n, c, h, w]
    let mut pixels = vec![0u8; n * c * h * w];
    for ni in 0..n {
        for ci in 0..c {
            for hi in 0..h {
                for wi in 0..w {
                    let src = hi + h * (wi + w * (ci + c * ni));
                    let dst = ((ni * c + ci) * h + hi) * w + wi;
                    pixels[dst] = x.values[src] as u8;
                }
            }
        }
    }
    // SVHN labels digit 0 as 10
    let labels: Vec<u8> = y.values.iter().map(|&v| if v as u8 == 10 { 0 } else { v as u8 }).collect();
    Ok((pixels, labels))
}
