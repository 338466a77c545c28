//! Minimal NPY reader/writer for 2-D float arrays.
//!
//! Writes format version 1.0, little-endian `<f4`, C order, header padded to
//! a multiple of 64 bytes. Reads `<f4` and `<f8` from versions 1.0–3.0.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

const MAGIC: &[u8; 6] = b"\x93NUMPY";

fn header_text(rows: usize, cols: usize) -> Vec<u8> {
    let dict = format!("{{'descr': '<f4', 'fortran_order': False, 'shape': ({rows}, {cols}), }}");
    // magic(6) + version(2) + length(2) + dict + padding + '\n'
    let unpadded = 10 + dict.len() + 1;
    let pad = (64 - unpadded % 64) % 64;
    let mut text = dict.into_bytes();
    text.extend(std::iter::repeat_n(b' ', pad));
    text.push(b'\n');
    text
}

pub fn write_array2<W: Write>(mut w: W, array: &Array2<f64>) -> Result<()> {
    let (rows, cols) = array.dim();
    let header = header_text(rows, cols);
    w.write_all(MAGIC)?;
    w.write_all(&[1, 0])?;
    w.write_all(&(header.len() as u16).to_le_bytes())?;
    w.write_all(&header)?;
    // Iterating an Array2 visits elements in logical row-major order.
    for &v in array.iter() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, PartialEq)]
struct Header {
    descr: String,
    fortran_order: bool,
    shape: Vec<usize>,
}

fn dict_value<'a>(dict: &'a str, key: &str) -> Result<&'a str> {
    let pat = format!("'{key}'");
    let start = dict
        .find(&pat)
        .ok_or_else(|| Error::Npy(format!("header lacks {key}")))?;
    let rest = dict[start + pat.len()..].trim_start();
    rest.strip_prefix(':')
        .map(str::trim_start)
        .ok_or_else(|| Error::Npy(format!("malformed entry for {key}")))
}

fn parse_header(dict: &str) -> Result<Header> {
    let descr_rest = dict_value(dict, "descr")?;
    let quote = descr_rest
        .chars()
        .next()
        .filter(|c| *c == '\'' || *c == '"')
        .ok_or_else(|| Error::Npy("descr is not a string".into()))?;
    let descr: String = descr_rest[1..].chars().take_while(|&c| c != quote).collect();

    let fo = dict_value(dict, "fortran_order")?;
    let fortran_order = if fo.starts_with("True") {
        true
    } else if fo.starts_with("False") {
        false
    } else {
        return Err(Error::Npy("fortran_order is not a bool".into()));
    };

    let shape_rest = dict_value(dict, "shape")?;
    let inner = shape_rest
        .strip_prefix('(')
        .and_then(|s| s.split(')').next())
        .ok_or_else(|| Error::Npy("shape is not a tuple".into()))?;
    let shape = inner
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<usize>()
                .map_err(|_| Error::Npy(format!("bad shape entry '{s}'")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Header {
        descr,
        fortran_order,
        shape,
    })
}

pub fn read_array2<R: Read>(mut r: R) -> Result<Array2<f64>> {
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Npy("missing NPY magic".into()));
    }
    let mut version = [0u8; 2];
    r.read_exact(&mut version)?;
    let header_len = match version[0] {
        1 => {
            let mut b = [0u8; 2];
            r.read_exact(&mut b)?;
            u16::from_le_bytes(b) as usize
        }
        2 | 3 => {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            u32::from_le_bytes(b) as usize
        }
        v => return Err(Error::Npy(format!("unsupported version {v}"))),
    };
    let mut header = vec![0u8; header_len];
    r.read_exact(&mut header)?;
    let text = String::from_utf8(header).map_err(|_| Error::Npy("header is not UTF-8".into()))?;
    let header = parse_header(&text)?;
    if header.fortran_order {
        return Err(Error::Npy("Fortran-ordered arrays are not supported".into()));
    }
    let (rows, cols) = match header.shape[..] {
        [r, c] => (r, c),
        _ => {
            return Err(Error::Npy(format!(
                "expected a 2-D array, got shape {:?}",
                header.shape
            )))
        }
    };
    let count = rows * cols;
    let values: Vec<f64> = match header.descr.as_str() {
        "<f4" => {
            let mut buf = vec![0u8; count * 4];
            r.read_exact(&mut buf)?;
            buf.chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect()
        }
        "<f8" => {
            let mut buf = vec![0u8; count * 8];
            r.read_exact(&mut buf)?;
            buf.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect()
        }
        other => return Err(Error::Npy(format!("unsupported dtype '{other}'"))),
    };
    Ok(Array2::from_shape_vec((rows, cols), values).expect("length matches shape"))
}

pub fn save(path: impl AsRef<Path>, array: &Array2<f64>) -> Result<()> {
    write_array2(BufWriter::new(File::create(path)?), array)
}

pub fn load(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    read_array2(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_is_aligned_and_parseable() {
        let mut buf = Vec::new();
        write_array2(&mut buf, &Array2::zeros((128, 1024))).unwrap();
        let header_len = u16::from_le_bytes([buf[8], buf[9]]) as usize;
        assert_eq!((10 + header_len) % 64, 0);
        assert_eq!(buf[9 + header_len], b'\n');
        assert_eq!(buf.len(), 10 + header_len + 128 * 1024 * 4);
        let text = std::str::from_utf8(&buf[10..10 + header_len]).unwrap();
        assert_eq!(
            parse_header(text).unwrap(),
            Header {
                descr: "<f4".into(),
                fortran_order: false,
                shape: vec![128, 1024]
            }
        );
    }

    #[test]
    fn reads_f8_written_by_hand() {
        let dict = "{'descr': '<f8', 'fortran_order': False, 'shape': (2, 1), }";
        let mut buf = Vec::from(&MAGIC[..]);
        buf.extend([1, 0]);
        buf.extend((dict.len() as u16 + 1).to_le_bytes());
        buf.extend(dict.as_bytes());
        buf.push(b'\n');
        buf.extend(1.25f64.to_le_bytes());
        buf.extend((-3.0f64).to_le_bytes());
        let a = read_array2(&buf[..]).unwrap();
        assert_eq!(a, ndarray::array![[1.25], [-3.0]]);
    }

    #[test]
    fn rejects_unsupported_inputs() {
        assert_eq!(read_array2(&b"NOTNPY...."[..]).unwrap_err().category(), "npy_format");
        let dict = "{'descr': '<i4', 'fortran_order': False, 'shape': (1, 1), }\n";
        let mut buf = Vec::from(&MAGIC[..]);
        buf.extend([1, 0]);
        buf.extend((dict.len() as u16).to_le_bytes());
        buf.extend(dict.as_bytes());
        buf.extend([0u8; 4]);
        assert!(read_array2(&buf[..]).is_err());
        let dict = "{'descr': '<f4', 'fortran_order': False, 'shape': (4,), }\n";
        let mut buf = Vec::from(&MAGIC[..]);
        buf.extend([1, 0]);
        buf.extend((dict.len() as u16).to_le_bytes());
        buf.extend(dict.as_bytes());
        buf.extend([0u8; 16]);
        assert!(read_array2(&buf[..]).is_err());
    }

    proptest! {
        #[test]
        fn f32_values_round_trip(rows in 1usize..6, cols in 1usize..6, seed in proptest::collection::vec(-1e6f32..1e6, 36)) {
            let a = Array2::from_shape_fn((rows, cols), |(i, j)| seed[i * 6 + j] as f64);
            let mut buf = Vec::new();
            write_array2(&mut buf, &a).unwrap();
            let b = read_array2(&buf[..]).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
