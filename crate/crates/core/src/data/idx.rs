//! IDX tensor files (unsigned-byte payloads only).

use std::path::Path;

use super::{Dataset, RawImage, Split};
use crate::error::{Error, Result};

const UBYTE: u8 = 0x08;

fn format_err(what: &'static str, offset: usize, detail: impl Into<String>) -> Error {
    Error::Format {
        what,
        offset,
        detail: detail.into(),
    }
}

/// Parses the header and returns `(dims, payload)`.
fn parse<'a>(what: &'static str, bytes: &'a [u8]) -> Result<(Vec<usize>, &'a [u8])> {
    if bytes.len() < 4 {
        return Err(format_err(what, bytes.len(), format!("need a 4-byte magic, file has {} bytes", bytes.len())));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(format_err(what, 0, format!("bad magic {:02x}{:02x}{:02x}{:02x}", bytes[0], bytes[1], bytes[2], bytes[3])));
    }
    if bytes[2] != UBYTE {
        return Err(format_err(what, 2, format!("element type 0x{:02x} unsupported, only 0x08 (u8)", bytes[2])));
    }
    let ndim = bytes[3] as usize;
    if ndim == 0 {
        return Err(format_err(what, 3, "zero dimensions"));
    }
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(format_err(what, bytes.len(), format!("header needs {header} bytes, file has {}", bytes.len())));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|d| u32::from_be_bytes(bytes[4 + 4 * d..8 + 4 * d].try_into().unwrap()) as usize)
        .collect();
    let expected = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
    let expected = expected.ok_or_else(|| format_err(what, 4, "dimension product overflows"))?;
    let payload = &bytes[header..];
    if payload.len() != expected {
        return Err(format_err(
            what,
            header + payload.len().min(expected),
            format!("payload has {} bytes, dimensions {dims:?} need {expected}", payload.len()),
        ));
    }
    Ok((dims, payload))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn read_idx_images(bytes: &[u8]) -> Result<Vec<RawImage>> {
    let what = "idx images";
    let (dims, payload) = parse(what, bytes)?;
    let (n, h, w, c) = match dims[..] {
        [n, h, w] => (n, h, w, 1),
        [n, h, w, c] => (n, h, w, c),
        _ => return Err(format_err(what, 3, format!("images need 3 or 4 dimensions, got {}", dims.len()))),
    };
    if h == 0 || w == 0 || c == 0 {
        return Err(format_err(what, 8, format!("empty image extent {h}x{w}x{c}")));
    }
    let size = h * w * c;
    (0..n)
        .map(|i| RawImage::new(h, w, c, payload[i * size..(i + 1) * size].to_vec()))
        .collect()
}

pub fn read_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let (dims, payload) = parse("idx labels", bytes)?;
    if dims.len() != 1 {
        return Err(format_err("idx labels", 3, format!("labels need 1 dimension, got {}", dims.len())));
    }
    Ok(payload.iter().map(|&b| b as usize).collect())
}

fn header(dims: &[usize]) -> Vec<u8> {
    let mut out = vec![0, 0, UBYTE, dims.len() as u8];
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out
}

pub fn write_idx_images(images: &[RawImage]) -> Result<Vec<u8>> {
    let first = images.first().ok_or_else(|| Error::invalid("cannot encode zero images"))?;
    let mut dims = vec![images.len(), first.height, first.width];
    if first.channels != 1 {
        dims.push(first.channels);
    }
    let mut out = header(&dims);
    for im in images {
        if (im.height, im.width, im.channels) != (first.height, first.width, first.channels) {
            return Err(Error::invalid("idx images must share one shape"));
        }
        out.extend_from_slice(&im.pixels);
    }
    Ok(out)
}

pub fn write_idx_labels(labels: &[usize]) -> Result<Vec<u8>> {
    let mut out = header(&[labels.len()]);
    for &l in labels {
        out.push(u8::try_from(l).map_err(|_| Error::invalid(format!("label {l} does not fit a byte")))?);
    }
    Ok(out)
}

/// Loads an image/label file pair. `classes` defaults to the largest label
/// plus one.
pub fn load_idx(images: &Path, labels: &Path, classes: Option<usize>, split: Split) -> Result<Dataset> {
    let imgs = read_idx_images(&read(images)?)?;
    let labs = read_idx_labels(&read(labels)?)?;
    if imgs.len() != labs.len() {
        return Err(Error::Format {
            what: "idx labels",
            offset: 4,
            detail: format!("{} labels for {} images", labs.len(), imgs.len()),
        });
    }
    let classes = classes.unwrap_or_else(|| labs.iter().max().map_or(0, |m| m + 1));
    Dataset::new(imgs, labs, classes, split)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_dim_header_accepted() {
        let mut bytes = vec![0x00, 0x00, 0x08, 0x03, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 3];
        bytes.extend(0..12u8);
        let imgs = read_idx_images(&bytes).unwrap();
        assert_eq!(imgs.len(), 2);
        assert_eq!((imgs[1].height, imgs[1].width, imgs[1].channels), (2, 3, 1));
        assert_eq!(imgs[1].pixels, (6..12).collect::<Vec<u8>>());
    }

    #[test]
    fn truncated_payload_names_byte_counts() {
        let mut bytes = vec![0x00, 0x00, 0x08, 0x01, 0, 0, 0, 5];
        bytes.extend([1, 2, 3]);
        let err = read_idx_labels(&bytes).unwrap_err().to_string();
        assert!(err.contains("3 bytes") && err.contains("need 5"), "{err}");
        assert!(err.contains("offset 11"), "{err}");
    }

    #[test]
    fn bad_magic_rejected() {
        let err = read_idx_labels(&[1, 0, 8, 1, 0, 0, 0, 0]).unwrap_err().to_string();
        assert!(err.contains("offset 0"), "{err}");
        assert!(read_idx_labels(&[0, 0, 0x0d, 1, 0, 0, 0, 0]).is_err());
    }

    #[test]
    fn round_trip_colour_images() {
        let imgs: Vec<RawImage> = (0..3)
            .map(|i| RawImage::new(2, 2, 3, (0..12).map(|v| v + i).collect()).unwrap())
            .collect();
        let bytes = write_idx_images(&imgs).unwrap();
        assert_eq!(&bytes[..4], &[0, 0, 8, 4]);
        assert_eq!(read_idx_images(&bytes).unwrap(), imgs);
        let labels = write_idx_labels(&[0, 2, 1]).unwrap();
        assert_eq!(read_idx_labels(&labels).unwrap(), vec![0, 2, 1]);
    }
}
