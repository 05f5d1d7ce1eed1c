//! Binary PGM (P5) and PPM (P6) reading and writing.
//!
//! Images are CHW tensors with values in `[0, 1]`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn image_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Parses a P5/P6 buffer. `path` is only used in error messages.
pub fn decode_pnm(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(image_err(path, "truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| image_err(path, "non-ascii header"))?);
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let channels = match fields[0] {
        "P5" => 1,
        "P6" => 3,
        other => return Err(image_err(path, format!("unsupported magic `{other}`, expected P5 or P6"))),
    };
    let parse = |s: &str, what: &str| -> Result<usize> {
        s.parse::<usize>()
            .map_err(|_| image_err(path, format!("bad {what} `{s}`")))
    };
    let width = parse(fields[1], "width")?;
    let height = parse(fields[2], "height")?;
    let maxval = parse(fields[3], "maxval")?;
    if width == 0 || height == 0 {
        return Err(image_err(path, "zero extent"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(image_err(path, format!("maxval {maxval} out of range")));
    }
    let bytes_per = if maxval < 256 { 1 } else { 2 };
    let n = width * height * channels;
    let raster = bytes.get(pos..).unwrap_or(&[]);
    if raster.len() < n * bytes_per {
        return Err(image_err(path, format!("raster holds {} bytes, expected {}", raster.len(), n * bytes_per)));
    }
    let mut data = vec![0.0; n];
    let maxf = maxval as f64;
    for y in 0..height {
        for x in 0..width {
            for c in 0..channels {
                let i = (y * width + x) * channels + c;
                let v = if bytes_per == 1 {
                    raster[i] as usize
                } else {
                    ((raster[2 * i] as usize) << 8) | raster[2 * i + 1] as usize
                };
                if v > maxval {
                    return Err(image_err(path, format!("sample {v} exceeds maxval {maxval}")));
                }
                data[(c * height + y) * width + x] = v as f64 / maxf;
            }
        }
    }
    Tensor::new(vec![channels, height, width], data)
}

pub fn read_pnm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| image_err(path, e.to_string()))?;
    decode_pnm(&bytes, path)
}

/// Encodes a 1- or 3-channel CHW image with maxval 255.
pub fn encode_pnm(image: &Tensor) -> Result<Vec<u8>> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::InvalidArgument(format!("image must be CHW, got shape {:?}", image.shape())));
    };
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => return Err(Error::InvalidArgument(format!("{c} channels cannot be stored as PGM/PPM"))),
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let v = d[(ch * h + y) * w + x].clamp(0.0, 1.0);
                out.push((v * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}

pub fn write_pnm(path: &Path, image: &Tensor) -> Result<()> {
    fs::write(path, encode_pnm(image)?)?;
    Ok(())
}
