// Binary (P6) and ASCII (P3) portable pixmaps, 8-bit or 16-bit samples.

use std::io::Write;
use std::path::Path;

use crate::backbone::ImageTensor;
use crate::error::{Error, Result};

fn decode_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Decode {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Reads a PPM as an `H × W` RGB buffer in CHW order scaled to `[0, 1]`.
/// Returns `(height, width, data)`.
pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0;
    let mut header = Vec::with_capacity(4);
    while header.len() < 4 {
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
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(decode_err(path, "truncated header"));
        }
        header.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    let magic = header[0].as_str();
    if magic != "P6" && magic != "P3" {
        return Err(decode_err(path, format!("unsupported format `{magic}`")));
    }
    let num = |s: &str, what: &str| -> Result<usize> {
        s.parse()
            .map_err(|_| decode_err(path, format!("bad {what} `{s}`")))
    };
    let width = num(&header[1], "width")?;
    let height = num(&header[2], "height")?;
    let maxval = num(&header[3], "maxval")?;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(decode_err(path, "bad dimensions or maxval"));
    }
    let n = width * height * 3;
    let samples: Vec<usize> = if magic == "P6" {
        pos += 1;
        let wide = maxval > 255;
        let need = if wide { 2 * n } else { n };
        if bytes.len() < pos + need {
            return Err(decode_err(path, "truncated pixel data"));
        }
        let raw = &bytes[pos..pos + need];
        if wide {
            raw.chunks(2).map(|c| (c[0] as usize) << 8 | c[1] as usize).collect()
        } else {
            raw.iter().map(|&b| b as usize).collect()
        }
    } else {
        let text = String::from_utf8_lossy(&bytes[pos..]);
        let vals: std::result::Result<Vec<usize>, _> =
            text.split_ascii_whitespace().take(n).map(str::parse).collect();
        let vals = vals.map_err(|_| decode_err(path, "bad sample"))?;
        if vals.len() < n {
            return Err(decode_err(path, "truncated pixel data"));
        }
        vals
    };
    if samples.iter().any(|&s| s > maxval) {
        return Err(decode_err(path, "sample exceeds maxval"));
    }
    let scale = maxval as f64;
    let mut data = vec![0.0; n];
    for (i, px) in samples.chunks(3).enumerate() {
        for c in 0..3 {
            data[c * width * height + i] = px[c] as f64 / scale;
        }
    }
    Ok((height, width, data))
}

/// Writes an RGB image as 8-bit binary PPM.
pub fn write_ppm(path: &Path, image: &ImageTensor) -> Result<()> {
    if image.channels() != 3 {
        return Err(Error::Contract(format!(
            "PPM export needs 3 channels, image has {}",
            image.channels()
        )));
    }
    let s = image.side();
    let mut out = format!("P6\n{s} {s}\n255\n").into_bytes();
    for y in 0..s {
        for x in 0..s {
            for c in 0..3 {
                out.push((image.pixel(c, y, x) * 255.0).round() as u8);
            }
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}
