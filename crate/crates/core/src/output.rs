//! Artifact writers. Every file lands via a temp file and a rename, so a
//! reader never sees a half-written output.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::config(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// CSV text from a header and rows, newline-terminated.
pub fn csv<I: IntoIterator<Item = String>>(header: &str, rows: I) -> String {
    let mut s = String::from(header);
    s.push('\n');
    for r in rows {
        s.push_str(&r);
        s.push('\n');
    }
    s
}

/// Binary 8-bit PGM. Values are mapped linearly from `[lo, hi]` to 0..=255
/// with clamping.
pub fn pgm(values: &[f64], height: usize, width: usize, lo: f64, hi: f64) -> Result<Vec<u8>> {
    if values.len() != height * width {
        return Err(Error::shape("pgm", &[values.len()], &[height, width]));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| {
        let u = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
        (u * 255.0).round() as u8
    }));
    Ok(out)
}

/// Places equally sized images side by side.
pub fn hstack(images: &[&[f64]], height: usize, width: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(images.len() * height * width);
    for y in 0..height {
        for img in images {
            out.extend_from_slice(&img[y * width..(y + 1) * width]);
        }
    }
    out
}
