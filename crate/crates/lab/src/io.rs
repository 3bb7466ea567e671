//! File formats: atomic writes, CSV logs and point clouds, PPM/PNG images
//! and a raw tensor container for bit-exact image data.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use cmlab_core::editing::Image;
use cmlab_core::Batch;

use crate::error::{LabError, Result};

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    let write = || -> std::io::Result<()> {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()
    };
    write().map_err(|e| LabError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| LabError::io(path, e))
}

/// Shortest decimal that parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

pub fn points_csv(points: &Batch) -> String {
    let mut s = (0..points.dim()).map(|j| format!("x{j}")).collect::<Vec<_>>().join(",");
    s.push('\n');
    for row in points.rows() {
        s.push_str(&row.iter().map(|&v| fmt_f64(v)).collect::<Vec<_>>().join(","));
        s.push('\n');
    }
    s
}

pub fn write_points_csv(path: &Path, points: &Batch) -> Result<()> {
    atomic_write(path, points_csv(points).as_bytes())
}

/// Reads a point cloud written by [`write_points_csv`].
pub fn read_points_csv(path: &Path) -> Result<Batch> {
    let text = fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| LabError::format("csv", path, "missing header"))?;
    let dim = header.split(',').count();
    let mut data = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let row = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| LabError::format("csv", path, format!("line {}: {e}", i + 2)))?;
        if row.len() != dim {
            return Err(LabError::format("csv", path, format!("line {} has {} fields, header has {dim}", i + 2, row.len())));
        }
        data.extend(row);
    }
    Batch::new(dim, data).map_err(|e| LabError::format("csv", path, e.to_string()))
}

/// Append-only CSV log with a fixed header.
pub struct CsvLog {
    out: BufWriter<File>,
}

impl CsvLog {
    /// Opens `path` for appending. A new or empty file gets `header` first;
    /// an existing file must already start with it.
    pub fn open(path: &Path, header: &str) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
        }
        let existing = fs::read_to_string(path).unwrap_or_default();
        if !existing.is_empty() && existing.lines().next() != Some(header) {
            return Err(LabError::format("log", path, "header does not match"));
        }
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(|e| LabError::io(path, e))?;
        let mut log = Self { out: BufWriter::new(file) };
        if existing.is_empty() {
            log.row(header).map_err(|e| LabError::io(path, e))?;
        }
        Ok(log)
    }

    pub fn row(&mut self, line: &str) -> std::io::Result<()> {
        self.out.write_all(line.as_bytes())?;
        self.out.write_all(b"\n")
    }

    pub fn flush(&mut self) -> std::io::Result<()> {
        self.out.flush()
    }
}

/// Drops every data row with `k >= keep` so a resumed run can append
/// without duplicates. The first column must be `k`.
pub fn truncate_log(path: &Path, keep: u64) -> Result<()> {
    let Ok(text) = fs::read_to_string(path) else { return Ok(()) };
    let mut out = String::with_capacity(text.len());
    for (i, line) in text.lines().enumerate() {
        let k = line.split(',').next().and_then(|k| k.parse::<u64>().ok());
        if i == 0 || k.is_some_and(|k| k < keep) {
            out.push_str(line);
            out.push('\n');
        }
    }
    if out != text {
        atomic_write(path, out.as_bytes())?;
    }
    Ok(())
}

/// `[-1, 1]` to `0..=255`, rounding to nearest.
pub fn to_byte(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

pub fn from_byte(b: u8) -> f64 {
    b as f64 / 127.5 - 1.0
}

/// Binary PPM (P6) of an RGB or grayscale image; gray is replicated.
pub fn ppm_bytes(img: &Image) -> Result<Vec<u8>> {
    let (h, w, c) = img.shape();
    if c != 1 && c != 3 {
        return Err(LabError::Config(format!("cannot write a {c}-channel image as PPM")));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for i in 0..h {
        for j in 0..w {
            for k in 0..3 {
                out.push(to_byte(img.get(i, j, k.min(c - 1))));
            }
        }
    }
    Ok(out)
}

pub fn write_ppm(path: &Path, img: &Image) -> Result<()> {
    atomic_write(path, &ppm_bytes(img)?)
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| LabError::io(path, e))?;
    parse_ppm(&bytes).map_err(|reason| LabError::format("ppm", path, reason))
}

fn parse_ppm(bytes: &[u8]) -> std::result::Result<Image, String> {
    let mut pos = 0;
    let mut fields = Vec::new();
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
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P6" {
        return Err(format!("expected P6, found {}", fields[0]));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|e| format!("bad header field {s:?}: {e}"));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max != 255 {
        return Err(format!("only 8-bit PPM is supported, maxval is {max}"));
    }
    let body = bytes.get(pos..pos + w * h * 3).ok_or("truncated pixel data")?;
    Image::new(h, w, 3, body.iter().map(|&b| from_byte(b)).collect()).map_err(|e| e.to_string())
}

#[cfg(feature = "png")]
pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    let (h, w, c) = img.shape();
    let color = match c {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        _ => return Err(LabError::Config(format!("cannot write a {c}-channel image as PNG"))),
    };
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut buf, w as u32, h as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| LabError::format("png", path, e.to_string()))?;
        let data: Vec<u8> = img.as_slice().iter().map(|&v| to_byte(v)).collect();
        writer.write_image_data(&data).map_err(|e| LabError::format("png", path, e.to_string()))?;
    }
    atomic_write(path, &buf)
}

/// Tiles equally sized images into a grid `cols` wide with a 1-pixel gap.
pub fn tile(images: &[Image], cols: usize) -> Image {
    let Some(first) = images.first() else { return Image::zeros(0, 0, 3) };
    let (h, w, c) = first.shape();
    let cols = cols.clamp(1, images.len());
    let rows = images.len().div_ceil(cols);
    let mut out = Image::zeros(rows * (h + 1) - 1, cols * (w + 1) - 1, c);
    out.as_mut_slice().iter_mut().for_each(|v| *v = -1.0);
    for (n, img) in images.iter().enumerate() {
        let (r0, c0) = ((n / cols) * (h + 1), (n % cols) * (w + 1));
        for i in 0..h {
            for j in 0..w {
                for k in 0..c {
                    out.set(r0 + i, c0 + j, k, img.get(i, j, k));
                }
            }
        }
    }
    out
}

const TENSOR_MAGIC: &[u8; 4] = b"CMT1";

/// `"CMT1"`, three u32 dimensions (height, width, channels), then
/// little-endian f64 values in HWC order.
pub fn tensor_bytes(img: &Image) -> Vec<u8> {
    let (h, w, c) = img.shape();
    let mut out = TENSOR_MAGIC.to_vec();
    for d in [h, w, c] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    img.as_slice().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    out
}

pub fn write_tensor(path: &Path, img: &Image) -> Result<()> {
    atomic_write(path, &tensor_bytes(img))
}

pub fn read_tensor(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| LabError::io(path, e))?;
    let bad = |reason: &str| LabError::format("tensor", path, reason);
    if bytes.len() < 16 || &bytes[..4] != TENSOR_MAGIC {
        return Err(bad("missing CMT1 header"));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    let (h, w, c) = (dim(0), dim(1), dim(2));
    let body = &bytes[16..];
    if body.len() != h * w * c * 8 {
        return Err(bad("payload length does not match the shape"));
    }
    let data = body.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
    Image::new(h, w, c, data).map_err(|e| bad(&e.to_string()))
}

/// Reads an image from a `.ppm` or tensor file, chosen by extension.
pub fn read_image(path: &Path) -> Result<Image> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("ppm") => read_ppm(path),
        _ => read_tensor(path),
    }
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn points_round_trip_exactly() {
        let b = Batch::new(2, vec![0.1, -2.5e-300, 1.0 / 3.0, f64::MAX]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pts.csv");
        write_points_csv(&p, &b).unwrap();
        assert_eq!(read_points_csv(&p).unwrap(), b);
        write_points_csv(&p, &Batch::zeros(2, 0)).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "x0,x1\n");
        assert!(read_points_csv(&p).unwrap().is_empty());
    }

    #[test]
    fn ppm_round_trip_on_byte_values() {
        let data: Vec<f64> = (0..2 * 3 * 3).map(|i| from_byte((i * 14) as u8)).collect();
        let img = Image::new(2, 3, 3, data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ppm");
        write_ppm(&p, &img).unwrap();
        assert_eq!(read_ppm(&p).unwrap(), img);
        assert!(fs::read(&p).unwrap().starts_with(b"P6\n3 2\n255\n"));
    }

    #[test]
    fn tensor_round_trip_is_bit_exact() {
        let img = Image::new(1, 2, 3, vec![0.1, 0.2, -0.3, 1e-310, 5.0, -0.0]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.cmt");
        write_tensor(&p, &img).unwrap();
        let back = read_tensor(&p).unwrap();
        assert!(back.as_slice().iter().zip(img.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn log_append_and_truncate() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.csv");
        {
            let mut log = CsvLog::open(&p, "k,loss").unwrap();
            for k in 0..4 {
                log.row(&format!("{k},1.0")).unwrap();
            }
        }
        truncate_log(&p, 2).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "k,loss\n0,1.0\n1,1.0\n");
        assert!(CsvLog::open(&p, "other").is_err());
    }

    #[test]
    fn tile_places_images() {
        let a = Image::new(1, 1, 3, vec![0.5; 3]).unwrap();
        let t = tile(&[a.clone(), a.clone(), a], 2);
        assert_eq!(t.shape(), (3, 3, 3));
        assert_eq!(t.get(2, 0, 0), 0.5);
        assert_eq!(t.get(2, 2, 0), -1.0);
    }
}
