//! The .gvc on-disk container (sequence header + per-frame window
//! segments with CRCs) and raw-frame I/O for evaluation.
//!
//! All multi-byte fields are little-endian; the container parses
//! identically on every platform.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{GvcError, Result};
use crate::serial;

pub const MAGIC: &[u8; 6] = b"GVC1D\0";
pub const VERSION: u16 = 1;
/// Patch size is fixed at the container level.
pub const PATCH: u32 = 16;

/// CRC-32 (IEEE 802.3, reflected).
pub fn crc32(bytes: &[u8]) -> u32 {
    let mut crc = !0u32;
    for &b in bytes {
        crc ^= u32::from(b);
        for _ in 0..8 {
            let mask = (crc & 1).wrapping_neg();
            crc = (crc >> 1) ^ (0xEDB8_8320 & mask);
        }
    }
    !crc
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SequenceHeader {
    pub width: u32,
    pub height: u32,
    pub frames: u32,
    pub rate: u8,
    pub model_hash: u64,
    pub window: u8,
    pub t_w: u8,
    pub c_lat: u8,
    pub bound: u8,
}

impl SequenceHeader {
    pub fn validate(&self) -> Result<()> {
        let m = PATCH * u32::from(self.window);
        if self.window == 0 || self.width == 0 || self.height == 0 {
            return Err(GvcError::Format("zero geometry field in header".into()));
        }
        if self.width % m != 0 || self.height % m != 0 {
            return Err(GvcError::Format(format!(
                "frame {}x{} not a multiple of {m}",
                self.width, self.height
            )));
        }
        if self.rate >= 8 {
            return Err(GvcError::Format(format!(
                "rate index {} out of range 0..8",
                self.rate
            )));
        }
        if self.t_w == 0 || self.c_lat == 0 || self.bound == 0 {
            return Err(GvcError::Format("zero coding field in header".into()));
        }
        Ok(())
    }

    /// Windows per frame for this geometry.
    pub fn n_windows(&self) -> usize {
        let h = (self.height / PATCH) as usize;
        let w = (self.width / PATCH) as usize;
        h * w / (self.window as usize * self.window as usize)
    }

    pub const BYTES: usize = 6 + 2 + 4 + 4 + 4 + 1 + 8 + 1 + 1 + 1 + 1;
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameChunk {
    pub frame: u32,
    /// One coded segment per window, window-major order.
    pub segments: Vec<Vec<u8>>,
}

pub fn write_stream(w: &mut impl Write, header: &SequenceHeader, chunks: &[FrameChunk]) -> Result<()> {
    header.validate()?;
    if chunks.len() != header.frames as usize {
        return Err(GvcError::Format(format!(
            "{} chunks for a {}-frame header",
            chunks.len(),
            header.frames
        )));
    }
    w.write_all(MAGIC)?;
    serial::write_u16(w, VERSION)?;
    serial::write_u32(w, header.width)?;
    serial::write_u32(w, header.height)?;
    serial::write_u32(w, header.frames)?;
    serial::write_u8(w, header.rate)?;
    serial::write_u64(w, header.model_hash)?;
    serial::write_u8(w, header.window)?;
    serial::write_u8(w, header.t_w)?;
    serial::write_u8(w, header.c_lat)?;
    serial::write_u8(w, header.bound)?;
    let n = header.n_windows();
    for chunk in chunks {
        if chunk.segments.len() != n {
            return Err(GvcError::Format(format!(
                "frame {} has {} segments, geometry needs {n}",
                chunk.frame,
                chunk.segments.len()
            )));
        }
        serial::write_u32(w, chunk.frame)?;
        for seg in &chunk.segments {
            serial::write_u32(w, seg.len() as u32)?;
            serial::write_u32(w, crc32(seg))?;
            w.write_all(seg)?;
        }
    }
    Ok(())
}

pub fn read_stream(r: &mut impl Read) -> Result<(SequenceHeader, Vec<FrameChunk>)> {
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(GvcError::Format(format!(
            "bad magic {magic:02x?} at offset 0"
        )));
    }
    let version = serial::read_u16(r)?;
    if version != VERSION {
        return Err(GvcError::Format(format!(
            "unsupported container version {version} at offset 6"
        )));
    }
    let header = SequenceHeader {
        width: serial::read_u32(r)?,
        height: serial::read_u32(r)?,
        frames: serial::read_u32(r)?,
        rate: serial::read_u8(r)?,
        model_hash: serial::read_u64(r)?,
        window: serial::read_u8(r)?,
        t_w: serial::read_u8(r)?,
        c_lat: serial::read_u8(r)?,
        bound: serial::read_u8(r)?,
    };
    header.validate()?;
    let n = header.n_windows();
    let mut chunks = Vec::with_capacity(header.frames as usize);
    for fi in 0..header.frames {
        let frame = serial::read_u32(r)?;
        let mut segments = Vec::with_capacity(n);
        for win in 0..n {
            let len = serial::read_u32(r)? as usize;
            let crc = serial::read_u32(r)?;
            let mut seg = vec![0u8; len];
            r.read_exact(&mut seg).map_err(|_| {
                GvcError::Corrupt(format!("truncated segment, frame {fi} window {win}"))
            })?;
            if crc32(&seg) != crc {
                return Err(GvcError::Corrupt(format!(
                    "CRC mismatch in frame {frame} window {win}"
                )));
            }
            segments.push(seg);
        }
        chunks.push(FrameChunk { frame, segments });
    }
    // trailing garbage is a format violation
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(GvcError::Format("trailing bytes after final chunk".into()));
    }
    Ok((header, chunks))
}

/// Serialized size of the stream in bytes without writing it.
pub fn stream_bytes(_header: &SequenceHeader, chunks: &[FrameChunk]) -> usize {
    let payload: usize = chunks
        .iter()
        .map(|c| 4 + c.segments.iter().map(|s| 8 + s.len()).sum::<usize>())
        .sum();
    SequenceHeader::BYTES + payload
}

/// Bits per pixel: total container bits over all coded pixels.
pub fn bpp(header: &SequenceHeader, chunks: &[FrameChunk]) -> Result<f64> {
    if header.frames == 0 {
        return Err(GvcError::Usage("bpp undefined for a 0-frame stream".into()));
    }
    let bits = stream_bytes(header, chunks) as f64 * 8.0;
    Ok(bits / (f64::from(header.width) * f64::from(header.height) * f64::from(header.frames)))
}

// ---------------------------------------------------------------------------
// raw video I/O
// ---------------------------------------------------------------------------

/// Read planar 8-bit RGB frames (R plane, G plane, B plane per frame).
pub fn read_raw_video(path: &Path, width: usize, height: usize, frames: usize) -> Result<Vec<Vec<u8>>> {
    let data = std::fs::read(path)?;
    let per_frame = 3 * width * height;
    let expected = per_frame * frames;
    if data.len() != expected {
        return Err(GvcError::Io(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            format!(
                "{} is {} bytes, expected {expected} ({frames} frames of {per_frame})",
                path.display(),
                data.len()
            ),
        )));
    }
    Ok(data.chunks_exact(per_frame).map(|c| c.to_vec()).collect())
}

pub fn write_raw_video(path: &Path, frames: &[Vec<u8>]) -> Result<()> {
    let mut out = Vec::new();
    for f in frames {
        out.extend_from_slice(f);
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Read a directory of binary PPM (P6) images, sorted by file name.
pub fn read_ppm_dir(dir: &Path, width: usize, height: usize) -> Result<Vec<Vec<u8>>> {
    let mut names: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "ppm").unwrap_or(false))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(GvcError::Usage(format!(
            "no .ppm frames in {}",
            dir.display()
        )));
    }
    names.iter().map(|p| read_ppm(p, width, height)).collect()
}

fn read_ppm(path: &Path, width: usize, height: usize) -> Result<Vec<u8>> {
    let data = std::fs::read(path)?;
    let bad = |what: &str| GvcError::Format(format!("{}: {what}", path.display()));
    let mut fields = Vec::new();
    let mut i = 0usize;
    // header: magic, width, height, maxval, separated by whitespace
    while fields.len() < 4 {
        while i < data.len() && data[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < data.len() && data[i] == b'#' {
            while i < data.len() && data[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < data.len() && !data[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&data[start..i]).map_err(|_| bad("non-ascii header"))?);
    }
    if fields[0] != "P6" {
        return Err(bad("not a binary P6 ppm"));
    }
    let (w, h): (usize, usize) = (
        fields[1].parse().map_err(|_| bad("bad width"))?,
        fields[2].parse().map_err(|_| bad("bad height"))?,
    );
    if fields[3] != "255" {
        return Err(bad("maxval must be 255"));
    }
    if (w, h) != (width, height) {
        return Err(bad(&format!("is {w}x{h}, expected {width}x{height}")));
    }
    i += 1; // single whitespace after maxval
    let pixels = &data[i..];
    if pixels.len() != 3 * w * h {
        return Err(bad("pixel payload length mismatch"));
    }
    // interleaved RGB -> planar
    let mut out = vec![0u8; 3 * w * h];
    for p in 0..w * h {
        out[p] = pixels[3 * p];
        out[w * h + p] = pixels[3 * p + 1];
        out[2 * w * h + p] = pixels[3 * p + 2];
    }
    Ok(out)
}

pub fn write_pgm(path: &Path, width: usize, height: usize, gray: &[u8]) -> Result<()> {
    if gray.len() != width * height {
        return Err(GvcError::dim(format!(
            "pgm payload {} for {width}x{height}",
            gray.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    std::fs::write(path, out)?;
    Ok(())
}

/// 8-bit plane to the model's [-1, 1] range.
pub fn normalize_frame(bytes: &[u8]) -> Vec<f64> {
    bytes.iter().map(|&v| 2.0 * (f64::from(v) / 255.0) - 1.0).collect()
}

/// Back to 8-bit, rounding to nearest.
pub fn denormalize_frame(values: &[f64]) -> Vec<u8> {
    values
        .iter()
        .map(|&x| {
            let v = (x.clamp(-1.0, 1.0) + 1.0) / 2.0 * 255.0;
            crate::tensor::round_half_away(v) as u8
        })
        .collect()
}
