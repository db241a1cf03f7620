//! Image file formats.
//!
//! Two containers are supported:
//!
//! * `GSF1` — raw float container: magic bytes `GSF1`, three little-endian
//!   u32 (width, height, channels), then width×height×channels little-endian
//!   f64 samples, channel-planar row-major. Lossless for all finite samples.
//! * Binary PGM (`P5`, 1 channel) / PPM (`P6`, 3 channels), maxval 255.
//!   Saving quantizes to the 1/255 grid and clamps to [0,1]; nothing else in
//!   the crate ever clamps.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;

const GSF_MAGIC: &[u8; 4] = b"GSF1";

/// Loads an image, dispatching on the file's magic bytes.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let mut reader = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 2];
    reader.read_exact(&mut magic).map_err(|_| {
        Error::malformed(path, "file shorter than a format signature")
    })?;
    match &magic {
        b"GS" => load_gsf(path, reader),
        b"P5" | b"P6" => load_pnm(path, reader, &magic),
        other => Err(Error::malformed(
            path,
            format!("unrecognized signature {:?}", other),
        )),
    }
}

/// Saves an image, dispatching on the file extension: `.gsf` for the raw
/// float container, `.pgm`/`.ppm` for 8-bit.
pub fn save_image(image: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some("gsf") => save_gsf(image, path),
        Some("pgm") | Some("ppm") => save_pnm(image, path),
        other => Err(Error::InvalidParameter(format!(
            "unsupported image extension {:?} for {}",
            other,
            path.display()
        ))),
    }
}

fn load_gsf(path: &Path, mut reader: impl Read) -> Result<Image> {
    let mut rest = [0u8; 2];
    reader
        .read_exact(&mut rest)
        .map_err(|_| Error::malformed(path, "truncated magic"))?;
    if &rest != b"F1" {
        return Err(Error::malformed(path, "bad GSF magic"));
    }
    let mut header = [0u8; 12];
    reader
        .read_exact(&mut header)
        .map_err(|_| Error::malformed(path, "truncated GSF header"))?;
    let width = u32::from_le_bytes(header[0..4].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let channels = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let count = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| Error::malformed(path, "GSF header overflow"))?;
    let mut bytes = vec![0u8; count * 8];
    reader
        .read_exact(&mut bytes)
        .map_err(|_| Error::malformed(path, "truncated GSF payload"))?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Image::from_vec(width, height, channels, data)
}

fn save_gsf(image: &Image, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(GSF_MAGIC)?;
    w.write_all(&(image.width() as u32).to_le_bytes())?;
    w.write_all(&(image.height() as u32).to_le_bytes())?;
    w.write_all(&(image.channels() as u32).to_le_bytes())?;
    for &v in image.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Consumes one whitespace-delimited ASCII token, skipping `#` comments.
fn read_token(path: &Path, reader: &mut impl Read) -> Result<String> {
    let mut token = String::new();
    let mut byte = [0u8; 1];
    let mut in_comment = false;
    loop {
        if reader.read(&mut byte)? == 0 {
            if token.is_empty() {
                return Err(Error::malformed(path, "unexpected end of header"));
            }
            return Ok(token);
        }
        let c = byte[0];
        if in_comment {
            if c == b'\n' {
                in_comment = false;
            }
            continue;
        }
        if c == b'#' {
            in_comment = true;
            continue;
        }
        if c.is_ascii_whitespace() {
            if token.is_empty() {
                continue;
            }
            return Ok(token);
        }
        token.push(c as char);
    }
}

fn load_pnm(path: &Path, mut reader: impl Read, magic: &[u8; 2]) -> Result<Image> {
    let channels = if magic == b"P5" { 1 } else { 3 };
    let parse = |tok: String| -> Result<usize> {
        tok.parse::<usize>()
            .map_err(|_| Error::malformed(path, format!("bad header token {tok:?}")))
    };
    let width = parse(read_token(path, &mut reader)?)?;
    let height = parse(read_token(path, &mut reader)?)?;
    let maxval = parse(read_token(path, &mut reader)?)?;
    if maxval != 255 {
        return Err(Error::malformed(
            path,
            format!("only maxval 255 is supported, got {maxval}"),
        ));
    }
    let mut bytes = vec![0u8; width * height * channels];
    reader
        .read_exact(&mut bytes)
        .map_err(|_| Error::malformed(path, "truncated pixel payload"))?;
    // Interleaved bytes to channel-planar floats.
    let mut data = vec![0.0; bytes.len()];
    let plane = width * height;
    for (i, &b) in bytes.iter().enumerate() {
        let c = i % channels;
        data[c * plane + i / channels] = b as f64 / 255.0;
    }
    Image::from_vec(width, height, channels, data)
}

fn save_pnm(image: &Image, path: &Path) -> Result<()> {
    let (magic, channels) = match image.channels() {
        1 => ("P5", 1),
        3 => ("P6", 3),
        c => return Err(Error::UnsupportedChannels(c)),
    };
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "{magic}\n{} {}\n255\n", image.width(), image.height())?;
    let plane = image.width() * image.height();
    let data = image.data();
    let mut bytes = Vec::with_capacity(plane * channels);
    for p in 0..plane {
        for c in 0..channels {
            let v = data[c * plane + p].clamp(0.0, 1.0);
            bytes.push((v * 255.0).round() as u8);
        }
    }
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_image() -> Image {
        let data = (0..4 * 3 * 3).map(|i| (i as f64 * 0.137).sin() * 0.5 + 0.5);
        Image::from_vec(4, 3, 3, data.collect()).unwrap()
    }

    #[test]
    fn gsf_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.gsf");
        // Include values outside [0,1]; the float container must not clamp.
        let img = sample_image().map(|v| v * 3.0 - 1.0);
        save_image(&img, &path).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(img.data(), back.data());
        assert_eq!(img.channels(), back.channels());
    }

    #[test]
    fn pgm_round_trip_quantizes_to_grid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.pgm");
        let img = Image::constant(5, 4, 1, 0.5).unwrap();
        save_image(&img, &path).unwrap();
        let back = load_image(&path).unwrap();
        for &v in back.data() {
            assert!((v - 0.5).abs() <= 1.0 / 510.0, "got {v}");
        }
    }

    #[test]
    fn pnm_save_clamps_out_of_range() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.pgm");
        let img = Image::from_vec(2, 1, 1, vec![-0.3, 1.7]).unwrap();
        save_image(&img, &path).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back.data(), &[0.0, 1.0]);
    }

    #[test]
    fn ppm_loads_channel_planar() {
        // Byte-level fixture: 2x1 RGB with distinct per-channel values.
        let bytes: Vec<u8> = [b"P6\n2 1\n255\n".as_slice(), &[10, 20, 30, 40, 50, 60]].concat();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fixture.ppm");
        std::fs::write(&path, bytes).unwrap();
        let img = load_image(&path).unwrap();
        assert_eq!((img.width(), img.height(), img.channels()), (2, 1, 3));
        let expect: Vec<f64> = [10.0, 40.0, 20.0, 50.0, 30.0, 60.0]
            .iter()
            .map(|v| v / 255.0)
            .collect();
        assert_eq!(img.data(), expect.as_slice());
    }

    #[test]
    fn pgm_header_comments_are_skipped() {
        let bytes: Vec<u8> = [b"P5 # comment\n# another\n2 2\n255\n".as_slice(), &[0, 64, 128, 255]].concat();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.pgm");
        std::fs::write(&path, bytes).unwrap();
        let img = load_image(&path).unwrap();
        assert_eq!((img.width(), img.height()), (2, 2));
        assert_eq!(img.data()[3], 1.0);
    }

    #[test]
    fn malformed_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pgm");
        std::fs::write(&path, b"P5\n4 4\n255\nxx").unwrap();
        assert!(matches!(
            load_image(&path),
            Err(Error::MalformedFile { .. })
        ));
        let path2 = dir.path().join("bad.gsf");
        std::fs::write(&path2, b"GSF1\x01\x00").unwrap();
        assert!(load_image(&path2).is_err());
    }
}
