//! Binary NetPBM: P6 (colour) and P5 (grey), 8- or 16-bit samples.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Raw samples, interleaved, raster order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// 3 for P6, 1 for P5.
    pub channels: usize,
    pub maxval: u16,
    pub data: Vec<u16>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, maxval: u16, data: Vec<u16>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Domain(format!("{channels} channels, expected 1 or 3")));
        }
        if maxval == 0 {
            return Err(Error::Domain("maxval must be positive".into()));
        }
        if data.len() != width * height * channels {
            return Err(Error::Domain(format!(
                "{} samples for {width}x{height}x{channels}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|&&v| v > maxval) {
            return Err(Error::Domain(format!("sample {v} exceeds maxval {maxval}")));
        }
        Ok(Self {
            width,
            height,
            channels,
            maxval,
            data,
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 3 { "P6" } else { "P5" };
        let mut out = format!("{magic}\n{} {}\n{}\n", self.width, self.height, self.maxval).into_bytes();
        if self.maxval < 256 {
            out.extend(self.data.iter().map(|&v| v as u8));
        } else {
            out.extend(self.data.iter().flat_map(|v| v.to_be_bytes()));
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let fail = |reason: &str| Error::Format {
            path: String::new(),
            reason: reason.to_string(),
        };
        let channels = match bytes.get(..2) {
            Some(b"P6") => 3,
            Some(b"P5") => 1,
            _ => return Err(fail("not a binary PPM/PGM (P6/P5)")),
        };
        let mut pos = 2;
        let mut fields = [0usize; 3];
        for field in &mut fields {
            // whitespace and comments before each header number
            loop {
                match bytes.get(pos) {
                    Some(b) if b.is_ascii_whitespace() => pos += 1,
                    Some(b'#') => {
                        while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                            pos += 1;
                        }
                    }
                    Some(_) => break,
                    None => return Err(fail("truncated header")),
                }
            }
            let start = pos;
            while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
                pos += 1;
            }
            *field = std::str::from_utf8(&bytes[start..pos])
                .ok()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| fail("malformed header number"))?;
        }
        // exactly one whitespace byte separates header and raster
        if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
            return Err(fail("missing whitespace after maxval"));
        }
        pos += 1;
        let [width, height, maxval] = fields;
        if maxval == 0 || maxval > 65535 {
            return Err(fail("maxval outside 1..=65535"));
        }
        let n = width * height * channels;
        let wide = maxval >= 256;
        let need = if wide { 2 * n } else { n };
        let raster = &bytes[pos..];
        if raster.len() < need {
            return Err(fail("truncated raster"));
        }
        if raster.len() > need {
            return Err(fail("trailing bytes after raster"));
        }
        let data = if wide {
            raster.chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]])).collect()
        } else {
            raster.iter().map(|&b| b as u16).collect()
        };
        Image::new(width, height, channels, maxval as u16, data).map_err(|e| fail(&e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        f.write_all(&self.encode())
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::decode(&bytes).map_err(|e| match e {
            Error::Format { reason, .. } => Error::Format {
                path: path.display().to_string(),
                reason,
            },
            other => other,
        })
    }

    fn expect_channels(self, channels: usize, path: &Path) -> Result<Self> {
        if self.channels == channels {
            Ok(self)
        } else {
            Err(Error::Format {
                path: path.display().to_string(),
                reason: format!("expected {channels}-channel image, found {}", self.channels),
            })
        }
    }
}

pub fn write_ppm(path: &Path, image: &Image) -> Result<()> {
    if image.channels != 3 {
        return Err(Error::Domain("PPM needs three channels".into()));
    }
    image.save(path)
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    Image::load(path)?.expect_channels(3, path)
}

pub fn write_pgm(path: &Path, image: &Image) -> Result<()> {
    if image.channels != 1 {
        return Err(Error::Domain("PGM needs one channel".into()));
    }
    image.save(path)
}

pub fn read_pgm(path: &Path) -> Result<Image> {
    Image::load(path)?.expect_channels(1, path)
}

/// Linear map of `[-1, 1]` onto 8-bit grey; values outside are clamped.
pub fn signed_unit_to_pgm(width: usize, height: usize, values: &[f64]) -> Result<Image> {
    let data = values
        .iter()
        .map(|&v| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u16)
        .collect();
    Image::new(width, height, 1, 255, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_written_p6() {
        let mut bytes = b"P6\n# two by two\n2 2\n255\n".to_vec();
        bytes.extend([255, 0, 0, 0, 255, 0, 0, 0, 255, 10, 20, 30]);
        let img = Image::decode(&bytes).unwrap();
        assert_eq!((img.width, img.height, img.channels), (2, 2, 3));
        assert_eq!(&img.data[9..], &[10, 20, 30]);
        assert_eq!(img.encode()[img.encode().len() - 12..], bytes[bytes.len() - 12..]);
    }

    #[test]
    fn sixteen_bit_round_trip() {
        let img = Image::new(3, 1, 1, 65535, vec![0, 300, 65535]).unwrap();
        assert_eq!(Image::decode(&img.encode()).unwrap(), img);
    }

    #[test]
    fn malformed() {
        assert!(Image::decode(b"P3\n1 1\n255\n").is_err());
        assert!(Image::decode(b"P5\n2 2\n255\n\x00\x01").is_err());
        assert!(Image::decode(b"P5\n1 1\n255\n\x00\x01").is_err());
        assert!(Image::decode(b"P5\n1 x\n255\n\x00").is_err());
        assert!(Image::decode(b"P5\n1 1\n0\n\x00").is_err());
        assert!(Image::decode(b"P5\n1 1\n100\n\xff").is_err());
    }

    #[test]
    fn signed_mapping() {
        let img = signed_unit_to_pgm(3, 1, &[-1.0, 0.0, 1.0]).unwrap();
        assert_eq!(img.data, vec![0, 128, 255]);
    }
}
