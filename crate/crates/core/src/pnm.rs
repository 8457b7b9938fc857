//! Netpbm reader/writer. Reads gray (`P2`, `P5`) and color (`P3`, `P6`)
//! maps with any maxval up to 65535; color is reduced to luma. Writes
//! binary `P5` with maxval 255.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{luma, ImageGray, Provenance};

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: u32,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' || c == b'\r' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self) -> std::result::Result<u32, String> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(format!("expected a number at byte {start}"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .unwrap()
            .parse()
            .map_err(|e| format!("bad number at byte {start}: {e}"))
    }
}

fn parse_header(cur: &mut Cursor<'_>) -> std::result::Result<Header, String> {
    let magic = match cur.bytes.get(..2) {
        Some(&[b'P', d]) if matches!(d, b'2' | b'3' | b'5' | b'6') => [b'P', d],
        _ => return Err("not a P2/P3/P5/P6 netpbm file".into()),
    };
    cur.pos = 2;
    let width = cur.number()? as usize;
    let height = cur.number()? as usize;
    let maxval = cur.number()?;
    if width == 0 || height == 0 {
        return Err("zero image dimension".into());
    }
    if maxval == 0 || maxval > 65535 {
        return Err(format!("maxval {maxval} out of range"));
    }
    Ok(Header {
        magic,
        width,
        height,
        maxval,
    })
}

/// Decode a netpbm byte stream into a gray image.
pub fn decode(bytes: &[u8], provenance: Provenance) -> std::result::Result<ImageGray, String> {
    let mut cur = Cursor { bytes, pos: 0 };
    let h = parse_header(&mut cur)?;
    let channels = if matches!(h.magic[1], b'3' | b'6') {
        3
    } else {
        1
    };
    let count = h.width * h.height * channels;
    let samples: Vec<u32> = match h.magic[1] {
        b'2' | b'3' => (0..count)
            .map(|_| cur.number())
            .collect::<std::result::Result<_, _>>()?,
        _ => {
            // exactly one whitespace byte separates the header from the raster
            cur.pos += 1;
            let wide = h.maxval > 255;
            let need = count * if wide { 2 } else { 1 };
            let raster = bytes
                .get(cur.pos..cur.pos + need)
                .ok_or_else(|| format!("raster truncated: need {need} bytes"))?;
            if wide {
                raster
                    .chunks_exact(2)
                    .map(|c| u32::from(u16::from_be_bytes([c[0], c[1]])))
                    .collect()
            } else {
                raster.iter().map(|&b| u32::from(b)).collect()
            }
        }
    };
    if let Some(s) = samples.iter().find(|&&s| s > h.maxval) {
        return Err(format!("sample {s} exceeds maxval {}", h.maxval));
    }
    let scale = f64::from(h.maxval);
    let pixels = if channels == 3 {
        samples
            .chunks_exact(3)
            .map(|c| {
                luma(
                    f64::from(c[0]) / scale,
                    f64::from(c[1]) / scale,
                    f64::from(c[2]) / scale,
                )
            })
            .collect()
    } else {
        samples.iter().map(|&s| f64::from(s) / scale).collect()
    };
    ImageGray::new(h.width, h.height, pixels, provenance).map_err(|e| e.to_string())
}

pub fn read(path: &Path, provenance: Provenance) -> Result<ImageGray> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, provenance)
        .map_err(|msg| Error::Ingestion(format!("cannot decode {}: {msg}", path.display())))
}

/// Binary `P5`, maxval 255.
pub fn encode(img: &ImageGray) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.to_u8());
    out
}

pub fn write(img: &ImageGray, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode(img)).map_err(|e| Error::io(path, e))
}
