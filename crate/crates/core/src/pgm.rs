//! Binary greyscale PGM ("P5", maxval 255). Pixel values map to bytes as
//! `round(v * 255)` and back as `byte / 255`.

use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

fn plane(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [h, w] | [1, h, w] => Ok((*h, *w)),
        s => Err(Error::dim("write_pgm", s, &[0, 0])),
    }
}

pub fn encode_pgm(t: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = plane(t)?;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.reserve(h * w);
    for &v in t.data() {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::contract(format!("pixel value {v} outside [0, 1]")));
        }
        out.push((v * 255.0).round() as u8);
    }
    Ok(out)
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos,
            msg: msg.into(),
        }
    }

    fn skip_space(&mut self) {
        while let Some(&c) = self.bytes.get(self.pos) {
            if c == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if c.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.fail(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| Error::Format {
                offset: start,
                msg: format!("{what} out of range"),
            })
    }
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor> {
    let mut hd = Header { bytes, pos: 0 };
    if !bytes.starts_with(b"P5") {
        return Err(hd.fail("missing P5 magic"));
    }
    hd.pos = 2;
    let w = hd.number("width")?;
    let h = hd.number("height")?;
    let maxval = hd.number("maxval")?;
    if maxval != 255 {
        return Err(hd.fail(format!("unsupported maxval {maxval}")));
    }
    if w == 0 || h == 0 {
        return Err(hd.fail("zero image dimension"));
    }
    match bytes.get(hd.pos) {
        Some(c) if c.is_ascii_whitespace() => hd.pos += 1,
        _ => return Err(hd.fail("expected a single whitespace before pixel data")),
    }
    let need = h.checked_mul(w).ok_or_else(|| hd.fail("image too large"))?;
    let payload = &bytes[hd.pos..];
    if payload.len() < need {
        return Err(Error::Format {
            offset: bytes.len(),
            msg: format!("truncated payload: {} of {need} bytes", payload.len()),
        });
    }
    if payload.len() > need {
        return Err(Error::Format {
            offset: hd.pos + need,
            msg: "trailing bytes after pixel data".into(),
        });
    }
    let data = payload.iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::new(&[h, w], data)
}

/// Accepts `[H, W]` or `[1, H, W]`.
pub fn write_pgm(t: &Tensor, path: &Path) -> Result<()> {
    let bytes = encode_pgm(t)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Returns an `[H, W]` tensor.
pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn minimal_file_bytes() {
        let bytes = encode_pgm(&Tensor::zeros(&[2, 2])).unwrap();
        let mut expect = b"P5\n2 2\n255\n".to_vec();
        expect.extend([0u8; 4]);
        assert_eq!(bytes, expect);
    }

    #[test]
    fn mask_round_trip_exact() {
        let mut rng = Rng::new(4);
        let m = Tensor::new(&[5, 7], (0..35).map(|_| rng.bernoulli(0.5) as u8 as f64).collect())
            .unwrap();
        assert!(decode_pgm(&encode_pgm(&m).unwrap()).unwrap().bit_eq(&m));
    }

    #[test]
    fn image_round_trip_within_quantum() {
        let mut rng = Rng::new(5);
        let t = Tensor::uniform(&[9, 4], 0.0, 1.0, &mut rng);
        let back = decode_pgm(&encode_pgm(&t).unwrap()).unwrap();
        assert!(t.max_abs_diff(&back) <= 1.0 / 255.0);
    }

    #[test]
    fn width_precedes_height() {
        let t = Tensor::zeros(&[1, 3, 5]);
        let bytes = encode_pgm(&t).unwrap();
        assert!(bytes.starts_with(b"P5\n5 3\n"));
        assert_eq!(decode_pgm(&bytes).unwrap().shape(), &[3, 5]);
    }

    #[test]
    fn comments_are_skipped() {
        let mut b = b"P5 # hi\n2 # w\n1\n255\n".to_vec();
        b.extend([255u8, 0]);
        assert_eq!(decode_pgm(&b).unwrap().data(), &[1.0, 0.0]);
    }

    #[test]
    fn errors_carry_offsets() {
        match decode_pgm(b"P6\n2 2\n255\n") {
            Err(Error::Format { offset: 0, .. }) => {}
            other => panic!("{other:?}"),
        }
        match decode_pgm(b"P5\n2 x\n255\n") {
            Err(Error::Format { offset: 5, .. }) => {}
            other => panic!("{other:?}"),
        }
        let mut b = b"P5\n2 2\n255\n".to_vec();
        b.extend([1u8, 2, 3]);
        match decode_pgm(&b) {
            Err(Error::Format { offset: 14, .. }) => {}
            other => panic!("{other:?}"),
        }
        assert!(encode_pgm(&Tensor::full(&[1, 1], 1.5)).is_err());
    }
}
