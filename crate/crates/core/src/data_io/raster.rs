//! Binary netpbm images: P6 (RGB) and P5 (grayscale), maxval 255.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RasterImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RasterImage {
    pub fn new(width: usize, height: usize) -> Self {
        RasterImage {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        RasterImage {
            width,
            height,
            data,
        }
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "{} samples for a {width}x{height} RGB image",
                data.len()
            )));
        }
        Ok(RasterImage {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Copies the `side × side` window at `(x, y)`; pixels outside the image
    /// are filled with `pad`.
    pub fn crop(&self, x: i64, y: i64, side: usize, pad: [u8; 3]) -> RasterImage {
        let mut out = RasterImage::filled(side, side, pad);
        for dy in 0..side {
            let sy = y + dy as i64;
            if sy < 0 || sy >= self.height as i64 {
                continue;
            }
            for dx in 0..side {
                let sx = x + dx as i64;
                if sx < 0 || sx >= self.width as i64 {
                    continue;
                }
                out.set_pixel(dx, dy, self.pixel(sx as usize, sy as usize));
            }
        }
        out
    }

    pub fn to_ppm_bytes(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_ppm_bytes(bytes: &[u8]) -> Result<Self> {
        let (w, h, body) = parse_header(bytes, b"P6")?;
        let need = w.checked_mul(h).and_then(|n| n.checked_mul(3));
        match need {
            Some(n) if n == body.len() => Ok(RasterImage {
                width: w,
                height: h,
                data: body.to_vec(),
            }),
            _ => Err(Error::Corruption(format!(
                "PPM header declares {w}x{h} but {} payload bytes follow",
                body.len()
            ))),
        }
    }
}

/// Single-channel 8-bit image, used for masks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape(format!(
                "{} samples for a {width}x{height} image",
                data.len()
            )));
        }
        Ok(GrayImage {
            width,
            height,
            data,
        })
    }

    pub fn to_pgm_bytes(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_pgm_bytes(bytes: &[u8]) -> Result<Self> {
        let (w, h, body) = parse_header(bytes, b"P5")?;
        if w.checked_mul(h) != Some(body.len()) {
            return Err(Error::Corruption(format!(
                "PGM header declares {w}x{h} but {} payload bytes follow",
                body.len()
            )));
        }
        Ok(GrayImage {
            width: w,
            height: h,
            data: body.to_vec(),
        })
    }
}

fn parse_header<'a>(bytes: &'a [u8], magic: &[u8; 2]) -> Result<(usize, usize, &'a [u8])> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::Format(format!(
            "expected {} header",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in fields.iter_mut() {
        // whitespace and comments before each field
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Corruption(
                "truncated or malformed netpbm header".into(),
            ));
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| Error::Corruption("netpbm dimension out of range".into()))?;
    }
    if fields[2] != 255 {
        return Err(Error::Format(format!(
            "maxval {} unsupported, need 255",
            fields[2]
        )));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::Corruption("missing whitespace after maxval".into())),
    }
    Ok((fields[0], fields[1], &bytes[pos..]))
}

pub fn write_ppm(image: &RasterImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, image.to_ppm_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<RasterImage> {
    let path = path.as_ref();
    RasterImage::from_ppm_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_pgm(image: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, image.to_pgm_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    GrayImage::from_pgm_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn white_pixel_bytes() {
        let img = RasterImage::filled(1, 1, [255, 255, 255]);
        let bytes = img.to_ppm_bytes();
        assert_eq!(bytes, b"P6\n1 1\n255\n\xff\xff\xff");
        assert_eq!(bytes.len(), 14);
        assert_eq!(RasterImage::from_ppm_bytes(&bytes).unwrap(), img);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            RasterImage::from_ppm_bytes(b"P3\n1 1\n255\n"),
            Err(Error::Format(_))
        ));
        let short = [b"P6\n2 2\n255\n".as_slice(), &[0u8; 9]].concat();
        assert!(matches!(
            RasterImage::from_ppm_bytes(&short),
            Err(Error::Corruption(_))
        ));
        assert!(matches!(
            RasterImage::from_ppm_bytes(b"P6\n2"),
            Err(Error::Corruption(_))
        ));
        assert!(matches!(
            RasterImage::from_ppm_bytes(b"P6\n1 1\n65535\n"),
            Err(Error::Format(_))
        ));
        let huge = b"P6\n99999999999 99999999999\n255\n";
        assert!(RasterImage::from_ppm_bytes(huge).is_err());
    }

    #[test]
    fn comments_are_skipped() {
        let bytes = b"P6\n# made by hand\n1 1\n255\n\x01\x02\x03";
        assert_eq!(
            RasterImage::from_ppm_bytes(bytes).unwrap().pixel(0, 0),
            [1, 2, 3]
        );
    }

    #[test]
    fn crop_pads() {
        let mut img = RasterImage::new(2, 2);
        img.set_pixel(1, 1, [9, 9, 9]);
        let c = img.crop(1, 1, 2, [7, 7, 7]);
        assert_eq!(c.pixel(0, 0), [9, 9, 9]);
        assert_eq!(c.pixel(1, 1), [7, 7, 7]);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = RasterImage::from_raw(2, 1, vec![1, 2, 3, 4, 5, 6]).unwrap();
        write_ppm(&img, dir.path().join("a.ppm")).unwrap();
        assert_eq!(read_ppm(dir.path().join("a.ppm")).unwrap(), img);
        let g = GrayImage::new(3, 1, vec![0, 128, 255]).unwrap();
        write_pgm(&g, dir.path().join("a.pgm")).unwrap();
        assert_eq!(read_pgm(dir.path().join("a.pgm")).unwrap(), g);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn ppm_round_trip((w, h, data) in (1usize..17, 1usize..17).prop_flat_map(|(w, h)| {
            (Just(w), Just(h), prop::collection::vec(any::<u8>(), w * h * 3))
        })) {
            let img = RasterImage::from_raw(w, h, data).unwrap();
            let bytes = img.to_ppm_bytes();
            let back = RasterImage::from_ppm_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_ppm_bytes(), bytes);
            prop_assert_eq!(back, img);
        }
    }
}
