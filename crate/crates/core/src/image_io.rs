//! Binary PPM (P6) input and PGM (P5) / PPM (P6) output.

use std::fmt;
use std::io::{Read, Write};

use crate::tensor::{Labels, Shape, Tensor};

#[derive(Debug)]
pub enum ImageError {
    Io(std::io::Error),
    BadFormat(String),
    Unsupported(String),
}

impl fmt::Display for ImageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ImageError::Io(e) => write!(f, "image i/o: {e}"),
            ImageError::BadFormat(m) => write!(f, "bad image file: {m}"),
            ImageError::Unsupported(m) => write!(f, "unsupported image: {m}"),
        }
    }
}

impl std::error::Error for ImageError {}

impl From<std::io::Error> for ImageError {
    fn from(e: std::io::Error) -> Self {
        ImageError::Io(e)
    }
}

/// Pull one whitespace-separated token, skipping '#' comments.
fn next_token(bytes: &[u8], pos: &mut usize) -> Result<String, ImageError> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(ImageError::BadFormat("truncated header".into()));
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

fn parse_dim(token: &str, what: &str) -> Result<usize, ImageError> {
    token
        .parse::<usize>()
        .map_err(|_| ImageError::BadFormat(format!("{what}: expected a number, got '{token}'")))
}

/// Read a binary P6 image into a (1, 3, h, w) tensor scaled to [0, 1].
pub fn read_ppm<R: Read>(source: &mut R) -> Result<Tensor<f32>, ImageError> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let magic = next_token(&bytes, &mut pos)?;
    if magic != "P6" {
        return Err(ImageError::BadFormat(format!("expected P6 magic, got '{magic}'")));
    }
    let w = parse_dim(&next_token(&bytes, &mut pos)?, "width")?;
    let h = parse_dim(&next_token(&bytes, &mut pos)?, "height")?;
    let maxval = parse_dim(&next_token(&bytes, &mut pos)?, "maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(ImageError::Unsupported(format!("maxval {maxval}; only 8-bit images are supported")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let need = w * h * 3;
    if bytes.len() < pos + need {
        return Err(ImageError::BadFormat(format!(
            "raster truncated: need {need} bytes, have {}",
            bytes.len().saturating_sub(pos)
        )));
    }
    let mut t = Tensor::zeros(Shape::new(1, 3, h, w));
    let scale = 1.0 / maxval as f32;
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = bytes[pos + (y * w + x) * 3 + c] as f32 * scale;
                *t.at_mut(0, c, y, x) = v;
            }
        }
    }
    Ok(t)
}

/// Write a binary P5 class-index map. `maxval` must cover the largest index.
pub fn write_pgm<W: Write>(
    sink: &mut W,
    labels: &Labels,
    maxval: u16,
    comment: Option<&str>,
) -> Result<(), ImageError> {
    if labels.n != 1 {
        return Err(ImageError::Unsupported("one image per file".into()));
    }
    if maxval == 0 || maxval > 255 {
        return Err(ImageError::Unsupported(format!("PGM maxval {maxval} out of 8-bit range")));
    }
    let mut head = String::from("P5\n");
    if let Some(c) = comment {
        head.push_str(&format!("# {c}\n"));
    }
    head.push_str(&format!("{} {}\n{}\n", labels.w, labels.h, maxval));
    sink.write_all(head.as_bytes())?;
    let mut raster = Vec::with_capacity(labels.h * labels.w);
    for &l in labels.data() {
        if l > maxval as u32 {
            return Err(ImageError::Unsupported(format!("label {l} exceeds maxval {maxval}")));
        }
        raster.push(l as u8);
    }
    sink.write_all(&raster)?;
    Ok(())
}

/// Write a binary P6 color map of labels through a class -> RGB palette.
pub fn write_label_ppm<W: Write>(
    sink: &mut W,
    labels: &Labels,
    palette: &[[u8; 3]],
    comment: Option<&str>,
) -> Result<(), ImageError> {
    if labels.n != 1 {
        return Err(ImageError::Unsupported("one image per file".into()));
    }
    let mut head = String::from("P6\n");
    if let Some(c) = comment {
        head.push_str(&format!("# {c}\n"));
    }
    head.push_str(&format!("{} {}\n255\n", labels.w, labels.h));
    sink.write_all(head.as_bytes())?;
    let mut raster = Vec::with_capacity(labels.h * labels.w * 3);
    for &l in labels.data() {
        let rgb = palette.get(l as usize).ok_or_else(|| {
            ImageError::Unsupported(format!("label {l} has no palette entry ({} given)", palette.len()))
        })?;
        raster.extend_from_slice(rgb);
    }
    sink.write_all(&raster)?;
    Ok(())
}

/// Text palette: one `r g b` line per class index; '#' comments allowed.
pub fn read_palette<R: Read>(source: &mut R) -> Result<Vec<[u8; 3]>, ImageError> {
    let mut text = String::new();
    source.read_to_string(&mut text)?;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(ImageError::BadFormat(format!("palette line {}: expected 'r g b'", i + 1)));
        }
        let mut rgb = [0u8; 3];
        for (k, p) in parts.iter().enumerate() {
            rgb[k] = p
                .parse::<u8>()
                .map_err(|_| ImageError::BadFormat(format!("palette line {}: bad value '{p}'", i + 1)))?;
        }
        out.push(rgb);
    }
    if out.is_empty() {
        return Err(ImageError::BadFormat("palette file has no entries".into()));
    }
    Ok(out)
}

/// Reflect-pad (mirror across the edge, edge row not repeated) up to the
/// given extents. Used to round sizes up to the network's stride multiple.
pub fn reflect_pad_to(x: &Tensor<f32>, target_h: usize, target_w: usize) -> Tensor<f32> {
    let s = x.shape();
    assert!(target_h >= s.h && target_w >= s.w);
    let reflect = |i: usize, len: usize| -> usize {
        if len == 1 {
            return 0;
        }
        let period = 2 * (len - 1);
        let m = i % period;
        if m < len {
            m
        } else {
            period - m
        }
    };
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, target_h, target_w));
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..target_h {
                let sy = reflect(y, s.h);
                for xx in 0..target_w {
                    let sx = reflect(xx, s.w);
                    *out.at_mut(n, c, y, xx) = x.at(n, c, sy, sx);
                }
            }
        }
    }
    out
}

/// Crop a label map back to the top-left (h, w) window.
pub fn crop_labels(labels: &Labels, h: usize, w: usize) -> Labels {
    let mut out = Labels::filled(labels.n, h, w, 0);
    for n in 0..labels.n {
        for y in 0..h {
            for x in 0..w {
                *out.at_mut(n, y, x) = labels.at(n, y, x);
            }
        }
    }
    out
}
