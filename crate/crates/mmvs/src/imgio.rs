//! PFM and PPM image files.
//!
//! PFM follows the usual convention: `PF` (3-channel) or `Pf` (1-channel)
//! header, width/height line, negative scale for little-endian payload, and
//! rows stored bottom-to-top. Depth, probability and mask maps are 1-channel
//! PFM; images are 3-channel PFM or 8-bit binary PPM.

use std::io::Read;
use std::path::Path;

use crate::error::{MvsError, Result};
use crate::tensor::Tensor;

/// Writes `[H,W]` as grayscale PFM or `[3,H,W]` as color PFM.
pub fn write_pfm(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let (channels, h, w) = pfm_dims(t)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(if channels == 3 { b"PF\n" } else { b"Pf\n" });
    buf.extend_from_slice(format!("{w} {h}\n-1.0\n").as_bytes());
    let hw = h * w;
    for y in (0..h).rev() {
        for x in 0..w {
            for c in 0..channels {
                let v = t.values()[c * hw + y * w + x] as f32;
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    let mut r: &[u8] = &bytes;
    let magic = read_token(&mut r)?;
    let channels = match magic.as_str() {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(MvsError::Format(format!("bad PFM magic {other:?}"))),
    };
    let w: usize = parse_token(&read_token(&mut r)?)?;
    let h: usize = parse_token(&read_token(&mut r)?)?;
    let scale: f64 = parse_token(&read_token(&mut r)?)?;
    if scale >= 0.0 {
        return Err(MvsError::Format("big-endian PFM not supported".into()));
    }
    let hw = h * w;
    let mut values = vec![0.0f64; channels * hw];
    let mut fbuf = [0u8; 4];
    for y in (0..h).rev() {
        for x in 0..w {
            for c in 0..channels {
                r.read_exact(&mut fbuf)
                    .map_err(|_| MvsError::Format("truncated PFM payload".into()))?;
                values[c * hw + y * w + x] = f32::from_le_bytes(fbuf) as f64;
            }
        }
    }
    let shape = if channels == 3 { vec![3, h, w] } else { vec![h, w] };
    Ok(Tensor::from_vec(&shape, values))
}

/// Writes a `[3,H,W]` image in `[0,1]` as binary 8-bit PPM.
pub fn write_ppm(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let (channels, h, w) = pfm_dims(t)?;
    if channels != 3 {
        return Err(MvsError::shape("PPM requires a [3,H,W] image"));
    }
    let mut buf = format!("P6\n{w} {h}\n255\n").into_bytes();
    let hw = h * w;
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = (t.values()[c * hw + y * w + x].clamp(0.0, 1.0) * 255.0).round() as u8;
                buf.push(v);
            }
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    let mut r: &[u8] = &bytes;
    let magic = read_token(&mut r)?;
    if magic != "P6" {
        return Err(MvsError::Format(format!("bad PPM magic {magic:?}")));
    }
    let w: usize = parse_token(&read_token(&mut r)?)?;
    let h: usize = parse_token(&read_token(&mut r)?)?;
    let maxval: usize = parse_token(&read_token(&mut r)?)?;
    if maxval != 255 {
        return Err(MvsError::Format("only 8-bit PPM supported".into()));
    }
    let hw = h * w;
    if r.len() < 3 * hw {
        return Err(MvsError::Format("truncated PPM payload".into()));
    }
    let mut values = vec![0.0f64; 3 * hw];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                values[c * hw + y * w + x] = r[(y * w + x) * 3 + c] as f64 / 255.0;
            }
        }
    }
    Ok(Tensor::from_vec(&[3, h, w], values))
}

fn pfm_dims(t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [h, w] => Ok((1, *h, *w)),
        [3, h, w] => Ok((3, *h, *w)),
        other => Err(MvsError::shape(format!(
            "expected [H,W] or [3,H,W], got {other:?}"
        ))),
    }
}

/// Reads one whitespace-delimited header token, consuming the single
/// whitespace byte after it.
fn read_token(r: &mut &[u8]) -> Result<String> {
    let mut token = Vec::new();
    let mut b = [0u8; 1];
    loop {
        if r.read_exact(&mut b).is_err() {
            break;
        }
        if b[0].is_ascii_whitespace() {
            if token.is_empty() {
                continue;
            }
            break;
        }
        token.push(b[0]);
    }
    if token.is_empty() {
        return Err(MvsError::Format("truncated header".into()));
    }
    String::from_utf8(token).map_err(|_| MvsError::Format("non-ASCII header".into()))
}

fn parse_token<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.parse()
        .map_err(|_| MvsError::Format(format!("bad header token {s:?}")))
}
