//! PFM (float) and binary PPM (8-bit) images.

use hoi_core::image::Image;

use crate::error::{format_error, Result};

/// Little-endian PFM: `PF` for 3 channels, `Pf` for 1; rows bottom to top.
pub fn encode_pfm(image: &Image) -> Result<Vec<u8>> {
    let tag = match image.channels() {
        3 => "PF",
        1 => "Pf",
        c => return Err(format_error(format!("PFM holds 1 or 3 channels, not {c}"))),
    };
    let (w, h, c) = (image.width(), image.height(), image.channels());
    let mut out = format!("{tag}\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(w * h * c * 4);
    for y in (0..h).rev() {
        for v in &image.data()[y * w * c..(y + 1) * w * c] {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

fn header_tokens(bytes: &[u8], count: usize) -> Result<(Vec<String>, usize)> {
    let mut tokens = Vec::new();
    let mut pos = 0;
    while tokens.len() < count {
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
            return Err(format_error("truncated image header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the data
    Ok((tokens, pos + 1))
}

fn dimension(token: &str) -> Result<usize> {
    token
        .parse::<usize>()
        .ok()
        .filter(|&v| v > 0)
        .ok_or_else(|| format_error(format!("bad image dimension {token:?}")))
}

pub fn decode_pfm(bytes: &[u8]) -> Result<Image> {
    let (tokens, start) = header_tokens(bytes, 4)?;
    let c = match tokens[0].as_str() {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(format_error(format!("not a PFM file (magic {other:?})"))),
    };
    let (w, h) = (dimension(&tokens[1])?, dimension(&tokens[2])?);
    let scale: f32 = tokens[3].parse().map_err(|_| format_error("bad PFM scale"))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(format_error("bad PFM scale"));
    }
    let n = w * h * c;
    let body = bytes.get(start..).unwrap_or_default();
    if body.len() != 4 * n {
        return Err(format_error(format!("PFM body has {} bytes, expected {}", body.len(), 4 * n)));
    }
    let mut data = vec![0.0; n];
    for (i, chunk) in body.chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if scale < 0.0 { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
        let (row, col) = (i / (w * c), i % (w * c));
        data[(h - 1 - row) * w * c + col] = v as f64;
    }
    Ok(Image::from_data(w, h, c, data)?)
}

/// Binary PPM, `round(255 clamp(v))` per channel; gray images are replicated.
pub fn encode_ppm(image: &Image) -> Result<Vec<u8>> {
    let c = image.channels();
    if c != 1 && c != 3 {
        return Err(format_error(format!("PPM holds 1 or 3 channels, not {c}")));
    }
    let mut out = format!("P6\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    for px in image.data().chunks_exact(c) {
        for k in 0..3 {
            let v = px[if c == 1 { 0 } else { k }];
            out.push((255.0 * v.clamp(0.0, 1.0)).round() as u8);
        }
    }
    Ok(out)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let (tokens, start) = header_tokens(bytes, 4)?;
    if tokens[0] != "P6" {
        return Err(format_error("not a binary PPM file"));
    }
    let (w, h) = (dimension(&tokens[1])?, dimension(&tokens[2])?);
    if tokens[3] != "255" {
        return Err(format_error("only 8-bit PPM is supported"));
    }
    let body = bytes.get(start..).unwrap_or_default();
    if body.len() != 3 * w * h {
        return Err(format_error("PPM body size does not match its header"));
    }
    Ok(Image::from_data(w, h, 3, body.iter().map(|&b| b as f64 / 255.0).collect())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pfm_round_trip_and_row_order() {
        let img = Image::from_data(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let bytes = encode_pfm(&img).unwrap();
        assert!(bytes.starts_with(b"Pf\n2 2\n-1.0\n"));
        // bottom row first
        let first = f32::from_le_bytes(bytes[12..16].try_into().unwrap());
        assert_eq!(first, 3.0);
        assert_eq!(decode_pfm(&bytes).unwrap(), img);
    }

    #[test]
    fn big_endian_pfm_decodes() {
        let mut bytes = b"Pf\n1 1\n1.0\n".to_vec();
        bytes.extend_from_slice(&0.25f32.to_be_bytes());
        assert_eq!(decode_pfm(&bytes).unwrap().data(), &[0.25]);
    }

    #[test]
    fn truncated_pfm_is_rejected() {
        let img = Image::filled(3, 2, &[0.1, 0.2, 0.3]);
        let bytes = encode_pfm(&img).unwrap();
        assert!(decode_pfm(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_pfm(b"P6\n1 1\n255\n").is_err());
    }

    #[test]
    fn ppm_quantization() {
        let img = Image::from_data(2, 1, 3, vec![-0.5, 0.5, 1.5, 0.2, 0.4, 0.6]).unwrap();
        let bytes = encode_ppm(&img).unwrap();
        let body = &bytes[bytes.len() - 6..];
        assert_eq!(body, &[0, 128, 255, 51, 102, 153]);
        let back = decode_ppm(&bytes).unwrap();
        assert_eq!(back.data()[2], 1.0);
    }
}
