//! Raw perturbation files and PPM/PGM export.
//!
//! Raw layout, little endian: magic `PSPD`, u32 version, u16 channels,
//! height and width, u16 reserved (zero), then one f64 per element in
//! channel-major order.

use std::path::Path;

use psp_core::Tensor;

use crate::error::{CliError, CliResult};

pub const DELTA_MAGIC: &[u8; 4] = b"PSPD";
pub const DELTA_VERSION: u32 = 1;
const HEADER: usize = 16;

pub fn delta_to_bytes(delta: &Tensor) -> CliResult<Vec<u8>> {
    let &[c, h, w] = delta.shape() else {
        return Err(CliError::SpecMismatch(format!("delta must be (c, h, w), got {:?}", delta.shape())));
    };
    let dim = |d: usize| u16::try_from(d).map_err(|_| CliError::SpecMismatch(format!("dimension {d} exceeds u16")));
    let mut out = Vec::with_capacity(HEADER + 8 * delta.len());
    out.extend_from_slice(DELTA_MAGIC);
    out.extend_from_slice(&DELTA_VERSION.to_le_bytes());
    for d in [c, h, w] {
        out.extend_from_slice(&dim(d)?.to_le_bytes());
    }
    out.extend_from_slice(&0u16.to_le_bytes());
    for v in delta.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn delta_from_bytes(bytes: &[u8], path: &Path) -> CliResult<Tensor> {
    if bytes.len() < HEADER || &bytes[..4] != DELTA_MAGIC {
        return Err(CliError::format(path, "not a delta file (bad magic)"));
    }
    let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]) as usize;
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != DELTA_VERSION {
        return Err(CliError::format(path, format!("unsupported delta version {version}")));
    }
    let shape = [u16_at(8), u16_at(10), u16_at(12)];
    let n = shape.iter().product::<usize>();
    if bytes.len() != HEADER + 8 * n {
        return Err(CliError::format(path, format!("expected {} bytes for shape {shape:?}, found {}", HEADER + 8 * n, bytes.len())));
    }
    let data = bytes[HEADER..].chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
    Ok(Tensor::new(shape.to_vec(), data)?)
}

pub fn write_delta(delta: &Tensor, path: &Path) -> CliResult<()> {
    std::fs::write(path, delta_to_bytes(delta)?).map_err(|e| CliError::io(path, e))
}

pub fn read_delta(path: &Path) -> CliResult<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    delta_from_bytes(&bytes, path)
}

/// `round((d + eps) / (2 eps) * 255)`, halves rounding up.
pub fn quantize(d: f64, eps: f64) -> u8 {
    let v = (d + eps) / (2.0 * eps) * 255.0;
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

pub fn dequantize(b: u8, eps: f64) -> f64 {
    b as f64 / 255.0 * 2.0 * eps - eps
}

/// Binary P5 for one channel, P6 for three.
pub fn encode_image(delta: &Tensor, eps: f64) -> CliResult<Vec<u8>> {
    let &[c, h, w] = delta.shape() else {
        return Err(CliError::SpecMismatch(format!("delta must be (c, h, w), got {:?}", delta.shape())));
    };
    if !(eps > 0.0) {
        return Err(CliError::Usage(format!("epsilon must be positive, got {eps}")));
    }
    let linf = delta.linf_norm();
    if linf > eps {
        return Err(CliError::SpecMismatch(format!("delta l_inf {linf} exceeds epsilon {eps}")));
    }
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => return Err(CliError::SpecMismatch(format!("image export needs 1 or 3 channels, got {c}"))),
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    let d = delta.data();
    for p in 0..plane {
        for ch in 0..c {
            out.push(quantize(d[ch * plane + p], eps));
        }
    }
    Ok(out)
}

pub fn export_image(delta: &Tensor, eps: f64, path: &Path) -> CliResult<()> {
    std::fs::write(path, encode_image(delta, eps)?).map_err(|e| CliError::io(path, e))
}

/// Parse a P5/P6 file written by [`encode_image`] back to a `(c, h, w)` delta.
pub fn decode_image(bytes: &[u8], eps: f64, path: &Path) -> CliResult<Tensor> {
    let bad = |m: &str| CliError::format(path, m.to_string());
    let mut fields = vec![];
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..i]).map_err(|_| bad("bad header"))?.to_string());
    }
    i += 1;
    let c = match fields[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        _ => return Err(bad("not a binary PGM/PPM")),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h) = (num(&fields[1])?, num(&fields[2])?);
    if fields[3] != "255" {
        return Err(bad("only maxval 255 is supported"));
    }
    let px = bytes.get(i..).filter(|p| p.len() == c * h * w).ok_or_else(|| bad("pixel data length mismatch"))?;
    let plane = h * w;
    let mut data = vec![0.0; c * plane];
    for p in 0..plane {
        for ch in 0..c {
            data[ch * plane + p] = dequantize(px[p * c + ch], eps);
        }
    }
    Ok(Tensor::new(vec![c, h, w], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use psp_core::Rng;

    #[test]
    fn endpoint_mapping() {
        let eps = 10.0 / 255.0;
        assert_eq!(quantize(-eps, eps), 0);
        assert_eq!(quantize(eps, eps), 255);
        assert_eq!(quantize(0.0, eps), 128);
    }

    #[test]
    fn raw_round_trip_is_exact() {
        let d = Tensor::uniform(&[3, 5, 4], -0.1, 0.1, &mut Rng::new(1));
        let bytes = delta_to_bytes(&d).unwrap();
        assert_eq!(&bytes[..4], b"PSPD");
        assert_eq!(bytes.len(), 16 + 8 * 60);
        assert_eq!(delta_from_bytes(&bytes, Path::new("x")).unwrap(), d);
    }

    #[test]
    fn corrupt_raw_rejected() {
        let d = Tensor::zeros(&[1, 2, 2]);
        let mut bytes = delta_to_bytes(&d).unwrap();
        assert!(delta_from_bytes(&bytes[..20], Path::new("x")).is_err());
        bytes[0] = b'X';
        assert!(delta_from_bytes(&bytes, Path::new("x")).is_err());
        let mut v2 = delta_to_bytes(&d).unwrap();
        v2[4] = 2;
        assert!(delta_from_bytes(&v2, Path::new("x")).is_err());
    }

    #[test]
    fn image_headers_and_layout() {
        let eps = 0.1;
        let gray = encode_image(&Tensor::zeros(&[1, 2, 3]), eps).unwrap();
        assert!(gray.starts_with(b"P5\n3 2\n255\n"));
        assert!(gray[11..].iter().all(|&b| b == 128));
        let mut rgb = Tensor::zeros(&[3, 1, 2]);
        rgb.data_mut()[0] = eps;
        rgb.data_mut()[5] = -eps;
        let bytes = encode_image(&rgb, eps).unwrap();
        assert!(bytes.starts_with(b"P6\n2 1\n255\n"));
        // Interleaved: pixel 0 is (r, g, b) = (255, 128, 128).
        assert_eq!(&bytes[11..], &[255, 128, 128, 128, 128, 0]);
    }

    #[test]
    fn export_rejects_out_of_budget_and_channels() {
        assert!(encode_image(&Tensor::full(&[1, 2, 2], 0.2), 0.1).is_err());
        assert!(encode_image(&Tensor::zeros(&[2, 2, 2]), 0.1).is_err());
    }
}
