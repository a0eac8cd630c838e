//! File formats: PMT1 tensors, binary PPM/PGM images, morph-map sidecars,
//! and content hashing for reproducibility stamps.
//!
//! PMT1 layout: magic bytes "PMT1", u8 rank, rank x u32 little-endian dims,
//! then f32 little-endian payload. Round-trips are bit-exact.

use crate::error::{Error, Result};
use crate::morphfield::{LabelMap, MorphConfig, MorphMap};
use crate::tensor::Tensor;
use sha2::{Digest, Sha256};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"PMT1";

pub fn tensor_to_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 1 + 4 * t.rank() + 4 * t.numel());
    out.extend_from_slice(MAGIC);
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn tensor_from_bytes(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 5 || &bytes[..4] != MAGIC {
        return Err(Error::format("not a PMT1 tensor (bad magic)"));
    }
    let rank = bytes[4] as usize;
    if rank == 0 || rank > 4 {
        return Err(Error::format(format!("PMT1 rank {rank} out of range")));
    }
    let hdr = 5 + 4 * rank;
    if bytes.len() < hdr {
        return Err(Error::format("PMT1 truncated header"));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let off = 5 + 4 * i;
        let d = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        shape.push(d);
    }
    let n: usize = shape.iter().product();
    if bytes.len() != hdr + 4 * n {
        return Err(Error::format(format!(
            "PMT1 payload length {} != expected {}",
            bytes.len() - hdr,
            4 * n
        )));
    }
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        let off = hdr + 4 * i;
        data.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()));
    }
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::format("PMT1 zero dimension"));
    }
    Ok(Tensor::raw(&shape, data))
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, tensor_to_bytes(t))?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    tensor_from_bytes(&buf)
}

// ---------------------------------------------------------------------------
// Morph map files: PMT1 (H,W,2) plus a JSON sidecar
// ---------------------------------------------------------------------------

#[derive(serde::Serialize, serde::Deserialize)]
struct MapSidecar {
    eta: f32,
    order: String,
}

/// Writes `<path>` (PMT1) and `<path>.json` (eta + component order).
pub fn write_morph_map(path: &Path, map: &MorphMap, config: &MorphConfig) -> Result<()> {
    write_tensor(path, map.tensor())?;
    let sidecar = MapSidecar { eta: config.eta, order: "dxdy".to_string() };
    fs::write(
        sidecar_path(path),
        serde_json::to_string_pretty(&sidecar)?,
    )?;
    Ok(())
}

pub fn read_morph_map(path: &Path) -> Result<(MorphMap, MorphConfig)> {
    let t = read_tensor(path)?;
    let map = MorphMap::from_tensor(t)?;
    let raw = fs::read_to_string(sidecar_path(path))?;
    let sc: MapSidecar = serde_json::from_str(&raw)?;
    if sc.order != "dxdy" {
        return Err(Error::format(format!("unsupported component order {}", sc.order)));
    }
    Ok((map, MorphConfig::new(sc.eta)?))
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".json");
    s.into()
}

// ---------------------------------------------------------------------------
// PPM (P6) and PGM (P5)
// ---------------------------------------------------------------------------

/// Image tensor (3,H,W) in [0,1] to binary PPM, quantized by round(255 x).
pub fn write_ppm(path: &Path, img: &Tensor) -> Result<()> {
    if img.rank() != 3 || img.shape()[0] != 3 {
        return Err(Error::shape(format!("PPM wants (3,H,W), got {:?}", img.shape())));
    }
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let mut f = fs::File::create(path)?;
    write!(f, "P6\n{w} {h}\n255\n")?;
    let d = img.data();
    let hw = h * w;
    let mut buf = Vec::with_capacity(3 * hw);
    for i in 0..hw {
        for c in 0..3 {
            buf.push(quantize(d[c * hw + i]));
        }
    }
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let (w, h, payload) = parse_pnm_header(&bytes, b"P6")?;
    if payload.len() != 3 * w * h {
        return Err(Error::format(format!(
            "PPM payload {} bytes, expected {}",
            payload.len(),
            3 * w * h
        )));
    }
    let hw = h * w;
    let mut data = vec![0.0f32; 3 * hw];
    for i in 0..hw {
        for c in 0..3 {
            data[c * hw + i] = payload[3 * i + c] as f32 / 255.0;
        }
    }
    Ok(Tensor::raw(&[3, h, w], data))
}

/// Label map to binary PGM; pixel value is the class id.
pub fn write_pgm(path: &Path, labels: &LabelMap) -> Result<()> {
    let mut f = fs::File::create(path)?;
    write!(f, "P5\n{} {}\n255\n", labels.width, labels.height)?;
    f.write_all(&labels.data)?;
    Ok(())
}

pub fn read_pgm(path: &Path, class_count: usize) -> Result<LabelMap> {
    let bytes = fs::read(path)?;
    let (w, h, payload) = parse_pnm_header(&bytes, b"P5")?;
    if payload.len() != w * h {
        return Err(Error::format(format!(
            "PGM payload {} bytes, expected {}",
            payload.len(),
            w * h
        )));
    }
    LabelMap::new(h, w, class_count, payload.to_vec())
}

fn quantize(v: f32) -> u8 {
    libm::roundf(v.clamp(0.0, 1.0) * 255.0) as u8
}

/// Parses "<magic>\n<w> <h>\n255\n" allowing arbitrary whitespace and
/// '#' comment lines between tokens, per the netpbm grammar.
fn parse_pnm_header<'a>(bytes: &'a [u8], magic: &[u8]) -> Result<(usize, usize, &'a [u8])> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::format("bad PNM magic"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // skip whitespace and comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format("PNM header: expected integer"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| Error::format("PNM header: bad integer"))?;
    }
    if fields[2] != 255 {
        return Err(Error::format(format!("PNM maxval {} unsupported", fields[2])));
    }
    // exactly one whitespace byte before payload
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::format("PNM header: missing payload separator"));
    }
    pos += 1;
    Ok((fields[0], fields[1], &bytes[pos..]))
}

// ---------------------------------------------------------------------------
// Content hashing (reproducibility stamps)
// ---------------------------------------------------------------------------

/// Hex SHA-256 of a byte slice.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let d = h.finalize();
    d.iter().map(|b| format!("{b:02x}")).collect()
}

/// Content hash of a directory tree: the hash of the sorted list of
/// (relative path, file hash) pairs, in the spirit of a git tree id.
pub fn hash_dir(dir: &Path) -> Result<String> {
    let mut entries: Vec<(String, String)> = Vec::new();
    collect_files(dir, dir, &mut entries)?;
    entries.sort();
    let mut h = Sha256::new();
    for (name, hash) in &entries {
        h.update(name.as_bytes());
        h.update(b"\0");
        h.update(hash.as_bytes());
        h.update(b"\n");
    }
    let d = h.finalize();
    Ok(d.iter().map(|b| format!("{b:02x}")).collect())
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<(String, String)>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let rel = path
                .strip_prefix(root)
                .unwrap()
                .to_string_lossy()
                .replace('\\', "/");
            let bytes = fs::read(&path)?;
            out.push((rel, sha256_hex(&bytes)));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng_fill, Dist};

    #[test]
    fn pmt1_round_trip_bit_exact() {
        let t = rng_fill(&[2, 3, 4], 9, Dist::Normal).unwrap();
        let bytes = tensor_to_bytes(&t);
        assert_eq!(&bytes[..4], b"PMT1");
        assert_eq!(bytes[4], 3);
        let back = tensor_from_bytes(&bytes).unwrap();
        assert_eq!(back.shape(), t.shape());
        // bit-exact, not just approximately equal
        for (a, b) in t.data().iter().zip(back.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn pmt1_rejects_garbage() {
        assert!(tensor_from_bytes(b"JUNK").is_err());
        assert!(tensor_from_bytes(b"PMT1\x05").is_err());
        let mut ok = tensor_to_bytes(&Tensor::zeros(&[2, 2]));
        ok.pop();
        assert!(tensor_from_bytes(&ok).is_err());
    }

    #[test]
    fn ppm_header_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = rng_fill(&[3, 32, 32], 4, Dist::Uniform).unwrap();
        let p = dir.path().join("x.ppm");
        write_ppm(&p, &img).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P6\n32 32\n255\n"));
        let back = read_ppm(&p).unwrap();
        // u8 quantization: round(255 x) / 255
        for (a, b) in img.data().iter().zip(back.data()) {
            let q = libm::roundf(a * 255.0) / 255.0;
            assert!((q - b).abs() < 1e-6);
        }
        // a second write/read is byte-identical
        let p2 = dir.path().join("y.ppm");
        write_ppm(&p2, &back).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let labels = LabelMap::new(2, 3, 4, vec![0, 1, 2, 3, 0, 1]).unwrap();
        let p = dir.path().join("m.pgm");
        write_pgm(&p, &labels).unwrap();
        let back = read_pgm(&p, 4).unwrap();
        assert_eq!(back, labels);
    }

    #[test]
    fn morph_map_sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let raw = rng_fill(&[4, 4, 2], 3, Dist::Normal).unwrap();
        let cfg = MorphConfig::default();
        let map = crate::morphfield::normalize_map(&raw, &cfg).unwrap();
        let p = dir.path().join("map.pmt");
        write_morph_map(&p, &map, &cfg).unwrap();
        let (back, cfg2) = read_morph_map(&p).unwrap();
        assert_eq!(back, map);
        assert_eq!(cfg2.eta, 3.0);
    }

    #[test]
    fn dir_hash_stable_and_sensitive() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.txt"), b"one").unwrap();
        std::fs::create_dir(dir.path().join("sub")).unwrap();
        std::fs::write(dir.path().join("sub/b.txt"), b"two").unwrap();
        let h1 = hash_dir(dir.path()).unwrap();
        let h2 = hash_dir(dir.path()).unwrap();
        assert_eq!(h1, h2);
        std::fs::write(dir.path().join("a.txt"), b"three").unwrap();
        assert_ne!(h1, hash_dir(dir.path()).unwrap());
    }
}
