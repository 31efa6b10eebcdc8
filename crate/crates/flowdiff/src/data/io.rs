//! Image files, triplet directories, and the dataset manifest.
//!
//! On disk a dataset is a root directory with one subdirectory per sample
//! (`i0` / `it` / `i1` images plus optional `f0.flo` / `f1.flo`) and a
//! `manifest.txt` with one whitespace-separated record per line: the three
//! image paths followed optionally by the two flow paths, all relative to
//! the manifest. Directories without a manifest are scanned instead;
//! `im1`/`im2`/`im3` are accepted as aliases for the frame names.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::warping::FlowField;

use super::{flo, Triplet, TripletMeta, TripletSource};

pub const MANIFEST_NAME: &str = "manifest.txt";

/// Write `[3, h, w]` values in [0, 1] as 8-bit PNG or binary PPM by
/// extension.
pub fn write_image(img: &Tensor, path: &Path) -> Result<()> {
    let (c, h, w) = img.dims3();
    if c != 3 {
        return Err(Error::invalid(format!("expected 3 channels, got {c}")));
    }
    let plane = h * w;
    let mut rgb = vec![0u8; plane * 3];
    for p in 0..plane {
        for ch in 0..3 {
            let v = img.data()[ch * plane + p];
            rgb[p * 3 + ch] = (v.clamp(0.0, 1.0) * 255.0 + 0.5) as u8;
        }
    }
    match extension(path) {
        Some("ppm") => {
            let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
            bytes.extend_from_slice(&rgb);
            fs::write(path, bytes).map_err(|e| Error::io(path, e))
        }
        Some("png") => {
            let buf: image::RgbImage =
                image::ImageBuffer::from_raw(w as u32, h as u32, rgb).unwrap();
            buf.save(path).map_err(Error::from)
        }
        other => Err(Error::invalid(format!(
            "unsupported image extension {other:?} (use png or ppm)"
        ))),
    }
}

/// Read an 8-bit PNG or binary PPM into `[3, h, w]` values in [0, 1].
pub fn read_image(path: &Path) -> Result<Tensor> {
    let rgb: image::RgbImage = match extension(path) {
        Some("ppm") => read_ppm(path)?,
        _ => image::open(path)?.to_rgb8(),
    };
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let plane = h * w;
    let mut out = Tensor::zeros(&[3, h, w]);
    for (p, px) in rgb.pixels().enumerate() {
        for ch in 0..3 {
            out.data_mut()[ch * plane + p] = px.0[ch] as f32 / 255.0;
        }
    }
    Ok(out)
}

fn read_ppm(path: &Path) -> Result<image::RgbImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let format_err = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let header_end = parse_ppm_header(&bytes).ok_or_else(|| format_err("bad PPM header"))?;
    let (w, h, maxval, offset) = header_end;
    if maxval != 255 {
        return Err(format_err("only maxval 255 PPM supported"));
    }
    let need = w * h * 3;
    let payload = bytes
        .get(offset..offset + need)
        .ok_or_else(|| format_err("truncated PPM payload"))?;
    image::ImageBuffer::from_raw(w as u32, h as u32, payload.to_vec())
        .ok_or_else(|| format_err("inconsistent PPM dimensions"))
}

fn parse_ppm_header(bytes: &[u8]) -> Option<(usize, usize, usize, usize)> {
    if !bytes.starts_with(b"P6") {
        return None;
    }
    let mut fields = Vec::new();
    let mut i = 2;
    while fields.len() < 3 && i < bytes.len() {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if bytes.get(i) == Some(&b'#') {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && bytes[i].is_ascii_digit() {
            i += 1;
        }
        if i == start {
            return None;
        }
        fields.push(std::str::from_utf8(&bytes[start..i]).ok()?.parse().ok()?);
    }
    // Exactly one whitespace byte after maxval.
    Some((fields[0], fields[1], fields[2], i + 1))
}

fn extension(path: &Path) -> Option<&str> {
    path.extension().and_then(|e| e.to_str())
}

/// One manifest record: image paths plus optional flow paths.
#[derive(Debug, Clone)]
struct ManifestEntry {
    i0: PathBuf,
    it: PathBuf,
    i1: PathBuf,
    f0: Option<PathBuf>,
    f1: Option<PathBuf>,
}

/// Dataset backed by files on disk. Samples load lazily by index.
#[derive(Debug)]
pub struct DirDataset {
    root: PathBuf,
    entries: Vec<ManifestEntry>,
}

impl DirDataset {
    /// Load from `manifest.txt` when present, otherwise scan subdirectories
    /// in name order. An empty directory is an empty dataset, not an error.
    pub fn load(root: &Path) -> Result<Self> {
        if !root.is_dir() {
            return Err(Error::Load {
                reason: format!("{} is not a directory", root.display()),
                offenders: vec![],
            });
        }
        let manifest = root.join(MANIFEST_NAME);
        let entries = if manifest.is_file() {
            Self::from_manifest(root, &manifest)?
        } else {
            Self::from_scan(root)?
        };
        Ok(DirDataset {
            root: root.to_path_buf(),
            entries,
        })
    }

    fn from_manifest(root: &Path, manifest: &Path) -> Result<Vec<ManifestEntry>> {
        let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
        let mut entries = Vec::new();
        let mut offenders = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 3 && parts.len() != 5 {
                offenders.push(root.join(format!("{MANIFEST_NAME}:{}", lineno + 1)));
                continue;
            }
            let abs = |s: &str| root.join(s);
            let entry = ManifestEntry {
                i0: abs(parts[0]),
                it: abs(parts[1]),
                i1: abs(parts[2]),
                f0: parts.get(3).map(|s| abs(s)),
                f1: parts.get(4).map(|s| abs(s)),
            };
            for p in [&entry.i0, &entry.it, &entry.i1] {
                if !p.is_file() {
                    offenders.push(p.clone());
                }
            }
            entries.push(entry);
        }
        if offenders.is_empty() {
            Ok(entries)
        } else {
            Err(Error::Load {
                reason: "manifest references missing or malformed entries".into(),
                offenders,
            })
        }
    }

    fn from_scan(root: &Path) -> Result<Vec<ManifestEntry>> {
        let mut dirs: Vec<PathBuf> = fs::read_dir(root)
            .map_err(|e| Error::io(root, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_dir())
            .collect();
        dirs.sort();
        let mut entries = Vec::new();
        let mut offenders = Vec::new();
        for dir in dirs {
            match Self::scan_sample_dir(&dir) {
                Some(entry) => entries.push(entry),
                None => offenders.push(dir),
            }
        }
        if offenders.is_empty() {
            Ok(entries)
        } else {
            Err(Error::Load {
                reason: "sample directories missing frame images".into(),
                offenders,
            })
        }
    }

    fn scan_sample_dir(dir: &Path) -> Option<ManifestEntry> {
        let find = |names: &[&str]| -> Option<PathBuf> {
            for name in names {
                for ext in ["png", "ppm"] {
                    let p = dir.join(format!("{name}.{ext}"));
                    if p.is_file() {
                        return Some(p);
                    }
                }
            }
            None
        };
        let flow = |name: &str| -> Option<PathBuf> {
            let p = dir.join(format!("{name}.flo"));
            p.is_file().then_some(p)
        };
        Some(ManifestEntry {
            i0: find(&["i0", "im1"])?,
            it: find(&["it", "im2"])?,
            i1: find(&["i1", "im3"])?,
            f0: flow("f0"),
            f1: flow("f1"),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
}

impl TripletSource for DirDataset {
    fn len(&self) -> usize {
        self.entries.len()
    }

    fn get(&self, idx: usize) -> Result<Triplet> {
        let e = &self.entries[idx];
        let read_flow = |p: &Option<PathBuf>| -> Result<Option<FlowField>> {
            p.as_ref().map(|p| flo::read_flo(p)).transpose()
        };
        Ok(Triplet {
            i0: read_image(&e.i0)?,
            it: read_image(&e.it)?,
            i1: read_image(&e.i1)?,
            f0: read_flow(&e.f0)?,
            f1: read_flow(&e.f1)?,
            valid: None,
            meta: TripletMeta {
                spec_hash: 0,
                seed: idx as u64,
            },
        })
    }
}

/// Write a dataset as triplet subdirectories plus a manifest. Returns the
/// number of samples written.
pub fn write_dataset(
    source: &dyn TripletSource,
    out: &Path,
    with_flow: bool,
) -> Result<usize> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut manifest = String::new();
    for idx in 0..source.len() {
        let t = source.get(idx)?;
        let name = format!("{idx:06}");
        let dir = out.join(&name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_image(&t.i0, &dir.join("i0.png"))?;
        write_image(&t.it, &dir.join("it.png"))?;
        write_image(&t.i1, &dir.join("i1.png"))?;
        let mut line = format!("{name}/i0.png {name}/it.png {name}/i1.png");
        if with_flow {
            if let (Some(f0), Some(f1)) = (&t.f0, &t.f1) {
                flo::write_flo(f0, &dir.join("f0.flo"))?;
                flo::write_flo(f1, &dir.join("f1.flo"))?;
                line.push_str(&format!(" {name}/f0.flo {name}/f1.flo"));
            }
        }
        manifest.push_str(&line);
        manifest.push('\n');
    }
    let mpath = out.join(MANIFEST_NAME);
    fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
    Ok(source.len())
}
