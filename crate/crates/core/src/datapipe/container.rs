//! Portable on-disk container: a JSON sidecar describing shapes and geometry
//! plus one little-endian binary blob with the arrays.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{MultiSeqSlice, Provenance, Sequence, SequenceVolume};
use crate::error::{Error, Result};
use crate::label::LabelMask;
use crate::tps::DisplacementSet;

const SLICE_FORMAT: &str = "umyops-slice/1";
const VOLUME_FORMAT: &str = "umyops-volume/1";

/// A slice together with any ground-truth displacements stored alongside it.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceRecord {
    pub slice: MultiSeqSlice,
    pub displacements: BTreeMap<Sequence, DisplacementSet>,
}

#[derive(Serialize, Deserialize)]
struct SliceSidecar {
    format: String,
    shape: [usize; 2],
    spacing: (f64, f64),
    cri: Sequence,
    provenance: Provenance,
    images: Vec<Sequence>,
    labels: Vec<Sequence>,
    #[serde(default)]
    displacements: BTreeMap<Sequence, DisplacementSet>,
    data: String,
    sha256: String,
}

#[derive(Serialize, Deserialize)]
struct VolumeSidecar {
    format: String,
    shape: [usize; 3],
    affine: [[f64; 4]; 4],
    sequence: Sequence,
    has_labels: bool,
    data: String,
    sha256: String,
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("bin"))
}

fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn read_blob(json: &Path, data: &str, sha: &str) -> Result<Vec<u8>> {
    let path = json.with_file_name(data);
    let bytes = fs::read(&path)?;
    if digest(&bytes) != sha {
        return Err(Error::Schema(format!("checksum mismatch for {}", path.display())));
    }
    Ok(bytes)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        let out = self.bytes.get(self.pos..end).ok_or_else(|| Error::Schema("truncated data file".into()))?;
        self.pos = end;
        Ok(out)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self.take(n * 4)?.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    }

    fn finish(self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Schema("trailing bytes in data file".into()));
        }
        Ok(())
    }
}

/// Writes `<stem>.json` and `<stem>.bin`.
pub fn write_slice(stem: &Path, record: &SliceRecord) -> Result<()> {
    let slice = &record.slice;
    slice.validate()?;
    let (h, w) = slice.dim();
    let mut blob = Vec::with_capacity(slice.images.len() * h * w * 5);
    for img in slice.images.values() {
        blob.extend(img.iter().flat_map(|v| v.to_le_bytes()));
    }
    for lab in slice.labels.values() {
        blob.extend(lab.view().iter());
    }
    let (json, bin) = paths(stem);
    let sidecar = SliceSidecar {
        format: SLICE_FORMAT.into(),
        shape: [h, w],
        spacing: slice.spacing,
        cri: slice.cri,
        provenance: slice.provenance.clone(),
        images: slice.images.keys().copied().collect(),
        labels: slice.labels.keys().copied().collect(),
        displacements: record.displacements.clone(),
        data: file_name(&bin),
        sha256: digest(&blob),
    };
    fs::write(&bin, &blob)?;
    fs::write(&json, serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

pub fn read_slice(stem: &Path) -> Result<SliceRecord> {
    let (json, _) = paths(stem);
    let sidecar: SliceSidecar = serde_json::from_str(&fs::read_to_string(&json)?)?;
    if sidecar.format != SLICE_FORMAT {
        return Err(Error::Schema(format!("unsupported slice format `{}`", sidecar.format)));
    }
    let bytes = read_blob(&json, &sidecar.data, &sidecar.sha256)?;
    let [h, w] = sidecar.shape;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    let mut images = BTreeMap::new();
    for seq in &sidecar.images {
        let arr = Array2::from_shape_vec((h, w), cur.f32s(h * w)?).map_err(|e| Error::Schema(e.to_string()))?;
        images.insert(*seq, arr);
    }
    let mut labels = BTreeMap::new();
    for seq in &sidecar.labels {
        let arr = Array2::from_shape_vec((h, w), cur.take(h * w)?.to_vec()).map_err(|e| Error::Schema(e.to_string()))?;
        labels.insert(*seq, LabelMask::new(arr)?);
    }
    cur.finish()?;
    let slice = MultiSeqSlice::new(images, labels, sidecar.spacing, sidecar.cri, sidecar.provenance)?;
    Ok(SliceRecord { slice, displacements: sidecar.displacements })
}

pub fn write_volume(stem: &Path, vol: &SequenceVolume) -> Result<()> {
    let mut blob: Vec<u8> = vol.voxels.iter().flat_map(|v| v.to_le_bytes()).collect();
    if let Some(l) = &vol.labels {
        blob.extend(l.iter());
    }
    let (json, bin) = paths(stem);
    let (a, b, c) = vol.voxels.dim();
    let sidecar = VolumeSidecar {
        format: VOLUME_FORMAT.into(),
        shape: [a, b, c],
        affine: vol.affine,
        sequence: vol.sequence,
        has_labels: vol.labels.is_some(),
        data: file_name(&bin),
        sha256: digest(&blob),
    };
    fs::write(&bin, &blob)?;
    fs::write(&json, serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

pub fn read_volume(stem: &Path) -> Result<SequenceVolume> {
    let (json, _) = paths(stem);
    let sidecar: VolumeSidecar = serde_json::from_str(&fs::read_to_string(&json)?)?;
    if sidecar.format != VOLUME_FORMAT {
        return Err(Error::Schema(format!("unsupported volume format `{}`", sidecar.format)));
    }
    let bytes = read_blob(&json, &sidecar.data, &sidecar.sha256)?;
    let [a, b, c] = sidecar.shape;
    let n = a * b * c;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    let voxels = Array3::from_shape_vec((a, b, c), cur.f32s(n)?).map_err(|e| Error::Schema(e.to_string()))?;
    let labels = if sidecar.has_labels {
        Some(Array3::from_shape_vec((a, b, c), cur.take(n)?.to_vec()).map_err(|e| Error::Schema(e.to_string()))?)
    } else {
        None
    };
    cur.finish()?;
    SequenceVolume::new(voxels, sidecar.affine, sidecar.sequence, labels)
}
