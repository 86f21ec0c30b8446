use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{Matrix4, Vector3, Vector4};
use ndarray::{s, Array2, Array3, Axis, Ix3};
use nifti::{IntoNdArray, NiftiObject, ReaderOptions};
use serde::{Deserialize, Serialize};

use super::{MultiSeqSlice, Provenance, Sequence};
use crate::error::{Error, Result};
use crate::label::{Class, LabelMask};
use crate::tps::sample_bilinear;

/// A 3D acquisition indexed `[i, j, k]` with `k` the slice axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceVolume {
    pub voxels: Array3<f32>,
    /// Row-major voxel-to-physical (mm) transform.
    pub affine: [[f64; 4]; 4],
    pub spacing: [f64; 3],
    pub sequence: Sequence,
    pub labels: Option<Array3<u8>>,
}

impl SequenceVolume {
    pub fn new(
        voxels: Array3<f32>,
        affine: [[f64; 4]; 4],
        sequence: Sequence,
        labels: Option<Array3<u8>>,
    ) -> Result<Self> {
        let m = to_matrix(&affine);
        if !m.iter().all(|v| v.is_finite()) || m.fixed_view::<3, 3>(0, 0).determinant().abs() < 1e-12 {
            return Err(Error::MissingAffine(sequence.name().into()));
        }
        let spacing = std::array::from_fn(|c| m.fixed_view::<3, 1>(0, c).norm());
        if let Some(l) = &labels {
            if l.dim() != voxels.dim() {
                return Err(Error::Shape(format!("labels {:?} vs voxels {:?}", l.dim(), voxels.dim())));
            }
            if let Some(&bad) = l.iter().find(|&&c| Class::from_code(c).is_err()) {
                return Err(Error::InvalidLabel(bad));
            }
        }
        Ok(Self { voxels, affine, spacing, sequence, labels })
    }

    pub fn matrix(&self) -> Matrix4<f64> {
        to_matrix(&self.affine)
    }

    pub fn num_slices(&self) -> usize {
        self.voxels.dim().2
    }

    fn point(&self, i: f64, j: f64, k: f64) -> Vector3<f64> {
        (self.matrix() * Vector4::new(i, j, k, 1.0)).xyz()
    }

    /// Unit normal of the slice planes.
    fn normal(&self) -> Vector3<f64> {
        let m = self.matrix();
        let n = m.fixed_view::<3, 1>(0, 0).cross(&m.fixed_view::<3, 1>(0, 1));
        n / n.norm()
    }

    fn image(&self, k: usize) -> Array2<f32> {
        self.voxels.index_axis(Axis(2), k).to_owned()
    }

    fn label(&self, k: usize) -> Option<Result<LabelMask>> {
        self.labels.as_ref().map(|l| LabelMask::new(l.slice(s![.., .., k]).to_owned()))
    }
}

fn to_matrix(a: &[[f64; 4]; 4]) -> Matrix4<f64> {
    Matrix4::from_fn(|r, c| a[r][c])
}

fn from_matrix(m: &Matrix4<f64>) -> [[f64; 4]; 4] {
    std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)]))
}

/// Physical position of the centre of slice `k`.
pub fn slice_center(vol: &SequenceVolume, k: usize) -> [f64; 3] {
    let (ni, nj, _) = vol.voxels.dim();
    let p = vol.point((ni as f64 - 1.0) / 2.0, (nj as f64 - 1.0) / 2.0, k as f64);
    [p.x, p.y, p.z]
}

fn by_sequence(vols: &[SequenceVolume]) -> Result<BTreeMap<Sequence, &SequenceVolume>> {
    let mut out = BTreeMap::new();
    for v in vols {
        if out.insert(v.sequence, v).is_some() {
            return Err(Error::Schema(format!("more than one {} volume", v.sequence)));
        }
    }
    for seq in Sequence::ALL {
        if !out.contains_key(&seq) {
            return Err(Error::Schema(format!("no {seq} volume")));
        }
    }
    Ok(out)
}

/// Pairs every LGE slice inside the region imaged by all sequences with the
/// nearest (by slice-centre distance) bSSFP and T2 slices.
pub fn pair_slices(vols: &[SequenceVolume]) -> Result<Vec<MultiSeqSlice>> {
    let vols = by_sequence(vols)?;
    let cri = vols[&Sequence::Lge];
    let n = cri.normal();
    let origin = cri.point(0.0, 0.0, 0.0);
    let coverage = |v: &SequenceVolume| {
        let t: Vec<f64> =
            (0..v.num_slices()).map(|k| n.dot(&(Vector3::from(slice_center(v, k)) - origin))).collect();
        let half = n.dot(&v.matrix().fixed_view::<3, 1>(0, 2).into_owned()).abs() / 2.0;
        let lo = t.iter().copied().fold(f64::INFINITY, f64::min) - half;
        let hi = t.iter().copied().fold(f64::NEG_INFINITY, f64::max) + half;
        (lo, hi)
    };
    let ranges: Vec<(f64, f64)> = vols.values().map(|v| coverage(v)).collect();
    let dim = cri.voxels.dim();
    let mut out = Vec::new();
    for k in 0..cri.num_slices() {
        let c = Vector3::from(slice_center(cri, k));
        let t = n.dot(&(c - origin));
        if !ranges.iter().all(|&(lo, hi)| t >= lo - 1e-6 && t <= hi + 1e-6) {
            continue;
        }
        let mut images = BTreeMap::new();
        let mut labels = BTreeMap::new();
        let mut provenance = Provenance { source: String::new(), slice_indices: BTreeMap::new() };
        for (&seq, v) in &vols {
            if (v.voxels.dim().0, v.voxels.dim().1) != (dim.0, dim.1) {
                return Err(Error::Shape(format!(
                    "{seq} in-plane size {:?} differs from LGE; run rigid_prealign first",
                    v.voxels.dim()
                )));
            }
            let mut best = (0usize, f64::INFINITY);
            for kk in 0..v.num_slices() {
                let d = (Vector3::from(slice_center(v, kk)) - c).norm();
                if d < best.1 - 1e-9 {
                    best = (kk, d);
                }
            }
            images.insert(seq, v.image(best.0));
            if let Some(l) = v.label(best.0) {
                labels.insert(seq, l?);
            }
            provenance.slice_indices.insert(seq, best.0);
        }
        let spacing = (cri.spacing[0], cri.spacing[1]);
        out.push(MultiSeqSlice::new(images, labels, spacing, Sequence::Lge, provenance)?);
    }
    if out.is_empty() {
        return Err(Error::EmptyOverlap);
    }
    Ok(out)
}

/// Resamples bSSFP and T2 onto the LGE in-plane grid using header geometry
/// only. Each moving slice keeps its own through-plane position.
pub fn rigid_prealign(vols: &[SequenceVolume]) -> Result<Vec<SequenceVolume>> {
    let by_seq = by_sequence(vols)?;
    let cri = by_seq[&Sequence::Lge];
    let cm = cri.matrix();
    let n = cri.normal();
    let origin = cri.point(0.0, 0.0, 0.0);
    let (ni, nj, _) = cri.voxels.dim();
    let mut out = Vec::with_capacity(vols.len());
    for v in vols {
        if v.sequence == Sequence::Lge {
            out.push(v.clone());
            continue;
        }
        let inv = v.matrix().try_inverse().ok_or_else(|| Error::MissingAffine(v.sequence.name().into()))?;
        let nk = v.num_slices();
        let offsets: Vec<f64> = (0..nk).map(|k| n.dot(&(v.point(0.0, 0.0, k as f64) - origin))).collect();
        let mut voxels = Array3::<f32>::zeros((ni, nj, nk));
        let mut labels = v.labels.as_ref().map(|_| Array3::<u8>::zeros((ni, nj, nk)));
        for (k, &off) in offsets.iter().enumerate() {
            let src = v.voxels.index_axis(Axis(2), k);
            for i in 0..ni {
                for j in 0..nj {
                    let x = origin + cm.fixed_view::<3, 1>(0, 0) * i as f64 + cm.fixed_view::<3, 1>(0, 1) * j as f64 + n * off;
                    let q = inv * Vector4::new(x.x, x.y, x.z, 1.0);
                    voxels[[i, j, k]] = sample_bilinear(src, q.x, q.y);
                    if let (Some(dst), Some(l)) = (labels.as_mut(), v.labels.as_ref()) {
                        let (r, c) = (q.x.round(), q.y.round());
                        if r >= 0.0 && c >= 0.0 && (r as usize) < l.dim().0 && (c as usize) < l.dim().1 {
                            dst[[i, j, k]] = l[[r as usize, c as usize, k]];
                        }
                    }
                }
            }
        }
        let step = if nk > 1 { offsets[1] - offsets[0] } else { v.spacing[2] };
        let mut m = cm;
        m.fixed_view_mut::<3, 1>(0, 2).copy_from(&(n * step));
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&(origin + n * offsets[0]));
        out.push(SequenceVolume::new(voxels, from_matrix(&m), v.sequence, labels)?);
    }
    Ok(out)
}

/// Reads a NIfTI volume (and optional label volume) into a [`SequenceVolume`].
pub fn read_nifti(path: &Path, labels: Option<&Path>, sequence: Sequence) -> Result<SequenceVolume> {
    let obj = ReaderOptions::new().read_file(path)?;
    let header = obj.header().clone();
    if header.sform_code == 0 && header.qform_code == 0 {
        return Err(Error::MissingAffine(path.display().to_string()));
    }
    let affine: Matrix4<f64> = header.affine();
    let voxels = as_3d(obj.into_volume().into_ndarray::<f32>()?)?;
    let labels = match labels {
        Some(p) => {
            let l = ReaderOptions::new().read_file(p)?.into_volume().into_ndarray::<f32>()?;
            Some(as_3d(l)?.mapv(|v| v.round().clamp(0.0, 255.0) as u8))
        }
        None => None,
    };
    SequenceVolume::new(voxels, from_matrix(&affine), sequence, labels)
}

fn as_3d(a: ndarray::ArrayD<f32>) -> Result<Array3<f32>> {
    let a = match a.ndim() {
        2 => a.insert_axis(Axis(2)),
        3 => a,
        // keep the first frame of 4D series
        4 => a.index_axis_move(Axis(3), 0),
        n => return Err(Error::Shape(format!("unsupported volume rank {n}"))),
    };
    a.into_dimensionality::<Ix3>().map_err(|e| Error::Shape(e.to_string()))
}
