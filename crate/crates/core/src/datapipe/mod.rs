//! Multi-sequence ingestion, slice pairing, preprocessing, label harmonization
//! and synthetic phantoms.

mod container;
mod labels;
mod phantom;
mod preprocess;
mod volume;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::LabelMask;

pub use container::{read_slice, read_volume, write_slice, write_volume, SliceRecord};
pub use labels::{edema_union_for_eval, merge_pathology_labels, PathologyMasks};
pub use phantom::{generate_phantom, Phantom, PhantomSpec};
pub use preprocess::{crop_resample_normalize, heart_center, zscore, DEFAULT_SPACING_MM};
pub use volume::{pair_slices, read_nifti, rigid_prealign, slice_center, SequenceVolume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Sequence {
    #[serde(rename = "bSSFP")]
    Bssfp,
    #[serde(rename = "LGE")]
    Lge,
    #[serde(rename = "T2")]
    T2,
}

impl Sequence {
    pub const ALL: [Sequence; 3] = [Sequence::Bssfp, Sequence::Lge, Sequence::T2];
    /// Sequences registered onto the common reference.
    pub const MOVING: [Sequence; 2] = [Sequence::Bssfp, Sequence::T2];

    pub fn name(self) -> &'static str {
        match self {
            Sequence::Bssfp => "bSSFP",
            Sequence::Lge => "LGE",
            Sequence::T2 => "T2",
        }
    }
}

impl fmt::Display for Sequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Sequence {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bssfp" | "c0" => Ok(Sequence::Bssfp),
            "lge" | "de" => Ok(Sequence::Lge),
            "t2" => Ok(Sequence::T2),
            other => Err(Error::Schema(format!("unknown sequence `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub slice_indices: BTreeMap<Sequence, usize>,
}

/// Co-extracted 2D images of all sequences plus whatever labels exist.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiSeqSlice {
    pub images: BTreeMap<Sequence, Array2<f32>>,
    pub labels: BTreeMap<Sequence, LabelMask>,
    /// In-plane (row, column) spacing in mm.
    pub spacing: (f64, f64),
    pub cri: Sequence,
    pub provenance: Provenance,
}

impl MultiSeqSlice {
    pub fn new(
        images: BTreeMap<Sequence, Array2<f32>>,
        labels: BTreeMap<Sequence, LabelMask>,
        spacing: (f64, f64),
        cri: Sequence,
        provenance: Provenance,
    ) -> Result<Self> {
        let s = Self { images, labels, spacing, cri, provenance };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let dim = self
            .images
            .get(&self.cri)
            .ok_or_else(|| Error::Shape(format!("reference sequence {} missing", self.cri)))?
            .dim();
        if dim.0 == 0 || dim.1 == 0 {
            return Err(Error::Shape("empty image".into()));
        }
        for (seq, img) in &self.images {
            if img.dim() != dim {
                return Err(Error::Shape(format!("{seq} image {:?} differs from reference {dim:?}", img.dim())));
            }
        }
        for (seq, lab) in &self.labels {
            if lab.dim() != dim {
                return Err(Error::Shape(format!("{seq} labels {:?} differ from reference {dim:?}", lab.dim())));
            }
        }
        if !(self.spacing.0 > 0.0 && self.spacing.1 > 0.0) {
            return Err(Error::Shape(format!("non-positive spacing {:?}", self.spacing)));
        }
        Ok(())
    }

    pub fn dim(&self) -> (usize, usize) {
        self.images[&self.cri].dim()
    }

    pub fn image(&self, seq: Sequence) -> Result<&Array2<f32>> {
        self.images.get(&seq).ok_or_else(|| Error::Shape(format!("no {seq} image")))
    }

    pub fn label(&self, seq: Sequence) -> Result<&LabelMask> {
        self.labels.get(&seq).ok_or_else(|| Error::Shape(format!("no {seq} labels")))
    }
}
