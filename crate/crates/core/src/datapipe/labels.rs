use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::{Class, LabelMask};

/// Builds the pathology gold standard from scar and edema masks in the common
/// space. Where they overlap the pixel is scar.
pub fn merge_pathology_labels(scar_in_cri: &LabelMask, edema_in_cri: &LabelMask) -> Result<LabelMask> {
    if scar_in_cri.dim() != edema_in_cri.dim() {
        return Err(Error::Shape(format!("scar {:?} vs edema {:?}", scar_in_cri.dim(), edema_in_cri.dim())));
    }
    let scar = scar_in_cri.binary(Class::Scar);
    let edema = edema_in_cri.binary(Class::Edema);
    let mut out = Array2::zeros(scar.dim());
    Zip::from(&mut out).and(&scar).and(&edema).for_each(|o, &s, &e| {
        *o = if s {
            Class::Scar.code()
        } else if e {
            Class::Edema.code()
        } else {
            Class::Background.code()
        }
    });
    LabelMask::new(out)
}

/// Evaluation-time pathology regions. `edema` is the union of scar and edema.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathologyMasks {
    pub scar: Array2<bool>,
    pub edema: Array2<bool>,
}

pub fn edema_union_for_eval(mask: &LabelMask) -> PathologyMasks {
    PathologyMasks { scar: mask.binary(Class::Scar), edema: mask.any_of(&[Class::Scar, Class::Edema]) }
}
