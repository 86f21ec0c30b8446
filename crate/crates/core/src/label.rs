//! Integer class maps shared by every stage of the pipeline.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Class {
    Background = 0,
    Myocardium = 1,
    LeftVentricle = 2,
    RightVentricle = 3,
    Scar = 4,
    Edema = 5,
}

impl Class {
    pub const ALL: [Class; 6] = [
        Class::Background,
        Class::Myocardium,
        Class::LeftVentricle,
        Class::RightVentricle,
        Class::Scar,
        Class::Edema,
    ];

    /// Anatomy classes supervised by the registration loss.
    pub const ANATOMY: [Class; 3] = [Class::Myocardium, Class::LeftVentricle, Class::RightVentricle];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Self::ALL.get(code as usize).copied().ok_or(Error::InvalidLabel(code))
    }

    pub fn name(self) -> &'static str {
        match self {
            Class::Background => "bg",
            Class::Myocardium => "myo",
            Class::LeftVentricle => "lv",
            Class::RightVentricle => "rv",
            Class::Scar => "scar",
            Class::Edema => "edema",
        }
    }
}

/// A 2D label map with codes from [`Class`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMask {
    classes: Array2<u8>,
}

impl LabelMask {
    pub fn new(classes: Array2<u8>) -> Result<Self> {
        if let Some(&bad) = classes.iter().find(|&&c| c as usize >= Class::ALL.len()) {
            return Err(Error::InvalidLabel(bad));
        }
        Ok(Self { classes })
    }

    pub fn background(h: usize, w: usize) -> Self {
        Self { classes: Array2::zeros((h, w)) }
    }

    pub fn dim(&self) -> (usize, usize) {
        self.classes.dim()
    }

    pub fn view(&self) -> ArrayView2<'_, u8> {
        self.classes.view()
    }

    pub fn classes(&self) -> &Array2<u8> {
        &self.classes
    }

    pub fn into_inner(self) -> Array2<u8> {
        self.classes
    }

    pub fn get(&self, r: usize, c: usize) -> Class {
        Class::ALL[self.classes[[r, c]] as usize]
    }

    pub fn set(&mut self, r: usize, c: usize, class: Class) {
        self.classes[[r, c]] = class.code();
    }

    pub fn binary(&self, class: Class) -> Array2<bool> {
        self.classes.mapv(|c| c == class.code())
    }

    pub fn any_of(&self, classes: &[Class]) -> Array2<bool> {
        self.classes.mapv(|c| classes.iter().any(|k| k.code() == c))
    }

    /// Myocardium including pathology, which replaces myocardium codes.
    pub fn myocardium(&self) -> Array2<bool> {
        self.any_of(&[Class::Myocardium, Class::Scar, Class::Edema])
    }

    /// Anatomy mask for a class, counting pathology pixels as myocardium.
    pub fn anatomy(&self, class: Class) -> Array2<bool> {
        match class {
            Class::Myocardium => self.myocardium(),
            other => self.binary(other),
        }
    }

    pub fn count(&self, class: Class) -> usize {
        self.classes.iter().filter(|&&c| c == class.code()).count()
    }
}
