//! The six basic expression classes.

use core::fmt;
use core::str::FromStr;

use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 6;

/// Expression class. The discriminant is the class index used by every
/// score vector and confusion matrix in the crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Label {
    Anger = 0,
    Disgust = 1,
    Fear = 2,
    Happiness = 3,
    Sadness = 4,
    Surprise = 5,
}

impl Label {
    pub const ALL: [Label; NUM_CLASSES] = [
        Label::Anger,
        Label::Disgust,
        Label::Fear,
        Label::Happiness,
        Label::Sadness,
        Label::Surprise,
    ];

    pub fn from_index(index: usize) -> Result<Self> {
        Self::ALL.get(index).copied().ok_or(Error::InvalidLabel(index))
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Two-letter code used in prediction and label files.
    pub fn code(self) -> &'static str {
        match self {
            Label::Anger => "AN",
            Label::Disgust => "DI",
            Label::Fear => "FE",
            Label::Happiness => "HA",
            Label::Sadness => "SA",
            Label::Surprise => "SU",
        }
    }

    /// Upper-case class name used in report tables.
    pub fn name(self) -> &'static str {
        match self {
            Label::Anger => "ANGER",
            Label::Disgust => "DISGUST",
            Label::Fear => "FEAR",
            Label::Happiness => "HAPPINESS",
            Label::Sadness => "SADNESS",
            Label::Surprise => "SURPRISE",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseLabelError;

impl fmt::Display for ParseLabelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("expected one of AN, DI, FE, HA, SA, SU")
    }
}

impl FromStr for Label {
    type Err = ParseLabelError;

    fn from_str(s: &str) -> core::result::Result<Self, Self::Err> {
        Label::ALL
            .iter()
            .copied()
            .find(|l| l.code().eq_ignore_ascii_case(s.trim()))
            .ok_or(ParseLabelError)
    }
}
