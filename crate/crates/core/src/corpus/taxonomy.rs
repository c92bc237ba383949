//! The closed set of clinical-note section headers.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::Error;

/// One of the 20 section headers a dialogue can be assigned to.
///
/// Variant order is the canonical class-id order used by the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SectionHeader {
    FamSocHx,
    GenHx,
    PastMedicalHx,
    Cc,
    PastSurgical,
    Allergy,
    Ros,
    Medications,
    Assessment,
    Exam,
    Diagnosis,
    Disposition,
    Plan,
    EdCourse,
    Immunizations,
    Imaging,
    GynHx,
    Procedures,
    OtherHistory,
    Labs,
}

const TABLE: [(SectionHeader, &str, &str); 20] = [
    (SectionHeader::FamSocHx, "FAM/SOCHX", "FAMILY HISTORY/SOCIAL HISTORY"),
    (SectionHeader::GenHx, "GENHX", "HISTORY OF PRESENT ILLNESS"),
    (SectionHeader::PastMedicalHx, "PASTMEDICALHX", "PAST MEDICAL HISTORY"),
    (SectionHeader::Cc, "CC", "CHIEF COMPLAINT"),
    (SectionHeader::PastSurgical, "PASTSURGICAL", "PAST SURGICAL HISTORY"),
    (SectionHeader::Allergy, "ALLERGY", "ALLERGY"),
    (SectionHeader::Ros, "ROS", "REVIEW OF SYSTEMS"),
    (SectionHeader::Medications, "MEDICATIONS", "MEDICATIONS"),
    (SectionHeader::Assessment, "ASSESSMENT", "ASSESSMENT"),
    (SectionHeader::Exam, "EXAM", "EXAM"),
    (SectionHeader::Diagnosis, "DIAGNOSIS", "DIAGNOSIS"),
    (SectionHeader::Disposition, "DISPOSITION", "DISPOSITION"),
    (SectionHeader::Plan, "PLAN", "PLAN"),
    (SectionHeader::EdCourse, "EDCOURSE", "EMERGENCY DEPARTMENT COURSE"),
    (SectionHeader::Immunizations, "IMMUNIZATIONS", "IMMUNIZATIONS"),
    (SectionHeader::Imaging, "IMAGING", "IMAGING"),
    (SectionHeader::GynHx, "GYNHX", "GYNECOLOGIC HISTORY"),
    (SectionHeader::Procedures, "PROCEDURES", "PROCEDURES"),
    (SectionHeader::OtherHistory, "OTHER_HISTORY", "OTHER_HISTORY"),
    (SectionHeader::Labs, "LABS", "LABS"),
];

impl SectionHeader {
    pub const COUNT: usize = 20;

    /// All headers in class-id order.
    pub fn all() -> impl ExactSizeIterator<Item = SectionHeader> {
        TABLE.iter().map(|(h, _, _)| *h)
    }

    pub fn code(self) -> &'static str {
        TABLE[self.class_id()].1
    }

    /// Canonical expansion of the header code.
    pub fn description(self) -> &'static str {
        TABLE[self.class_id()].2
    }

    pub fn class_id(self) -> usize {
        self as usize
    }

    pub fn from_class_id(id: usize) -> Option<SectionHeader> {
        TABLE.get(id).map(|(h, _, _)| *h)
    }

    pub fn from_code(code: &str) -> Option<SectionHeader> {
        let code = code.trim();
        TABLE.iter().find(|(_, c, _)| *c == code).map(|(h, _, _)| *h)
    }
}

/// Free-function form of [`SectionHeader::description`].
pub fn section_description(header: SectionHeader) -> &'static str {
    header.description()
}

impl fmt::Display for SectionHeader {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for SectionHeader {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SectionHeader::from_code(s).ok_or_else(|| Error::UnknownHeader {
            codes: vec![s.to_string()],
        })
    }
}

impl Serialize for SectionHeader {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.code())
    }
}

impl<'de> Deserialize<'de> for SectionHeader {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        SectionHeader::from_code(&s)
            .ok_or_else(|| serde::de::Error::custom(format!("unknown section header {s:?}")))
    }
}
