use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::dc::DcElement;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordHeader {
    pub identifier: String,
    pub datestamp: DateTime<Utc>,
    #[serde(default)]
    pub set_specs: Vec<String>,
    #[serde(default)]
    pub deleted: bool,
}

impl RecordHeader {
    pub fn new(identifier: impl Into<String>, datestamp: DateTime<Utc>) -> Self {
        Self {
            identifier: identifier.into(),
            datestamp,
            set_specs: Vec::new(),
            deleted: false,
        }
    }
}

/// A harvested record. `raw_xml` holds the metadata payload exactly as it
/// appeared in the response; `elements` is its parsed Dublin Core view (empty
/// for native formats and for deleted records).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetadataRecord {
    pub header: RecordHeader,
    pub format_prefix: String,
    #[serde(default)]
    pub elements: Vec<DcElement>,
    #[serde(default, with = "utf8_bytes")]
    pub raw_xml: Vec<u8>,
}

impl MetadataRecord {
    pub fn identifier(&self) -> &str {
        &self.header.identifier
    }

    pub fn is_deleted(&self) -> bool {
        self.header.deleted
    }

    /// Element-wise equality, ignoring the verbatim payload bytes.
    pub fn same_content(&self, other: &MetadataRecord) -> bool {
        self.header == other.header
            && self.format_prefix == other.format_prefix
            && self.elements == other.elements
    }
}

/// Payload bytes are always valid UTF-8 (they were sliced from a validated
/// document), so they serialize as a plain string.
mod utf8_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&String::from_utf8_lossy(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        Ok(String::deserialize(d)?.into_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ResumptionToken {
    pub token: String,
    pub complete_list_size: Option<u64>,
    pub cursor: Option<u64>,
    pub expiration: Option<DateTime<Utc>>,
}

impl ResumptionToken {
    pub fn new(token: impl Into<String>) -> Self {
        Self {
            token: token.into(),
            ..Default::default()
        }
    }

    /// An empty token marks the last page and must not be sent back.
    pub fn is_terminal(&self) -> bool {
        self.token.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ProtocolErrorCode {
    #[serde(rename = "badArgument")]
    BadArgument,
    #[serde(rename = "badResumptionToken")]
    BadResumptionToken,
    #[serde(rename = "badVerb")]
    BadVerb,
    #[serde(rename = "cannotDisseminateFormat")]
    CannotDisseminateFormat,
    #[serde(rename = "idDoesNotExist")]
    IdDoesNotExist,
    #[serde(rename = "noRecordsMatch")]
    NoRecordsMatch,
    #[serde(rename = "noMetadataFormats")]
    NoMetadataFormats,
    #[serde(rename = "noSetHierarchy")]
    NoSetHierarchy,
}

impl ProtocolErrorCode {
    pub const ALL: [ProtocolErrorCode; 8] = [
        ProtocolErrorCode::BadArgument,
        ProtocolErrorCode::BadResumptionToken,
        ProtocolErrorCode::BadVerb,
        ProtocolErrorCode::CannotDisseminateFormat,
        ProtocolErrorCode::IdDoesNotExist,
        ProtocolErrorCode::NoRecordsMatch,
        ProtocolErrorCode::NoMetadataFormats,
        ProtocolErrorCode::NoSetHierarchy,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ProtocolErrorCode::BadArgument => "badArgument",
            ProtocolErrorCode::BadResumptionToken => "badResumptionToken",
            ProtocolErrorCode::BadVerb => "badVerb",
            ProtocolErrorCode::CannotDisseminateFormat => "cannotDisseminateFormat",
            ProtocolErrorCode::IdDoesNotExist => "idDoesNotExist",
            ProtocolErrorCode::NoRecordsMatch => "noRecordsMatch",
            ProtocolErrorCode::NoMetadataFormats => "noMetadataFormats",
            ProtocolErrorCode::NoSetHierarchy => "noSetHierarchy",
        }
    }
}

impl fmt::Display for ProtocolErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProtocolErrorCode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ProtocolErrorCode::ALL
            .iter()
            .copied()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown error code '{s}'"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("{code}: {message}")]
pub struct ProtocolError {
    pub code: ProtocolErrorCode,
    pub message: String,
}

impl ProtocolError {
    pub fn new(code: ProtocolErrorCode, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeletedPolicy {
    No,
    Transient,
    Persistent,
}

impl DeletedPolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            DeletedPolicy::No => "no",
            DeletedPolicy::Transient => "transient",
            DeletedPolicy::Persistent => "persistent",
        }
    }
}

impl FromStr for DeletedPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "no" => Ok(DeletedPolicy::No),
            "transient" => Ok(DeletedPolicy::Transient),
            "persistent" => Ok(DeletedPolicy::Persistent),
            other => Err(format!("unknown deletedRecord policy '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Day,
    Second,
}

impl Granularity {
    pub fn as_str(self) -> &'static str {
        match self {
            Granularity::Day => "YYYY-MM-DD",
            Granularity::Second => "YYYY-MM-DDThh:mm:ssZ",
        }
    }
}

impl FromStr for Granularity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "YYYY-MM-DD" => Ok(Granularity::Day),
            "YYYY-MM-DDThh:mm:ssZ" => Ok(Granularity::Second),
            other => Err(format!("unknown granularity '{other}'")),
        }
    }
}
