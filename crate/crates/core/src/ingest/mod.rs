//! Safe-transform normalization and the dbInsert staging document.

pub mod dbinsert;
pub mod transform;
pub mod uri;

pub use dbinsert::{
    build_db_insert, parse_db_insert, DbInsertDocument, DbInsertEntry, DbInsertError,
    DbInsertReader, DBINSERT_NS,
};
pub use transform::{
    validate_normalized, NormalizedRecord, Rule, SafeTransform, Violation, ViolationKind,
};
pub use uri::{downgrade_invalid_uri, is_fetchable, scrub_uri, ScrubbedUri};
