//! Second-granularity UTC datestamps (`YYYY-MM-DDThh:mm:ssZ`).
//!
//! Record headers are held to the strict form only: day-granularity stamps,
//! offsets other than `Z` and fractional seconds are all rejected, and the
//! error reports the byte position of the first character that broke the
//! grammar.

use chrono::{DateTime, NaiveDate, Utc};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum DatestampError {
    #[error("malformed datestamp at position {position}")]
    Malformed { position: usize },
    #[error("datestamp is not UTC (expected 'Z' at position {position})")]
    NonUtc { position: usize },
    #[error("datestamp has sub-second precision at position {position}")]
    ExcessPrecision { position: usize },
}

impl DatestampError {
    pub fn position(&self) -> usize {
        match *self {
            DatestampError::Malformed { position }
            | DatestampError::NonUtc { position }
            | DatestampError::ExcessPrecision { position } => position,
        }
    }
}

// shape of the 19 bytes before the zone designator; b'd' marks a digit
const SHAPE: &[u8; 19] = b"dddd-dd-ddTdd:dd:dd";

pub fn parse_datestamp(text: &str) -> Result<DateTime<Utc>, DatestampError> {
    let bytes = text.as_bytes();
    for (position, expected) in SHAPE.iter().enumerate() {
        let Some(&b) = bytes.get(position) else {
            return Err(DatestampError::Malformed { position });
        };
        let ok = match expected {
            b'd' => b.is_ascii_digit(),
            lit => b == *lit,
        };
        if !ok {
            return Err(DatestampError::Malformed { position });
        }
    }
    match bytes.get(19) {
        None | Some(b'+') | Some(b'-') => return Err(DatestampError::NonUtc { position: 19 }),
        Some(b'.') | Some(b',') => return Err(DatestampError::ExcessPrecision { position: 19 }),
        Some(b'Z') => {}
        Some(_) => return Err(DatestampError::Malformed { position: 19 }),
    }
    if bytes.len() > 20 {
        return Err(DatestampError::Malformed { position: 20 });
    }

    let num = |range: std::ops::Range<usize>| -> u32 {
        bytes[range]
            .iter()
            .fold(0u32, |acc, b| acc * 10 + u32::from(b - b'0'))
    };
    let (year, month, day) = (num(0..4) as i32, num(5..7), num(8..10));
    let (hour, minute, second) = (num(11..13), num(14..16), num(17..19));
    if !(1..=12).contains(&month) {
        return Err(DatestampError::Malformed { position: 5 });
    }
    let date =
        NaiveDate::from_ymd_opt(year, month, day).ok_or(DatestampError::Malformed { position: 8 })?;
    if hour > 23 {
        return Err(DatestampError::Malformed { position: 11 });
    }
    if minute > 59 {
        return Err(DatestampError::Malformed { position: 14 });
    }
    if second > 59 {
        return Err(DatestampError::Malformed { position: 17 });
    }
    let naive = date
        .and_hms_opt(hour, minute, second)
        .ok_or(DatestampError::Malformed { position: 11 })?;
    Ok(naive.and_utc())
}

pub fn format_datestamp(instant: &DateTime<Utc>) -> String {
    instant.format("%Y-%m-%dT%H:%M:%SZ").to_string()
}

/// Day-granularity form `YYYY-MM-DD`, accepted only where the protocol allows
/// it (request arguments, Identify's earliestDatestamp).
pub fn parse_day(text: &str) -> Option<NaiveDate> {
    let b = text.as_bytes();
    if b.len() != 10 || b[4] != b'-' || b[7] != b'-' {
        return None;
    }
    if !b.iter().enumerate().all(|(i, c)| i == 4 || i == 7 || c.is_ascii_digit()) {
        return None;
    }
    NaiveDate::parse_from_str(text, "%Y-%m-%d").ok()
}

/// Either granularity; day stamps resolve to midnight.
pub fn parse_flexible(text: &str) -> Result<DateTime<Utc>, DatestampError> {
    match parse_day(text) {
        Some(day) => Ok(day.and_hms_opt(0, 0, 0).expect("midnight").and_utc()),
        None => parse_datestamp(text),
    }
}

/// Truncate to whole seconds.
pub fn truncate(instant: DateTime<Utc>) -> DateTime<Utc> {
    DateTime::from_timestamp(instant.timestamp(), 0).unwrap_or(instant)
}
