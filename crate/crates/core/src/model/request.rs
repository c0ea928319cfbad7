//! Request argument validation for the provider side.

use chrono::{DateTime, Utc};

use super::datestamp::{self, format_datestamp};
use super::record::{Granularity, ProtocolError, ProtocolErrorCode};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bound {
    pub instant: DateTime<Utc>,
    pub granularity: Granularity,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ListQuery {
    pub prefix: String,
    pub set: Option<String>,
    pub from: Option<Bound>,
    pub until: Option<Bound>,
}

impl ListQuery {
    /// Inclusive bounds in seconds. A day-granularity `until` covers the
    /// whole day.
    pub fn range(&self) -> (Option<DateTime<Utc>>, Option<DateTime<Utc>>) {
        let from = self.from.as_ref().map(|b| b.instant);
        let until = self.until.as_ref().map(|b| match b.granularity {
            Granularity::Day => b.instant + chrono::Duration::seconds(86_399),
            Granularity::Second => b.instant,
        });
        (from, until)
    }

    pub fn contains(&self, datestamp: DateTime<Utc>) -> bool {
        let (from, until) = self.range();
        from.is_none_or(|f| datestamp >= f) && until.is_none_or(|u| datestamp <= u)
    }

    /// Set membership with hierarchy: `a` selects `a` and `a:b`.
    pub fn in_set(&self, set_specs: &[String]) -> bool {
        match &self.set {
            None => true,
            Some(want) => set_specs
                .iter()
                .any(|s| s == want || s.starts_with(&format!("{want}:"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ListArgs {
    Fresh(ListQuery),
    Resume(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OaiRequest {
    Identify,
    ListMetadataFormats { identifier: Option<String> },
    ListSets { token: Option<String> },
    GetRecord { identifier: String, prefix: String },
    ListIdentifiers(ListArgs),
    ListRecords(ListArgs),
}

impl OaiRequest {
    pub fn verb(&self) -> &'static str {
        match self {
            OaiRequest::Identify => "Identify",
            OaiRequest::ListMetadataFormats { .. } => "ListMetadataFormats",
            OaiRequest::ListSets { .. } => "ListSets",
            OaiRequest::GetRecord { .. } => "GetRecord",
            OaiRequest::ListIdentifiers(_) => "ListIdentifiers",
            OaiRequest::ListRecords(_) => "ListRecords",
        }
    }
}

fn bad_argument(message: impl Into<String>) -> ProtocolError {
    ProtocolError::new(ProtocolErrorCode::BadArgument, message)
}

fn parse_bound(name: &str, value: &str) -> Result<Bound, ProtocolError> {
    if let Some(day) = datestamp::parse_day(value) {
        return Ok(Bound {
            instant: day.and_hms_opt(0, 0, 0).expect("midnight").and_utc(),
            granularity: Granularity::Day,
        });
    }
    datestamp::parse_datestamp(value)
        .map(|instant| Bound {
            instant,
            granularity: Granularity::Second,
        })
        .map_err(|e| bad_argument(format!("{name}: {e}")))
}

/// Validate query arguments. Errors are the protocol errors to send back.
pub fn parse_request(params: &[(String, String)]) -> Result<OaiRequest, ProtocolError> {
    let mut verb: Option<&str> = None;
    let mut args: Vec<(&str, &str)> = Vec::new();
    for (k, v) in params {
        if k == "verb" {
            if verb.is_some() {
                return Err(ProtocolError::new(ProtocolErrorCode::BadVerb, "verb repeated"));
            }
            verb = Some(v);
        } else {
            if args.iter().any(|(seen, _)| *seen == k) {
                return Err(bad_argument(format!("argument {k} repeated")));
            }
            args.push((k, v));
        }
    }
    let verb = verb.ok_or_else(|| ProtocolError::new(ProtocolErrorCode::BadVerb, "missing verb"))?;
    let allowed: &[&str] = match verb {
        "Identify" => &[],
        "ListMetadataFormats" => &["identifier"],
        "ListSets" => &["resumptionToken"],
        "GetRecord" => &["identifier", "metadataPrefix"],
        "ListIdentifiers" | "ListRecords" => {
            &["metadataPrefix", "set", "from", "until", "resumptionToken"]
        }
        other => {
            return Err(ProtocolError::new(
                ProtocolErrorCode::BadVerb,
                format!("illegal verb '{other}'"),
            ))
        }
    };
    if let Some((k, _)) = args.iter().find(|(k, _)| !allowed.contains(k)) {
        return Err(bad_argument(format!("illegal argument {k} for {verb}")));
    }
    let get = |name: &str| args.iter().find(|(k, _)| *k == name).map(|(_, v)| v.to_string());
    if let Some(token) = get("resumptionToken") {
        if args.len() > 1 {
            return Err(bad_argument("resumptionToken is an exclusive argument"));
        }
        return Ok(match verb {
            "ListSets" => OaiRequest::ListSets { token: Some(token) },
            "ListIdentifiers" => OaiRequest::ListIdentifiers(ListArgs::Resume(token)),
            _ => OaiRequest::ListRecords(ListArgs::Resume(token)),
        });
    }
    match verb {
        "Identify" => Ok(OaiRequest::Identify),
        "ListMetadataFormats" => Ok(OaiRequest::ListMetadataFormats {
            identifier: get("identifier"),
        }),
        "ListSets" => Ok(OaiRequest::ListSets { token: None }),
        "GetRecord" => {
            let identifier = get("identifier").ok_or_else(|| bad_argument("missing identifier"))?;
            let prefix =
                get("metadataPrefix").ok_or_else(|| bad_argument("missing metadataPrefix"))?;
            Ok(OaiRequest::GetRecord { identifier, prefix })
        }
        _ => {
            let prefix =
                get("metadataPrefix").ok_or_else(|| bad_argument("missing metadataPrefix"))?;
            let from = get("from").map(|v| parse_bound("from", &v)).transpose()?;
            let until = get("until").map(|v| parse_bound("until", &v)).transpose()?;
            if let (Some(f), Some(u)) = (&from, &until) {
                if f.granularity != u.granularity {
                    return Err(bad_argument("from and until have different granularities"));
                }
                if f.instant > u.instant {
                    return Err(bad_argument("from is later than until"));
                }
            }
            let query = ListQuery {
                prefix,
                set: get("set"),
                from,
                until,
            };
            Ok(if verb == "ListRecords" {
                OaiRequest::ListRecords(ListArgs::Fresh(query))
            } else {
                OaiRequest::ListIdentifiers(ListArgs::Fresh(query))
            })
        }
    }
}

/// Attributes for the `<request>` echo. Requests that failed with badVerb or
/// badArgument echo nothing.
pub fn request_echo(params: &[(String, String)], error: Option<&ProtocolError>) -> Vec<(String, String)> {
    if let Some(e) = error {
        if matches!(e.code, ProtocolErrorCode::BadVerb | ProtocolErrorCode::BadArgument) {
            return Vec::new();
        }
    }
    params.to_vec()
}

/// Inverse of [`bound_text`].
pub fn parse_bound_text(text: &str) -> Option<Bound> {
    parse_bound("", text).ok()
}

pub fn bound_text(bound: &Bound) -> String {
    match bound.granularity {
        Granularity::Day => bound.instant.format("%Y-%m-%d").to_string(),
        Granularity::Second => format_datestamp(&bound.instant),
    }
}
