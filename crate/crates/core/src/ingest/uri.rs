//! Turning identifier values into fetchable URLs.

use serde::{Deserialize, Serialize};

use crate::model::DcElement;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", content = "url", rename_all = "snake_case")]
pub enum ScrubbedUri {
    Fetchable(String),
    NotFetchable,
}

impl ScrubbedUri {
    pub fn fetchable(self) -> Option<String> {
        match self {
            ScrubbedUri::Fetchable(u) => Some(u),
            ScrubbedUri::NotFetchable => None,
        }
    }
}

const SCHEMES: [&str; 2] = ["http://", "ftp://"];

/// True when `value` starts with one of the fetchable scheme prefixes,
/// ignoring case and surrounding whitespace.
pub fn looks_fetchable(value: &str) -> bool {
    let v = value.trim_start();
    SCHEMES.iter().any(|s| {
        v.get(..s.len())
            .is_some_and(|head| head.eq_ignore_ascii_case(s))
    })
}

fn allowed_in_uri(b: u8) -> bool {
    b.is_ascii_alphanumeric() || b"-._~:/?#[]@!$&'()*+,;=".contains(&b)
}

/// Repair an `http://` or `ftp://` value into a syntactically valid URL:
/// trim, lowercase the scheme, drop line breaks and tabs, percent-encode
/// spaces and other characters a URI cannot carry. Broken `%` escapes
/// cannot be repaired.
pub fn scrub_uri(value: &str) -> ScrubbedUri {
    let v = value.trim();
    if !looks_fetchable(v) {
        return ScrubbedUri::NotFetchable;
    }
    let colon = v.find(':').expect("scheme prefix checked");
    let mut out = v[..colon].to_ascii_lowercase();
    let bytes = v[colon..].as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        let b = bytes[i];
        match b {
            b'\t' | b'\r' | b'\n' => {}
            b'%' => {
                let hex = bytes.get(i + 1..i + 3);
                if !hex.is_some_and(|h| h.iter().all(u8::is_ascii_hexdigit)) {
                    return ScrubbedUri::NotFetchable;
                }
                out.push('%');
                out.push(bytes[i + 1] as char);
                out.push(bytes[i + 2] as char);
                i += 2;
            }
            b if allowed_in_uri(b) => out.push(b as char),
            b => out.push_str(&format!("%{b:02X}")),
        }
        i += 1;
    }
    match url::Url::parse(&out) {
        Ok(u) if matches!(u.scheme(), "http" | "ftp") && u.host_str().is_some_and(|h| !h.is_empty()) => {
            ScrubbedUri::Fetchable(out)
        }
        _ => ScrubbedUri::NotFetchable,
    }
}

pub fn is_fetchable(value: &str) -> bool {
    matches!(scrub_uri(value), ScrubbedUri::Fetchable(ref u) if u == value)
}

/// Keep the URI scheme only if the value scrubs into a fetchable URL;
/// otherwise fall back to a plain identifier with the value untouched.
pub fn downgrade_invalid_uri(element: DcElement) -> DcElement {
    match scrub_uri(&element.value) {
        ScrubbedUri::Fetchable(value) => DcElement { value, ..element },
        ScrubbedUri::NotFetchable => DcElement {
            scheme: None,
            ..element
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DcName;

    fn fetch(s: &str) -> Option<String> {
        scrub_uri(s).fetchable()
    }

    #[test]
    fn scrubs() {
        assert_eq!(fetch("http://example.org/a b.pdf").as_deref(), Some("http://example.org/a%20b.pdf"));
        assert_eq!(fetch(" HTTP://example.org/x ").as_deref(), Some("http://example.org/x"));
        assert_eq!(fetch("ftp://host/dir/\n  file").as_deref(), Some("ftp://host/dir/  file".replace(' ', "%20").as_str()));
        assert_eq!(fetch("http://example.org/café").as_deref(), Some("http://example.org/caf%C3%A9"));
        assert_eq!(fetch("http://example.org/%7e").as_deref(), Some("http://example.org/%7e"));
    }

    #[test]
    fn rejects() {
        for v in ["doi:10.1000/182", "not a url", "ftp://host/file%ZZ", "http://", "https://example.org/", "http://exa mple.org/", "mailto:x@y"] {
            assert_eq!(scrub_uri(v), ScrubbedUri::NotFetchable, "{v}");
        }
    }

    #[test]
    fn scrub_is_a_fixed_point() {
        for v in ["http://example.org/a b.pdf", "ftp://h/x<y>", "http://x.org/?q=a b&c=\"d\""] {
            let once = fetch(v).unwrap();
            assert_eq!(fetch(&once).as_deref(), Some(once.as_str()));
        }
    }

    #[test]
    fn downgrade() {
        let bad = DcElement::new(DcName::Identifier, "not a url").with_scheme("URI");
        let out = downgrade_invalid_uri(bad);
        assert_eq!(out.scheme, None);
        assert_eq!(out.value, "not a url");
        let ok = DcElement::new(DcName::Identifier, "http://example.org/ok").with_scheme("URI");
        assert_eq!(downgrade_invalid_uri(ok.clone()), ok);
        let esc = DcElement::new(DcName::Identifier, "ftp://host/file%ZZ").with_scheme("URI");
        assert_eq!(downgrade_invalid_uri(esc).scheme, None);
    }
}
