//! Phase-I URL normalization.
//!
//! Fragment dropped, scheme and host lowercased, default port removed,
//! empty path made `/`, percent-encodings normalized (uppercase hex,
//! unreserved characters decoded), then dot segments removed. Percent
//! normalization runs before dot-segment removal so that an encoded dot
//! cannot turn into a new `.` segment on a second pass.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unparseable URL {url:?}: {reason}")]
pub struct UnparseableUrl {
    pub url: String,
    pub reason: &'static str,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NormalizedUrl {
    pub canonical: String,
    pub original: String,
}

fn default_port(scheme: &str) -> Option<u16> {
    match scheme {
        "http" => Some(80),
        "https" => Some(443),
        "ftp" => Some(21),
        _ => None,
    }
}

pub fn normalize_url(url: &str) -> Result<NormalizedUrl, UnparseableUrl> {
    let fail = |reason| UnparseableUrl {
        url: url.to_string(),
        reason,
    };
    let no_fragment = url.split_once('#').map_or(url, |(u, _)| u);
    let (scheme, rest) = no_fragment.split_once("://").ok_or_else(|| fail("no scheme"))?;
    if scheme.is_empty()
        || !scheme.starts_with(|c: char| c.is_ascii_alphabetic())
        || !scheme.chars().all(|c| c.is_ascii_alphanumeric() || "+-.".contains(c))
    {
        return Err(fail("bad scheme"));
    }
    let scheme = scheme.to_ascii_lowercase();
    let auth_end = rest.find(['/', '?']).unwrap_or(rest.len());
    let (authority, tail) = rest.split_at(auth_end);
    let (path, query) = match tail.split_once('?') {
        Some((p, q)) => (p, Some(q)),
        None => (tail, None),
    };

    let (userinfo, hostport) = match authority.rsplit_once('@') {
        Some((u, h)) => (Some(u), h),
        None => (None, authority),
    };
    // the port colon is the last one outside an IPv6 literal
    let port_colon = match hostport.rfind(']') {
        Some(close) => hostport[close..].find(':').map(|i| close + i),
        None => hostport.rfind(':'),
    };
    let (host, port) = match port_colon {
        Some(i) => (&hostport[..i], Some(&hostport[i + 1..])),
        None => (hostport, None),
    };
    if host.is_empty() {
        return Err(fail("empty host"));
    }
    if host.contains(':') && !host.starts_with('[') {
        return Err(fail("colon in host"));
    }
    let port = match port {
        None | Some("") => None,
        Some(p) => {
            if !p.bytes().all(|b| b.is_ascii_digit()) {
                return Err(fail("bad port"));
            }
            let n: u16 = p.parse().map_err(|_| fail("port out of range"))?;
            (Some(n) != default_port(&scheme)).then_some(n)
        }
    };

    let mut out = String::with_capacity(url.len());
    out.push_str(&scheme);
    out.push_str("://");
    if let Some(u) = userinfo {
        out.push_str(&normalize_percent(u));
        out.push('@');
    }
    out.push_str(&lowercase_outside_escapes(&normalize_percent(host)));
    if let Some(p) = port {
        out.push(':');
        out.push_str(&p.to_string());
    }
    let path = normalize_percent(path);
    let path = remove_dot_segments(&path);
    if path.is_empty() {
        out.push('/');
    } else {
        out.push_str(&path);
    }
    if let Some(q) = query {
        out.push('?');
        out.push_str(&normalize_percent(q));
    }
    Ok(NormalizedUrl {
        canonical: out,
        original: url.to_string(),
    })
}

fn is_unreserved(b: u8) -> bool {
    b.is_ascii_alphanumeric() || matches!(b, b'-' | b'.' | b'_' | b'~')
}

/// Uppercase the hex digits of every `%XX` and decode those that stand for
/// unreserved characters. A stray `%` becomes `%25`, otherwise a decoded
/// digit could complete a new escape on the next pass.
pub fn normalize_percent(s: &str) -> String {
    let b = s.as_bytes();
    let mut out = Vec::with_capacity(b.len());
    let mut i = 0;
    while i < b.len() {
        if b[i] == b'%' && i + 2 < b.len() && b[i + 1].is_ascii_hexdigit() && b[i + 2].is_ascii_hexdigit() {
            let v = u8::from_str_radix(&s[i + 1..i + 3], 16).expect("hex digits");
            if is_unreserved(v) {
                out.push(v);
            } else {
                out.push(b'%');
                out.push(b[i + 1].to_ascii_uppercase());
                out.push(b[i + 2].to_ascii_uppercase());
            }
            i += 3;
        } else if b[i] == b'%' {
            out.extend_from_slice(b"%25");
            i += 1;
        } else {
            out.push(b[i]);
            i += 1;
        }
    }
    String::from_utf8(out).expect("only ASCII bytes were substituted")
}

fn lowercase_outside_escapes(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut hex_left = 0;
    for c in s.chars() {
        if hex_left > 0 {
            hex_left -= 1;
            out.push(c);
        } else {
            if c == '%' {
                hex_left = 2;
            }
            out.push(c.to_ascii_lowercase());
        }
    }
    out
}

/// The dot-segment removal algorithm of the generic URI syntax.
pub fn remove_dot_segments(path: &str) -> String {
    let mut input = path;
    let mut output = String::with_capacity(path.len());
    while !input.is_empty() {
        if let Some(rest) = input.strip_prefix("../") {
            input = rest;
        } else if let Some(rest) = input.strip_prefix("./") {
            input = rest;
        } else if input.starts_with("/./") {
            input = &input[2..];
        } else if input == "/." {
            input = "/";
        } else if input.starts_with("/../") || input == "/.." {
            input = if input == "/.." { "/" } else { &input[3..] };
            match output.rfind('/') {
                Some(i) => output.truncate(i),
                None => output.clear(),
            }
        } else if input == "." || input == ".." {
            input = "";
        } else {
            let start = usize::from(input.starts_with('/'));
            let end = input[start..].find('/').map_or(input.len(), |i| i + start);
            output.push_str(&input[..end]);
            input = &input[end..];
        }
    }
    output
}

#[cfg(test)]
mod tests {
    use super::*;

    fn n(u: &str) -> String {
        normalize_url(u).unwrap().canonical
    }

    #[test]
    fn examples() {
        assert_eq!(n("HTTP://Example.COM:80"), "http://example.com/");
        assert_eq!(n("http://example.com/a/./b/../c"), "http://example.com/a/c");
        assert_eq!(n("http://example.com/%7euser"), "http://example.com/~user");
        assert_eq!(n("http://example.com/a%2fb"), "http://example.com/a%2Fb");
        assert_eq!(n("ftp://Host:21/x#frag"), "ftp://host/x");
        assert_eq!(n("http://h:8080?q=%7E"), "http://h:8080/?q=~");
        assert_eq!(n("http://h:0080/"), "http://h/");
        assert_eq!(n("http://h/%2E%2E/x"), "http://h/x");
        assert_eq!(n("http://user@H/"), "http://user@h/");
        assert_eq!(n("http://%41b%2f.Org/"), "http://ab%2F.org/");
        assert_eq!(n("http://h/%%345"), "http://h/%2545");
        let c = n("http://example.com/~user?a=b");
        assert_eq!(n(&c), c);
    }

    #[test]
    fn rejects() {
        for u in ["example.com/x", "http:///x", "http://h:80:80/", "http://h:99999/", "http://h:8o/", "1ttp://h/"] {
            assert!(normalize_url(u).is_err(), "{u}");
        }
    }

    #[test]
    fn dot_segments_match_reference_examples() {
        assert_eq!(remove_dot_segments("/a/b/c/./../../g"), "/a/g");
        assert_eq!(remove_dot_segments("mid/content=5/../6"), "mid/6");
        assert_eq!(remove_dot_segments("/.."), "/");
        assert_eq!(remove_dot_segments("/a/.."), "/");
    }
}
