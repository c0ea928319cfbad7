//! Strict XML reading.
//!
//! Every document is first checked as strict UTF-8 (overlong forms, surrogates
//! and out-of-range scalars are rejected with the offending byte offset), then
//! for characters XML 1.0 forbids, and only then tokenized. The result is a
//! small namespace-resolved tree whose elements remember the byte ranges they
//! came from, so callers can slice verbatim payloads out of the source.

use std::borrow::Cow;
use std::ops::Range;

use quick_xml::errors::Error as QxError;
use quick_xml::events::{BytesStart, Event};
use quick_xml::name::ResolveResult;
use quick_xml::NsReader;
use thiserror::Error;

pub const XSI_NS: &str = "http://www.w3.org/2001/XMLSchema-instance";
pub const XML_NS: &str = "http://www.w3.org/XML/1998/namespace";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum XmlError {
    #[error("invalid UTF-8 at byte offset {offset} (bytes {bytes})")]
    InvalidUtf8 { offset: usize, bytes: String },
    #[error("character U+{code:04X} not allowed in XML at byte offset {offset}")]
    IllegalChar { offset: usize, code: u32 },
    #[error("bad escape or entity near byte offset {offset}: {message}")]
    Escape { offset: usize, message: String },
    #[error("malformed XML at byte offset {offset}: {message}")]
    Syntax { offset: usize, message: String },
}

impl XmlError {
    pub fn offset(&self) -> usize {
        match self {
            XmlError::InvalidUtf8 { offset, .. }
            | XmlError::IllegalChar { offset, .. }
            | XmlError::Escape { offset, .. }
            | XmlError::Syntax { offset, .. } => *offset,
        }
    }
}

/// Strict UTF-8 plus the XML 1.0 `Char` production.
pub fn check_text_bytes(bytes: &[u8]) -> Result<&str, XmlError> {
    let text = match std::str::from_utf8(bytes) {
        Ok(text) => text,
        Err(err) => {
            let offset = err.valid_up_to();
            let len = err.error_len().unwrap_or(bytes.len() - offset).max(1);
            let end = (offset + len).min(bytes.len());
            return Err(XmlError::InvalidUtf8 {
                offset,
                bytes: hex_bytes(&bytes[offset..end]),
            });
        }
    };
    for (offset, ch) in text.char_indices() {
        if !is_xml_char(ch) {
            return Err(XmlError::IllegalChar {
                offset,
                code: ch as u32,
            });
        }
    }
    Ok(text)
}

pub fn is_xml_char(ch: char) -> bool {
    matches!(ch, '\t' | '\n' | '\r' | '\u{20}'..='\u{D7FF}' | '\u{E000}'..='\u{FFFD}' | '\u{10000}'..='\u{10FFFF}')
}

fn hex_bytes(bytes: &[u8]) -> String {
    bytes
        .iter()
        .map(|b| format!("{b:02X}"))
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Attr {
    pub name: String,
    pub ns: Option<String>,
    pub value: String,
}

impl Attr {
    pub fn local_name(&self) -> &str {
        local_part(&self.name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Node {
    Element(Element),
    Text(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Element {
    /// Qualified name as written.
    pub name: String,
    /// Resolved namespace URI, if the prefix is bound.
    pub ns: Option<String>,
    pub attrs: Vec<Attr>,
    pub children: Vec<Node>,
    /// Bytes of the whole element, start tag through end tag.
    pub span: Range<usize>,
    /// Bytes between the start and end tags.
    pub content: Range<usize>,
}

pub fn local_part(name: &str) -> &str {
    name.rsplit_once(':').map_or(name, |(_, local)| local)
}

pub fn prefix_part(name: &str) -> Option<&str> {
    name.split_once(':').map(|(prefix, _)| prefix)
}

impl Element {
    pub fn local_name(&self) -> &str {
        local_part(&self.name)
    }

    pub fn prefix(&self) -> Option<&str> {
        prefix_part(&self.name)
    }

    pub fn attr(&self, name: &str) -> Option<&str> {
        self.attrs
            .iter()
            .find(|a| a.name == name)
            .map(|a| a.value.as_str())
    }

    /// Attribute lookup by namespace URI and local name.
    pub fn attr_ns(&self, ns: &str, local: &str) -> Option<&str> {
        self.attrs
            .iter()
            .find(|a| a.local_name() == local && a.ns.as_deref() == Some(ns))
            .map(|a| a.value.as_str())
    }

    pub fn elements(&self) -> impl Iterator<Item = &Element> {
        self.children.iter().filter_map(|n| match n {
            Node::Element(e) => Some(e),
            Node::Text(_) => None,
        })
    }

    pub fn child(&self, local: &str) -> Option<&Element> {
        self.elements().find(|e| e.local_name() == local)
    }

    pub fn children_named<'a>(&'a self, local: &'a str) -> impl Iterator<Item = &'a Element> + 'a {
        self.elements().filter(move |e| e.local_name() == local)
    }

    /// Concatenated direct text children.
    pub fn text(&self) -> String {
        let mut out = String::new();
        for node in &self.children {
            if let Node::Text(t) = node {
                out.push_str(t);
            }
        }
        out
    }

    /// True if there is non-whitespace text directly under this element.
    pub fn has_text(&self) -> bool {
        self.children
            .iter()
            .any(|n| matches!(n, Node::Text(t) if !t.trim().is_empty()))
    }
}

/// Parse a complete document with exactly one root element.
pub fn parse_document(bytes: &[u8]) -> Result<Element, XmlError> {
    let text = check_text_bytes(bytes)?;
    let mut reader = NsReader::from_str(text);
    reader.config_mut().trim_text(false);
    reader.config_mut().check_end_names = true;
    let mut builder = TreeBuilder::default();
    let mut root: Option<Element> = None;
    loop {
        let before = reader.buffer_position() as usize;
        let (resolved, event) = reader
            .read_resolved_event()
            .map(|(r, e)| (ns_string(&r), e.into_owned()))
            .map_err(|e| convert_error(e, reader.error_position() as usize))?;
        let after = reader.buffer_position() as usize;
        match event {
            Event::Eof => break,
            Event::Start(ref start) | Event::Empty(ref start) if builder.depth() == 0 => {
                if root.is_some() {
                    return Err(XmlError::Syntax {
                        offset: before,
                        message: "more than one root element".into(),
                    });
                }
                let empty = matches!(event, Event::Empty(_));
                if let Some(done) = builder.open(&reader, start, resolved, before, after, empty)? {
                    root = Some(done);
                }
            }
            Event::Text(ref t) if builder.depth() == 0 => {
                let raw = t.unescape().map_err(|e| XmlError::Escape {
                    offset: before,
                    message: e.to_string(),
                })?;
                if !raw.trim().is_empty() {
                    return Err(XmlError::Syntax {
                        offset: before,
                        message: "text outside the root element".into(),
                    });
                }
            }
            Event::CData(_) if builder.depth() == 0 => {
                return Err(XmlError::Syntax {
                    offset: before,
                    message: "CDATA outside the root element".into(),
                });
            }
            other => {
                if let Some(done) = builder.feed(&reader, other, resolved, before, after)? {
                    root = Some(done);
                }
            }
        }
    }
    if builder.depth() > 0 {
        return Err(XmlError::Syntax {
            offset: bytes.len(),
            message: "unexpected end of document inside an element".into(),
        });
    }
    root.ok_or(XmlError::Syntax {
        offset: 0,
        message: "no root element".into(),
    })
}

fn ns_string(r: &ResolveResult<'_>) -> Option<String> {
    match r {
        ResolveResult::Bound(ns) => Some(String::from_utf8_lossy(ns.as_ref()).into_owned()),
        _ => None,
    }
}

fn convert_error(err: QxError, offset: usize) -> XmlError {
    match err {
        QxError::Escape(e) => XmlError::Escape {
            offset,
            message: e.to_string(),
        },
        QxError::InvalidAttr(e) => XmlError::Syntax {
            offset,
            message: format!("attribute: {e}"),
        },
        other => XmlError::Syntax {
            offset,
            message: other.to_string(),
        },
    }
}

/// Incremental tree construction from a stream of reader events.
#[derive(Default)]
pub struct TreeBuilder {
    stack: Vec<Element>,
}

impl TreeBuilder {
    pub fn depth(&self) -> usize {
        self.stack.len()
    }

    /// Start a subtree. Returns the finished element when it was empty.
    pub fn open<R>(
        &mut self,
        reader: &NsReader<R>,
        start: &BytesStart<'_>,
        ns: Option<String>,
        before: usize,
        after: usize,
        empty: bool,
    ) -> Result<Option<Element>, XmlError> {
        let element = make_element(reader, start, ns, before, after)?;
        if empty {
            if let Some(parent) = self.stack.last_mut() {
                parent.children.push(Node::Element(element));
                Ok(None)
            } else {
                Ok(Some(element))
            }
        } else {
            self.stack.push(element);
            Ok(None)
        }
    }

    /// Feed one event. Returns the root of the subtree when it closes.
    pub fn feed<R>(
        &mut self,
        reader: &NsReader<R>,
        event: Event<'_>,
        ns: Option<String>,
        before: usize,
        after: usize,
    ) -> Result<Option<Element>, XmlError> {
        match event {
            Event::Start(ref start) => self.open(reader, start, ns, before, after, false),
            Event::Empty(ref start) => self.open(reader, start, ns, before, after, true),
            Event::End(_) => {
                let mut element = self.stack.pop().ok_or(XmlError::Syntax {
                    offset: before,
                    message: "unbalanced end tag".into(),
                })?;
                element.content.end = before;
                element.span.end = after;
                if let Some(parent) = self.stack.last_mut() {
                    parent.children.push(Node::Element(element));
                    Ok(None)
                } else {
                    Ok(Some(element))
                }
            }
            Event::Text(t) => {
                let text = t.unescape().map_err(|e| XmlError::Escape {
                    offset: before,
                    message: e.to_string(),
                })?;
                self.push_text(text);
                Ok(None)
            }
            Event::CData(c) => {
                let text = String::from_utf8(c.into_inner().into_owned()).map_err(|e| {
                    XmlError::InvalidUtf8 {
                        offset: before + e.utf8_error().valid_up_to(),
                        bytes: String::new(),
                    }
                })?;
                self.push_text(Cow::Owned(text));
                Ok(None)
            }
            Event::DocType(_) if !self.stack.is_empty() => Err(XmlError::Syntax {
                offset: before,
                message: "DOCTYPE inside an element".into(),
            }),
            Event::Decl(_) if !self.stack.is_empty() || before != 0 => Err(XmlError::Syntax {
                offset: before,
                message: "XML declaration not at document start".into(),
            }),
            _ => Ok(None),
        }
    }

    fn push_text(&mut self, text: Cow<'_, str>) {
        if let Some(parent) = self.stack.last_mut() {
            if let Some(Node::Text(prev)) = parent.children.last_mut() {
                prev.push_str(&text);
            } else {
                parent.children.push(Node::Text(text.into_owned()));
            }
        }
    }
}

fn make_element<R>(
    reader: &NsReader<R>,
    start: &BytesStart<'_>,
    ns: Option<String>,
    before: usize,
    after: usize,
) -> Result<Element, XmlError> {
    let name = String::from_utf8_lossy(start.name().as_ref()).into_owned();
    let mut attrs = Vec::new();
    for attr in start.attributes() {
        let attr = attr.map_err(|e| XmlError::Syntax {
            offset: before,
            message: format!("attribute: {e}"),
        })?;
        let value = attr.unescape_value().map_err(|e| XmlError::Escape {
            offset: before,
            message: e.to_string(),
        })?;
        let (resolved, _) = reader.resolve_attribute(attr.key);
        let attr_name = String::from_utf8_lossy(attr.key.as_ref()).into_owned();
        let attr_ns = if prefix_part(&attr_name) == Some("xml") {
            Some(XML_NS.to_string())
        } else {
            ns_string(&resolved)
        };
        attrs.push(Attr {
            name: attr_name,
            ns: attr_ns,
            value: value.into_owned(),
        });
    }
    Ok(Element {
        name,
        ns,
        attrs,
        children: Vec::new(),
        span: before..after,
        content: after..after,
    })
}

/// Escape character data.
pub fn escape_text(s: &str) -> Cow<'_, str> {
    quick_xml::escape::partial_escape(s)
}

/// Escape an attribute value (double-quoted).
pub fn escape_attr(s: &str) -> Cow<'_, str> {
    quick_xml::escape::escape(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spans_slice_source_exactly() {
        let src = br#"<?xml version="1.0"?>
<root xmlns:a="urn:a"><a:x k="v">hi &amp; bye</a:x><y/></root>"#;
        let root = parse_document(src).unwrap();
        let x = root.child("x").unwrap();
        assert_eq!(&src[x.span.clone()], br#"<a:x k="v">hi &amp; bye</a:x>"#);
        assert_eq!(&src[x.content.clone()], b"hi &amp; bye");
        assert_eq!(x.text(), "hi & bye");
        assert_eq!(x.ns.as_deref(), Some("urn:a"));
        let y = root.child("y").unwrap();
        assert_eq!(&src[y.span.clone()], b"<y/>");
    }

    #[test]
    fn overlong_encoding_reports_offset() {
        let mut src = b"<r><t>ab".to_vec();
        let at = src.len();
        src.extend_from_slice(&[0xC0, 0x80]);
        src.extend_from_slice(b"</t></r>");
        match parse_document(&src) {
            Err(XmlError::InvalidUtf8 { offset, bytes }) => {
                assert_eq!(offset, at);
                assert!(bytes.starts_with("C0"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unescaped_ampersand_is_escape_error() {
        let err = parse_document(b"<r><i>http://x/?a=1&b=2</i></r>").unwrap_err();
        assert!(matches!(err, XmlError::Escape { .. }), "{err:?}");
    }

    #[test]
    fn structural_errors() {
        assert!(matches!(
            parse_document(b"<r><a></r>"),
            Err(XmlError::Syntax { .. })
        ));
        assert!(matches!(
            parse_document(b"<r></r><r/>"),
            Err(XmlError::Syntax { .. })
        ));
        assert!(matches!(parse_document(b"<r>"), Err(XmlError::Syntax { .. })));
        assert!(matches!(parse_document(b""), Err(XmlError::Syntax { .. })));
        assert!(matches!(
            parse_document(b"<r>\x01</r>"),
            Err(XmlError::IllegalChar { .. })
        ));
        assert!(matches!(
            parse_document(b"junk<r/>"),
            Err(XmlError::Syntax { .. })
        ));
    }
}
