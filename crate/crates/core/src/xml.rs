//! Closed-schema XML subset used by every descriptor in this crate.
//!
//! Supported: elements, attributes, text-only leaves, comments, the five
//! predefined entities and numeric character references, and an optional
//! leading `<?xml ...?>` declaration. Namespaces, CDATA, DOCTYPE, processing
//! instructions and mixed content are rejected.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

/// Parse failure with the 1-based line where it was detected.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {message}")]
pub struct XmlError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed path `{path}`: {reason}")]
pub struct MalformedPath {
    pub path: String,
    pub reason: String,
}

/// One element of a descriptor tree.
///
/// A node carries either text or children, never both. Whitespace-only text
/// is insignificant and parses as no text.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DescriptorNode {
    pub element_name: String,
    pub attributes: BTreeMap<String, String>,
    pub text: Option<String>,
    pub children: Vec<DescriptorNode>,
}

impl DescriptorNode {
    pub fn new(name: impl Into<String>) -> Self {
        DescriptorNode {
            element_name: name.into(),
            ..Default::default()
        }
    }

    pub fn with_attr(mut self, name: impl Into<String>, value: impl Into<String>) -> Self {
        self.attributes.insert(name.into(), value.into());
        self
    }

    pub fn with_child(mut self, child: DescriptorNode) -> Self {
        self.children.push(child);
        self
    }

    pub fn with_text(mut self, text: impl Into<String>) -> Self {
        self.text = Some(text.into());
        self
    }

    pub fn attr(&self, name: &str) -> Option<&str> {
        self.attributes.get(name).map(String::as_str)
    }

    /// Direct children with the given element name.
    pub fn children_named<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a DescriptorNode> {
        self.children.iter().filter(move |c| c.element_name == name)
    }

    /// Checks naming rules and the text-xor-children rule over the whole subtree.
    pub fn check_well_formed(&self) -> Result<(), String> {
        if !is_name(&self.element_name) {
            return Err(format!("invalid element name `{}`", self.element_name));
        }
        for key in self.attributes.keys() {
            if !is_name(key) {
                return Err(format!("invalid attribute name `{key}` on <{}>", self.element_name));
            }
        }
        if let Some(text) = &self.text {
            if !self.children.is_empty() {
                return Err(format!("mixed content in <{}>", self.element_name));
            }
            if text.trim_matches(WS).is_empty() {
                return Err(format!("whitespace-only text in <{}>", self.element_name));
            }
        }
        self.children.iter().try_for_each(DescriptorNode::check_well_formed)
    }
}

impl fmt::Display for DescriptorNode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&String::from_utf8_lossy(&canonical_bytes(self)))
    }
}

const WS: [char; 4] = [' ', '\t', '\r', '\n'];

/// `[A-Za-z][A-Za-z0-9_-]*`
pub fn is_name(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

/// Deterministic serialization: attributes sorted by name, no whitespace
/// between elements, text escaped but otherwise verbatim.
pub fn canonical_bytes(node: &DescriptorNode) -> Vec<u8> {
    let mut out = String::new();
    write_canonical(node, &mut out);
    out.into_bytes()
}

fn write_canonical(node: &DescriptorNode, out: &mut String) {
    out.push('<');
    out.push_str(&node.element_name);
    // BTreeMap iterates in bytewise key order.
    for (k, v) in &node.attributes {
        out.push(' ');
        out.push_str(k);
        out.push_str("=\"");
        escape_into(v, true, out);
        out.push('"');
    }
    let text = node.text.as_deref().filter(|t| !t.is_empty());
    if text.is_none() && node.children.is_empty() {
        out.push_str("/>");
        return;
    }
    out.push('>');
    if let Some(t) = text {
        escape_into(t, false, out);
    }
    for child in &node.children {
        write_canonical(child, out);
    }
    out.push_str("</");
    out.push_str(&node.element_name);
    out.push('>');
}

fn escape_into(s: &str, attribute: bool, out: &mut String) {
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' if attribute => out.push_str("&quot;"),
            '\t' if attribute => out.push_str("&#9;"),
            '\n' if attribute => out.push_str("&#10;"),
            '\r' => out.push_str("&#13;"),
            c => out.push(c),
        }
    }
}

pub fn parse(data: &[u8]) -> Result<DescriptorNode, XmlError> {
    let text = std::str::from_utf8(data).map_err(|e| {
        let line = 1 + data[..e.valid_up_to()].iter().filter(|&&b| b == b'\n').count();
        XmlError {
            line,
            message: "invalid UTF-8".into(),
        }
    })?;
    let mut p = Parser { src: text, pos: 0 };
    p.skip_bom();
    p.skip_misc(true)?;
    if p.at_end() {
        return Err(p.err("no root element"));
    }
    let root = p.element()?;
    p.skip_misc(false)?;
    if !p.at_end() {
        return Err(p.err("content after root element"));
    }
    Ok(root)
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn err(&self, message: impl Into<String>) -> XmlError {
        let line = 1 + self.src[..self.pos].bytes().filter(|&b| b == b'\n').count();
        XmlError {
            line,
            message: message.into(),
        }
    }

    fn rest(&self) -> &'a str {
        &self.src[self.pos..]
    }

    fn at_end(&self) -> bool {
        self.pos >= self.src.len()
    }

    fn peek(&self) -> Option<char> {
        self.rest().chars().next()
    }

    fn skip_bom(&mut self) {
        if self.rest().starts_with('\u{feff}') {
            self.pos += '\u{feff}'.len_utf8();
        }
    }

    fn skip_ws(&mut self) {
        let trimmed = self.rest().trim_start_matches(WS);
        self.pos = self.src.len() - trimmed.len();
    }

    fn expect(&mut self, s: &str) -> Result<(), XmlError> {
        if self.rest().starts_with(s) {
            self.pos += s.len();
            Ok(())
        } else {
            Err(self.err(format!("expected `{s}`")))
        }
    }

    /// Whitespace and comments outside the root; the XML declaration is only
    /// accepted before it.
    fn skip_misc(&mut self, prolog: bool) -> Result<(), XmlError> {
        let mut first = true;
        loop {
            if prolog && first && self.rest().starts_with("<?xml") {
                let end = self
                    .rest()
                    .find("?>")
                    .ok_or_else(|| self.err("unterminated XML declaration"))?;
                self.pos += end + 2;
            }
            first = false;
            self.skip_ws();
            if self.rest().starts_with("<!--") {
                self.comment()?;
            } else if self.rest().starts_with("<?") {
                return Err(self.err("processing instructions are not supported"));
            } else if self.rest().starts_with("<!") {
                return Err(self.err("DOCTYPE declarations are not supported"));
            } else {
                return Ok(());
            }
        }
    }

    fn comment(&mut self) -> Result<(), XmlError> {
        self.pos += 4;
        let end = self
            .rest()
            .find("-->")
            .ok_or_else(|| self.err("unterminated comment"))?;
        self.pos += end + 3;
        Ok(())
    }

    fn name(&mut self) -> Result<&'a str, XmlError> {
        let rest = self.rest();
        let len = rest
            .char_indices()
            .find(|&(i, c)| {
                if i == 0 {
                    !c.is_ascii_alphabetic()
                } else {
                    !(c.is_ascii_alphanumeric() || c == '_' || c == '-')
                }
            })
            .map(|(i, _)| i)
            .unwrap_or(rest.len());
        if len == 0 {
            return Err(self.err("expected a name"));
        }
        if rest[len..].starts_with(':') {
            return Err(self.err("namespaces are not supported"));
        }
        self.pos += len;
        Ok(&rest[..len])
    }

    fn element(&mut self) -> Result<DescriptorNode, XmlError> {
        self.expect("<")?;
        let name = self.name()?;
        let mut node = DescriptorNode::new(name);
        loop {
            let before = self.pos;
            self.skip_ws();
            match self.peek() {
                Some('/') => {
                    self.expect("/>")?;
                    return Ok(node);
                }
                Some('>') => {
                    self.pos += 1;
                    break;
                }
                Some(_) => {
                    if self.pos == before {
                        return Err(self.err("expected whitespace before attribute"));
                    }
                    let key = self.name()?;
                    self.skip_ws();
                    self.expect("=")?;
                    self.skip_ws();
                    let value = self.attr_value()?;
                    if node.attributes.insert(key.to_string(), value).is_some() {
                        return Err(self.err(format!("duplicate attribute `{key}`")));
                    }
                }
                None => return Err(self.err("unexpected end of input in tag")),
            }
        }

        let mut text = String::new();
        let mut has_text = false;
        loop {
            if self.at_end() {
                return Err(self.err(format!("unclosed element <{name}>")));
            }
            let rest = self.rest();
            if rest.starts_with("</") {
                self.pos += 2;
                let close = self.name()?;
                if close != name {
                    return Err(self.err(format!("mismatched close tag </{close}> for <{name}>")));
                }
                self.skip_ws();
                self.expect(">")?;
                break;
            } else if rest.starts_with("<!--") {
                self.comment()?;
            } else if rest.starts_with("<![CDATA[") {
                return Err(self.err("CDATA sections are not supported"));
            } else if rest.starts_with("<?") {
                return Err(self.err("processing instructions are not supported"));
            } else if rest.starts_with('<') {
                node.children.push(self.element()?);
            } else {
                let end = rest.find('<').unwrap_or(rest.len());
                let raw = &rest[..end];
                let decoded = self.decode(raw)?;
                if !raw.trim_matches(WS).is_empty() {
                    has_text = true;
                }
                text.push_str(&decoded);
                self.pos += end;
            }
        }

        if !node.children.is_empty() {
            if has_text {
                return Err(self.err(format!("mixed content in <{name}>")));
            }
        } else if has_text {
            node.text = Some(text);
        }
        Ok(node)
    }

    fn attr_value(&mut self) -> Result<String, XmlError> {
        let quote = match self.peek() {
            Some(q @ ('"' | '\'')) => q,
            _ => return Err(self.err("expected quoted attribute value")),
        };
        self.pos += 1;
        let rest = self.rest();
        let end = rest
            .find(quote)
            .ok_or_else(|| self.err("unterminated attribute value"))?;
        let raw = &rest[..end];
        if raw.contains('<') {
            return Err(self.err("`<` in attribute value"));
        }
        let value = self.decode(raw)?;
        self.pos += end + 1;
        Ok(value)
    }

    fn decode(&self, raw: &str) -> Result<String, XmlError> {
        let mut out = String::with_capacity(raw.len());
        let mut rest = raw;
        while let Some(amp) = rest.find('&') {
            out.push_str(&rest[..amp]);
            let after = &rest[amp + 1..];
            let semi = after
                .find(';')
                .ok_or_else(|| self.err("unterminated entity reference"))?;
            let entity = &after[..semi];
            let c = match entity {
                "lt" => '<',
                "gt" => '>',
                "amp" => '&',
                "quot" => '"',
                "apos" => '\'',
                _ => {
                    let code = if let Some(hex) = entity.strip_prefix("#x") {
                        u32::from_str_radix(hex, 16).ok()
                    } else if let Some(dec) = entity.strip_prefix('#') {
                        dec.parse().ok()
                    } else {
                        None
                    };
                    code.and_then(char::from_u32)
                        .ok_or_else(|| self.err(format!("unknown entity `&{entity};`")))?
                }
            };
            out.push(c);
            rest = &after[semi + 1..];
        }
        out.push_str(rest);
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Step {
    name: String,
    predicate: Option<(String, String)>,
}

fn parse_path(path: &str) -> Result<Vec<Step>, MalformedPath> {
    let bad = |reason: &str| MalformedPath {
        path: path.to_string(),
        reason: reason.to_string(),
    };
    let body = path.strip_prefix('/').ok_or_else(|| bad("must start with `/`"))?;
    if body.is_empty() {
        return Err(bad("empty path"));
    }
    // Predicate values may contain `/`, so split by hand.
    let mut steps = Vec::new();
    let mut rest = body;
    loop {
        let name_end = rest.find(['/', '[']).unwrap_or(rest.len());
        let name = &rest[..name_end];
        if !is_name(name) {
            return Err(bad("invalid element name"));
        }
        rest = &rest[name_end..];
        let mut predicate = None;
        if let Some(p) = rest.strip_prefix("[@") {
            let eq = p.find('=').ok_or_else(|| bad("predicate needs `=`"))?;
            let attr = &p[..eq];
            if !is_name(attr) {
                return Err(bad("invalid attribute name in predicate"));
            }
            let after = &p[eq + 1..];
            let quote = after
                .chars()
                .next()
                .filter(|c| *c == '\'' || *c == '"')
                .ok_or_else(|| bad("predicate value must be quoted"))?;
            let close = after[1..]
                .find(quote)
                .ok_or_else(|| bad("unterminated predicate value"))?;
            let value = &after[1..1 + close];
            rest = after[1 + close + 1..]
                .strip_prefix(']')
                .ok_or_else(|| bad("expected `]`"))?;
            predicate = Some((attr.to_string(), value.to_string()));
        }
        steps.push(Step {
            name: name.to_string(),
            predicate,
        });
        if rest.is_empty() {
            break;
        }
        rest = rest.strip_prefix('/').ok_or_else(|| bad("unexpected character"))?;
        if rest.is_empty() {
            return Err(bad("trailing `/`"));
        }
    }
    Ok(steps)
}

fn step_matches(step: &Step, node: &DescriptorNode) -> bool {
    node.element_name == step.name
        && step
            .predicate
            .as_ref()
            .is_none_or(|(k, v)| node.attr(k) == Some(v.as_str()))
}

/// Absolute path lookup: `/unit/reference[@name='jdbc/X']`. Results are in
/// document order.
pub fn query<'a>(root: &'a DescriptorNode, path: &str) -> Result<Vec<&'a DescriptorNode>, MalformedPath> {
    let steps = parse_path(path)?;
    let (first, rest) = steps.split_first().expect("parse_path yields at least one step");
    let mut current: Vec<&DescriptorNode> = if step_matches(first, root) {
        vec![root]
    } else {
        Vec::new()
    };
    for step in rest {
        current = current
            .into_iter()
            .flat_map(|n| n.children.iter())
            .filter(|c| step_matches(step, c))
            .collect();
    }
    Ok(current)
}
