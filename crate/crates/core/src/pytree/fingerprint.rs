//! Structure fingerprints and their canonical text form.
//!
//! Grammar (whitespace-free):
//!
//! ```text
//! fp      := '*'
//!          | 'Seq[' fps ']'
//!          | 'Map{' [ name ':' fp { ',' name ':' fp } ] '}'
//!          | 'Tup(' fps ')'
//!          | 'Reg<' name ';' [ entry { ',' entry } ] '>(' fps ')'
//! fps     := [ fp { ',' fp } ]
//! entry   := name '=' static
//! static  := 'i:' int | 'f:' float | 'b:' bool | 'fn:' name
//!          | 'opaque:' u64 | 'sentinel'
//! name    := [A-Za-z0-9_.-]+ | '"' escaped-string '"'
//! ```
//!
//! Equality and hashing of a [`Fingerprint`] are defined on this text.

use std::fmt;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use crate::error::{Error, Result};

use super::leaf::{lookup_function, Leaf, Opaque};

/// Static data carried by a registered node: named non-array leaves.
pub type StaticPayload = Vec<(Arc<str>, Leaf)>;

#[derive(Debug, Clone)]
pub enum FpNode {
    Leaf,
    Seq(Vec<FpNode>),
    Map(Vec<(String, FpNode)>),
    Tup(Vec<FpNode>),
    Reg {
        tag: Arc<str>,
        payload: StaticPayload,
        children: Vec<FpNode>,
    },
}

impl FpNode {
    pub fn num_leaves(&self) -> usize {
        match self {
            FpNode::Leaf => 1,
            FpNode::Seq(c) | FpNode::Tup(c) => c.iter().map(FpNode::num_leaves).sum(),
            FpNode::Map(c) => c.iter().map(|(_, n)| n.num_leaves()).sum(),
            FpNode::Reg { children, .. } => children.iter().map(FpNode::num_leaves).sum(),
        }
    }

    fn render(&self, out: &mut String) {
        match self {
            FpNode::Leaf => out.push('*'),
            FpNode::Seq(children) => {
                out.push_str("Seq[");
                render_list(children, out);
                out.push(']');
            }
            FpNode::Map(children) => {
                out.push_str("Map{");
                for (i, (k, child)) in children.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    out.push_str(&quote_name(k));
                    out.push(':');
                    child.render(out);
                }
                out.push('}');
            }
            FpNode::Tup(children) => {
                out.push_str("Tup(");
                render_list(children, out);
                out.push(')');
            }
            FpNode::Reg {
                tag,
                payload,
                children,
            } => {
                out.push_str("Reg<");
                out.push_str(&quote_name(tag));
                out.push(';');
                for (i, (name, value)) in payload.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    out.push_str(&quote_name(name));
                    out.push('=');
                    out.push_str(&value.static_text());
                }
                out.push_str(">(");
                render_list(children, out);
                out.push(')');
            }
        }
    }
}

fn render_list(children: &[FpNode], out: &mut String) {
    for (i, child) in children.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        child.render(out);
    }
}

fn is_bare(c: char) -> bool {
    c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '-')
}

pub(crate) fn quote_name(name: &str) -> String {
    if !name.is_empty() && name.chars().all(is_bare) {
        name.to_string()
    } else {
        format!("{name:?}")
    }
}

/// Canonical, hashable description of a tree's container skeleton and static
/// payloads, with every leaf replaced by `*`.
#[derive(Clone)]
pub struct Fingerprint {
    root: Arc<FpNode>,
    text: Arc<str>,
    num_leaves: usize,
}

impl Fingerprint {
    pub fn new(root: FpNode) -> Self {
        let mut text = String::new();
        root.render(&mut text);
        let num_leaves = root.num_leaves();
        Fingerprint {
            root: Arc::new(root),
            text: text.into(),
            num_leaves,
        }
    }

    pub fn root(&self) -> &FpNode {
        &self.root
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }

    pub fn num_leaves(&self) -> usize {
        self.num_leaves
    }

    /// Parses the canonical text form. Function names in static payloads are
    /// resolved through the function registry.
    pub fn parse(text: &str) -> Result<Self> {
        let mut p = Parser { s: text, pos: 0 };
        let root = p.fp()?;
        if p.pos != text.len() {
            return Err(p.err("trailing characters"));
        }
        Ok(Fingerprint::new(root))
    }

    /// Parses a single static value as rendered by [`Leaf::static_text`].
    pub fn parse_static(text: &str) -> Result<Leaf> {
        let mut p = Parser { s: text, pos: 0 };
        let leaf = p.static_leaf()?;
        if p.pos != text.len() {
            return Err(p.err("trailing characters"));
        }
        Ok(leaf)
    }

    /// A human-readable access path for every leaf, in flatten order.
    pub fn leaf_paths(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.num_leaves);
        collect_paths(&self.root, &mut String::new(), &mut out);
        out
    }
}

fn collect_paths(node: &FpNode, prefix: &mut String, out: &mut Vec<String>) {
    let len = prefix.len();
    match node {
        FpNode::Leaf => out.push(if prefix.is_empty() {
            "<root>".to_string()
        } else {
            prefix.clone()
        }),
        FpNode::Seq(children) | FpNode::Tup(children) => {
            for (i, child) in children.iter().enumerate() {
                prefix.push_str(&format!("[{i}]"));
                collect_paths(child, prefix, out);
                prefix.truncate(len);
            }
        }
        FpNode::Map(children) => {
            for (k, child) in children {
                prefix.push_str(&format!("[{k:?}]"));
                collect_paths(child, prefix, out);
                prefix.truncate(len);
            }
        }
        FpNode::Reg { tag, children, .. } => {
            let names = super::registered_child_names(tag);
            for (i, child) in children.iter().enumerate() {
                match names.as_ref().and_then(|n| n.get(i)) {
                    Some(name) => prefix.push_str(&format!(".{name}")),
                    None => prefix.push_str(&format!(".<{tag}>[{i}]")),
                }
                collect_paths(child, prefix, out);
                prefix.truncate(len);
            }
        }
    }
}

impl PartialEq for Fingerprint {
    fn eq(&self, other: &Self) -> bool {
        self.text == other.text
    }
}

impl Eq for Fingerprint {}

impl Hash for Fingerprint {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.text.hash(state);
    }
}

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

impl fmt::Debug for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Fingerprint({})", self.text)
    }
}

struct Parser<'a> {
    s: &'a str,
    pos: usize,
}

impl Parser<'_> {
    fn err(&self, detail: impl Into<String>) -> Error {
        Error::FingerprintParse {
            pos: self.pos,
            detail: detail.into(),
        }
    }

    fn rest(&self) -> &str {
        &self.s[self.pos..]
    }

    fn eat(&mut self, token: &str) -> bool {
        if self.rest().starts_with(token) {
            self.pos += token.len();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, token: &str) -> Result<()> {
        if self.eat(token) {
            Ok(())
        } else {
            Err(self.err(format!("expected `{token}`")))
        }
    }

    fn fp(&mut self) -> Result<FpNode> {
        if self.eat("*") {
            Ok(FpNode::Leaf)
        } else if self.eat("Seq[") {
            let c = self.list("]")?;
            Ok(FpNode::Seq(c))
        } else if self.eat("Tup(") {
            let c = self.list(")")?;
            Ok(FpNode::Tup(c))
        } else if self.eat("Map{") {
            let mut entries = Vec::new();
            if !self.eat("}") {
                loop {
                    let key = self.name()?;
                    self.expect(":")?;
                    entries.push((key, self.fp()?));
                    if self.eat("}") {
                        break;
                    }
                    self.expect(",")?;
                }
            }
            Ok(FpNode::Map(entries))
        } else if self.eat("Reg<") {
            let tag: Arc<str> = self.name()?.into();
            self.expect(";")?;
            let mut payload = Vec::new();
            if !self.eat(">") {
                loop {
                    let name: Arc<str> = self.name()?.into();
                    self.expect("=")?;
                    payload.push((name, self.static_leaf()?));
                    if self.eat(">") {
                        break;
                    }
                    self.expect(",")?;
                }
            }
            self.expect("(")?;
            let children = self.list(")")?;
            Ok(FpNode::Reg {
                tag,
                payload,
                children,
            })
        } else {
            Err(self.err("expected a structure"))
        }
    }

    fn list(&mut self, close: &str) -> Result<Vec<FpNode>> {
        let mut out = Vec::new();
        if self.eat(close) {
            return Ok(out);
        }
        loop {
            out.push(self.fp()?);
            if self.eat(close) {
                return Ok(out);
            }
            self.expect(",")?;
        }
    }

    fn name(&mut self) -> Result<String> {
        if self.rest().starts_with('"') {
            return self.quoted();
        }
        let len = self
            .rest()
            .find(|c: char| !is_bare(c))
            .unwrap_or(self.rest().len());
        if len == 0 {
            return Err(self.err("expected a name"));
        }
        let name = self.rest()[..len].to_string();
        self.pos += len;
        Ok(name)
    }

    fn quoted(&mut self) -> Result<String> {
        self.expect("\"")?;
        let mut out = String::new();
        let mut chars = self.rest().char_indices();
        while let Some((i, c)) = chars.next() {
            match c {
                '"' => {
                    self.pos += i + 1;
                    return Ok(out);
                }
                '\\' => {
                    let (_, e) = chars.next().ok_or_else(|| self.err("dangling escape"))?;
                    match e {
                        'n' => out.push('\n'),
                        't' => out.push('\t'),
                        'r' => out.push('\r'),
                        '0' => out.push('\0'),
                        '\\' | '"' | '\'' => out.push(e),
                        'u' => {
                            let rest: String = chars
                                .by_ref()
                                .map(|(_, c)| c)
                                .take_while(|&c| c != '}')
                                .collect();
                            let hex = rest
                                .strip_prefix('{')
                                .ok_or_else(|| self.err("bad unicode escape"))?;
                            let code = u32::from_str_radix(hex, 16)
                                .map_err(|_| self.err("bad unicode escape"))?;
                            out.push(
                                char::from_u32(code)
                                    .ok_or_else(|| self.err("bad unicode escape"))?,
                            );
                        }
                        _ => return Err(self.err("unknown escape")),
                    }
                }
                c => out.push(c),
            }
        }
        Err(self.err("unterminated string"))
    }

    fn token_until_delim(&mut self) -> &str {
        let len = self.rest().find([',', '>']).unwrap_or(self.rest().len());
        let tok = &self.s[self.pos..self.pos + len];
        self.pos += len;
        tok
    }

    fn static_leaf(&mut self) -> Result<Leaf> {
        if self.eat("sentinel") {
            return Ok(Leaf::Sentinel);
        }
        if self.eat("fn:") {
            let name = self.name()?;
            return lookup_function(&name).map(Leaf::Function);
        }
        let start = self.pos;
        let leaf = if self.eat("i:") {
            self.token_until_delim().parse().ok().map(Leaf::Int)
        } else if self.eat("f:") {
            self.token_until_delim().parse().ok().map(Leaf::Float)
        } else if self.eat("b:") {
            self.token_until_delim().parse().ok().map(Leaf::Bool)
        } else if self.eat("opaque:") {
            self.token_until_delim()
                .parse()
                .ok()
                .map(|t| Leaf::Opaque(Opaque::from_token(t)))
        } else {
            None
        };
        leaf.ok_or_else(|| {
            self.pos = start;
            self.err("invalid static value")
        })
    }
}
