//! Attribute names, attribute sets and threshold policy trees.
//!
//! Policies are written in a small text grammar:
//!
//! ```text
//! expr      := and_expr ( OR and_expr )*
//! and_expr  := primary ( AND primary )*
//! primary   := attribute | "(" expr ")" | THRESHOLD "(" k "," expr ( "," expr )* ")"
//! ```
//!
//! `AND` binds tighter than `OR`. An unparenthesized chain `a AND b AND c`
//! becomes one 3-of-3 node; parentheses always introduce a new node. Keywords
//! are case-insensitive and reserved. There is no wildcard and no empty
//! policy, so a policy always names at least one attribute.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

const KEYWORDS: [&str; 3] = ["and", "or", "threshold"];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PolicyError {
    #[error("syntax error at byte {position}: {message}")]
    Syntax { position: usize, message: String },
    #[error("threshold {k} out of range for {children} children")]
    ThresholdOutOfRange { k: usize, children: usize },
    #[error("invalid attribute name {0:?}")]
    InvalidAttribute(String),
    #[error("attribute set must not be empty")]
    EmptyAttributeSet,
}

/// A case-normalized attribute name such as `cardiology` or `hospitala`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Attribute(String);

impl Attribute {
    pub fn new(name: &str) -> Result<Self, PolicyError> {
        let normalized = name.trim().to_ascii_lowercase();
        let valid_chars = normalized
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.' | ':'));
        if normalized.is_empty() || !valid_chars || KEYWORDS.contains(&normalized.as_str()) {
            return Err(PolicyError::InvalidAttribute(name.to_string()));
        }
        Ok(Self(normalized))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl TryFrom<String> for Attribute {
    type Error = PolicyError;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        Attribute::new(&value)
    }
}

impl From<Attribute> for String {
    fn from(value: Attribute) -> Self {
        value.0
    }
}

/// Non-empty, duplicate-free set of attributes.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<Attribute>", into = "Vec<Attribute>")]
pub struct AttributeSet(BTreeSet<Attribute>);

impl AttributeSet {
    pub fn new<I>(attrs: I) -> Result<Self, PolicyError>
    where
        I: IntoIterator<Item = Attribute>,
    {
        let set: BTreeSet<Attribute> = attrs.into_iter().collect();
        if set.is_empty() {
            return Err(PolicyError::EmptyAttributeSet);
        }
        Ok(Self(set))
    }

    /// Parses and normalizes each name.
    pub fn from_names<I, S>(names: I) -> Result<Self, PolicyError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let attrs = names
            .into_iter()
            .map(|n| Attribute::new(n.as_ref()))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(attrs)
    }

    pub fn contains(&self, attr: &Attribute) -> bool {
        self.0.contains(attr)
    }

    pub fn contains_name(&self, name: &str) -> bool {
        Attribute::new(name).map(|a| self.0.contains(&a)).unwrap_or(false)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Attribute> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn union(&self, other: &AttributeSet) -> AttributeSet {
        AttributeSet(self.0.union(&other.0).cloned().collect())
    }

    pub fn names(&self) -> Vec<String> {
        self.0.iter().map(|a| a.0.clone()).collect()
    }
}

impl TryFrom<Vec<Attribute>> for AttributeSet {
    type Error = PolicyError;
    fn try_from(value: Vec<Attribute>) -> Result<Self, Self::Error> {
        AttributeSet::new(value)
    }
}

impl From<AttributeSet> for Vec<Attribute> {
    fn from(value: AttributeSet) -> Self {
        value.0.into_iter().collect()
    }
}

impl fmt::Display for AttributeSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{{}}}", self.names().join(", "))
    }
}

/// Threshold access tree. AND over n children is `Threshold { k: n }`, OR is
/// `Threshold { k: 1 }`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum PolicyTree {
    Leaf(Attribute),
    Threshold { k: usize, children: Vec<PolicyTree> },
}

impl PolicyTree {
    pub fn leaf(name: &str) -> Result<Self, PolicyError> {
        Ok(PolicyTree::Leaf(Attribute::new(name)?))
    }

    pub fn threshold(k: usize, children: Vec<PolicyTree>) -> Result<Self, PolicyError> {
        if k == 0 || k > children.len() {
            return Err(PolicyError::ThresholdOutOfRange {
                k,
                children: children.len(),
            });
        }
        Ok(PolicyTree::Threshold { k, children })
    }

    pub fn and(children: Vec<PolicyTree>) -> Result<Self, PolicyError> {
        let n = children.len();
        Self::threshold(n, children)
    }

    pub fn or(children: Vec<PolicyTree>) -> Result<Self, PolicyError> {
        Self::threshold(1, children)
    }

    pub fn parse(text: &str) -> Result<Self, PolicyError> {
        Parser::new(text).parse_policy()
    }

    /// Leaf attributes in depth-first, left-to-right order. Ciphertext leaf
    /// components are stored in this order.
    pub fn leaves(&self) -> Vec<&Attribute> {
        let mut out = Vec::new();
        self.collect_leaves(&mut out);
        out
    }

    fn collect_leaves<'a>(&'a self, out: &mut Vec<&'a Attribute>) {
        match self {
            PolicyTree::Leaf(a) => out.push(a),
            PolicyTree::Threshold { children, .. } => {
                children.iter().for_each(|c| c.collect_leaves(out))
            }
        }
    }

    pub fn leaf_count(&self) -> usize {
        match self {
            PolicyTree::Leaf(_) => 1,
            PolicyTree::Threshold { children, .. } => children.iter().map(Self::leaf_count).sum(),
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            PolicyTree::Leaf(_) => 1,
            PolicyTree::Threshold { children, .. } => {
                1 + children.iter().map(Self::depth).max().unwrap_or(0)
            }
        }
    }

    /// Pure evaluation of the threshold tree against an attribute set.
    pub fn satisfied_by(&self, attrs: &AttributeSet) -> bool {
        match self {
            PolicyTree::Leaf(a) => attrs.contains(a),
            PolicyTree::Threshold { k, children } => {
                children.iter().filter(|c| c.satisfied_by(attrs)).take(*k).count() == *k
            }
        }
    }

    /// Canonical byte form: the UTF-8 of the canonical text rendering.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_string().into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PolicyError> {
        let text = std::str::from_utf8(bytes).map_err(|e| PolicyError::Syntax {
            position: e.valid_up_to(),
            message: "policy bytes are not UTF-8".into(),
        })?;
        Self::parse(text)
    }

    fn fmt_node(&self, f: &mut fmt::Formatter<'_>, top: bool) -> fmt::Result {
        match self {
            PolicyTree::Leaf(a) => write!(f, "{a}"),
            PolicyTree::Threshold { k, children } if children.len() >= 2 && (*k == 1 || *k == children.len()) => {
                let op = if *k == 1 { " OR " } else { " AND " };
                if !top {
                    f.write_str("(")?;
                }
                for (i, child) in children.iter().enumerate() {
                    if i > 0 {
                        f.write_str(op)?;
                    }
                    child.fmt_node(f, false)?;
                }
                if !top {
                    f.write_str(")")?;
                }
                Ok(())
            }
            PolicyTree::Threshold { k, children } => {
                write!(f, "THRESHOLD({k}")?;
                for child in children {
                    f.write_str(", ")?;
                    child.fmt_node(f, false)?;
                }
                f.write_str(")")
            }
        }
    }
}

/// Free-function form of [`PolicyTree::satisfied_by`].
pub fn satisfies(policy: &PolicyTree, attrs: &AttributeSet) -> bool {
    policy.satisfied_by(attrs)
}

pub fn parse_policy(text: &str) -> Result<PolicyTree, PolicyError> {
    PolicyTree::parse(text)
}

impl fmt::Display for PolicyTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.fmt_node(f, true)
    }
}

impl FromStr for PolicyTree {
    type Err = PolicyError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}

impl Serialize for PolicyTree {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for PolicyTree {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        PolicyTree::parse(&text).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Token {
    Ident(String),
    Number(usize),
    And,
    Or,
    Threshold,
    LParen,
    RParen,
    Comma,
    End,
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
    peeked: Option<(usize, Token)>,
}

impl<'a> Parser<'a> {
    fn new(src: &'a str) -> Self {
        Self {
            src,
            pos: 0,
            peeked: None,
        }
    }

    fn parse_policy(mut self) -> Result<PolicyTree, PolicyError> {
        let (pos, tok) = self.peek()?;
        if tok == Token::End {
            return Err(self.error(pos, "empty policy"));
        }
        let tree = self.expr()?;
        let (pos, tok) = self.next()?;
        if tok != Token::End {
            return Err(self.error(pos, &format!("unexpected {tok:?} after expression")));
        }
        Ok(tree)
    }

    fn error(&self, position: usize, message: &str) -> PolicyError {
        PolicyError::Syntax {
            position,
            message: message.to_string(),
        }
    }

    fn lex(&mut self) -> Result<(usize, Token), PolicyError> {
        let bytes = self.src.as_bytes();
        while self.pos < bytes.len() && bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        let start = self.pos;
        let Some(&c) = bytes.get(self.pos) else {
            return Ok((start, Token::End));
        };
        let single = match c {
            b'(' => Some(Token::LParen),
            b')' => Some(Token::RParen),
            b',' => Some(Token::Comma),
            _ => None,
        };
        if let Some(tok) = single {
            self.pos += 1;
            return Ok((start, tok));
        }
        let is_word = |b: u8| b.is_ascii_alphanumeric() || matches!(b, b'_' | b'-' | b'.' | b':');
        if !is_word(c) {
            return Err(self.error(start, &format!("unexpected character {:?}", c as char)));
        }
        while self.pos < bytes.len() && is_word(bytes[self.pos]) {
            self.pos += 1;
        }
        let word = &self.src[start..self.pos];
        let tok = match word.to_ascii_lowercase().as_str() {
            "and" => Token::And,
            "or" => Token::Or,
            "threshold" => Token::Threshold,
            _ if word.bytes().all(|b| b.is_ascii_digit()) => Token::Number(
                word.parse()
                    .map_err(|_| self.error(start, "number too large"))?,
            ),
            _ => Token::Ident(word.to_string()),
        };
        Ok((start, tok))
    }

    fn peek(&mut self) -> Result<(usize, Token), PolicyError> {
        if self.peeked.is_none() {
            let t = self.lex()?;
            self.peeked = Some(t);
        }
        Ok(self.peeked.clone().expect("peeked token"))
    }

    fn next(&mut self) -> Result<(usize, Token), PolicyError> {
        match self.peeked.take() {
            Some(t) => Ok(t),
            None => self.lex(),
        }
    }

    fn expect(&mut self, want: Token) -> Result<usize, PolicyError> {
        let (pos, tok) = self.next()?;
        if tok != want {
            return Err(self.error(pos, &format!("expected {want:?}, found {tok:?}")));
        }
        Ok(pos)
    }

    fn expr(&mut self) -> Result<PolicyTree, PolicyError> {
        let mut terms = vec![self.and_expr()?];
        while self.peek()?.1 == Token::Or {
            self.next()?;
            terms.push(self.and_expr()?);
        }
        if terms.len() == 1 {
            Ok(terms.pop().expect("one term"))
        } else {
            PolicyTree::or(terms)
        }
    }

    fn and_expr(&mut self) -> Result<PolicyTree, PolicyError> {
        let mut terms = vec![self.primary()?];
        while self.peek()?.1 == Token::And {
            self.next()?;
            terms.push(self.primary()?);
        }
        if terms.len() == 1 {
            Ok(terms.pop().expect("one term"))
        } else {
            PolicyTree::and(terms)
        }
    }

    fn primary(&mut self) -> Result<PolicyTree, PolicyError> {
        let (pos, tok) = self.next()?;
        match tok {
            Token::Ident(name) => Attribute::new(&name)
                .map(PolicyTree::Leaf)
                .map_err(|_| self.error(pos, &format!("invalid attribute {name:?}"))),
            Token::LParen => {
                let inner = self.expr()?;
                self.expect(Token::RParen)?;
                Ok(inner)
            }
            Token::Threshold => {
                self.expect(Token::LParen)?;
                let (kpos, ktok) = self.next()?;
                let Token::Number(k) = ktok else {
                    return Err(self.error(kpos, "expected threshold count"));
                };
                let mut children = Vec::new();
                while self.peek()?.1 == Token::Comma {
                    self.next()?;
                    children.push(self.expr()?);
                }
                self.expect(Token::RParen)?;
                if children.is_empty() {
                    return Err(self.error(kpos, "THRESHOLD needs at least one child"));
                }
                PolicyTree::threshold(k, children)
            }
            Token::Number(n) => Err(self.error(pos, &format!("unexpected number {n}"))),
            Token::End => Err(self.error(pos, "unexpected end of policy")),
            other => Err(self.error(pos, &format!("unexpected {other:?}"))),
        }
    }
}
